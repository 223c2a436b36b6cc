import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normlab import task as tk


def test_vocab_has_17_tokens_and_round_trips():
    assert len(tk.VOCAB) == 17 == tk.VOCAB_SIZE
    text = "[453+16+17-N846=1332]*"
    assert tk.VOCAB.decode(tk.VOCAB.encode(text)) == text
    with pytest.raises(ValueError):
        tk.VOCAB.encode("12x")


def test_worked_example_evaluates_and_masks():
    assert tk.evaluate_question("453+16+17-N846") == 1332
    s = tk.from_parts([453, 16, 17, -846], ["+", "+", "-"])
    assert s.text_in == "[453+16+17-N846=1332"
    assert s.text_out == "***************1332]"
    assert s.answer_value == 1332
    assert s.loss_mask == [c != "*" for c in s.text_out]


def test_smallest_sum():
    s = tk.from_parts([0], [])
    assert (s.text_in, s.text_out) == ("[0=0", "**0]")


def test_negative_answers_use_the_n_marker():
    s = tk.from_parts([3, 5], ["-"])
    assert s.text_in == "[3-5=N2" and s.text_out == "****N2]"


def test_config_validation():
    with pytest.raises(ValueError):
        tk.TaskConfig((), (1,))
    with pytest.raises(ValueError):
        tk.TaskConfig((0,), (1,))
    with pytest.raises(ValueError):
        tk.preset("nope")
    assert tk.preset("baseline-train").N_choices == (3, 4, 6)
    assert tk.preset("baseline-ood-extrap").N_choices == (7, 8, 9)


@pytest.mark.parametrize("name", ["baseline-train", "desk-train", "large-ood-extrap"])
def test_ten_thousand_samples_are_arithmetically_exact(name):
    cfg = tk.preset(name, seed=11)
    n = 10_000 if name == "baseline-train" else 1000
    for s in tk.stream(cfg, 0, n):
        answer = tk.evaluate_question(s.text_in)
        assert answer == s.answer_value
        assert s.text_in.startswith("[") and s.text_out.endswith("]")
        assert s.text_out.rstrip("]").lstrip("*") == tk.render_int(answer)
        # Targets are inputs shifted by one wherever they are not masked.
        full = tk.VOCAB.encode(s.text_in + "]")
        assert all(t == full[i + 1] for i, (t, m) in enumerate(zip(s.target_ids, s.loss_mask)) if m)
        assert len(s) <= tk.max_length(cfg)


def test_probability_normalises_on_enumerable_config():
    cfg = tk.TaskConfig((1,), (1,))
    samples = list(tk.enumerate_samples(cfg))
    assert len({s.text_in for s in samples}) == 19  # 0..9 and N1..N9
    exact = sum(tk.datapoint_probability_exact(cfg, s) for s in samples)
    assert exact == 1
    assert abs(math.fsum(tk.datapoint_probability(cfg, s) for s in samples) - 1.0) <= 1e-12


def test_probability_normalises_with_operators():
    cfg = tk.TaskConfig((1, 2), (1,))
    samples = {s.text_in: s for s in tk.enumerate_samples(cfg)}.values()
    assert sum(tk.datapoint_probability_exact(cfg, s) for s in samples) == 1


def test_probability_values_and_impossible_samples():
    cfg = tk.TaskConfig((1,), (1,))
    assert tk.datapoint_probability_exact(cfg, tk.from_parts([7], [])) == Fraction(1, 20)
    assert tk.datapoint_probability_exact(cfg, tk.from_parts([0], [])) == Fraction(1, 10)
    assert tk.datapoint_probability(tk.TaskConfig((3,), (1,)), tk.from_parts([1, 2, 3, 4], "+++")) == 0.0
    base = tk.preset("baseline-train")
    simplest = tk.from_parts([10, 10, 10], "++")
    p = tk.datapoint_probability(base, simplest)
    # 1/3 * (1/2 * 1/90 * 1/2)^3 * (1/2)^2
    assert p == pytest.approx((1 / 3) * (1 / 360) ** 3 / 4, rel=1e-12)
    assert 1e-10 < p < 1e-8


def test_monte_carlo_frequency_matches_probability():
    cfg = tk.TaskConfig((1,), (1,), seed=5)
    rng = np.random.default_rng(0)
    n = 20_000
    hits = sum(tk.sample(cfg, rng).text_in == "[N3=N3" for _ in range(n))
    p = tk.datapoint_probability(cfg, tk.from_parts([-3], []))
    assert abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_determinism_byte_exact():
    cfg = tk.preset("desk-train", seed=123)

    def dump():
        fh = io.StringIO()
        tk.write_jsonl(tk.stream(cfg, 0, 500), fh)
        return fh.getvalue().encode()

    assert dump() == dump()
    assert tk.sample(cfg, 42).input_ids == tk.sample(cfg, 42).input_ids
    other = tk.preset("desk-train", seed=124)
    assert [tk.sample(other, i).text_in for i in range(20)] != [tk.sample(cfg, i).text_in for i in range(20)]
    rec = json.loads(dump().decode().splitlines()[0])
    assert set(rec) == {"text_in", "text_out", "answer"}


def test_make_batch_padding():
    a = tk.from_parts([1, 2], "+")  # length 6
    b = tk.from_parts([12, -34, 5], "--")
    batch = tk.make_batch([a, b])
    assert batch.shape == (2, len(b))
    assert not batch.loss_mask[0, len(a):].any() and not batch.valid[0, len(a):].any()
    assert (batch.input_ids[0, len(a):] == tk.MASK).all()
    single = tk.make_batch([a], pad_to=len(a))
    assert single.input_ids[0].tolist() == a.input_ids
    with pytest.raises(ValueError):
        tk.make_batch([b], pad_to=3)
    with pytest.raises(ValueError):
        tk.make_batch([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-999, 999), min_size=1, max_size=6), st.data())
def test_from_parts_round_trips_through_parsing(values, data):
    ops = data.draw(st.lists(st.sampled_from("+-"), min_size=len(values) - 1, max_size=len(values) - 1))
    s = tk.from_parts(values, ops)
    assert tk.evaluate_question(s.text_in) == s.answer_value
    assert tk._parse_parts(s.text_in) == (values, ops)
