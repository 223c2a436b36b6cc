import math

import numpy as np
import pytest

from normlab import model as M
from normlab import task as tk
from normlab import tensor as tn
from normlab import trainer as tr

TINY = M.ModelConfig(N_freq=2, N_emb=16, N_layer=1, H=2, N_qkv=4, N_ff=16, mlp_layers=(16,), strategy="pre-norm")
TASK = tk.TaskConfig((2,), (1,), seed=3)


def tiny_state(config=TINY):
    return tr.prepare(config, TASK, tr.TrainConfig(batch_size=16))


def test_train_config_validation():
    for bad in (dict(lr=0.0), dict(decay_factor=1.0), dict(decay_factor=0.0), dict(decay_patience=0)):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_adamw_matches_scalar_reference():
    p = tn.Tensor(np.array([0.7]), requires_grad=True)
    opt = tr.AdamW([p], lr=0.05, weight_decay=0.01)
    ref, m, v = 0.7, 0.0, 0.0
    b1, b2, eps, lr, wd = 0.9, 0.999, 1e-7, 0.05, 0.01
    for t in range(1, 21):
        g = 2.0 * (ref - 3.0)  # gradient of (p - 3)^2
        p.grad = np.array([2.0 * (p.data[0] - 3.0)])
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * wd * ref
        ref = ref - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p.data[0] - ref) <= 1e-12


def test_zero_learning_rate_leaves_parameters_unchanged():
    p = tn.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = tr.AdamW([p], lr=0.0)
    p.grad = np.array([0.3, 0.4])
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_plateau_decay_halves_at_epoch_four():
    sched = tr.PlateauDecay(1e-3, 0.5, 3)
    lrs = [sched.step(loss) for loss in (1.0, 1.0, 1.2, 1.1, 1.3)]
    assert lrs == [1e-3, 1e-3, 1e-3, 5e-4, 5e-4]
    sched = tr.PlateauDecay(1.0, 0.5, 3)
    assert [sched.step(x) for x in (3, 2, 1, 0.5)] == [1.0] * 4  # strictly improving


def test_evaluate_perfect_and_random_predictions():
    st = tiny_state()
    ds = tk.preset("desk-train", seed=9)
    perfect = tr.evaluate(st, ds, 64, predict=lambda s, b: b.target_ids)
    assert perfect.accuracy == 1.0 and perfect.stderr == 0.0
    rng = np.random.default_rng(0)
    rand = tr.evaluate(st, ds, 512, predict=lambda s, b: rng.integers(0, 17, size=b.shape))
    p = 1 / 17
    assert abs(rand.accuracy - p) <= 3 * math.sqrt(p * (1 - p) / rand.total)
    assert rand.stderr == pytest.approx(math.sqrt(rand.accuracy * (1 - rand.accuracy) / rand.total))
    with pytest.raises(ValueError):
        tr.evaluate(st, ds, 0)


def test_accuracy_ignores_padding():
    a, b = tk.from_parts([1, 2], "+"), tk.from_parts([13, -45, 6], "-+")
    loose = tk.make_batch([a, b], pad_to=30)
    pred = np.where(loose.loss_mask, loose.target_ids, 0)
    assert tr.token_accuracy(pred, loose) == (int(loose.loss_mask.sum()),) * 2


def test_loss_unchanged_by_extra_padding_column():
    st = tiny_state()
    samples = [tk.sample(TASK, i) for i in range(6)]
    tight, wide = tk.make_batch(samples), tk.make_batch(samples, pad_to=max(map(len, samples)) + 1)
    l1 = tr.loss_on(st, tight)[0]
    l2 = tr.loss_on(st, wide)[0]
    assert abs(l1 - l2) <= 1e-12


def test_single_batch_overfit():
    st = tiny_state(TINY.replace(N_emb=32, N_ff=64, mlp_layers=(64,), N_layer=2))
    batch = tk.batch_at(TASK, 0, 8)
    history = tr.overfit(st, batch, steps=500, lr=3e-3)
    assert history[-1] < 0.01 and len(history) <= 500


def test_training_is_deterministic_and_reduces_loss():
    cfg = tr.TrainConfig(lr=3e-3, batches_per_epoch=5, batch_size=16, epochs=3, eval_points=32)

    def run():
        st = tr.prepare(TINY, TASK, cfg)
        _, recs = tr.train(st, TASK, cfg)
        return st, [(r.epoch, r.train_loss, r.per_token_accuracy, r.current_lr) for r in recs]

    (s1, a), (s2, b) = run(), run()
    assert a == b
    assert all(s1.params[k].data.tobytes() == s2.params[k].data.tobytes() for k in s1.params)
    assert a[-1][1] < a[0][1]
    assert s1.rng_state is not None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_refuses_uncalibrated_and_aborts_on_non_finite():
    cfg = tr.TrainConfig(batches_per_epoch=2, batch_size=4, epochs=1)
    with pytest.raises(M.CalibrationError):
        list(tr.train_iter(M.init(TINY), TASK, cfg))
    st = tiny_state()
    st.params["head/W0"].data[0, 0] = np.inf
    with pytest.raises(tr.TrainingDivergedError, match="epoch 1"):
        tr.train(st, TASK, cfg)


def test_wall_clock_budget_stops_early():
    st = tiny_state()
    cfg = tr.TrainConfig(batches_per_epoch=1000, batch_size=4, epochs=5, wall_clock=0.0, eval_points=8)
    _, recs = tr.train(st, TASK, cfg)
    assert len(recs) == 1
