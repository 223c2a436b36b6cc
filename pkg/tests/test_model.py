import math
import struct

import numpy as np
import pytest

from normlab import attention as att
from normlab import checkpoint as ck
from normlab import model as M
from normlab import tensor as tn
from normlab import task as tk

TINY = dict(N_freq=2, N_emb=8, N_layer=2, H=2, N_qkv=3, N_ff=6, mlp_layers=(5,))


def tiny_state(strategy="pre-norm", seed=3, **kw):
    cfg = M.ModelConfig(**{**TINY, **kw}, strategy=strategy, seed=seed)
    batch = tk.batch_at(tk.preset("desk-train"), 0, 8)
    return M.calibrate(M.init(cfg), batch), batch


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        M.ModelConfig(N_freq=5, N_emb=8)
    with pytest.raises(ValueError):
        M.ModelConfig(H=0)
    with pytest.raises(ValueError):
        M.ModelConfig(strategy="post-norm")
    d = M.model_preset("desk")
    assert (d.N_layer, d.N_emb, d.H, d.N_qkv, d.N_freq) == (4, 128, 4, 32, 16)
    b = M.model_preset("baseline")
    assert (b.N_freq, b.N_emb, b.N_layer, b.H, b.N_qkv, b.N_ff, b.mlp_layers, b.seed) == (
        32, 512, 10, 12, 64, 512, (512, 512), 100)
    assert M.model_preset("alternate").N_layer == 8
    with pytest.raises(ValueError):
        M.model_preset("huge")


def test_qk_init_limit_formula():
    sigma_qk = (0.1 / 64**3) ** 0.25
    assert sigma_qk == pytest.approx(0.0248522102739703, abs=1e-15)  # mpmath, 30 digits
    assert M.qk_limit(0.1, 64) == pytest.approx(math.sqrt(3) * sigma_qk, rel=1e-15)
    assert M.qk_limit(0.1, 64) == pytest.approx(0.0430452908749019, abs=1e-15)


def test_init_is_deterministic_and_has_the_stated_moments():
    cfg = M.ModelConfig(N_freq=4, N_emb=64, N_layer=1, H=4, N_qkv=64, N_ff=16, mlp_layers=(16,))
    a, b = M.init(cfg), M.init(cfg)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    Wv = a.params["L0/attn/Wv"].data
    assert abs(Wv.std() / math.sqrt(1 / 64) - 1) < 0.05
    Wq = a.params["L0/attn/Wq"].data
    assert np.abs(Wq).max() <= M.qk_limit(0.1, 64)
    Wo = a.params["L0/attn/Wo"].data
    assert np.abs(Wo).max() <= math.sqrt(3 / (4 * 64))
    assert np.all(a.params["L0/attn/g_x"].data == 1.0)
    assert np.all(a.params["L0/ff/b1"].data == 0.0)
    assert M.init(cfg.replace(seed=1)).params["L0/attn/Wq"].data.tobytes() != Wq.tobytes()


def test_positional_encoding_norm_is_constant():
    cfg = M.model_preset("desk")
    st = M.init(cfg)
    freq = st.params["embed/freq"].data
    periods = 2 * np.pi / freq
    assert periods[0] == pytest.approx(3.0) and periods[-1] == pytest.approx(1000.0)
    p = np.arange(0, 500, dtype=float)[:, None]
    enc = np.concatenate([np.sin(p * freq), np.cos(p * freq)], axis=1)
    norms = np.linalg.norm(enc, axis=1)
    assert np.abs(norms - math.sqrt(cfg.N_freq)).max() <= 1e-10


def test_forward_requires_calibration():
    cfg = M.ModelConfig(**TINY)
    batch = tk.batch_at(tk.preset("desk-train"), 0, 4)
    with pytest.raises(M.CalibrationError):
        M.forward(M.init(cfg), batch)


@pytest.mark.parametrize("strategy", att.STRATEGIES)
def test_calibration_hits_targets_and_is_a_fixed_point(strategy):
    st, batch = tiny_state(strategy)
    measured = M.measure_checkpoint_std(st, batch)
    for name, c in st.checkpoints.items():
        assert measured[name] == pytest.approx(c.target_sigma, abs=1e-6), name
    again = M.calibrate(st, batch, recalibrate=True)
    assert all(abs(f - 1.0) <= 1e-6 for f in again.calibration_factors.values())
    with pytest.raises(M.CalibrationError):
        M.calibrate(st, batch)


def test_checkpoint_layer_scale():
    layer = M.CheckpointLayer(1.0)
    with pytest.raises(M.CalibrationError):
        layer(np.ones(2))
    # Activation std 2 with target 1 gives scale 0.5.
    x = np.array([-2.0, 2.0])
    layer.calibrated_scale = layer.target_sigma / x.std()
    assert layer.calibrated_scale == 0.5 and np.std(layer(x)) == 1.0


def test_causality_and_offsets():
    st, batch = tiny_state()
    base = M.logits(st, batch)
    assert base.shape == batch.shape + (tk.VOCAB_SIZE,)
    j = 5
    changed = batch.input_ids.copy()
    changed[:, j] = (changed[:, j] + 3) % tk.VOCAB_SIZE
    other = M.logits(st, changed)
    assert np.array_equal(other[:, :j], base[:, :j])
    assert not np.array_equal(other[:, j:], base[:, j:])
    out = M.logits(st, batch, offsets=np.full(batch.shape[0], 37))
    assert out.shape == base.shape and not np.array_equal(out, base)
    rng = np.random.default_rng(0)
    assert M.logits(st, batch, offset_rng=rng).shape == base.shape


@pytest.mark.parametrize("strategy", att.STRATEGIES)
def test_single_layer_model_matches_hand_composed_pipeline(strategy):
    st, batch = tiny_state(strategy, N_layer=1, H=1)
    logits, trace = M.forward(st, batch, probes=("inputs",))
    x0 = trace.layers[0]["inputs"]
    head = st.head_weights(0, 0)
    B, T, _ = x0.shape
    x1 = np.empty_like(x0)
    for b in range(B):
        for t in range(T):
            x1[b, t] = att.attention_update(x0[b, t], x0[b, : t + 1], [head]).data
    x1 = tn.Tensor(x1)
    x2 = x1 + M.feed_forward(st, 0, x1)
    expected = M.output_head(st, x2).data
    assert np.abs(expected - logits.data).max() <= 1e-12


def test_capture_probes_and_replay():
    st, batch = tiny_state("qkv-norm")
    logits, trace = M.forward(st, batch, probes=M.PROBES)
    for rec in trace.layers:
        a = rec["attention"]
        assert a.shape == (8, 2, batch.shape[1], batch.shape[1])
        assert np.allclose(a.sum(-1), 1.0, atol=1e-14)
        assert np.all(a[..., np.triu_indices(a.shape[-1], 1)[0], np.triu_indices(a.shape[-1], 1)[1]] == 0.0)
        assert np.allclose(rec["embedding-norms"], np.linalg.norm(rec["inputs"], axis=-1))
    assert np.abs(M.replay_logits(st, trace) - logits.data).max() <= 1e-12
    with pytest.raises(ValueError):
        M.forward(st, batch, probes=("bogus",))


def test_head_weights_reproduce_model_scores():
    for strategy in att.STRATEGIES:
        st, batch = tiny_state(strategy)
        _, trace = M.forward(st, batch, probes=("inputs", "scores"))
        x = trace.layers[1]["inputs"][2]
        h = st.head_weights(1, 1)
        w = att.scores(x[4], x[:5], h).data
        assert np.allclose(w, trace.layers[1]["scores"][2, 1, 4, :5], atol=1e-12)


@pytest.mark.parametrize("strategy", att.STRATEGIES)
def test_full_model_gradient_matches_finite_differences(strategy):
    st, batch = tiny_state(strategy, N_layer=1)
    small = tk.make_batch(batch.samples[:2])
    names = [k for k in st.params if k.endswith(("Wq", "Wk", "g_x", "g_q", "freq", "W1", "head/W1"))]
    params = [st.params[k] for k in names]

    def loss():
        out, _ = M.forward(st, small)
        return tn.cross_entropy(out, small.target_ids, small.loss_mask)

    assert tn.parameters_grad_check(loss, params, step=1e-6) <= 1e-4


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    st, batch = tiny_state("pre-norm")
    st.rng_state = np.random.default_rng(4).bit_generator.state
    path = ck.save(st, tmp_path / "m.nckt", extra={"note": "x"})
    back, extra = ck.load_with_extra(path)
    assert extra == {"note": "x"}
    assert back.config == st.config and back.scales() == st.scales() and back.rng_state == st.rng_state
    for k in st.params:
        assert back.params[k].data.tobytes() == st.params[k].data.tobytes()
    assert np.array_equal(M.logits(back, batch), M.logits(st, batch))
    assert path.read_bytes()[:5] == b"NCKT1"


def test_checkpoint_corruption_is_detected(tmp_path):
    st, _ = tiny_state()
    blob = ck.dumps(st)
    with pytest.raises(ck.CheckpointError):
        ck.loads(blob[: len(blob) // 2])
    with pytest.raises(ck.CheckpointError):
        ck.loads(b"XXXXX" + blob[5:])
    bad_version = blob[:5] + struct.pack("<H", 9) + blob[7:]
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.loads(bad_version)
    flipped = bytearray(blob)
    flipped[-20] ^= 0xFF
    with pytest.raises(ck.CheckpointError):
        ck.loads(bytes(flipped))
