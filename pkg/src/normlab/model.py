"""Decoder-only transformer for the addition task.

Layout, in forward order::

    x = ckpt_x(ckpt_type(E[token]) + pos(offset + index))
    repeat N_layer:
        x = x + attention(x)          # strategy: no-norm / pre-norm / qkv-norm
        x = x + FF(LayerNorm(x))      # ReLU, with biases
    logits = MLP(LayerNorm(x))        # ReLU hidden layers, linear to 17

Checkpoint layers are scalar scales fixed by :func:`calibrate` on the first
training batch; before that, :func:`forward` refuses to run. Attention layers
carry checkpoints on their Q/K/V inputs, the scores and the update.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .attention import HeadWeights, NormStrategy, STRATEGIES
from .task import BEG, VOCAB_SIZE, Batch
from .tensor import Tensor

SIGMA_TYPE = 0.5
SIGMA_X = 1.0
SIGMA_W = 0.1
SIGMA_DX = 0.05
MAX_OFFSET = 50

PROBES = ("attention", "embedding-norms", "inputs", "qk", "scores", "messages")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N_freq: int = 32
    N_emb: int = 512
    N_layer: int = 10
    H: int = 12
    N_qkv: int = 64
    N_ff: int = 512
    mlp_layers: tuple[int, ...] = (512, 512)
    strategy: str = "pre-norm"
    norm: str = "layer"
    seed: int = 100

    def __post_init__(self):
        object.__setattr__(self, "mlp_layers", tuple(int(n) for n in self.mlp_layers))
        sizes = (self.N_freq, self.N_emb, self.N_layer, self.H, self.N_qkv, self.N_ff, *self.mlp_layers)
        if min(sizes) < 1:
            raise ValueError("all sizes must be >= 1")
        if 2 * self.N_freq > self.N_emb:
            raise ValueError("positional encoding needs 2*N_freq <= N_emb")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)


MODEL_PRESETS: dict[str, ModelConfig] = {
    "baseline": ModelConfig(),
    "alternate": ModelConfig(N_layer=8),
    "large": ModelConfig(N_emb=1024, N_layer=12, H=16),
    "desk": ModelConfig(N_freq=16, N_emb=128, N_layer=4, H=4, N_qkv=32, N_ff=256, mlp_layers=(128, 128)),
}


def model_preset(name: str, **changes) -> ModelConfig:
    try:
        cfg = MODEL_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}") from None
    return cfg.replace(**changes) if changes else cfg


@dataclass
class CheckpointLayer:
    """Fixed rescaling whose factor is measured once from data."""

    target_sigma: float
    calibrated_scale: float | None = None
    relative: bool = False  # target is relative to the residual stream's std

    def __call__(self, x):
        if self.calibrated_scale is None:
            raise CalibrationError("checkpoint layer used before calibration")
        return x * self.calibrated_scale


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    checkpoints: dict[str, CheckpointLayer]
    rng_state: dict | None = None
    calibration_factors: dict[str, float] = field(default_factory=dict)

    @property
    def calibrated(self) -> bool:
        return all(c.calibrated_scale is not None for c in self.checkpoints.values())

    def scales(self) -> dict[str, float | None]:
        return {k: c.calibrated_scale for k, c in self.checkpoints.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def head_weights(self, layer: int, head: int) -> HeadWeights:
        """Per-head matrices in column convention, for single-receiver analysis.

        Checkpoint scales are folded in: the returned head reproduces the
        model's scores and messages on unnormalised layer inputs.
        """
        cfg = self.config
        d = cfg.N_qkv
        p = self.params
        sl = slice(head * d, (head + 1) * d)
        c = {k: self.checkpoints[f"L{layer}/{k}"].calibrated_scale for k in ("q_in", "k_in", "v_in", "w", "dx")}
        if any(v is None for v in c.values()):
            raise CalibrationError("model is not calibrated")
        pre = f"L{layer}/attn/"
        Wq = p[pre + "Wq"].data[:, sl].T * c["q_in"]
        Wk = p[pre + "Wk"].data[:, sl].T * c["k_in"]
        Wv = p[pre + "Wv"].data[:, sl].T * c["v_in"]
        Wo = p[pre + "Wo"].data[sl, :].T * c["dx"]
        gains = {}
        if cfg.strategy == "pre-norm":
            gains = {"x": p[pre + "g_x"].data, "y_k": p[pre + "g_yk"].data, "y_v": p[pre + "g_yv"].data}
        elif cfg.strategy == "qkv-norm":
            gains = {"q": p[pre + "g_q"].data[head], "k": p[pre + "g_k"].data[head], "v": p[pre + "g_v"].data[head]}
        # The score checkpoint scales q.k; fold it into the query side.
        if cfg.strategy == "qkv-norm":
            gains["q"] = gains["q"] * c["w"]
        else:
            Wq = Wq * c["w"]
        return HeadWeights(Wq, Wk, Wv, Wo, NormStrategy(cfg.strategy, cfg.norm, gains))


def _uniform(rng: np.random.Generator, limit: float, shape) -> Tensor:
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return _uniform(rng, math.sqrt(6.0 / (fan_in + fan_out)), (fan_in, fan_out))


def qk_limit(sigma_w: float, n_qkv: int) -> float:
    """Uniform half-width for W_Q and W_K: sqrt(3) * (sigma_w / N_qkv^3)^(1/4)."""
    return math.sqrt(3.0) * (sigma_w / n_qkv**3) ** 0.25


def initial_frequencies(n_freq: int) -> np.ndarray:
    """Angular frequencies whose periods form a log series from 3 to 1000 tokens."""
    periods = np.exp(np.linspace(math.log(3.0), math.log(1000.0), n_freq))
    return 2.0 * math.pi / periods


def init(config: ModelConfig) -> ModelState:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    E, H, d = config.N_emb, config.H, config.N_qkv
    p: dict[str, Tensor] = {}
    ck: dict[str, CheckpointLayer] = {
        "type": CheckpointLayer(SIGMA_TYPE),
        "x": CheckpointLayer(SIGMA_X),
    }
    p["embed/type"] = _uniform(rng, 0.05, (VOCAB_SIZE, E))
    p["embed/freq"] = Tensor(initial_frequencies(config.N_freq), requires_grad=True)
    for l in range(config.N_layer):
        pre = f"L{l}/attn/"
        lim = qk_limit(SIGMA_W, d)
        p[pre + "Wq"] = _uniform(rng, lim, (E, H * d))
        p[pre + "Wk"] = _uniform(rng, lim, (E, H * d))
        p[pre + "Wv"] = _uniform(rng, math.sqrt(3.0 / d), (E, H * d))
        p[pre + "Wo"] = _uniform(rng, math.sqrt(3.0 / (H * d)), (H * d, E))
        if config.strategy == "pre-norm":
            for g in ("g_x", "g_yk", "g_yv"):
                p[pre + g] = Tensor(np.ones(E), requires_grad=True)
        elif config.strategy == "qkv-norm":
            for g in ("g_q", "g_k", "g_v"):
                p[pre + g] = Tensor(np.ones((H, d)), requires_grad=True)
        ff = f"L{l}/ff/"
        p[ff + "ln_g"] = Tensor(np.ones(E), requires_grad=True)
        p[ff + "ln_b"] = Tensor(np.zeros(E), requires_grad=True)
        p[ff + "W1"] = _glorot(rng, E, config.N_ff)
        p[ff + "b1"] = Tensor(np.zeros(config.N_ff), requires_grad=True)
        p[ff + "W2"] = _glorot(rng, config.N_ff, E)
        p[ff + "b2"] = Tensor(np.zeros(E), requires_grad=True)
        for name, sigma in (("q_in", SIGMA_X), ("k_in", SIGMA_X), ("v_in", SIGMA_X), ("w", SIGMA_W)):
            ck[f"L{l}/{name}"] = CheckpointLayer(sigma)
        ck[f"L{l}/dx"] = CheckpointLayer(SIGMA_DX, relative=True)
    p["head/ln_g"] = Tensor(np.ones(E), requires_grad=True)
    p["head/ln_b"] = Tensor(np.zeros(E), requires_grad=True)
    widths = (E, *config.mlp_layers, VOCAB_SIZE)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"head/W{i}"] = _glorot(rng, a, b)
        p[f"head/b{i}"] = Tensor(np.zeros(b), requires_grad=True)
    return ModelState(config, p, ck)


@dataclass
class LayerPerturbation:
    """Multiplicative factors applied inside one attention layer.

    ``score_factor`` multiplies the scores before the softmax; scaling q and
    k by (1+u) is the same as scaling ``w_ts`` by (1+u_q,t)(1+u_k,s).
    ``attn_factor`` multiplies the attention weights after the softmax;
    scaling message ``m_s`` by (1+u) is the same as scaling ``a_ts`` by it.
    Both have shape (B, H, T, T) or broadcast to it.
    """

    score_factor: np.ndarray | None = None
    attn_factor: np.ndarray | None = None


@dataclass
class ActivationTrace:
    probes: tuple[str, ...]
    valid: np.ndarray
    layers: list[dict[str, np.ndarray]] = field(default_factory=list)
    final: np.ndarray | None = None  # residual stream after the last block

    def stack(self, key: str) -> list[np.ndarray]:
        return [layer[key] for layer in self.layers]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


class _Calibrator:
    """Sets each checkpoint in forward order from the activations it sees."""

    def __init__(self, valid: np.ndarray, names: Sequence[str]):
        self.valid = valid
        self.names = set(names)
        self.factors: dict[str, float] = {}

    def apply(self, state: ModelState, name: str, x: Tensor, entries: np.ndarray, reference: Tensor | None = None):
        ck = state.checkpoints[name]
        if name in self.names:
            if ck.calibrated_scale is not None:
                x = x * ck.calibrated_scale
            values = x.data[entries]
            std = float(np.std(values))
            if std == 0.0:
                raise CalibrationError(f"zero-variance activation at checkpoint {name!r}")
            target = ck.target_sigma
            if ck.relative:
                target *= float(np.std(reference.data[self.valid]))
            factor = target / std
            previous = ck.calibrated_scale if ck.calibrated_scale is not None else 1.0
            self.factors[name] = factor
            ck.calibrated_scale = previous * factor
            return x * factor
        return ck(x)


def _ckpt(state, cal, name, x, entries, reference=None):
    if cal is None:
        return state.checkpoints[name](x)
    return cal.apply(state, name, x, entries, reference)


def embed(state: ModelState, ids: np.ndarray, offsets: np.ndarray, cal=None, valid=None) -> Tensor:
    cfg = state.config
    p = state.params
    B, T = ids.shape
    xt = tn.embedding(p["embed/type"], ids)
    xt = _ckpt(state, cal, "type", xt, valid)
    pos = (offsets[:, None] + np.arange(T)[None, :]).astype(np.float64)[..., None]
    phase = p["embed/freq"] * pos
    parts = [tn.sin(phase), tn.cos(phase)]
    rest = cfg.N_emb - 2 * cfg.N_freq
    if rest:
        parts.append(Tensor._wrap(np.zeros((B, T, rest))))
    x = xt + tn.concat(parts, axis=-1)
    return _ckpt(state, cal, "x", x, valid)


def _split_heads(z: Tensor, H: int) -> Tensor:
    B, T, _ = z.shape
    return z.reshape(B, T, H, -1).transpose(0, 2, 1, 3)


def attention_qkv(state: ModelState, layer: int, x: Tensor, cal=None, valid=None) -> tuple[Tensor, Tensor, Tensor]:
    """Query, key and value tensors (B, H, T, N_qkv) of one attention layer."""
    cfg = state.config
    p = state.params
    pre = f"L{layer}/attn/"
    H = cfg.H
    if cfg.strategy == "pre-norm":
        xq = tn.normalize(x, p[pre + "g_x"], cfg.norm)
        xk = tn.normalize(x, p[pre + "g_yk"], cfg.norm)
        xv = tn.normalize(x, p[pre + "g_yv"], cfg.norm)
    else:
        xq = xk = xv = x
    xq = _ckpt(state, cal, f"L{layer}/q_in", xq, valid)
    xk = _ckpt(state, cal, f"L{layer}/k_in", xk, valid)
    xv = _ckpt(state, cal, f"L{layer}/v_in", xv, valid)
    q = _split_heads(tn.matmul(xq, p[pre + "Wq"]), H)
    k = _split_heads(tn.matmul(xk, p[pre + "Wk"]), H)
    v = _split_heads(tn.matmul(xv, p[pre + "Wv"]), H)
    if cfg.strategy == "qkv-norm":
        d = cfg.N_qkv
        q = tn.normalize(q, p[pre + "g_q"].reshape(H, 1, d), cfg.norm)
        k = tn.normalize(k, p[pre + "g_k"].reshape(H, 1, d), cfg.norm)
        v = tn.normalize(v, p[pre + "g_v"].reshape(H, 1, d), cfg.norm)
    return q, k, v


def layer_scores(state: ModelState, layer: int, x, cal=None, valid=None) -> Tensor:
    """Checkpoint-scaled scores (B, H, T, T) of one layer for inputs ``x``."""
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
    q, k, _ = attention_qkv(state, layer, x, cal, valid)
    return _scores_from_qk(state, layer, q, k, cal, valid)


def _scores_from_qk(state, layer, q, k, cal=None, valid=None):
    w = tn.matmul(q, k.swapaxes(-1, -2))
    entries = None
    if cal is not None:
        T = w.shape[-1]
        entries = np.broadcast_to((valid[:, None, :, None] & causal_mask(T)[None, None]), w.shape)
    return _ckpt(state, cal, f"L{layer}/w", w, entries)


def _attention_block(state, layer, x, mask, perturb, record, probes, cal=None, valid=None):
    cfg = state.config
    p = state.params
    pre = f"L{layer}/attn/"
    q, k, v = attention_qkv(state, layer, x, cal, valid)
    w = _scores_from_qk(state, layer, q, k, cal, valid)
    if perturb is not None and perturb.score_factor is not None:
        w = w * perturb.score_factor
    a = tn.softmax(w, axis=-1, mask=mask)
    if perturb is not None and perturb.attn_factor is not None:
        a = a * perturb.attn_factor
    o = tn.matmul(a, v)
    B, H, T, d = o.shape
    o = o.transpose(0, 2, 1, 3).reshape(B, T, H * d)
    dx = tn.matmul(o, p[pre + "Wo"])
    dx = _ckpt(state, cal, f"L{layer}/dx", dx, valid, reference=x)
    if record is not None:
        if "attention" in probes:
            record["attention"] = a.data
        if "scores" in probes:
            record["scores"] = w.data
        if "qk" in probes:
            record["q"] = q.data
            record["k"] = k.data
        if "messages" in probes:
            scale = state.checkpoints[f"L{layer}/dx"].calibrated_scale
            Wo = p[pre + "Wo"].data.reshape(H, d, cfg.N_emb)
            record["messages"] = np.matmul(v.data, Wo) * scale
    return dx


def feed_forward(state: ModelState, layer: int, x: Tensor) -> Tensor:
    p = state.params
    ff = f"L{layer}/ff/"
    h = tn.normalize(x, p[ff + "ln_g"], "layer") + p[ff + "ln_b"]
    h = tn.relu(tn.matmul(h, p[ff + "W1"]) + p[ff + "b1"])
    return tn.matmul(h, p[ff + "W2"]) + p[ff + "b2"]


def output_head(state: ModelState, x: Tensor) -> Tensor:
    p = state.params
    h = tn.normalize(x, p["head/ln_g"], "layer") + p["head/ln_b"]
    n = len(state.config.mlp_layers)
    for i in range(n):
        h = tn.relu(tn.matmul(h, p[f"head/W{i}"]) + p[f"head/b{i}"])
    return tn.matmul(h, p[f"head/W{n}"]) + p[f"head/b{n}"]


def sample_offsets(batch_size: int, offset_rng: np.random.Generator | None) -> np.ndarray:
    if offset_rng is None:
        return np.zeros(batch_size, dtype=np.int64)
    return offset_rng.integers(0, MAX_OFFSET + 1, size=batch_size)


def forward(
    state: ModelState,
    batch: Batch | np.ndarray,
    offset_rng: np.random.Generator | None = None,
    *,
    offsets: np.ndarray | None = None,
    perturb: Mapping[int, LayerPerturbation] | None = None,
    probes: Sequence[str] = (),
    _cal: _Calibrator | None = None,
) -> tuple[Tensor, ActivationTrace | None]:
    """Logits (B, T, 17) and, when ``probes`` are requested, an activation trace.

    Position offsets are drawn per sequence from ``offset_rng`` (training) or
    taken from ``offsets``; otherwise they are zero.
    """
    if _cal is None and not state.calibrated:
        raise CalibrationError("model must be calibrated before forward")
    unknown = set(probes) - set(PROBES)
    if unknown:
        raise ValueError(f"unknown probes {sorted(unknown)}; choose from {PROBES}")
    ids = batch.input_ids if isinstance(batch, Batch) else np.asarray(batch)
    B, T = ids.shape
    valid = batch.valid if isinstance(batch, Batch) else np.ones((B, T), dtype=bool)
    if offsets is None:
        offsets = sample_offsets(B, offset_rng)
    trace = ActivationTrace(tuple(probes), valid) if probes else None
    mask = causal_mask(T)[None, None]

    x = embed(state, ids, np.asarray(offsets), _cal, valid)
    for l in range(state.config.N_layer):
        record = None
        if trace is not None:
            record = {}
            if "inputs" in probes:
                record["inputs"] = x.data
            if "embedding-norms" in probes:
                record["embedding-norms"] = np.linalg.norm(x.data, axis=-1)
            trace.layers.append(record)
        lp = perturb.get(l) if perturb else None
        x = x + _attention_block(state, l, x, mask, lp, record, probes, _cal, valid)
        x = x + feed_forward(state, l, x)
    if trace is not None:
        trace.final = x.data
    return output_head(state, x), trace


def logits(state: ModelState, batch, **kw) -> np.ndarray:
    return forward(state, batch, **kw)[0].data


def calibrate(state: ModelState, batch: Batch, offset_rng=None, recalibrate: bool = False) -> ModelState:
    """Return a copy whose checkpoint scales fix each activation's std on ``batch``.

    Statistics use non-padding positions (and causal score entries). On an
    already-calibrated model, ``recalibrate=True`` applies the correction
    factors, which are recorded in ``calibration_factors`` (all ~1 at a
    fixed point).
    """
    if state.calibrated and not recalibrate:
        raise CalibrationError("model is already calibrated; pass recalibrate=True")
    new = state.copy()
    if not recalibrate:
        for ck in new.checkpoints.values():
            ck.calibrated_scale = None
    cal = _Calibrator(batch.valid, new.checkpoints.keys())
    forward(new, batch, offset_rng, _cal=cal)
    new.calibration_factors = cal.factors
    return new


def measure_checkpoint_std(state: ModelState, batch: Batch) -> dict[str, float]:
    """Std of every checkpoint's output on ``batch`` (relative ones divided by std(x))."""
    probe = state.copy()
    cal = _Calibrator(batch.valid, probe.checkpoints.keys())
    forward(probe, batch, _cal=cal)
    out = {}
    for name, factor in cal.factors.items():
        ck = state.checkpoints[name]
        out[name] = ck.target_sigma / factor
    return out


def replay_logits(state: ModelState, trace: ActivationTrace) -> np.ndarray:
    """Rebuild logits from recorded layer inputs, attention and messages only."""
    need = {"inputs", "attention", "messages"}
    if not need <= set(trace.probes):
        raise ValueError(f"replay needs probes {sorted(need)}")
    x = Tensor._wrap(trace.layers[0]["inputs"])
    for l, rec in enumerate(trace.layers):
        dx = np.einsum("bhts,bhsn->btn", rec["attention"], rec["messages"])
        x = x + Tensor._wrap(dx)
        x = x + feed_forward(state, l, x)
    return output_head(state, x).data


def predictions(state: ModelState, batch: Batch, **kw) -> np.ndarray:
    return np.argmax(logits(state, batch, **kw), axis=-1)


def greedy_answers(state: ModelState, samples, max_new: int = 8) -> list[str]:
    """Autoregressively decode each answer after the ``=`` token."""
    from .task import END, VOCAB, make_batch, TOKEN_ID

    out = []
    for s in samples:
        cut = s.input_ids.index(TOKEN_ID["="]) + 1
        seq = list(s.input_ids[:cut])
        text = ""
        for _ in range(max_new):
            ids = np.asarray([seq])
            nxt = int(np.argmax(logits(state, ids)[0, -1]))
            if nxt == END:
                break
            text += VOCAB.decode([nxt])
            seq.append(nxt)
        out.append(text)
    return out


def beg_position(batch: Batch) -> np.ndarray:
    return batch.input_ids == BEG
