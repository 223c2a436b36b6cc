"""Noise-injection experiments, attention statistics and the theory battery.

Noise model: each targeted vector ``v`` (a query, key or message) becomes
``(1 + u) v`` with ``u ~ Uniform(-sqrt(3) rms, +sqrt(3) rms)``, drawn fresh per
vector, token, head and layer. Scaling q_t and k_s multiplies the score w_ts by
(1+u_q,t)(1+u_k,s); scaling m_s multiplies the weight a_ts by (1+u_m,s), so the
injection is applied at the score and attention-weight level.

Sweeps use common random numbers: one standard draw ``z ~ U(-1, 1)`` per seed
is scaled by ``sqrt(3) rms`` at every grid level, so differences between levels
come from the noise amplitude rather than from a fresh draw.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attention as att
from . import tensor as tn
from .model import BEG, LayerPerturbation, ModelState, causal_mask, forward, layer_scores
from .task import END, Batch, TaskConfig, make_batch, sample
from .trainer import binomial, token_accuracy

SCHEMA_VERSION = 1
NOISE_TARGETS = ("q", "k", "m")
HEAD_FILTERS = ("all", "sparse", "nonsparse")
NOISE_MODES = ("all-layers-joint", "per-layer-independent")
DEFAULT_GRID = (0.0, 0.003, 0.01, 0.03, 0.1, 0.3)
COLLAPSE_GRID = (0.0, 0.003, 0.005, 0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5)


# ---------------------------------------------------------------------------
# noise injection


@dataclass(frozen=True)
class NoiseSpec:
    rms: float
    targets: tuple[str, ...] = NOISE_TARGETS
    head_filter: str = "all"
    mode: str = "all-layers-joint"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.rms >= 0:
            raise ValueError("rms must be >= 0")
        if not set(self.targets) <= set(NOISE_TARGETS) or not self.targets:
            raise ValueError(f"targets must be a nonempty subset of {NOISE_TARGETS}")
        if self.head_filter not in HEAD_FILTERS:
            raise ValueError(f"head_filter must be one of {HEAD_FILTERS}")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"mode must be one of {NOISE_MODES}")

    def replace(self, **changes) -> "NoiseSpec":
        d = asdict(self)
        d.update(changes)
        return NoiseSpec(**d)


def noise_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def uniform_noise(rng: np.random.Generator, rms: float, shape) -> np.ndarray:
    """Draws with RMS exactly ``rms`` in distribution: U(-sqrt(3) rms, sqrt(3) rms)."""
    return math.sqrt(3.0) * rms * rng.uniform(-1.0, 1.0, size=shape)


def head_gate(a_clean: np.ndarray, head_filter: str) -> np.ndarray:
    """Boolean (..., T) mask of distributions (rows) that receive noise."""
    peak = a_clean.max(axis=-1)
    if head_filter == "all":
        return np.ones(peak.shape, dtype=bool)
    if head_filter == "sparse":
        return peak >= att.SPARSE_THRESHOLD
    return peak < att.NONSPARSE_THRESHOLD


def layer_perturbation(z: dict[str, np.ndarray], rms: float, targets, gate: np.ndarray) -> LayerPerturbation:
    """Factors for one layer from standard draws ``z[target]`` of shape (B, H, T)."""
    s = math.sqrt(3.0) * rms
    g = gate[..., None]
    score = attn = None
    if "q" in targets or "k" in targets:
        fq = 1.0 + s * z["q"][..., :, None] if "q" in targets else 1.0
        fk = 1.0 + s * z["k"][..., None, :] if "k" in targets else 1.0
        score = np.where(g, fq * fk, 1.0)
    if "m" in targets:
        attn = np.where(g, 1.0 + s * z["m"][..., None, :], 1.0)
    return LayerPerturbation(score, attn)


def standard_draws(seed: int, shape, n_layer: int, repeat: int = 0) -> list[dict[str, np.ndarray]]:
    rng = noise_rng(seed, repeat)
    return [{t: rng.uniform(-1.0, 1.0, size=shape) for t in NOISE_TARGETS} for _ in range(n_layer)]


@dataclass
class NoisyRun:
    logits: np.ndarray  # joint: (B, T, V); independent: (N_layer, B, T, V)
    attention: list[np.ndarray]  # perturbed attention per layer
    clean_attention: list[np.ndarray]
    gates: list[np.ndarray]


def inject_noise(state: ModelState, batch: Batch, spec: NoiseSpec, draws=None, clean=None) -> NoisyRun:
    """Forward pass(es) with norm noise per ``spec``.

    ``all-layers-joint`` perturbs every layer of one live forward pass.
    ``per-layer-independent`` perturbs one layer at a time; for each layer the
    returned attention is recomputed from the clean layer inputs, and the
    logits of that single-layer run are stacked along a leading axis.
    """
    if spec.rms < 0:
        raise ValueError("rms must be >= 0")
    L = state.config.N_layer
    if clean is None:
        clean = forward(state, batch, probes=("attention", "inputs"))
    clean_logits, trace = clean
    clean_a = trace.stack("attention")
    gates = [head_gate(a, spec.head_filter) for a in clean_a]
    B, H, T, _ = clean_a[0].shape
    if draws is None:
        draws = standard_draws(spec.seed, (B, H, T), L)
    perts = [layer_perturbation(draws[l], spec.rms, spec.targets, gates[l]) for l in range(L)]
    if spec.mode == "all-layers-joint":
        if spec.rms == 0:
            return NoisyRun(clean_logits.data, clean_a, clean_a, gates)
        out, tr = forward(state, batch, perturb=dict(enumerate(perts)), probes=("attention",))
        return NoisyRun(out.data, tr.stack("attention"), clean_a, gates)
    logits, attn = [], []
    mask = causal_mask(T)[None, None]
    for l in range(L):
        if spec.rms == 0:
            logits.append(clean_logits.data)
            attn.append(clean_a[l])
            continue
        w = layer_scores(state, l, trace.layers[l]["inputs"]).data
        if perts[l].score_factor is not None:
            w = w * perts[l].score_factor
        a = tn.softmax(w, axis=-1, mask=mask).data
        if perts[l].attn_factor is not None:
            a = a * perts[l].attn_factor
        attn.append(a)
        logits.append(forward(state, batch, perturb={l: perts[l]})[0].data)
    return NoisyRun(np.stack(logits), attn, clean_a, gates)


# ---------------------------------------------------------------------------
# accuracy vs noise


def eval_batches(dataset: TaskConfig, n_points: int, batch_size: int = 128) -> list[Batch]:
    if n_points < 1:
        raise ValueError("empty dataset")
    return [
        make_batch([sample(dataset, i) for i in range(s, min(s + batch_size, n_points))])
        for s in range(0, n_points, batch_size)
    ]


@dataclass
class CurvePoint:
    rms: float
    accuracy: float
    stderr: float
    accuracy_no_end: float
    stderr_no_end: float
    per_seed: list[float]


@dataclass
class NoiseCurve:
    spec: NoiseSpec
    points: list[CurvePoint]

    def accuracies(self) -> np.ndarray:
        return np.array([p.accuracy for p in self.points])

    def stderrs(self) -> np.ndarray:
        return np.array([p.stderr for p in self.points])

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "spec": asdict(self.spec), "points": [asdict(p) for p in self.points]}

    def csv_rows(self, metric: str = "accuracy") -> list[tuple]:
        rows = [(p.rms, metric, p.accuracy, p.stderr) for p in self.points]
        rows += [(p.rms, metric + "_no_end", p.accuracy_no_end, p.stderr_no_end) for p in self.points]
        return rows


def _combined_stderr(per_seed: Sequence[float], binomial_se: float) -> float:
    """Binomial error of one seed combined with the seed-to-seed standard error."""
    seed_sem = float(np.std(per_seed, ddof=1) / math.sqrt(len(per_seed))) if len(per_seed) > 1 else 0.0
    return math.sqrt(binomial_se**2 + seed_sem**2)


def accuracy_vs_noise(
    state: ModelState,
    dataset: TaskConfig,
    grid: Sequence[float] = DEFAULT_GRID,
    template: NoiseSpec | None = None,
    n_points: int = 512,
    n_seeds: int = 3,
    batch_size: int = 128,
) -> NoiseCurve:
    """Teacher-forced accuracy under joint noise at each rms in ``grid``."""
    if len(grid) == 0:
        raise ValueError("empty noise grid")
    if n_seeds < 1:
        raise ValueError("need at least one noise seed")
    template = (template or NoiseSpec(0.0)).replace(mode="all-layers-joint")
    batches = eval_batches(dataset, n_points, batch_size)
    cleans = [forward(state, b, probes=("attention", "inputs")) for b in batches]
    L = state.config.N_layer
    counts = np.zeros((len(grid), n_seeds, 2, 2), dtype=np.int64)  # (level, seed, end?, correct/total)
    for bi, (batch, clean) in enumerate(zip(batches, cleans)):
        B, T = batch.shape
        for r in range(n_seeds):
            draws = standard_draws(template.seed, (B, state.config.H, T), L, repeat=r * 100_003 + bi)
            for gi, rms in enumerate(grid):
                run = inject_noise(state, batch, template.replace(rms=float(rms)), draws, clean)
                pred = np.argmax(run.logits, axis=-1)
                counts[gi, r, 0] += token_accuracy(pred, batch)
                counts[gi, r, 1] += token_accuracy(pred, batch, exclude_end=True)
    points = []
    for gi, rms in enumerate(grid):
        stats = []
        for e in range(2):
            per_seed = [counts[gi, r, e, 0] / counts[gi, r, e, 1] for r in range(n_seeds)]
            pooled = binomial(int(counts[gi, 0, e, 0]), int(counts[gi, 0, e, 1]))
            stats.append((float(np.mean(per_seed)), _combined_stderr(per_seed, pooled.stderr), per_seed))
        points.append(CurvePoint(float(rms), stats[0][0], stats[0][1], stats[1][0], stats[1][1], stats[0][2]))
    return NoiseCurve(template, points)


def non_increasing_within(values: Sequence[float], errors: Sequence[float]) -> bool:
    """Every step down the curve rises by at most one standard error."""
    v, e = np.asarray(values), np.asarray(errors)
    return bool(np.all(v[1:] <= v[:-1] + np.maximum(e[1:], e[:-1])))


# ---------------------------------------------------------------------------
# circuit collapse


@dataclass
class CollapseLevel:
    rms: float
    n_sparse: int
    n_collapsed: int
    n_collapsed_strict: int

    @property
    def probability(self) -> float:
        return self.n_collapsed / self.n_sparse if self.n_sparse else 0.0

    @property
    def strict_probability(self) -> float:
        return self.n_collapsed_strict / self.n_sparse if self.n_sparse else 0.0


@dataclass
class CollapseReport:
    grid: list[float]
    levels: list[CollapseLevel]
    per_layer: list[list[CollapseLevel]] = field(default_factory=list)
    note: str = ""

    def probabilities(self) -> np.ndarray:
        return np.array([lv.probability for lv in self.levels])

    def strict_probabilities(self) -> np.ndarray:
        return np.array([lv.strict_probability for lv in self.levels])

    def onset(self, level: float = 0.01) -> float | None:
        """First grid rms whose collapse probability reaches ``level``."""
        for lv in self.levels:
            if lv.probability >= level:
                return lv.rms
        return None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "grid": self.grid,
            "note": self.note,
            "levels": [
                {**asdict(lv), "probability": lv.probability, "strict_probability": lv.strict_probability}
                for lv in self.levels
            ],
        }

    def csv_rows(self) -> list[tuple]:
        def se(p, n):
            return math.sqrt(p * (1 - p) / n) if n else 0.0

        rows = [(lv.rms, "collapse", lv.probability, se(lv.probability, lv.n_sparse)) for lv in self.levels]
        rows += [
            (lv.rms, "collapse_strict", lv.strict_probability, se(lv.strict_probability, lv.n_sparse))
            for lv in self.levels
        ]
        return rows


def sparse_rows(a: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(B, H, T) mask of sparse distributions, excluding the first row and padding."""
    keep = (a.max(axis=-1) >= att.SPARSE_THRESHOLD) & valid[:, None, :]
    keep[..., 0] = False
    return keep


def collapse_probability(
    state: ModelState,
    dataset: TaskConfig,
    grid: Sequence[float] = COLLAPSE_GRID,
    n_points: int = 256,
    seed: int = 0,
    batch_size: int = 128,
) -> CollapseReport:
    """Fraction of sparse distributions whose argmax moves under q/k noise.

    Each layer is perturbed on its own, from its clean inputs; the strict
    variant additionally requires the perturbed distribution to stay sparse.
    """
    if len(grid) == 0:
        raise ValueError("empty noise grid")
    L, H = state.config.N_layer, state.config.H
    tot = np.zeros((len(grid), L, 3), dtype=np.int64)
    for bi, batch in enumerate(eval_batches(dataset, n_points, batch_size)):
        B, T = batch.shape
        _, trace = forward(state, batch, probes=("inputs", "scores"))
        mask = causal_mask(T)[None, None]
        rng = noise_rng(seed, 7, bi)
        for l in range(L):
            w = trace.layers[l]["scores"]
            a = tn.softmax(w, axis=-1, mask=mask).data
            keep = sparse_rows(a, batch.valid)
            zq = rng.uniform(-1.0, 1.0, size=(B, H, T))
            zk = rng.uniform(-1.0, 1.0, size=(B, H, T))
            clean_arg = np.argmax(np.where(mask, w, -np.inf), axis=-1)
            for gi, rms in enumerate(grid):
                s = math.sqrt(3.0) * rms
                wn = w * (1.0 + s * zq)[..., :, None] * (1.0 + s * zk)[..., None, :]
                an = tn.softmax(wn, axis=-1, mask=mask).data
                moved = (np.argmax(an, axis=-1) != clean_arg) & keep if rms > 0 else np.zeros_like(keep)
                strict = moved & (an.max(axis=-1) >= att.SPARSE_THRESHOLD)
                tot[gi, l] += (int(keep.sum()), int(moved.sum()), int(strict.sum()))
    levels = [CollapseLevel(float(r), *map(int, tot[gi].sum(axis=0))) for gi, r in enumerate(grid)]
    per_layer = [[CollapseLevel(float(r), *map(int, tot[gi, l])) for gi, r in enumerate(grid)] for l in range(L)]
    note = "" if levels[0].n_sparse else "no sparse attention distributions found"
    return CollapseReport([float(g) for g in grid], levels, per_layer, note)


def synthetic_collapse_onset(w: np.ndarray, kappa_k_direction: np.ndarray, grid: Sequence[float]) -> tuple[float | None, float | None]:
    """Empirical vs predicted collapse onset for one head as key noise grows.

    Key factors are ``1 + g * direction`` for each ``g`` in ``grid``. Returns
    the first ``g`` at which the perturbed argmax moves and the first at which
    the first-order predicate predicts a collapse.
    """
    w = np.asarray(w, dtype=np.float64)
    t_star = int(np.argmax(w))
    empirical = predicted = None
    for g in grid:
        kk = g * np.asarray(kappa_k_direction, dtype=np.float64)
        if empirical is None and int(np.argmax(w * (1.0 + kk))) != t_star:
            empirical = float(g)
        if predicted is None and att.collapse_threshold(w, t_star, 0.0, kk).collapsing:
            predicted = float(g)
    return empirical, predicted


# ---------------------------------------------------------------------------
# embedding-norm spread and sparsity


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Lower inverse of the weighted empirical CDF: min{v : F(v) >= q}."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    total = w.sum()
    if not total > 0:
        raise ValueError("weights sum to zero")
    cdf = np.cumsum(w) / total
    idx = np.searchsorted(cdf, np.atleast_1d(q) - 1e-15, side="left")
    return v[np.minimum(idx, v.size - 1)]


@dataclass
class HeadSpread:
    layer: int
    head: int
    q05: float
    q50: float
    q95: float
    half_width: float
    beg_fraction: float


@dataclass
class SpreadReport:
    heads: list[HeadSpread]
    degenerate: list[tuple[int, int]] = field(default_factory=list)

    def layer_half_widths(self) -> np.ndarray:
        layers = sorted({h.layer for h in self.heads})
        return np.array([np.mean([h.half_width for h in self.heads if h.layer == l]) for l in layers])

    def mean_half_width(self) -> float:
        return float(np.mean(self.layer_half_widths()))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mean_half_width": self.mean_half_width() if self.heads else None,
            "heads": [asdict(h) for h in self.heads],
            "degenerate": self.degenerate,
        }


def spread_from_weights(norms: np.ndarray, weights: np.ndarray) -> tuple[float, float, float, float]:
    """Median-normalised weighted 5/50/95% quantiles and central-90% half-width."""
    med = float(weighted_quantile(norms, weights, 0.5)[0])
    ratio = norms / med
    q05, q50, q95 = weighted_quantile(ratio, weights, [0.05, 0.5, 0.95])
    return float(q05), float(q50), float(q95), float((q95 - q05) / 2.0)


def embedding_spread(state: ModelState, dataset: TaskConfig, n_points: int = 256, batch_size: int = 128) -> SpreadReport:
    """Attention-weighted spread of sender norms |y_s| per layer and head.

    Each (sequence, sender) norm is weighted by the attention it receives,
    summed over valid queries; BEG senders are excluded.
    """
    L, H = state.config.N_layer, state.config.H
    norms = [[] for _ in range(L)]
    weights = [[[] for _ in range(H)] for _ in range(L)]
    beg = np.zeros((L, H))
    total = np.zeros((L, H))
    for batch in eval_batches(dataset, n_points, batch_size):
        _, trace = forward(state, batch, probes=("attention", "embedding-norms"))
        sender_ok = batch.valid & (batch.input_ids != BEG)
        for l, rec in enumerate(trace.layers):
            a = rec["attention"] * batch.valid[:, None, :, None]
            received = a.sum(axis=2)  # (B, H, T)
            norms[l].append(rec["embedding-norms"][sender_ok])
            for h in range(H):
                weights[l][h].append(received[:, h][sender_ok])
                beg[l, h] += received[:, h][batch.input_ids == BEG].sum()
                total[l, h] += received[:, h].sum()
    heads, degenerate = [], []
    for l in range(L):
        n = np.concatenate(norms[l])
        for h in range(H):
            w = np.concatenate(weights[l][h])
            if not w.sum() > 0:
                degenerate.append((l, h))
                continue
            q05, q50, q95, hw = spread_from_weights(n, w)
            heads.append(HeadSpread(l, h, q05, q50, q95, hw, float(beg[l, h] / total[l, h])))
    return SpreadReport(heads, degenerate)


@dataclass
class SparsityHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def fraction_sparse(self) -> float:
        return self.mass_above(att.SPARSE_THRESHOLD)

    def mass_above(self, threshold: float) -> float:
        # Bins are [lo, hi) except the last, which is closed.
        i = int(np.searchsorted(self.edges, threshold, side="left"))
        return float(self.counts[i:].sum() / self.counts.sum())

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "fraction_sparse": self.fraction_sparse}


def max_attention_values(state: ModelState, dataset: TaskConfig, n_points: int = 256, batch_size: int = 128) -> np.ndarray:
    """max_s a_ts for every distribution except the first row and padding."""
    out = []
    for batch in eval_batches(dataset, n_points, batch_size):
        _, trace = forward(state, batch, probes=("attention",))
        keep = batch.valid.copy()
        keep[:, 0] = False
        for a in trace.stack("attention"):
            out.append(a.max(axis=-1).transpose(0, 2, 1)[keep].ravel())
    return np.concatenate(out)


def histogram(values, edges=None) -> SparsityHistogram:
    edges = np.linspace(0.0, 1.0, 21) if edges is None else np.asarray(edges, dtype=np.float64)
    counts, _ = np.histogram(values, bins=edges)
    return SparsityHistogram(edges, counts)


def sparsity_histogram(state: ModelState, dataset: TaskConfig, edges=None, n_points: int = 256) -> SparsityHistogram:
    return histogram(max_attention_values(state, dataset, n_points), edges)


def attn_dump(state: ModelState, texts: Sequence[str] | Batch) -> dict:
    """Attention maps of every layer and head as nested lists."""
    from .task import VOCAB

    if isinstance(texts, Batch):
        batch = texts
    else:
        ids = [VOCAB.encode(t) for t in texts]
        batch = make_batch([_text_sample(i) for i in ids])
    _, trace = forward(state, batch, probes=("attention",))
    seqs = []
    for b, s in enumerate(batch.samples):
        n = len(s)
        seqs.append({
            "tokens": list(VOCAB.decode(s.input_ids)),
            "layers": [rec["attention"][b, :, :n, :n].tolist() for rec in trace.layers],
        })
    return {"schema_version": SCHEMA_VERSION, "sequences": seqs}


def _text_sample(ids):
    from .task import Sample

    return Sample(list(ids), [END] * len(ids), [False] * len(ids), 0)


# ---------------------------------------------------------------------------
# theory battery


def _rel(err: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(err) / max(np.linalg.norm(ref), 1e-300))


def _random_head(rng, T=None, d=None, N=None):
    T = T or int(rng.integers(2, 9))
    d = d or int(rng.integers(2, 7))
    N = N or int(rng.integers(2, 7))
    return rng.normal(size=d), rng.normal(size=(T, d)), rng.normal(size=(T, N))


def _softmax(w):
    return tn.softmax(np.asarray(w, dtype=np.float64)).data


def _gen_propagators(rng):
    q, k, m = _random_head(rng)
    return {"q": q, "k": k, "m": m, "eq": rng.normal(size=q.shape), "ek": rng.normal(size=k.shape),
            "em": rng.normal(size=m.shape)}


def _check_propagators(inst, step=1e-5):
    q, k, m = inst["q"], inst["k"], inst["m"]
    a = _softmax(k @ q)
    dq, dk, dm = att.propagate_components(a, q, k, m, inst["eq"], inst["ek"], inst["em"])
    fd = [
        (att.head_output(q + step * inst["eq"], k, m) - att.head_output(q - step * inst["eq"], k, m)) / (2 * step),
        (att.head_output(q, k + step * inst["ek"], m) - att.head_output(q, k - step * inst["ek"], m)) / (2 * step),
        (att.head_output(q, k, m + step * inst["em"]) - att.head_output(q, k, m - step * inst["em"])) / (2 * step),
    ]
    return max(_rel(f - an, an) for f, an in zip(fd, (dq, dk, dm)))


def _gen_sparse(rng, gap=50.0):
    q, k, m = _random_head(rng)
    t_star = int(rng.integers(k.shape[0]))
    w = k @ q
    others = np.delete(w, t_star)
    k[t_star] += (others.max() + gap - w[t_star]) * q / (q @ q)
    return {"q": q, "k": k, "m": m, "t_star": t_star, "eq": rng.normal(size=q.shape),
            "ek": rng.normal(size=k.shape), "em": rng.normal(size=m.shape)}


def _check_sparse(inst):
    q, k, m = inst["q"], inst["k"], inst["m"]
    a = _softmax(k @ q)
    dq, dk, dm = att.propagate_components(a, q, k, m, inst["eq"], inst["ek"], inst["em"])
    target = inst["em"][int(inst["t_star"])]
    return float(max(np.abs(dq).max(), np.abs(dk).max(), np.abs(dm - target).max()))


def _gen_isotropic(rng):
    q, k, m = _random_head(rng)
    T = k.shape[0]
    case = int(rng.integers(3))
    if case == 0:  # q = 0: uniform attention for any keys
        q = np.zeros_like(q)
    elif case == 1:  # equal keys
        k = np.tile(k[0], (T, 1))
    em = rng.normal(size=m.shape)
    if case == 2:  # q = 0 and messages noise with zero token-mean
        q = np.zeros_like(q)
        em = em - em.mean(axis=0)
    return {"q": q, "k": k, "m": m, "case": case, "eq": rng.normal(size=q.shape),
            "ek": rng.normal(size=k.shape), "em": em}


def _check_isotropic(inst):
    q, k, m = inst["q"], inst["k"], inst["m"]
    T = k.shape[0]
    a = _softmax(k @ q)
    dq, dk, dm = att.propagate_components(a, q, k, m, inst["eq"], inst["ek"], inst["em"])
    kt = k - k.mean(axis=0)
    mt = m - m.mean(axis=0)
    # <m_t kt_t^T> eps_q,  <mt_t eps_k,t^T> q,  <eps_m,t>, as explicit token loops.
    eq_ = sum(np.outer(m[t], kt[t]) for t in range(T)) @ inst["eq"] / T
    ek_ = sum(np.outer(mt[t], inst["ek"][t]) for t in range(T)) @ q / T
    em_ = sum(inst["em"][t] for t in range(T)) / T
    err = max(np.abs(a - 1.0 / T).max(), np.abs(dq - eq_).max(), np.abs(dk - ek_).max(), np.abs(dm - em_).max())
    case = int(inst["case"])
    if case == 1:  # stable to noisy q
        err = max(err, np.abs(dq).max())
    if case in (0, 2):  # stable to noisy k
        err = max(err, np.abs(dk).max())
    if case == 2:  # stable to zero-mean message noise
        err = max(err, np.abs(dm).max())
    return float(err)


def _gen_isotropic_multiplicative(rng):
    q, k, m = _random_head(rng)
    T = k.shape[0]
    k = np.tile(k[0], (T, 1))
    case = int(rng.integers(3))
    kappa = rng.uniform(-0.1, 0.1, size=T)
    if case == 1:
        kappa = np.full(T, kappa[0])
    if case == 2:
        q = np.zeros_like(q)
    return {"q": q, "k": k, "m": m, "kappa": kappa, "case": case}


def _check_isotropic_multiplicative(inst):
    q, k, m, kappa = inst["q"], inst["k"], inst["m"], inst["kappa"]
    a = _softmax(k @ q)
    _, dk, _ = att.propagate_components(a, q, k, m, eps_k=kappa[:, None] * k)
    w = float(k[0] @ q)
    mt = m - m.mean(axis=0)
    predicted = w * (mt * kappa[:, None]).mean(axis=0)
    if int(inst["case"]) in (1, 2):
        predicted = np.zeros_like(predicted)
    scale = max(1.0, np.abs(w) * np.abs(mt).max())
    return float(np.abs(dk - predicted).max() / scale)


def _gen_collapse(rng):
    T = int(rng.integers(2, 9))
    w = rng.normal(size=T) * rng.uniform(0.5, 5.0)
    return {"w": w, "t_star": int(np.argmax(w)), "kappa_q": float(rng.uniform(-0.2, 0.2)),
            "kappa_k": rng.uniform(-0.2, 0.2, size=T)}


def collapse_brute_force(w, t_star, kappa_q, kappa_k, exact: bool = False) -> tuple[set[int], np.ndarray]:
    """Tokens whose perturbed score overtakes t*, and every margin w'_t - w'_t*."""
    w, kk = np.asarray(w, dtype=np.float64), np.asarray(kappa_k, dtype=np.float64)
    factor = (1.0 + kappa_q) * (1.0 + kk) if exact else 1.0 + kappa_q + kk
    wp = factor * w
    margins = wp - wp[t_star]
    return {t for t in range(w.size) if t != t_star and margins[t] > 0}, margins


def _check_collapse(inst):
    """Largest |margin| among tokens where predicate and brute force disagree."""
    w, t_star, kq, kk = inst["w"], int(inst["t_star"]), float(inst["kappa_q"]), inst["kappa_k"]
    pred = att.collapse_threshold(w, t_star, kq, kk)
    brute, margins = collapse_brute_force(w, t_star, kq, kk)
    bad = (set(pred.collapsing) ^ brute) | set(pred.indeterminate)
    err = max((abs(margins[t]) for t in bad), default=0.0)
    if np.all(kk == 0):
        err = max(err, float(np.nanmax(np.abs(pred.lambda_w - 1.0))))
    return float(err)


def _check_collapse_exact(inst):
    """Disagreements with fully multiplicative scores must lie in the cross-term band."""
    w, t_star, kq, kk = inst["w"], int(inst["t_star"]), float(inst["kappa_q"]), inst["kappa_k"]
    pred = att.collapse_threshold(w, t_star, kq, kk)
    brute, margins = collapse_brute_force(w, t_star, kq, kk, exact=True)
    band = np.abs(kq) * (np.abs(kk * w) + abs(kk[t_star] * w[t_star]))
    bad = set(pred.collapsing) ^ brute
    return float(max((abs(margins[t]) - band[t] for t in bad), default=0.0))


def _gen_scores(rng):
    T = int(rng.integers(2, 12))
    return {"w": rng.normal(size=T) * 3.0, "shift": float(rng.uniform(-100, 100)),
            "kappas": np.sort(rng.uniform(0.05, 20.0, size=8))}


def _check_shift(inst):
    w = inst["w"]
    return float(np.abs(_softmax(w + inst["shift"]) - _softmax(w)).max())


def _check_temperature(inst):
    """Positive when entropy fails to fall as the inverse temperature grows."""
    ent = [att.entropy(att.temperature_probe(inst["w"], float(k)).data) for k in inst["kappas"]]
    worst = max(0.0, max(b - a for a, b in zip(ent[:-1], ent[1:])))
    # Limits: tiny kappa -> uniform, huge kappa -> one-hot on the argmax.
    w = inst["w"]
    hot = att.temperature_probe(w, 1e14 / max(np.ptp(w), 1e-12)).data
    worst = max(worst, abs(1.0 - hot[np.argmax(w)]))
    cold = att.temperature_probe(w, 1e-14).data
    return max(worst, float(np.abs(cold - 1.0 / w.size).max()))


def _gen_bias(rng):
    N, d, T = int(rng.integers(2, 7)), int(rng.integers(2, 7)), int(rng.integers(2, 8))
    return {"W_Q": rng.normal(size=(d, N)) / math.sqrt(N), "W_K": rng.normal(size=(d, N)) / math.sqrt(N),
            "b_K": rng.normal(size=d), "x": rng.normal(size=N), "Y": rng.normal(size=(T, N))}


def _bias_head(inst):
    N = inst["W_Q"].shape[1]
    d = inst["W_Q"].shape[0]
    return att.HeadWeights(inst["W_Q"], inst["W_K"], np.zeros((d, N)), np.zeros((N, d)))


def _check_bias(inst):
    h = _bias_head(inst)
    zero = np.zeros(inst["W_Q"].shape[0])
    plain = att._biased_weights(inst["x"], inst["Y"], h, zero, zero)
    biased = att._biased_weights(inst["x"], inst["Y"], h, zero, inst["b_K"])
    ok = att.bias_invariance_check(h, inst["b_K"], [(inst["x"], inst["Y"])], tol=1e-12)
    return float(np.abs(plain - biased).max()) if ok else math.inf


def _check_projection(inst):
    """No-Norm scores are projections onto y_x = W_QK^T x; |y_x| is an inverse temperature."""
    h = _bias_head(inst)
    x, Y = inst["x"], inst["Y"]
    y_x = h.W_QK.T @ x
    err = float(np.abs(att.scores(x, Y, h).data - Y @ y_x).max())
    c = 2.5
    a_scaled = att.attention_weights(c * x, Y, h).data
    return max(err, float(np.abs(a_scaled - att.temperature_probe(Y @ y_x, c).data).max()))


def _gen_separability(rng):
    return {"seed": int(rng.integers(2**31))}


def _check_separability(inst):
    r = separability_checks(np.random.default_rng(int(inst["seed"])))
    return max(r.values())


PROPERTIES: dict[str, tuple[Callable, Callable, float, int]] = {
    # name: (generator, checker, tolerance, instances per trial)
    "propagators-vs-finite-differences": (_gen_propagators, _check_propagators, 1e-5, 1),
    "sparse-limit-gap-50": (_gen_sparse, _check_sparse, 1e-10, 1),
    "isotropic-lemmas": (_gen_isotropic, _check_isotropic, 1e-12, 1),
    "isotropic-multiplicative": (_gen_isotropic_multiplicative, _check_isotropic_multiplicative, 1e-12, 1),
    "collapse-predicate-vs-brute-force": (_gen_collapse, _check_collapse, 1e-9, 10),
    "collapse-predicate-vs-exact-scores": (_gen_collapse, _check_collapse_exact, 1e-9, 10),
    "shift-invariance": (_gen_scores, _check_shift, 1e-12, 1),
    "entropy-monotone-in-temperature": (_gen_scores, _check_temperature, 1e-12, 1),
    "key-bias-invariance": (_gen_bias, _check_bias, 1e-12, 1),
    "no-norm-projection": (_gen_bias, _check_projection, 1e-12, 1),
    "separability": (_gen_separability, _check_separability, 1e-10, 1),
}


def instance_rng(seed: int, name: str, index: int) -> np.random.Generator:
    return noise_rng(seed, zlib.crc32(name.encode()), index)


def _encode(v):
    if isinstance(v, np.ndarray):
        return {"__array__": v.tolist()}
    return v


def _decode(v):
    if isinstance(v, dict) and "__array__" in v:
        return np.asarray(v["__array__"], dtype=np.float64)
    return v


def serialize_instance(name: str, inst: dict, error: float, index: int, seed: int) -> dict:
    return {"property": name, "index": index, "seed": seed, "error": error,
            "instance": {k: _encode(v) for k, v in inst.items()}}


def replay_instance(record: dict) -> float:
    """Re-run the checker on a serialized instance; returns its error."""
    _, check, _, _ = PROPERTIES[record["property"]]
    return check({k: _decode(v) for k, v in record["instance"].items()})


@dataclass
class PropertyResult:
    name: str
    passed: bool
    worst_error: float
    tolerance: float
    instances: int
    failures: list[dict] = field(default_factory=list)


@dataclass
class PerturbationReport:
    seed: int
    trials: int
    results: list[PropertyResult]
    runtime: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def result(self, name: str) -> PropertyResult:
        return next(r for r in self.results if r.name == name)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "trials": self.trials,
                "passed": self.passed, "runtime": self.runtime, "results": [asdict(r) for r in self.results]}


def verify_theory(trials: int = 100, seed: int = 0, properties: Iterable[str] | None = None) -> PerturbationReport:
    """Run the property battery on ``trials`` random instances per property."""
    t0 = time.perf_counter()
    names = list(PROPERTIES) if properties is None else list(properties)
    results = []
    for name in names:
        gen, check, tol, per_trial = PROPERTIES[name]
        worst, failures, n = 0.0, [], trials * per_trial
        for i in range(n):
            inst = gen(instance_rng(seed, name, i))
            err = check(inst)
            worst = max(worst, err)
            if not err <= tol:
                failures.append(serialize_instance(name, inst, err, i, seed))
        results.append(PropertyResult(name, not failures, worst, tol, n, failures[:5]))
    return PerturbationReport(seed, trials, results, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# separability constructions


def _orthonormal(rng, n, sizes):
    basis, _ = np.linalg.qr(rng.normal(size=(n, n)))
    out, start = [], 0
    for s in sizes:
        out.append(basis[:, start : start + s])
        start += s
    return out


def _random_rotation(rng, k):
    r, _ = np.linalg.qr(rng.normal(size=(k, k)))
    return r


def separability_checks(rng: np.random.Generator, delta: float = 0.1) -> dict[str, float]:
    """Errors of the three separability constructions (each should be ~0).

    * ``pre-norm-rotation``: embeddings on orthogonal spheres; rotating the
      content of the subspace a head ignores leaves its scores unchanged.
    * ``pre-norm-common-factor``: scaling that ignored content by (1+delta)
      changes the receiver norm, and every score by the predicted common
      factor |x| / |x'|.
    * ``qkv-norm-oblique``: for linearly independent but non-orthogonal
      subspaces, a head reading one subspace through its oblique projector is
      unaffected by any change of the other subspace's content.
    """
    n, sizes, T, d = 12, (4, 4, 4), 6, 3
    subs = _orthonormal(rng, n, sizes)
    radii = rng.uniform(0.5, 2.0, size=len(sizes))

    def on_sphere(basis, r, c=None):
        c = rng.normal(size=basis.shape[1]) if c is None else c
        return basis @ (r * c / np.linalg.norm(c))

    def embed(coeffs):
        return sum(on_sphere(b, r, c) for b, r, c in zip(subs, radii, coeffs))

    P = subs[0] @ subs[0].T  # head reads subspace 0 only
    W_Q = rng.normal(size=(d, n)) @ P
    W_K = rng.normal(size=(d, n)) @ P
    zeros_v, zeros_o = np.zeros((d, n)), np.zeros((n, d))
    head = att.HeadWeights(W_Q, W_K, zeros_v, zeros_o, att.NormStrategy("pre-norm", "rms"))
    cx = [rng.normal(size=s) for s in sizes]
    cy = [[rng.normal(size=s) for s in sizes] for _ in range(T)]
    x = embed(cx)
    Y = np.stack([embed(c) for c in cy])
    base = att.scores(x, Y, head).data

    def rotate_off(coeffs):
        return [coeffs[0]] + [_random_rotation(rng, len(c)) @ c for c in coeffs[1:]]

    x_rot = embed(rotate_off(cx))
    Y_rot = np.stack([embed(rotate_off(c)) for c in cy])
    rot_err = float(np.abs(att.scores(x_rot, Y_rot, head).data - base).max() / np.abs(base).max())

    # Scale the ignored part of the receiver by (1 + delta).
    x_parts = [on_sphere(b, r, c) for b, r, c in zip(subs, radii, cx)]
    scaled_parts = [x_parts[0]] + [(1.0 + delta) * p for p in x_parts[1:]]
    x_scaled = sum(scaled_parts)
    predicted = att.interference_factor(scaled_parts).factor / att.interference_factor(x_parts).factor
    ratio = att.scores(x_scaled, Y, head).data / base
    factor_err = float(np.abs(ratio - predicted).max())

    # QKV-Norm with oblique (non-orthogonal, linearly independent) subspaces.
    A = rng.normal(size=(n, n)) + 0.5 * np.eye(n)  # columns: a generic, non-orthogonal basis
    blocks = np.split(np.arange(n), np.cumsum(sizes)[:-1])
    A_inv = np.linalg.inv(A)
    P0 = A[:, blocks[0]] @ A_inv[blocks[0], :]  # P0 x = x_0 along the other subspaces
    head_q = att.HeadWeights(rng.normal(size=(d, n)) @ P0, rng.normal(size=(d, n)) @ P0, zeros_v, zeros_o,
                             att.NormStrategy("qkv-norm", "rms"))

    def oblique(c, other_scale=1.0):
        parts = [A[:, blk] @ ci for blk, ci in zip(blocks, c)]
        return parts[0] + other_scale * sum(parts[1:])

    cx2 = [rng.normal(size=s) for s in sizes]
    cy2 = [[rng.normal(size=s) for s in sizes] for _ in range(T)]
    w0 = att.scores(oblique(cx2), np.stack([oblique(c) for c in cy2]), head_q).data
    fresh = lambda c: [c[0]] + [rng.normal(size=len(ci)) for ci in c[1:]]
    w1 = att.scores(oblique(fresh(cx2), 3.0), np.stack([oblique(fresh(c), 0.2) for c in cy2]), head_q).data
    qkv_err = float(np.abs(w1 - w0).max() / np.abs(w0).max())
    return {"pre-norm-rotation": rot_err, "pre-norm-common-factor": factor_err, "qkv-norm-oblique": qkv_err}


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, default=_json_default) + "\n")


def write_csv(rows: Iterable[tuple], path, header=("rms", "metric", "value", "stderr")) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")
