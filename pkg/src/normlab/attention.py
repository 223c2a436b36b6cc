"""Single-receiver attention heads under No-Norm, Pre-Norm and QKV-Norm.

Vectors follow the column convention: a receiver ``x`` has shape (N_x,), the
senders ``Y`` are stacked as rows (T, N_y), and the head maps
``q = W_Q x``, ``k_t = W_K y_t``, ``v_t = W_V y_t``, ``m_t = W_O v_t``.

Besides the forward quantities this module holds the first-order
perturbation propagators, the multiplicative collapse predicate and a few
checks (bias nullification, temperature scaling, subspace interference)
used by the theory battery in :mod:`normlab.experiments`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import DegenerateInputError, Tensor

NORM_VARIANTS = ("rms", "layer")
STRATEGIES = ("no-norm", "pre-norm", "qkv-norm")

# Gain slots per strategy: x and y_t inputs for Pre-Norm, q/k/v for QKV-Norm.
STRATEGY_PARAMS = {
    "no-norm": (),
    "pre-norm": ("x", "y_k", "y_v"),
    "qkv-norm": ("q", "k", "v"),
}

SPARSE_THRESHOLD = 0.95
NONSPARSE_THRESHOLD = 0.70


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class NormKind:
    variant: str = "layer"
    gain: Tensor | None = None

    def __post_init__(self):
        if self.variant not in NORM_VARIANTS:
            raise ValueError(f"norm variant must be one of {NORM_VARIANTS}, got {self.variant!r}")
        if self.gain is not None:
            self.gain = _t(self.gain)


@dataclass
class NormStrategy:
    """Where normalisation sits, which norm is used, and its gains.

    ``gains`` is keyed by the slots in ``STRATEGY_PARAMS``; missing gains
    default to ones of the right length when first used.
    """

    variant: str = "pre-norm"
    norm: str = "layer"
    gains: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.variant!r}")
        if self.norm not in NORM_VARIANTS:
            raise ValueError(f"norm must be one of {NORM_VARIANTS}, got {self.norm!r}")
        allowed = set(STRATEGY_PARAMS[self.variant])
        unknown = set(self.gains) - allowed
        if unknown:
            raise ValueError(f"{self.variant} has no gain slots {sorted(unknown)}")
        self.gains = {k: _t(v) for k, v in self.gains.items()}

    def kind(self, slot: str, size: int) -> NormKind:
        gain = self.gains.get(slot)
        if gain is None:
            gain = Tensor(np.ones(size))
        return NormKind(self.norm, gain)


@dataclass
class HeadWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    strategy: NormStrategy = field(default_factory=lambda: NormStrategy("no-norm"))

    def __post_init__(self):
        self.W_Q, self.W_K, self.W_V, self.W_O = (_t(w) for w in (self.W_Q, self.W_K, self.W_V, self.W_O))
        n_qkv = self.W_Q.shape[0]
        if self.W_K.shape[0] != n_qkv or self.W_V.shape[0] != n_qkv or self.W_O.shape[1] != n_qkv:
            raise ValueError("W_Q, W_K, W_V rows and W_O columns must share N_qkv")
        if self.W_K.shape[1] != self.W_V.shape[1]:
            raise ValueError("W_K and W_V must read the same sender width")
        if self.W_O.shape[0] != self.W_Q.shape[1]:
            raise ValueError("W_O must write back onto the receiver width")

    @property
    def W_QK(self) -> np.ndarray:
        return self.W_Q.data.T @ self.W_K.data

    @property
    def W_OV(self) -> np.ndarray:
        return self.W_O.data @ self.W_V.data


@dataclass(frozen=True)
class CollapseVerdict:
    clean_argmax: int
    perturbed_argmax: int
    collapsed: bool
    strict_sparse: bool


@dataclass(frozen=True)
class CollapsePrediction:
    """Result of :func:`collapse_threshold`.

    ``lambda_w[t]`` is the critical score ratio for token t (nan at t*).
    """

    collapsing: frozenset[int]
    indeterminate: frozenset[int]
    lambda_w: np.ndarray


@dataclass(frozen=True)
class SeparabilityReport:
    factor: float
    orthogonal: bool
    norms: np.ndarray
    dots: np.ndarray
    norm_constant: bool | None = None


def normalize(z, kind: NormKind) -> Tensor:
    """Apply ``kind`` along the last axis (rows of a matrix independently)."""
    z = _t(z)
    gain = kind.gain if kind.gain is not None else Tensor(np.ones(z.shape[-1]))
    return tn.normalize(z, gain, kind.variant)


def queries_keys(x, Y, h: HeadWeights) -> tuple[Tensor, Tensor]:
    """Return ``q`` (N_qkv,) and the stacked keys (T, N_qkv) for strategy ``h``."""
    x, Y = _t(x), _t(Y)
    s = h.strategy
    if s.variant == "pre-norm":
        x = normalize(x, s.kind("x", x.shape[-1]))
        Y = normalize(Y, s.kind("y_k", Y.shape[-1]))
    q = tn.matmul(h.W_Q, x)
    K = tn.matmul(Y, h.W_K.T)
    if s.variant == "qkv-norm":
        q = normalize(q, s.kind("q", q.shape[-1]))
        K = normalize(K, s.kind("k", K.shape[-1]))
    return q, K


def messages(Y, h: HeadWeights) -> Tensor:
    """Stacked messages ``m_t`` (T, N_x) for strategy ``h``."""
    Y = _t(Y)
    s = h.strategy
    if s.variant == "pre-norm":
        Y = normalize(Y, s.kind("y_v", Y.shape[-1]))
    V = tn.matmul(Y, h.W_V.T)
    if s.variant == "qkv-norm":
        V = normalize(V, s.kind("v", V.shape[-1]))
    return tn.matmul(V, h.W_O.T)


def scores(x, Y, h: HeadWeights) -> Tensor:
    """Dot-product scores ``w_t`` (T,) of receiver ``x`` against senders ``Y``."""
    q, K = queries_keys(x, Y, h)
    return tn.matmul(K, q)


def attention_weights(x, Y, h: HeadWeights, causal_mask=None) -> Tensor:
    return tn.softmax(scores(x, Y, h), axis=-1, mask=causal_mask)


def attention_update(x, Y, heads: Sequence[HeadWeights], causal_mask=None) -> Tensor:
    """Residual update ``x + sum_h sum_t a_t m_t``.

    ``causal_mask`` is an optional boolean (T,) array of senders that may be
    attended; at least one must be true.
    """
    x = _t(x)
    if causal_mask is not None and not np.asarray(causal_mask, dtype=bool).any():
        raise ValueError("every sender is masked")
    out = x
    for h in heads:
        a = attention_weights(x, Y, h, causal_mask)
        out = out + tn.matmul(a, messages(Y, h))
    return out


def propagate_components(a, q, k, m, eps_q=None, eps_k=None, eps_m=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-order change of ``dx = sum_t a_t m_t`` from each perturbation source.

    Shapes: ``a`` (T,), ``q`` (d,), ``k`` (T, d), ``m`` (T, N), ``eps_q`` (d,),
    ``eps_k`` (T, d), ``eps_m`` (T, N). Missing perturbations contribute zero.
    Returns the (query, key, message) contributions separately.
    """
    a, q, k, m = (np.asarray(v, dtype=np.float64) for v in (a, q, k, m))
    if a.ndim != 1 or k.shape != (a.size, q.size) or m.shape[0] != a.size:
        raise ValueError(f"shape mismatch: a{a.shape} q{q.shape} k{k.shape} m{m.shape}")
    k_centred = k - a @ k
    m_centred = m - a @ m
    zero = np.zeros(m.shape[1])
    dq = dk = dm = zero
    if eps_q is not None:
        eps_q = np.asarray(eps_q, dtype=np.float64)
        if eps_q.shape != q.shape:
            raise ValueError("eps_q must match q")
        dq = (a * (k_centred @ eps_q)) @ m
    if eps_k is not None:
        eps_k = np.asarray(eps_k, dtype=np.float64)
        if eps_k.shape != k.shape:
            raise ValueError("eps_k must match k")
        dk = (a * (eps_k @ q)) @ m_centred
    if eps_m is not None:
        eps_m = np.asarray(eps_m, dtype=np.float64)
        if eps_m.shape != m.shape:
            raise ValueError("eps_m must match m")
        dm = a @ eps_m
    return dq, dk, dm


def propagate_perturbation(a, q, k, m, eps_q=None, eps_k=None, eps_m=None) -> Tensor:
    """Total first-order change of the head output; see :func:`propagate_components`."""
    dq, dk, dm = propagate_components(a, q, k, m, eps_q, eps_k, eps_m)
    return Tensor(dq + dk + dm)


def head_output(q, k, m) -> np.ndarray:
    """``sum_t softmax(k q)_t m_t`` for explicit vectors; the reference for perturbation checks."""
    w = np.asarray(k) @ np.asarray(q)
    return tn.softmax(w).data @ np.asarray(m)


def collapse_threshold(w, t_star: int, kappa_q: float, kappa_k) -> CollapsePrediction:
    """Tokens predicted to overtake ``t_star`` under multiplicative q/k scaling.

    Uses the first-order score shift ``(kappa_q + kappa_k[t]) * w_t``; the
    cross term ``kappa_q * kappa_k[t]`` is dropped. Tokens with ``w_t == 0``
    (or a vanishing divisor) are reported as indeterminate.
    """
    w = np.asarray(w, dtype=np.float64)
    kappa_k = np.asarray(kappa_k, dtype=np.float64)
    if kappa_k.shape != w.shape:
        raise ValueError("kappa_k must have one entry per token")
    base = 1.0 + kappa_q + kappa_k[t_star]
    lam = (1.0 + kappa_q + kappa_k) / base
    lam[t_star] = np.nan
    collapsing, indeterminate = set(), set()
    for t in range(w.size):
        if t == t_star:
            continue
        sign = w[t] * base
        if w[t] == 0.0 or base == 0.0:
            indeterminate.add(t)
            continue
        ratio = w[t_star] / w[t]
        if (sign > 0 and ratio < lam[t]) or (sign < 0 and ratio > lam[t]):
            collapsing.add(t)
    return CollapsePrediction(frozenset(collapsing), frozenset(indeterminate), lam)


def detect_collapse(a_clean, a_noisy, sparse_threshold: float = SPARSE_THRESHOLD) -> CollapseVerdict | None:
    """Compare argmaxes of a clean and perturbed distribution.

    Only sparse clean distributions (max >= ``sparse_threshold``) get a verdict.
    """
    a_clean = np.asarray(a_clean, dtype=np.float64)
    a_noisy = np.asarray(a_noisy, dtype=np.float64)
    if a_clean.max() < sparse_threshold:
        return None
    i, j = int(a_clean.argmax()), int(a_noisy.argmax())
    return CollapseVerdict(i, j, i != j, bool(a_noisy.max() >= sparse_threshold))


def interference_factor(x_parts: Sequence, reference_norms=None, tol: float = 1e-10) -> SeparabilityReport:
    """Common Pre-Norm factor ``1/|sum x_a|`` and the separability flags.

    ``reference_norms`` (one per part) enables the norm-constancy flag.
    """
    if len(x_parts) == 0:
        raise ValueError("need at least one part")
    parts = np.stack([np.asarray(p, dtype=np.float64) for p in x_parts])
    total = np.linalg.norm(parts.sum(axis=0))
    if total == 0:
        raise DegenerateInputError("parts sum to the zero vector")
    dots = parts @ parts.T
    norms = np.sqrt(np.diag(dots))
    off = dots[~np.eye(len(parts), dtype=bool)]
    orthogonal = bool(np.all(np.abs(off) <= tol))
    constant = None
    if reference_norms is not None:
        constant = bool(np.all(np.abs(norms - np.asarray(reference_norms, dtype=np.float64)) <= tol))
    return SeparabilityReport(1.0 / total, orthogonal, norms, dots, constant)


def _biased_weights(x, Y, h: HeadWeights, b_Q, b_K) -> np.ndarray:
    q = h.W_Q.data @ np.asarray(x) + b_Q
    K = np.asarray(Y) @ h.W_K.data.T + b_K
    return tn.softmax(K @ q).data


def bias_invariance_check(h: HeadWeights, b_K, instances: Iterable, b_Q=None, tol: float = 1e-12) -> bool:
    """True iff adding biases to q/k leaves the No-Norm attention unchanged.

    Each instance is an ``(x, Y)`` pair. A key bias only adds ``b_K . q`` to
    every score, which the softmax removes; a query bias generally does not.
    """
    if h.strategy.variant != "no-norm":
        raise ValueError("bias invariance is defined for the No-Norm strategy")
    n_qkv = h.W_Q.shape[0]
    b_K = np.zeros(n_qkv) if b_K is None else np.asarray(b_K, dtype=np.float64)
    b_Q = np.zeros(n_qkv) if b_Q is None else np.asarray(b_Q, dtype=np.float64)
    zero = np.zeros(n_qkv)
    for x, Y in instances:
        plain = _biased_weights(x, Y, h, zero, zero)
        biased = _biased_weights(x, Y, h, b_Q, b_K)
        if np.max(np.abs(plain - biased)) > tol:
            return False
    return True


def temperature_probe(w, kappa: float) -> Tensor:
    """``softmax(kappa * w)``; ``kappa`` acts as an inverse temperature."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return tn.softmax(_t(w) * kappa)


def entropy(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())
