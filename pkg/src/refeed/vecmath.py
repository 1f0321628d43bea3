"""Numerical kernels shared by retrieval and query distillation.

Stored vectors are float32; every reduction here runs in float64.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float32 array and reject non-finite entries."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def row_dots(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Dot product of every row with ``q``, accumulated in float64.

    Each row is reduced independently with the same summation order as
    :func:`dot`, so scores are bit-identical however the rows are chunked.
    """
    rows64 = np.asarray(rows, dtype=np.float64)
    q64 = np.asarray(q, dtype=np.float64)
    return np.multiply(rows64, q64).sum(axis=-1)


def dot(q, p) -> float:
    q = np.asarray(q)
    p = np.asarray(p)
    if q.shape != p.shape or q.ndim != 1:
        raise ValueError(
            f"dimension mismatch: len(q)={q.size}, len(p)={p.size}"
        )
    return float(row_dots(p[None, :], q)[0])


def min_max_normalize(scores) -> np.ndarray:
    """Rescale scores affinely onto [0, 1].

    A constant input maps to 0.5 everywhere, which yields a uniform softmax.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot normalize an empty score vector")
    lo = s.min()
    hi = s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with 0 * log(0 / q) taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _normalized_scores(
    raw: np.ndarray, normalize: bool, score_range: Optional[Tuple[float, float]]
) -> Tuple[np.ndarray, int, int, float]:
    """Apply the retriever-side score map; also return what the gradient needs."""
    if not normalize:
        return raw, -1, -1, 1.0
    if score_range is not None:
        lo, hi = score_range
        width = hi - lo
        if width == 0:
            return np.full_like(raw, 0.5), -1, -1, 0.0
        return (raw - lo) / width, -1, -1, width
    i_min = int(np.argmin(raw))
    i_max = int(np.argmax(raw))
    width = raw[i_max] - raw[i_min]
    if width == 0:
        return np.full_like(raw, 0.5), i_min, i_max, 0.0
    return (raw - raw[i_min]) / width, i_min, i_max, width


def loss_and_gradient(
    target: np.ndarray,
    query: np.ndarray,
    passages: np.ndarray,
    temperature: float = 1.0,
    normalize: bool = True,
    score_range: Optional[Tuple[float, float]] = None,
) -> Tuple[float, np.ndarray]:
    """KL(target || retriever distribution) and its gradient w.r.t. the query.

    ``passages`` is a (K, dim) float64 matrix. With ``normalize`` the raw
    scores go through min-max rescaling before the softmax; the argmin and
    argmax rows are held fixed at the current point, which is exact away
    from ties. Passing ``score_range`` freezes the rescaling to a fixed
    (min, max) pair instead of recomputing it from the current scores.
    """
    raw = passages @ query
    g, i_min, i_max, width = _normalized_scores(raw, normalize, score_range)
    r = softmax(g, temperature)
    loss = kl_divergence(target, r)

    # d loss / d normalized score
    u = (r - target) / temperature
    if not normalize:
        ds = u
    elif width == 0:
        return loss, np.zeros_like(query)
    elif i_min < 0:
        ds = u / width
    else:
        ds = u / width
        total = u.sum()
        weighted = float(u @ g)
        ds[i_min] += (weighted - total) / width
        ds[i_max] -= weighted / width
    return loss, passages.T @ ds


def _check_gradient_inputs(target, query, passages):
    P = np.asarray(passages, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("passages must be a non-empty sequence of vectors")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or P.shape[1] != q.size:
        raise ValueError(
            f"dimension mismatch: query has {q.size}, passages have {P.shape[1]}"
        )
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (P.shape[0],):
        raise ValueError(
            f"target length {t.size} does not match passage count {P.shape[0]}"
        )
    return t, q, P


def retriever_distribution(
    query, passages, temperature: float = 1.0, normalize: bool = True
) -> np.ndarray:
    _, q, P = _check_gradient_inputs(np.zeros(len(passages)), query, passages)
    raw = P @ q
    if normalize:
        raw = min_max_normalize(raw)
    return softmax(raw, temperature)


def distillation_loss(
    target, query, passages: Sequence, temperature: float = 1.0,
    normalize: bool = True,
) -> float:
    t, q, P = _check_gradient_inputs(target, query, passages)
    return kl_divergence(t, retriever_distribution(q, P, temperature, normalize))


def kl_gradient(
    target, query, passages: Sequence, temperature: float = 1.0,
    normalize: bool = True,
) -> np.ndarray:
    """Gradient of the distillation loss with respect to the query vector.

    Without normalization this is ``sum_i (r_i - target_i) / T * P_i`` where
    ``r`` is the retriever distribution.
    """
    t, q, P = _check_gradient_inputs(target, query, passages)
    return loss_and_gradient(t, q, P, temperature, normalize)[1]
