"""Single-directional weighted Chamfer and density-aware Chamfer distances.

``weighted_cd(P, Q, w)   = 1/|P| sum_n w_n min_m |P_n - Q_m|``
``weighted_dcd(P, Q, w)  = 1/|P| sum_n w_n (1 - exp(-alpha d_n^2))``

The DCD exponent defaults to the squared distance (smooth at ``d = 0``);
``exponent="l2"`` selects the un-squared variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import fast_sq_dists

EXPONENTS = ("sq", "l2")
_CHUNK = 1 << 18


@dataclass
class DistanceGrad:
    d_source: np.ndarray
    d_weights: np.ndarray
    d_target: np.ndarray


def _check(p, q, w=None):
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if len(q) == 0:
        raise ValueError("target cloud is empty")
    if w is not None:
        w = np.asarray(w, dtype=float).reshape(-1)
        if len(w) != len(p):
            raise ValueError(f"weight length {len(w)} != source size {len(p)}")
    return p, q, w


def nearest(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and Euclidean distance of each ``p``'s nearest ``q`` (lowest index on ties)."""
    rows = max(1, _CHUNK // max(len(q), 1))
    idx = np.empty(len(p), dtype=np.intp)
    for s in range(0, len(p), rows):
        idx[s : s + rows] = np.argmin(fast_sq_dists(p[s : s + rows], q), axis=1)
    delta = p - q[idx]
    return idx, np.sqrt(np.einsum("ij,ij->i", delta, delta))


def mutual_nearest(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour indices in both directions from one distance matrix."""
    d2 = fast_sq_dists(p, q)
    return np.argmin(d2, axis=1), np.argmin(d2, axis=0)


def scatter_rows(idx: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[k]] += rows[k]`` for ``(K, 3)`` rows; summation order follows ``k``."""
    return np.stack([np.bincount(idx, weights=rows[:, c], minlength=n) for c in range(rows.shape[1])], axis=1)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def dcd_per_point(d: np.ndarray, alpha: float, exponent: str = "sq") -> np.ndarray:
    """Per-point ``1 - exp(-alpha d^2)`` (or ``-alpha d``), kept strictly below 1
    where the exponential underflows."""
    # alpha d^2 may overflow to inf for far points; expm1(-inf) = -1 is still right
    with np.errstate(over="ignore"):
        if exponent == "sq":
            return np.minimum(-np.expm1(-alpha * d * d), _BELOW_ONE)
        if exponent == "l2":
            return np.minimum(-np.expm1(-alpha * d), _BELOW_ONE)
    raise ValueError(f"unknown DCD exponent {exponent!r}; expected one of {EXPONENTS}")


def weighted_cd(p, q, w) -> float:
    p, q, w = _check(p, q, w)
    _, d = nearest(p, q)
    return float(w @ d) / len(p)


def weighted_dcd(p, q, w, alpha: float, exponent: str = "sq") -> float:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    p, q, w = _check(p, q, w)
    _, d = nearest(p, q)
    return float(w @ dcd_per_point(d, alpha, exponent)) / len(p)


def dcd_value_and_grad(p, q, w, alpha: float, exponent: str = "sq", idx=None):
    """Value plus gradients w.r.t. source, weights and target, with the
    nearest-neighbour assignment held fixed.

    Returns ``(value, d_source, d_weights, d_target, nn_index)``.
    """
    if idx is None:
        idx = nearest(p, q)[0]
    n = len(p)
    delta = p - q[idx]
    d = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    if exponent == "sq":
        e = np.exp(-alpha * d * d)
        coef = 2.0 * alpha * e
    elif exponent == "l2":
        e = np.exp(-alpha * d)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(d > 0, alpha * e / d, 0.0)
    else:
        raise ValueError(f"unknown DCD exponent {exponent!r}")
    per = dcd_per_point(d, alpha, exponent)
    d_source = (w * coef / n)[:, None] * delta
    d_target = scatter_rows(idx, -d_source, len(q))
    return float(w @ per) / n, d_source, per / n, d_target, idx


def weighted_dcd_grad(p, q, w, alpha: float, exponent: str = "sq") -> DistanceGrad:
    p, q, w = _check(p, q, w)
    _, gs, gw, gt, _ = dcd_value_and_grad(p, q, w, alpha, exponent)
    return DistanceGrad(gs, gw, gt)
