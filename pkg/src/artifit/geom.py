"""Rotation algebra, the icosahedral anchor group, SLERP and exact KNN.

Rotations are plain ``(3, 3)`` float arrays; point clouds are ``(N, 3)``.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

_SMALL_ANGLE = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_rotation(r: np.ndarray) -> np.ndarray:
    """Rodrigues map from a rotation vector (axis * angle) to a matrix."""
    r = np.asarray(r, dtype=float)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    k = skew(r)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_jacobian(r: np.ndarray) -> np.ndarray:
    """Derivatives ``dR/dr_i`` of :func:`axis_angle_to_rotation`, shape (3, 3, 3).

    Closed form of Gallego & Yezzi (2015); a second-order series is used
    near the origin where the closed form cancels catastrophically.
    """
    r = np.asarray(r, dtype=float)
    theta2 = float(r @ r)
    eye = np.eye(3)
    out = np.empty((3, 3, 3))
    if theta2 < _SMALL_ANGLE**2:
        kr = skew(r)
        for i in range(3):
            ki = skew(eye[i])
            out[i] = ki + 0.5 * (ki @ kr + kr @ ki)
        return out
    rot = axis_angle_to_rotation(r)
    kr = skew(r)
    im_r = eye - rot
    for i in range(3):
        out[i] = (r[i] * kr + skew(np.cross(r, im_r[:, i]))) @ rot / theta2
    return out


def rotation_to_quaternion(m: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``.

    When ``w == 0`` (a half-turn) the sign is fixed so that the first
    nonzero vector component is positive.
    """
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    if abs(q[0]) < 1e-15:
        q[0] = 0.0
        nz = np.flatnonzero(np.abs(q[1:]) > 1e-15)
        if nz.size and q[1 + nz[0]] < 0:
            q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_axis_angle(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`axis_angle_to_rotation` with angle in ``[0, pi]``."""
    q = rotation_to_quaternion(m)
    vn = np.linalg.norm(q[1:])
    if vn < 1e-300:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(vn, q[0])
    return q[1:] / vn * angle


def rotation_angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle of ``a @ b.T`` in radians, within ``[0, pi]``.

    Same value as ``arccos((trace - 1) / 2)`` but through ``atan2`` of the
    sine (from the skew part) and cosine, which keeps full precision near 0 and pi.
    """
    m = a @ b.T
    c = (np.trace(m) - 1.0) / 2.0
    s = 0.5 * np.sqrt((m[2, 1] - m[1, 2]) ** 2 + (m[0, 2] - m[2, 0]) ** 2 + (m[1, 0] - m[0, 1]) ** 2)
    return float(np.arctan2(s, c))


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Geodesic interpolation from ``a`` (t=0) to ``b`` (t=1).

    For antipodal inputs the relative half-turn axis is chosen by the
    quaternion sign rule of :func:`rotation_to_quaternion`.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"slerp parameter t={t} outside [0, 1]")
    if t == 0.0:
        return np.array(a, dtype=float)
    if t == 1.0:
        return np.array(b, dtype=float)
    rel = rotation_to_axis_angle(a.T @ b)
    return a @ axis_angle_to_rotation(t * rel)


def rot_x(angle: float) -> np.ndarray:
    return axis_angle_to_rotation(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> np.ndarray:
    return axis_angle_to_rotation(np.array([0.0, angle, 0.0]))


def rot_z(angle: float) -> np.ndarray:
    return axis_angle_to_rotation(np.array([0.0, 0.0, angle]))


@lru_cache(maxsize=1)
def _anchor_table() -> np.ndarray:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    # 5-fold axis through vertex (0, 1, phi) and the 2-fold z axis generate the group.
    vertex = np.array([0.0, 1.0, phi])
    gens = [
        axis_angle_to_rotation(vertex / np.linalg.norm(vertex) * (2 * np.pi / 5)),
        axis_angle_to_rotation(np.array([0.0, 0.0, np.pi])),
    ]
    found = {_key(np.eye(3)): np.eye(3)}
    frontier = [np.eye(3)]
    while frontier:
        nxt = []
        for m, g in itertools.product(frontier, gens):
            p = g @ m
            k = _key(p)
            if k not in found:
                found[k] = p
                nxt.append(p)
        frontier = nxt
    if len(found) != 60:
        raise RuntimeError(f"icosahedral closure produced {len(found)} elements")
    mats = [found[k] for k in sorted(found)]
    out = np.stack(mats)
    out.setflags(write=False)
    return out


def _key(m: np.ndarray) -> tuple:
    return tuple(np.round(m, 8).ravel() + 0.0)


def icosahedral_anchors() -> np.ndarray:
    """The 60 rotations of the icosahedral group as a ``(60, 3, 3)`` array.

    Ordering is lexicographic in the (rounded) matrix entries, so anchor
    indices are stable across runs and platforms.
    """
    return _anchor_table().copy()


def pairwise_sq_dists(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, shape ``(len(p), len(q))``."""
    diff = p[:, None, :] - q[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def fast_sq_dists(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances through ``|p|^2 + |q|^2 - 2 p.q`` (BLAS); only for ranking."""
    d2 = (p * p).sum(axis=1)[:, None] + (q * q).sum(axis=1)[None, :] - 2.0 * (p @ q.T)
    return np.maximum(d2, 0.0, out=d2)


def knn(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact K nearest neighbours of every point among the cloud itself.

    The query point is always rank 1 (distance 0); remaining ties are broken
    by lowest index. Returns ``(indices, distances)``, both ``(N, K)``.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if k > n or k < 1:
        raise ValueError(f"knn needs 1 <= K <= N, got K={k}, N={n}")
    d2 = fast_sq_dists(points, points)
    np.fill_diagonal(d2, -1.0)
    rows = np.arange(n)[:, None]
    if k < n:
        ap = np.argpartition(d2, k, axis=1)
        part = np.sort(ap[:, :k], axis=1)
        nxt = d2[rows[:, 0], ap[:, k]]
    else:
        part = np.broadcast_to(np.arange(n), (n, n)).copy()
    # exact distances for the candidates; a stable sort of index-ordered
    # candidates breaks distance ties by lowest index
    delta = points[:, None, :] - points[part]
    exact = np.einsum("ijk,ijk->ij", delta, delta)
    exact[part == rows] = -1.0
    order = np.argsort(exact, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)
    exact = np.take_along_axis(exact, order, axis=1)
    if k < n:
        # rows whose k-th distance is tied with an unselected point: redo exactly
        tol = 1e-10 * (1.0 + float((points * points).sum(axis=1).max()))
        for r in np.flatnonzero(nxt <= exact[:, -1] + tol):
            full = pairwise_sq_dists(points[r : r + 1], points)[0]
            full[r] = -1.0
            idx[r] = np.argsort(full, kind="stable")[:k]
            exact[r] = full[idx[r]]
    exact[:, 0] = 0.0
    return idx, np.sqrt(np.maximum(exact, 0.0))
