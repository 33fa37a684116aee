"""Corresponding-part assignment between (joint, side) slots and part labels.

Part labels are 0-based here (row indices of the segmentation matrices);
files and ground truth use 1-based labels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .distance import nearest
from .geom import slerp

MAX_PARTS = 6


class UnsupportedSharingError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    sigma: tuple  # sigma[j][i] -> part label

    @property
    def n_joints(self) -> int:
        return len(self.sigma)

    @property
    def share_counts(self) -> np.ndarray:
        flat = np.asarray(self.sigma).ravel()
        counts = np.bincount(flat)
        return counts[np.asarray(self.sigma)]

    def slots_of(self, part: int) -> list[tuple[int, int]]:
        return [(j, i) for j, row in enumerate(self.sigma) for i, p in enumerate(row) if p == part]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=int)


def is_valid(sigma, n_parts: int) -> bool:
    if any(row[0] == row[1] for row in sigma):
        return False
    return set(itertools.chain.from_iterable(sigma)) == set(range(n_parts))


def enumerate_assignments(n_parts: int, n_joints: int | None = None) -> list[Assignment]:
    """All slot->label tables with distinct labels per joint covering every part."""
    if n_joints is None:
        n_joints = n_parts - 1
    if n_parts < 2:
        raise ValueError("need at least two parts")
    if n_parts > MAX_PARTS:
        raise ValueError(f"enumeration limited to {MAX_PARTS} parts, got {n_parts}")
    out = []
    for flat in itertools.product(range(n_parts), repeat=2 * n_joints):
        sigma = tuple(tuple(flat[2 * j : 2 * j + 2]) for j in range(n_joints))
        if is_valid(sigma, n_parts):
            out.append(Assignment(sigma))
    return out


def assignment_objective(assign: Assignment, slot_dists: np.ndarray, w_x: np.ndarray) -> float:
    """``sum_{j,i} CD(Z_ji, Y, W_x[sigma(j,i)]) / b_ji`` from cached NN distances.

    ``slot_dists[j, i]`` holds the nearest-neighbour distances of ``Z_ji`` to ``Y``.
    """
    b = assign.share_counts
    n = slot_dists.shape[-1]
    total = 0.0
    for j, row in enumerate(assign.sigma):
        for i, p in enumerate(row):
            total += float(w_x[p] @ slot_dists[j, i]) / n / b[j, i]
    return total


def slot_nn_distances(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``z`` is ``(J, 2, N, 3)``; returns ``(J, 2, N)`` NN distances to ``y``."""
    out = np.empty(z.shape[:3])
    for j in range(z.shape[0]):
        for i in range(2):
            out[j, i] = nearest(z[j, i], y)[1]
    return out


def select_assignment(z: np.ndarray, y: np.ndarray, w_x: np.ndarray, candidates=None,
                      slot_dists: np.ndarray | None = None) -> Assignment:
    """Candidate minimizing the share-normalized segmentation-weighted CD; first wins ties."""
    n_parts = w_x.shape[0]
    if candidates is None:
        candidates = enumerate_assignments(n_parts, z.shape[0])
    if slot_dists is None:
        slot_dists = slot_nn_distances(z, y)
    best, best_val = candidates[0], assignment_objective(candidates[0], slot_dists, w_x)
    for cand in candidates[1:]:
        val = assignment_objective(cand, slot_dists, w_x)
        if val < best_val:
            best, best_val = cand, val
    return best


def fuse_shared_pose(poses):
    """Mean of one or two ``(R, t)`` poses: SLERP midpoint and arithmetic mean."""
    if len(poses) == 1:
        return poses[0]
    if len(poses) == 2:
        (r1, t1), (r2, t2) = poses
        return slerp(r1, r2, 0.5), (np.asarray(t1) + np.asarray(t2)) / 2.0
    raise UnsupportedSharingError(f"a part shared by {len(poses)} slots cannot be fused")
