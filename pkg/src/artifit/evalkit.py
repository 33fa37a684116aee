"""Evaluation: common-pose calibration, per-part and per-joint errors,
segmentation IoU under label permutation, and mAP tables.

Pose convention: a part pose ``(R, t)`` maps canonical part coordinates to
the camera frame, ``x = R p + t``.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import rotation_angle_between, slerp

ROT_THRESHOLDS = (5.0, 10.0, 15.0)
TRANS_THRESHOLDS = (0.05, 0.10, 0.15)
IOU_THRESHOLDS = (0.50, 0.75)
REPORT_COLUMNS = ("category", "metric_family", "threshold", "value")
RANSAC_TRIALS = 100
RANSAC_SAMPLE = 4


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class MetricThresholds:
    rotation: tuple = ROT_THRESHOLDS
    translation: tuple = TRANS_THRESHOLDS
    iou: tuple = IOU_THRESHOLDS

    def __post_init__(self):
        if len(self.rotation) != len(self.translation):
            raise ValueError("rotation and translation thresholds come in pairs")
        for seq in (self.rotation, self.translation, self.iou):
            if list(seq) != sorted(seq):
                raise ValueError("thresholds must be sorted ascending")


@dataclass
class PosePrediction:
    """Camera-frame prediction for one instance."""

    rotations: np.ndarray  # (P, 3, 3)
    translations: np.ndarray  # (P, 3)
    pivots: np.ndarray  # (J, 3)
    directions: np.ndarray  # (J, 3)
    probs: np.ndarray  # (P, N) columns sum to one
    kinds: list = field(default_factory=list)
    joint_parts: list | None = None  # per joint: pair of 0-based part labels


# -- common pose ---------------------------------------------------------------


def chain_mean(rotations, translations):
    """Mean of a few poses: ((r1 + r2) + r3) + r4 by SLERP with weights 1/2, 1/3, 1/4."""
    r = rotations[0]
    for k in range(1, len(rotations)):
        r = slerp(r, rotations[k], 1.0 / (k + 1))
    return r, np.mean(translations, axis=0)


def pose_score(rot, trans, rotations, translations) -> float:
    """Summed rotation error (radians) plus translation error over samples."""
    s = 0.0
    for r, t in zip(rotations, translations):
        s += rotation_angle_between(rot, r) + float(np.linalg.norm(trans - t))
    return s


def ransac_common_pose(rotations, translations, seed: int = 0, trials: int = RANSAC_TRIALS):
    """Per-part common pose from per-sample estimates.

    ``rotations`` is ``(S, P, 3, 3)`` and ``translations`` ``(S, P, 3)``. Each
    trial averages four random samples per part and is scored over every
    sample and part; the best trial's means are returned together with all
    trial scores.
    """
    rotations = np.asarray(rotations, dtype=float)
    translations = np.asarray(translations, dtype=float)
    n_samples, n_parts = rotations.shape[:2]
    if n_samples < RANSAC_SAMPLE:
        raise InsufficientDataError(f"common-pose calibration needs >= {RANSAC_SAMPLE} samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    best, best_score, scores = None, np.inf, []
    for _ in range(trials):
        pick = rng.choice(n_samples, size=RANSAC_SAMPLE, replace=False)
        means = [chain_mean(rotations[pick, p], translations[pick, p]) for p in range(n_parts)]
        score = sum(pose_score(r, t, rotations[:, p], translations[:, p]) for p, (r, t) in enumerate(means))
        scores.append(score)
        if score < best_score:
            best, best_score = means, score
    return np.stack([r for r, _ in best]), np.stack([t for _, t in best]), np.array(scores)


# -- errors ------------------------------------------------------------------------


def part_pose_error(pred_rot, pred_trans, gt_rot, gt_trans) -> tuple[np.ndarray, np.ndarray]:
    """Per-part rotation error in degrees and translation distance."""
    pred_rot, gt_rot = np.asarray(pred_rot, float), np.asarray(gt_rot, float)
    if pred_rot.shape != gt_rot.shape:
        raise ValueError(f"part count mismatch: {pred_rot.shape[0]} predicted vs {gt_rot.shape[0]}")
    rot = np.array([np.degrees(rotation_angle_between(a, b)) for a, b in zip(pred_rot, gt_rot)])
    trans = np.linalg.norm(np.asarray(pred_trans, float) - np.asarray(gt_trans, float), axis=1)
    return rot, trans


def joint_error(pred_pivot, pred_dir, gt_pivot, gt_dir, kind: str = "revolute", fold: bool = True):
    """``(direction degrees, pivot distance or None)``.

    Direction error is folded into [0, 90] because an axis and its negation
    describe the same joint. Pivot error is the distance from the predicted
    pivot to the ground-truth joint line; prismatic joints have none.
    """
    a = np.asarray(pred_dir, float)
    b = np.asarray(gt_dir, float)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    c = float(np.clip(a @ b, -1.0, 1.0))
    ang = np.degrees(np.arccos(abs(c) if fold else c))
    if kind != "revolute":
        return ang, None
    off = np.asarray(pred_pivot, float) - np.asarray(gt_pivot, float)
    return ang, float(np.linalg.norm(off - (off @ b) * b))


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """0-based argmax per point; ties go to the lowest part index."""
    return np.argmax(np.asarray(probs), axis=0)


def segmentation_iou(probs, gt_labels):
    """``(per-part IoU, mean IoU, permutation)``; ``perm[g]`` is the predicted
    label matched to ground-truth part ``g + 1``. Outliers (label 0) are excluded."""
    pred = hard_labels(probs)
    gt = np.asarray(gt_labels)
    keep = gt > 0
    pred, gt = pred[keep], gt[keep] - 1
    n_parts = np.asarray(probs).shape[0]
    inter = np.zeros((n_parts, n_parts))
    np.add.at(inter, (gt, pred), 1.0)
    gt_count, pred_count = inter.sum(axis=1), inter.sum(axis=0)
    best, best_mean, best_ious = None, -1.0, None
    for perm in itertools.permutations(range(n_parts)):
        ious = np.empty(n_parts)
        for g, p in enumerate(perm):
            union = gt_count[g] + pred_count[p] - inter[g, p]
            ious[g] = inter[g, p] / union if union > 0 else 1.0
        if ious.mean() > best_mean:
            best, best_mean, best_ious = perm, float(ious.mean()), ious
    return best_ious, best_mean, tuple(best)


# -- relative to absolute ----------------------------------------------------------------


def relative_part_poses(fitted):
    """Camera maps of the reconstruction frame per predicted part.

    For part ``p`` the input is carried to the reconstruction by
    ``y = s A R_o x + c``; the inverse ``x = M y + u`` has ``M = (A R_o)^T / s``.
    Returns rotations ``(A R_o)^T``, scales ``1/s`` and offsets ``u``.
    """
    rec = fitted.record
    rots, scales, offs = [], [], []
    for a, b in fitted.part_maps:
        m = a @ fitted.r_o
        c = a @ (fitted.t_o - rec.scale * (fitted.r_o @ rec.offset)) + b
        rots.append(m.T)
        scales.append(1.0 / rec.scale)
        offs.append(-(m.T @ c) / rec.scale)
    return np.stack(rots), np.array(scales), np.stack(offs)


def common_pose_samples(fitted, gt_rot, gt_trans, perm):
    """Per-sample common pose estimates ``C_g`` with ``GT_g = M_p o C_g``, ``p = perm[g]``."""
    rots, scales, offs = relative_part_poses(fitted)
    c_rot, c_trans = [], []
    for g, p in enumerate(perm):
        c_rot.append(rots[p].T @ gt_rot[g])
        c_trans.append(rots[p].T @ (gt_trans[g] - offs[p]) / scales[p])
    return np.stack(c_rot), np.stack(c_trans)


def relative_to_absolute(fitted, common_rot, common_trans, kinds=None) -> PosePrediction:
    """Compose fitted relative maps with calibrated common poses (indexed by
    predicted part) and return camera-frame poses and joints in input units."""
    if common_rot is None or common_trans is None:
        raise ValueError("missing common-pose calibration")
    rots, scales, offs = relative_part_poses(fitted)
    n = len(rots)
    out_r = np.stack([rots[p] @ common_rot[p] for p in range(n)])
    out_t = np.stack([scales[p] * (rots[p] @ common_trans[p]) + offs[p] for p in range(n)])
    rec = fitted.record
    piv = np.stack([rec.invert((c - fitted.t_o) @ fitted.r_o) for c in fitted.pivots]) if len(fitted.pivots) else np.zeros((0, 3))
    dirs = fitted.directions @ fitted.r_o
    return PosePrediction(out_r, out_t, piv, dirs, fitted.seg_probs, list(kinds or []),
                          [tuple(row) for row in fitted.assign.sigma])


# -- tables -----------------------------------------------------------------------------


@dataclass
class InstanceErrors:
    mean_iou: float
    rot_deg: float  # mean over parts
    trans: float
    dir_deg: float  # mean over joints
    pivot: float | None  # mean over revolute joints, None when all prismatic


def match_joints(pred_parts, gt_parts, perm) -> list[int]:
    """Ground-truth joint index for each predicted joint via the part permutation."""
    inv = {p: g for g, p in enumerate(perm)}
    out = []
    for j, pair in enumerate(pred_parts or []):
        want = {inv[pair[0]], inv[pair[1]]}
        hit = [k for k, gp in enumerate(gt_parts) if set(gp) == want]
        out.append(hit[0] if hit else j)
    return out


def instance_errors(pred: PosePrediction, gt, gt_joint_parts=None, fold: bool = True) -> InstanceErrors:
    """Errors of one instance; predicted parts are permuted by the IoU-optimal matching."""
    _, miou, perm = segmentation_iou(pred.probs, gt.labels)
    perm = list(perm)
    rot, trans = part_pose_error(pred.rotations[perm], pred.translations[perm], gt.rotations, gt.translations)
    n_joints = len(gt.states)
    if gt_joint_parts is None or pred.joint_parts is None:
        pairs = list(range(n_joints))
    else:
        pairs = match_joints(pred.joint_parts, gt_joint_parts, perm)
    dirs, pivs = [], []
    for j in range(n_joints):
        k = pairs[j]
        d, p = joint_error(pred.pivots[j], pred.directions[j], gt.pivots[k], gt.directions[k], gt.kinds[k], fold)
        dirs.append(d)
        if p is not None:
            pivs.append(p)
    return InstanceErrors(miou, float(rot.mean()), float(trans.mean()), float(np.mean(dirs)) if dirs else 0.0,
                          float(np.mean(pivs)) if pivs else None)


def map_table(errors: list[InstanceErrors], thresholds: MetricThresholds = MetricThresholds()) -> list[tuple]:
    """Rows ``(metric_family, threshold, value)``; values are percentages except the means."""
    if not errors:
        raise ValueError("map_table needs at least one instance")
    n = len(errors)
    rows = []
    ious = np.array([e.mean_iou for e in errors])
    rows.append(("Segmentation", "mIoU", float(100.0 * ious.mean())))
    for t in thresholds.iou:
        rows.append(("Segmentation", f"IoU{int(round(t * 100))}", float(100.0 * np.sum(ious >= t) / n)))
    for r, t in zip(thresholds.rotation, thresholds.translation):
        ok = sum(e.dir_deg < r and (e.pivot is None or e.pivot < t) for e in errors)
        rows.append(("Joint", _pose_label(r, t), 100.0 * ok / n))
    rows.append(("Joint", "mean_direction_deg", float(np.mean([e.dir_deg for e in errors]))))
    pivs = [e.pivot for e in errors if e.pivot is not None]
    if pivs:
        rows.append(("Joint", "mean_pivot", float(np.mean(pivs))))
    for r, t in zip(thresholds.rotation, thresholds.translation):
        ok = sum(e.rot_deg < r and e.trans < t for e in errors)
        rows.append(("Part", _pose_label(r, t), 100.0 * ok / n))
    rows.append(("Part", "mean_rotation_deg", float(np.mean([e.rot_deg for e in errors]))))
    rows.append(("Part", "mean_translation", float(np.mean([e.trans for e in errors]))))
    return rows


def _pose_label(rot: float, trans: float) -> str:
    return f"{rot:g}deg_{trans * 100:g}cm"


def emit_report(table, path, fmt: str = "csv", category: str = "") -> None:
    """Write ``(metric_family, threshold, value)`` rows as CSV or JSON."""
    rows = [{"category": category, "metric_family": f, "threshold": t, "value": v} for f, t, v in table]
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({**r, "value": repr(float(r["value"]))})
    elif fmt == "json":
        path.write_text(json.dumps({"columns": list(REPORT_COLUMNS), "rows": rows}, indent=1) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())["rows"]
    with path.open(newline="") as fh:
        return [{**r, "value": float(r["value"])} for r in csv.DictReader(fh)]
