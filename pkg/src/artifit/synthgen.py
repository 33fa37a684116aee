"""Synthetic articulated objects built from boxes, with exact ground truth.

Every part is a union of axis-aligned boxes in a canonical frame. Joints move
a child part relative to its parent: revolute joints rotate about an axis
through a pivot, prismatic joints slide along the axis. Point labels are
1-based part indices; 0 marks outliers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from .articulation import PRISMATIC, REVOLUTE, JointSpec
from .cloud import PointCloud, save_cloud
from .geom import axis_angle_to_rotation

GT_HEADER = "# artifit ground truth v1"
HPR_RADIUS_FACTOR = 100.0


@dataclass(frozen=True)
class CategoryJoint:
    kind: str
    parent: int  # 0-based part index
    child: int
    pivot: tuple
    axis: tuple
    state_range: tuple  # (low, high) sampled uniformly


@dataclass(frozen=True)
class CategorySpec:
    """``boxes[p]`` lists ``(lo, hi)`` corners of the boxes forming part ``p``."""

    name: str
    boxes: tuple
    joints: tuple
    shared_part: int | None = None

    def __post_init__(self):
        if len(self.joints) != self.n_parts - 1:
            raise ValueError("a category needs exactly P - 1 joints")
        for jt in self.joints:
            if abs(np.linalg.norm(jt.axis) - 1.0) > 1e-12:
                raise ValueError("joint axes must be unit vectors")

    @property
    def n_parts(self) -> int:
        return len(self.boxes)

    @property
    def joint_specs(self) -> list[JointSpec]:
        return [JointSpec(jt.kind) for jt in self.joints]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_parts": self.n_parts,
            "shared_part": self.shared_part,
            "boxes": [[[list(lo), list(hi)] for lo, hi in part] for part in self.boxes],
            "joints": [
                {
                    "kind": jt.kind,
                    "parent": jt.parent,
                    "child": jt.child,
                    "pivot": list(jt.pivot),
                    "axis": list(jt.axis),
                    "state_range": list(jt.state_range),
                }
                for jt in self.joints
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategorySpec":
        boxes = tuple(tuple((tuple(lo), tuple(hi)) for lo, hi in part) for part in d["boxes"])
        joints = tuple(
            CategoryJoint(j["kind"], j["parent"], j["child"], tuple(j["pivot"]), tuple(j["axis"]),
                          tuple(j["state_range"]))
            for j in d["joints"]
        )
        return cls(d["name"], boxes, joints, d.get("shared_part"))


@dataclass
class GroundTruth:
    """Camera-frame part poses ``x = R p + t`` of canonical part points and joints."""

    labels: np.ndarray
    rotations: np.ndarray  # (P, 3, 3)
    translations: np.ndarray  # (P, 3)
    pivots: np.ndarray  # (J, 3)
    directions: np.ndarray  # (J, 3)
    states: np.ndarray  # (J,)
    kinds: list = field(default_factory=list)


def _slab(lo, hi):
    return (tuple(float(v) for v in lo), tuple(float(v) for v in hi))


def _open_box(lo, hi, t, open_face):
    """Five slabs of thickness ``t`` around ``[lo, hi]`` with one face left open."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    faces = {
        "-x": (lo, [lo[0] + t, hi[1], hi[2]]),
        "+x": ([hi[0] - t, lo[1], lo[2]], hi),
        "-y": (lo, [hi[0], lo[1] + t, hi[2]]),
        "+y": ([lo[0], hi[1] - t, lo[2]], hi),
        "-z": (lo, [hi[0], hi[1], lo[2] + t]),
        "+z": ([lo[0], lo[1], hi[2] - t], hi),
    }
    return tuple(_slab(a, b) for k, (a, b) in faces.items() if k != open_face)


def _laptop2() -> CategorySpec:
    base = (_slab([-0.30, -0.20, 0.0], [0.30, 0.20, 0.03]),)
    screen = (_slab([-0.28, 0.19, 0.03], [0.28, 0.20, 0.40]),)
    hinge = CategoryJoint(REVOLUTE, 0, 1, (0.0, 0.2, 0.03), (1.0, 0.0, 0.0), (-np.pi / 4, np.pi / 4))
    return CategorySpec("laptop2", (base, screen), (hinge,))


def _drawer2() -> CategorySpec:
    shell = _open_box([-0.30, -0.25, 0.0], [0.30, 0.25, 0.32], 0.02, "+x")
    drawer = (_slab([-0.24, -0.21, 0.03], [0.30, 0.21, 0.20]),)
    slide = CategoryJoint(PRISMATIC, 0, 1, (0.03, 0.0, 0.115), (1.0, 0.0, 0.0), (0.0, 0.15))
    return CategorySpec("drawer2", (shell, drawer), (slide,))


def _basket3() -> CategorySpec:
    body = _open_box([-0.30, -0.20, 0.0], [0.30, 0.20, 0.28], 0.02, "+z")
    left = (_slab([-0.29, -0.14, 0.28], [-0.27, 0.14, 0.48]),)
    right = (_slab([0.27, -0.10, 0.28], [0.29, 0.10, 0.42]),)
    j1 = CategoryJoint(REVOLUTE, 0, 1, (-0.28, 0.0, 0.28), (0.0, 1.0, 0.0), (-np.pi / 4, np.pi / 4))
    j2 = CategoryJoint(REVOLUTE, 0, 2, (0.28, 0.0, 0.28), (0.0, 1.0, 0.0), (-np.pi / 4, np.pi / 4))
    return CategorySpec("basket3", (body, left, right), (j1, j2), shared_part=0)


CATEGORIES = {"laptop2": _laptop2, "drawer2": _drawer2, "basket3": _basket3}


def category(name: str) -> CategorySpec:
    if name not in CATEGORIES:
        raise ValueError(f"unknown category {name!r}; choose from {sorted(CATEGORIES)}")
    return CATEGORIES[name]()


# -- sampling and kinematics --------------------------------------------------


def _box_faces(lo, hi):
    """Six faces as ``(origin, edge_u, edge_v)``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    out = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        eu, ev = np.zeros(3), np.zeros(3)
        eu[u], ev[v] = ext[u], ext[v]
        for side in (lo, hi):
            origin = lo.copy()
            origin[ax] = side[ax]
            out.append((origin, eu, ev))
    return out


def sample_canonical(spec: CategorySpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples of the rest configuration; labels are 1-based."""
    rng = np.random.default_rng(seed)
    faces, labels = [], []
    for p, part in enumerate(spec.boxes):
        for lo, hi in part:
            for f in _box_faces(lo, hi):
                faces.append(f)
                labels.append(p + 1)
    areas = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev in faces])
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 2))
    origin = np.array([faces[k][0] for k in pick])
    eu = np.array([faces[k][1] for k in pick])
    ev = np.array([faces[k][2] for k in pick])
    pts = origin + uv[:, :1] * eu + uv[:, 1:] * ev
    return pts, np.asarray(labels)[pick]


def joint_motion(jt: CategoryJoint, state: float) -> tuple[np.ndarray, np.ndarray]:
    """Child motion ``x -> R x + t`` in the parent's frame."""
    axis, pivot = np.asarray(jt.axis, float), np.asarray(jt.pivot, float)
    if jt.kind == REVOLUTE:
        rot = axis_angle_to_rotation(axis * state)
        return rot, pivot - rot @ pivot
    return np.eye(3), axis * state


def part_poses(spec: CategorySpec, states, rotation, translation):
    """Per-part camera poses ``(R_p, t_p)`` and camera-frame joint pivots and directions."""
    n = spec.n_parts
    rots, trans = [None] * n, [None] * n
    roots = set(range(n)) - {jt.child for jt in spec.joints}
    for r in roots:
        rots[r], trans[r] = np.asarray(rotation, float), np.asarray(translation, float)
    pivots, dirs = np.zeros((len(spec.joints), 3)), np.zeros((len(spec.joints), 3))
    pending = list(range(len(spec.joints)))
    while pending:
        progressed = False
        for j in list(pending):
            jt = spec.joints[j]
            if rots[jt.parent] is None:
                continue
            rp, tp = rots[jt.parent], trans[jt.parent]
            rm, tm = joint_motion(jt, states[j])
            rots[jt.child] = rp @ rm
            trans[jt.child] = rp @ tm + tp
            pivots[j] = rp @ np.asarray(jt.pivot, float) + tp
            dirs[j] = rp @ np.asarray(jt.axis, float)
            pending.remove(j)
            progressed = True
        if not progressed:
            raise ValueError("joint graph does not form a tree")
    return np.stack(rots), np.stack(trans), pivots, dirs


def _check_states(spec: CategorySpec, states) -> np.ndarray:
    states = np.asarray(states, dtype=float).reshape(-1)
    if len(states) != len(spec.joints):
        raise ValueError(f"expected {len(spec.joints)} joint states, got {len(states)}")
    for jt, a in zip(spec.joints, states):
        lo, hi = jt.state_range
        if not lo <= a <= hi:
            raise ValueError(f"joint state {a} outside range [{lo}, {hi}]")
    return states


def gen_instance(spec: CategorySpec, states, rotation=None, translation=None, n_points: int = 256,
                 seed: int = 0) -> tuple[PointCloud, GroundTruth]:
    """Noise-free articulated instance and its ground truth."""
    states = _check_states(spec, states)
    rotation = np.eye(3) if rotation is None else np.asarray(rotation, float)
    translation = np.zeros(3) if translation is None else np.asarray(translation, float)
    can, labels = sample_canonical(spec, n_points, seed)
    rots, trans, pivots, dirs = part_poses(spec, states, rotation, translation)
    pts = np.empty_like(can)
    for p in range(spec.n_parts):
        m = labels == p + 1
        pts[m] = can[m] @ rots[p].T + trans[p]
    gt = GroundTruth(labels.copy(), rots, trans, pivots, dirs, states.copy(), [jt.kind for jt in spec.joints])
    return PointCloud(pts, labels), gt


def partial_view(cloud: PointCloud, viewpoint) -> PointCloud:
    """Points visible from ``viewpoint`` by spherical flipping and a convex hull."""
    if len(cloud) <= 3:
        raise ValueError("hidden point removal needs more than 3 points")
    idx = visible_indices(cloud.points, viewpoint)
    return cloud.subset(idx)


def visible_indices(points: np.ndarray, viewpoint) -> np.ndarray:
    """Sorted indices of the points kept by hidden point removal.

    The flip radius scales with the farthest remaining point, so one pass on
    its own output can drop a few more points. Passes are repeated until the
    set is stable, which makes the result a fixed point (idempotent).
    """
    viewpoint = np.asarray(viewpoint, float)
    centre = points.mean(axis=0)
    if np.linalg.norm(viewpoint - centre) <= np.linalg.norm(points - centre, axis=1).max():
        raise ValueError("viewpoint must lie outside the bounding sphere of the cloud")
    idx = np.arange(len(points))
    while True:
        keep = idx[_hpr_pass(points[idx], viewpoint)]
        if len(keep) == len(idx) or len(keep) <= 3:
            return keep
        idx = keep


def _hpr_pass(points, viewpoint):
    p = points - viewpoint
    norm = np.linalg.norm(p, axis=1, keepdims=True)
    radius = HPR_RADIUS_FACTOR * norm.max()
    flipped = p + 2.0 * (radius - norm) * p / norm
    hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    return np.sort(hull.vertices[hull.vertices < len(points)])


# -- ground-truth files ---------------------------------------------------------


def write_gt(gt: GroundTruth, path) -> None:
    lines = [GT_HEADER, f"parts {len(gt.rotations)}"]
    for r, t in zip(gt.rotations, gt.translations):
        lines.append("pose " + " ".join(f"{v:.17g}" for v in [*r.ravel(), *t]))
    lines.append(f"joints {len(gt.states)}")
    for k in range(len(gt.states)):
        vals = [*gt.pivots[k], *gt.directions[k], gt.states[k]]
        lines.append(f"joint {gt.kinds[k]} " + " ".join(f"{v:.17g}" for v in vals))
    lines.append(f"labels {len(gt.labels)}")
    lines.extend(str(int(v)) for v in gt.labels)
    Path(path).write_text("\n".join(lines) + "\n")


def read_gt(path) -> GroundTruth:
    path = Path(path)
    rows = [ln.split() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    try:
        it = iter(rows)
        n_parts = int(next(it)[1])
        poses = [np.array(next(it)[1:], dtype=float) for _ in range(n_parts)]
        n_joints = int(next(it)[1])
        joints, kinds = [], []
        for _ in range(n_joints):
            row = next(it)
            kinds.append(row[1])
            joints.append(np.array(row[2:], dtype=float))
        n_labels = int(next(it)[1])
        labels = np.array([int(next(it)[0]) for _ in range(n_labels)])
    except (StopIteration, ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed ground-truth file ({exc})") from exc
    if any(len(p) != 12 for p in poses) or any(len(j) != 7 for j in joints):
        raise ValueError(f"{path}: pose rows need 12 values and joint rows 7")
    joints = np.array(joints).reshape(-1, 7)
    return GroundTruth(
        labels,
        np.array([p[:9].reshape(3, 3) for p in poses]),
        np.array([p[9:] for p in poses]),
        joints[:, :3],
        joints[:, 3:6],
        joints[:, 6],
        kinds,
    )


# -- datasets -------------------------------------------------------------------


def _random_pose(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return axis_angle_to_rotation(axis * angle), rng.normal(scale=0.2, size=3)


def _viewpoint(rng, rotation, centre, radius):
    """Camera above the object: azimuth uniform, elevation in [15, 60] degrees."""
    az = rng.uniform(0.0, 2 * np.pi)
    el = np.deg2rad(rng.uniform(15.0, 60.0))
    d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return centre + 3.0 * radius * (rotation @ d)


def _add_outliers(pts, labels, rate, rng):
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.1 * (hi - lo)
    mask = rng.random(len(pts)) < rate
    pts = pts.copy()
    labels = labels.copy()
    pts[mask] = rng.uniform(lo - pad, hi + pad, size=(int(mask.sum()), 3))
    labels[mask] = 0
    return pts, labels


def make_instance(spec: CategorySpec, seed_seq, n_points=256, partial=False, outlier_rate=0.0,
                  noise_std=0.0, max_rotation_deg=45.0):
    """One randomized instance; returns ``(cloud, gt, viewpoint or None)``."""
    rng = np.random.default_rng(seed_seq)
    states = np.array([rng.uniform(*jt.state_range) for jt in spec.joints])
    rot, trans = _random_pose(rng, np.deg2rad(max_rotation_deg))
    dense = 8 * n_points if partial else n_points
    cloud, gt = gen_instance(spec, states, rot, trans, dense, int(rng.integers(2**31)))
    viewpoint = None
    if partial:
        centre = cloud.points.mean(axis=0)
        radius = np.linalg.norm(cloud.points - centre, axis=1).max()
        viewpoint = _viewpoint(rng, rot, centre, radius)
        cloud = partial_view(cloud, viewpoint)
        # fewer visible points than requested: keep all, repeat some
        if len(cloud) >= n_points:
            keep = np.sort(rng.choice(len(cloud), size=n_points, replace=False))
        else:
            keep = np.concatenate([np.arange(len(cloud)), rng.integers(0, len(cloud), n_points - len(cloud))])
        cloud = cloud.subset(keep)
    pts, labels = cloud.points, cloud.labels
    if noise_std > 0:
        pts = pts + rng.normal(scale=noise_std, size=pts.shape)
    if outlier_rate > 0:
        pts, labels = _add_outliers(pts, labels, outlier_rate, rng)
    gt.labels = labels.copy()
    return PointCloud(pts, labels), gt, viewpoint


def gen_dataset(spec: CategorySpec, count: int, seed: int, out_dir, partial: bool = False,
                outlier_rate: float = 0.0, noise_std: float = 0.0, n_points: int = 256,
                max_rotation_deg: float = 45.0) -> dict:
    """Write ``count`` clouds, ground-truth files and ``manifest.json`` into ``out_dir``."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError("outlier_rate must lie in [0, 1)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(count)
    instances = []
    for i in range(count):
        cloud, gt, vp = make_instance(spec, seeds[i], n_points, partial, outlier_rate, noise_std, max_rotation_deg)
        cloud_path, gt_path = f"{i:04d}.ply", f"{i:04d}.gt.txt"
        save_cloud(cloud, out / cloud_path)
        write_gt(gt, out / gt_path)
        instances.append({
            "cloud_path": cloud_path,
            "gt_path": gt_path,
            "joint_states": [float(a) for a in gt.states],
            "viewpoint": None if vp is None else [float(v) for v in vp],
        })
    manifest = {
        "category": spec.name,
        "spec": spec.to_dict(),
        "generator": {
            "seed": seed,
            "partial": partial,
            "outlier_rate": outlier_rate,
            "noise_std": noise_std,
            "n_points": n_points,
            "max_rotation_deg": max_rotation_deg,
        },
        "instances": instances,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed manifest ({exc})") from exc
    manifest["root"] = str(path.parent)
    return manifest
