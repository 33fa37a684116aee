"""Point-cloud container, normalization, augmentation, sampling and file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import quaternion_to_rotation


class CloudParseError(ValueError):
    """Malformed point file; ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class DegenerateCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    """``points`` is ``(N, 3)``; ``labels`` (optional) is ``(N,)`` ints, 0 marks outliers."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("labels and points differ in length")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        labels = None if self.labels is None else self.labels[idx]
        return PointCloud(self.points[idx], labels)


@dataclass(frozen=True)
class NormalizationRecord:
    """``normalized = (original - offset) * scale``."""

    offset: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.offset) * self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) / self.scale + self.offset

    def to_dict(self) -> dict:
        return {"offset": [float(v) for v in self.offset], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        return cls(np.asarray(d["offset"], dtype=float), float(d["scale"]))


def normalize(cloud: PointCloud, target_radius: float = 0.5) -> tuple[PointCloud, NormalizationRecord]:
    """Center on the mean and scale so the mean distance to the origin is ``target_radius``."""
    if len(cloud) < 2:
        raise DegenerateCloudError("normalization needs at least two points")
    offset = cloud.points.mean(axis=0)
    centered = cloud.points - offset
    radius = np.linalg.norm(centered, axis=1).mean()
    if not radius > 0:
        raise DegenerateCloudError("all points coincide")
    rec = NormalizationRecord(offset, target_radius / radius)
    return PointCloud(centered * rec.scale, cloud.labels), rec


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized 4D Gaussian (uniform unit quaternion)."""
    q = rng.standard_normal(4)
    return quaternion_to_rotation(q / np.linalg.norm(q))


def augment(cloud: PointCloud, seed: int, noise_std: float, rotate: bool = True) -> PointCloud:
    """Random rotation about the origin followed by i.i.d. Gaussian jitter."""
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    if rotate:
        pts = pts @ random_rotation(rng).T
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    return PointCloud(pts, cloud.labels)


def sample_points(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Draw ``n`` points. Without replacement when ``n <= N``; otherwise every
    point is kept once and the remainder is drawn with replacement."""
    if n <= 0:
        raise ValueError("sample size must be positive")
    rng = np.random.default_rng(seed)
    total = len(cloud)
    if n <= total:
        idx = rng.choice(total, size=n, replace=False)
    else:
        idx = np.concatenate([rng.permutation(total), rng.integers(0, total, size=n - total)])
    return cloud.subset(idx)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_cloud(cloud: PointCloud, path) -> None:
    """Write ASCII PLY (``.ply``) or CSV (anything else)."""
    path = Path(path)
    lines = []
    if path.suffix.lower() == ".ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        lines += ["property double x", "property double y", "property double z"]
        if cloud.labels is not None:
            lines.append("property int label")
        lines.append("end_header")
        sep = " "
    else:
        lines.append("# x,y,z" + (",label" if cloud.labels is not None else ""))
        sep = ","
    for k, p in enumerate(cloud.points):
        row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2])]
        if cloud.labels is not None:
            row.append(str(int(cloud.labels[k])))
        lines.append(sep.join(row))
    path.write_text("\n".join(lines) + "\n")


def load_cloud(path) -> PointCloud:
    path = Path(path)
    text = path.read_text().splitlines()
    if text and text[0].strip() == "ply":
        return _load_ply(path, text)
    return _load_csv(path, text)


def _parse_row(path, lineno, tokens, with_label):
    want = 4 if with_label else 3
    if len(tokens) != want:
        raise CloudParseError(path, lineno, f"expected {want} values, got {len(tokens)}")
    try:
        xyz = [float(t) for t in tokens[:3]]
        label = int(tokens[3]) if with_label else None
    except ValueError as exc:
        raise CloudParseError(path, lineno, f"non-numeric token ({exc})") from None
    return xyz, label


def _load_ply(path, text) -> PointCloud:
    n_vertex = None
    props = []
    lineno = 1
    for lineno, line in enumerate(text[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise CloudParseError(path, lineno, "only 'format ascii 1.0' is supported")
        elif tok[0] == "element":
            if tok[1] != "vertex" or n_vertex is not None:
                raise CloudParseError(path, lineno, "only a single vertex element is supported")
            try:
                n_vertex = int(tok[2])
            except (IndexError, ValueError):
                raise CloudParseError(path, lineno, "bad vertex count") from None
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise CloudParseError(path, lineno, f"unexpected header line {line!r}")
    else:
        raise CloudParseError(path, lineno, "missing end_header")
    if n_vertex is None or props[:3] != ["x", "y", "z"] or props[3:] not in ([], ["label"]):
        raise CloudParseError(path, lineno, "vertex properties must be 'x y z [label]'")
    with_label = props[3:] == ["label"]
    body = text[lineno:]
    pts, labels = [], []
    for k, line in enumerate(body[:n_vertex]):
        xyz, lab = _parse_row(path, lineno + 1 + k, line.split(), with_label)
        pts.append(xyz)
        labels.append(lab)
    if len(pts) != n_vertex:
        raise CloudParseError(path, lineno + len(body), f"expected {n_vertex} vertices, found {len(pts)}")
    return PointCloud(np.array(pts), np.array(labels) if with_label else None)


def _load_csv(path, text) -> PointCloud:
    pts, labels = [], []
    with_label = None
    for lineno, line in enumerate(text, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tokens = [t.strip() for t in s.split(",")]
        if with_label is None:
            with_label = len(tokens) == 4
        xyz, lab = _parse_row(path, lineno, tokens, with_label)
        pts.append(xyz)
        labels.append(lab)
    if not pts:
        raise CloudParseError(path, max(len(text), 1), "no points")
    return PointCloud(np.array(pts), np.array(labels) if with_label else None)
