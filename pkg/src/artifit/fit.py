"""Direct per-instance optimization of the energy with Adam.

Each instance owns its parameters; the category template ``Y_base`` is shared
and updated once per step from the batch-mean gradient, accumulated in
dataset order so that runs are bitwise reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .articulation import JointParams, JointSpec, part_transform
from .assignment import Assignment, fuse_shared_pose
from .cloud import NormalizationRecord, PointCloud, augment, normalize
from .energy import TERMS, EnergyConfig, LossWeights, backward, forward, joint_values, object_pose, softmax
from .params import N_ANCHORS, PARAM_NAMES, InstanceParams, Template

STATE_VERSION = "artifit-state/1"
DIRECTION_MIN_NORM = 1e-6
_ANCHOR_KEYS = ("anchor_rot", "anchor_trans")


class DivergenceError(RuntimeError):
    def __init__(self, term: str, instance: int, iteration: int):
        super().__init__(f"non-finite {term} at iteration {iteration} (instance {instance})")
        self.term, self.instance, self.iteration = term, instance, iteration


@dataclass
class FitConfig:
    iterations: int = 20000
    batch_size: int = 24
    lr: float = 1e-4
    halving_interval: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)
    alpha_l: float = 30.0
    alpha_r: float = 120.0
    knn_k: int = 64
    beta: float = 0.05
    exponent: str = "sq"
    seed: int = 0
    assign_refresh: int = 1
    augment: bool = False
    template_points: int | None = None
    init_noise: float = 0.1  # std; N(0, 0.01) read as variance 0.01

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.halving_interval < 1 or self.assign_refresh < 1:
            raise ValueError("iteration counts and batch size must be positive")
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def energy_config(self) -> EnergyConfig:
        return EnergyConfig(self.weights, self.alpha_l, self.alpha_r, self.knn_k, self.beta, self.exponent)

    def lr_at(self, iteration: int) -> float:
        return self.lr * 0.5 ** (iteration // self.halving_interval)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class FitData:
    """Normalized input clouds of one category."""

    clouds: list
    records: list
    specs: list
    n_parts: int
    labels: list | None = None

    def __len__(self) -> int:
        return len(self.clouds)


def prepare_data(clouds: list[PointCloud], specs: list[JointSpec], n_parts: int | None = None) -> FitData:
    """Normalize every cloud (zero mean, mean radius 0.5)."""
    if n_parts is None:
        n_parts = len(specs) + 1
    pts, recs, labels = [], [], []
    for cl in clouds:
        norm, rec = normalize(cl)
        pts.append(norm.points)
        recs.append(rec)
        labels.append(cl.labels)
    return FitData(pts, recs, list(specs), n_parts, labels)


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray


@dataclass
class FitState:
    template: Template
    params: list
    config: FitConfig
    specs: list
    iteration: int = 0
    steps: np.ndarray | None = None  # per-instance Adam step counts
    anchor_steps: np.ndarray | None = None  # (n_instances, 60)
    base_steps: int = 0
    moments: list = field(default_factory=list)  # per instance: {name: AdamSlot}
    base_moment: AdamSlot | None = None
    assigns: list = field(default_factory=list)
    anchors: list = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return len(self.params)


# -- initialization -------------------------------------------------------------


def fibonacci_sphere(m: int, radius: float = 0.5) -> np.ndarray:
    k = np.arange(m) + 0.5
    z = 1.0 - 2.0 * k / m
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    # centred and rescaled so the mean distance to the centroid is exactly ``radius``
    pts -= pts.mean(axis=0)
    return radius * pts / np.linalg.norm(pts, axis=1).mean()


def init_params(data: FitData, config: FitConfig, seed: int | None = None) -> tuple[Template, list]:
    """Template on a Fibonacci sphere plus per-instance parameters.

    The reconstruction-side logits and the joint directions are drawn once
    and shared by every instance so that part labels start consistent
    across the category; input-side logits get independent noise.
    """
    if len(data) == 0:
        raise ValueError("cannot initialize on an empty dataset")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    m = config.template_points or len(data.clouds[0])
    base = fibonacci_sphere(m)
    n_joints, n_parts = len(data.specs), data.n_parts
    seg_y = rng.normal(scale=config.init_noise, size=(n_parts, m))
    dirs = rng.normal(size=(n_joints, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    y_centroid = base.mean(axis=0)
    out = []
    for x in data.clouds:
        out.append(InstanceParams(
            anchor_rot=np.zeros((N_ANCHORS, 3)),
            anchor_trans=np.zeros((N_ANCHORS, 3)),
            seg_x=rng.normal(scale=config.init_noise, size=(n_parts, len(x))),
            seg_y=seg_y.copy(),
            pivot_x=np.tile(x.mean(axis=0), (n_joints, 1)),
            dir_x=dirs.copy(),
            state_x=np.zeros((n_joints, 2)),
            pivot_y=np.tile(y_centroid, (n_joints, 1)),
            dir_y=dirs.copy(),
            state_y=np.zeros((n_joints, 2)),
            deform=np.zeros((m, 3)),
        ))
    return Template(base), out


def init_state(data: FitData, config: FitConfig) -> FitState:
    template, params = init_params(data, config)
    n = len(params)
    state = FitState(template, params, config, list(data.specs))
    state.steps = np.zeros(n, dtype=int)
    state.anchor_steps = np.zeros((n, N_ANCHORS), dtype=int)
    state.moments = [{k: AdamSlot(np.zeros_like(v), np.zeros_like(v)) for k, v in p.as_dict().items()} for p in params]
    state.base_moment = AdamSlot(np.zeros_like(template.base), np.zeros_like(template.base))
    state.assigns = [None] * n
    state.anchors = [None] * n
    return state


# -- anchor selection -------------------------------------------------------------


def anchor_candidates(params: InstanceParams):
    rots = np.stack([object_pose(params, i)[0] for i in range(N_ANCHORS)])
    return rots, params.anchor_trans.copy()


def anchor_cds(x: np.ndarray, y: np.ndarray, params: InstanceParams) -> np.ndarray:
    """Unweighted CD of every anchor candidate ``R x + t`` to ``y`` (exact, float64)."""
    rots, trans = anchor_candidates(params)
    moved = np.einsum("aij,nj->ani", rots, x) + trans[:, None, :]
    d, _ = cKDTree(y).query(moved.reshape(-1, 3))
    return d.reshape(N_ANCHORS, len(x)).mean(axis=1)


def _anchor_cds_f32(moved: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Single-precision CDs of all candidates through one augmented GEMM per
    chunk (``|y|^2`` rides along as a fourth coordinate); only for ranking."""
    flat = np.empty((moved.shape[0] * moved.shape[1], 4), dtype=np.float32)
    flat[:, :3] = moved.reshape(-1, 3)
    flat[:, 3] = 1.0
    yt = np.empty((4, len(y)), dtype=np.float32)
    yt[:3] = -2.0 * y.T
    yt[3] = (y * y).sum(axis=1)
    d2 = np.empty(len(flat), dtype=np.float32)
    for s in range(0, len(flat), 1024):
        np.min(flat[s : s + 1024] @ yt, axis=1, out=d2[s : s + 1024])
    d2 += (flat[:, :3] * flat[:, :3]).sum(axis=1)
    return np.sqrt(np.maximum(d2, 0.0)).reshape(moved.shape[:2]).mean(axis=1)


# float32 CD error is below 1e-5 for clouds of unit scale; candidates this close
# to the float32 minimum are re-scored exactly
_RANK_MARGIN = 1e-3


def select_anchor(x: np.ndarray, y: np.ndarray, params: InstanceParams):
    """``(R_o, t_o, index)`` of the CD-minimizing candidate; lowest index wins ties.

    Candidates are ranked in single precision and every candidate within a
    margin of the best is re-scored in double precision.
    """
    rots, trans = anchor_candidates(params)
    moved = np.einsum("aij,nj->ani", rots, x) + trans[:, None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        approx = _anchor_cds_f32(moved, y)
    if np.all(np.isfinite(approx)):
        close = np.flatnonzero(approx <= approx.min() + _RANK_MARGIN * (1.0 + approx.min()))
    else:
        # out of single-precision range: score every candidate exactly
        close = np.arange(N_ANCHORS)
    d, _ = cKDTree(y).query(moved[close].reshape(-1, 3))
    exact = d.reshape(len(close), len(x)).mean(axis=1)
    k = int(close[np.argmin(exact)])
    r, t = object_pose(params, k)
    return r, t, k


# -- optimization -------------------------------------------------------------------


def batch_indices(iteration: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Instances drawn at ``iteration``, sorted in dataset order."""
    if batch_size >= n:
        return np.arange(n)
    rng = np.random.default_rng([seed, iteration])
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def _adam(param, grad, slot: AdamSlot, t: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    slot.m *= b1
    slot.m += (1 - b1) * grad
    slot.v *= b2
    slot.v += (1 - b2) * grad * grad
    mhat = slot.m / (1 - b1**t)
    vhat = slot.v / (1 - b2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def _guard_directions(raw: np.ndarray, previous: np.ndarray) -> None:
    norms = np.linalg.norm(raw, axis=1)
    for j in np.flatnonzero(norms < DIRECTION_MIN_NORM):
        fallback = raw[j] if norms[j] > 0 else previous[j]
        raw[j] = fallback / np.linalg.norm(fallback)


def instance_input(state: FitState, data: FitData, i: int) -> np.ndarray:
    x = data.clouds[i]
    if state.config.augment:
        seed = int(np.random.default_rng([state.config.seed, state.iteration, i]).integers(2**31))
        x = augment(PointCloud(x), seed, 0.0).points
    return x


def fit_step(state: FitState, data: FitData, batch=None) -> list:
    """One optimizer step over ``batch``; returns ``[(instance, EnergyBreakdown), ...]``."""
    cfg = state.config
    ecfg = cfg.energy_config()
    k_iter = state.iteration
    if batch is None:
        batch = batch_indices(k_iter, len(data), cfg.batch_size, cfg.seed)
    lr = cfg.lr_at(k_iter)
    base = state.template.base
    g_base = np.zeros_like(base)
    records = []
    for i in batch:
        params = state.params[i]
        x = instance_input(state, data, i)
        y = base + params.deform
        _, _, anchor = select_anchor(x, y, params)
        refresh = state.assigns[i] is None or k_iter % cfg.assign_refresh == 0
        cache = forward(x, base, params, state.specs, ecfg, anchor, None if refresh else state.assigns[i])
        for t in TERMS:
            if not np.isfinite(cache.breakdown.terms[t]):
                raise DivergenceError(t, int(i), k_iter)
        grads = backward(cache)
        state.assigns[i] = cache.assign
        state.anchors[i] = anchor
        state.steps[i] += 1
        state.anchor_steps[i, anchor] += 1
        prev_x, prev_y = params.dir_x.copy(), params.dir_y.copy()
        for name in PARAM_NAMES:
            slot = state.moments[i][name]
            arr = getattr(params, name)
            if name in _ANCHOR_KEYS:
                row = AdamSlot(slot.m[anchor], slot.v[anchor])
                _adam(arr[anchor], grads[name][anchor], row, state.anchor_steps[i, anchor], lr)
            else:
                _adam(arr, grads[name], slot, state.steps[i], lr)
        _guard_directions(params.dir_x, prev_x)
        _guard_directions(params.dir_y, prev_y)
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(params, name))):
                raise DivergenceError(f"parameter {name}", int(i), k_iter)
        g_base += grads["base"]
        records.append((int(i), cache.breakdown))
    state.base_steps += 1
    _adam(base, g_base / len(batch), state.base_moment, state.base_steps, lr)
    if not np.all(np.isfinite(base)):
        raise DivergenceError("template", -1, k_iter)
    state.iteration += 1
    return records


def step_record(iteration: int, lr: float, records: list) -> dict:
    rec = {"iteration": iteration, "lr": lr}
    rec["total"] = float(np.mean([b.total for _, b in records]))
    for t in TERMS:
        rec[t] = float(np.mean([b.terms[t] for _, b in records]))
    return rec


def fit_run(data: FitData, config: FitConfig, state: FitState | None = None, checkpoint_every: int = 0,
            on_checkpoint=None, on_step=None) -> tuple[FitState, list]:
    """Run until ``config.iterations``; resumes from ``state`` when given.

    ``on_checkpoint(state)`` is called every ``checkpoint_every`` iterations.
    """
    if state is None:
        state = init_state(data, config)
    log = []
    while state.iteration < config.iterations:
        k = state.iteration
        lr = config.lr_at(k)
        rec = step_record(k, lr, fit_step(state, data))
        log.append(rec)
        if on_step is not None:
            on_step(rec)
        if checkpoint_every and state.iteration % checkpoint_every == 0 and on_checkpoint is not None:
            on_checkpoint(state)
    return state, log


def dataset_energy(state: FitState, data: FitData) -> float:
    """Mean total energy over all instances with fresh anchor and assignment."""
    ecfg = state.config.energy_config()
    base = state.template.base
    totals = []
    for x, params in zip(data.clouds, state.params):
        _, _, k = select_anchor(x, base + params.deform, params)
        totals.append(forward(x, base, params, state.specs, ecfg, k).breakdown.total)
    return float(np.mean(totals))


def windowed_mean(values, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` entries at every position."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- fitted quantities ---------------------------------------------------------------


@dataclass
class FittedInstance:
    """Everything evaluation needs from one fitted instance (normalized frame)."""

    r_o: np.ndarray
    t_o: np.ndarray
    anchor: int
    seg_probs: np.ndarray  # (P, N)
    assign: Assignment
    part_maps: list  # per part (A, b): aligned input -> reconstruction
    pivots: np.ndarray  # (J, 3) input-side pivots in the aligned frame
    directions: np.ndarray  # (J, 3)
    record: NormalizationRecord


def fitted_instance(state: FitState, data: FitData, i: int) -> FittedInstance:
    params = state.params[i]
    x = data.clouds[i]
    y = state.template.base + params.deform
    r_o, t_o, k = select_anchor(x, y, params)
    cache = forward(x, state.template.base, params, state.specs, state.config.energy_config(), k)
    cx, dx, ax = joint_values(params, state.specs, "x")
    cy, dy, ay = joint_values(params, state.specs, "y")
    slot_maps = {}
    for j, spec in enumerate(state.specs):
        jx, jy = JointParams(cx[j], dx[j], ax[j]), JointParams(cy[j], dy[j], ay[j])
        for s in range(2):
            slot_maps[(j, s)] = part_transform(jx, jy, spec, s)
    part_maps = []
    for p in range(data.n_parts):
        slots = cache.assign.slots_of(p)
        part_maps.append(fuse_shared_pose([slot_maps[s] for s in slots]))
    return FittedInstance(r_o, t_o, k, softmax(params.seg_x), cache.assign, part_maps, cx, dx, data.records[i])


# -- persistence -----------------------------------------------------------------------


def _slot_dict(slot: AdamSlot) -> dict:
    return {"m": slot.m.tolist(), "v": slot.v.tolist()}


def export_state(state: FitState, path) -> None:
    """Write the full state (parameters and optimizer moments) as JSON."""
    doc = {
        "version": STATE_VERSION,
        "config_hash": state.config.digest(),
        "config": state.config.to_dict(),
        "specs": [{"kind": s.kind, "range": s.range} for s in state.specs],
        "iteration": state.iteration,
        "template": state.template.base.tolist(),
        "instances": [
            {
                "params": {k: v.tolist() for k, v in p.as_dict().items()},
                "assign": None if a is None else [list(r) for r in a.sigma],
                "anchor": k,
            }
            for p, a, k in zip(state.params, state.assigns, state.anchors)
        ],
        "optimizer_state": {
            "base_steps": state.base_steps,
            "base": _slot_dict(state.base_moment),
            "steps": state.steps.tolist(),
            "anchor_steps": state.anchor_steps.tolist(),
            "instances": [{k: _slot_dict(s) for k, s in m.items()} for m in state.moments],
        },
    }
    Path(path).write_text(json.dumps(doc))


def import_state(path) -> FitState:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed state document ({exc})") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise ValueError(f"{path}: state document has no version field")
    if doc["version"] != STATE_VERSION:
        raise ValueError(f"{path}: unsupported state version {doc['version']!r} (expected {STATE_VERSION})")
    try:
        config = FitConfig.from_dict(doc["config"])
        if config.digest() != doc["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        specs = [JointSpec(s["kind"], s["range"]) for s in doc["specs"]]
        params, assigns, anchors = [], [], []
        for inst in doc["instances"]:
            params.append(InstanceParams(**{k: np.array(inst["params"][k], dtype=float) for k in PARAM_NAMES}))
            a = inst["assign"]
            assigns.append(None if a is None else Assignment(tuple(tuple(r) for r in a)))
            anchors.append(inst["anchor"])
        opt = doc["optimizer_state"]
        state = FitState(Template(np.array(doc["template"], dtype=float)), params, config, specs, doc["iteration"])
        state.steps = np.array(opt["steps"], dtype=int)
        state.anchor_steps = np.array(opt["anchor_steps"], dtype=int).reshape(len(params), N_ANCHORS)
        state.base_steps = opt["base_steps"]
        state.base_moment = AdamSlot(np.array(opt["base"]["m"]), np.array(opt["base"]["v"]))
        state.moments = [
            {k: AdamSlot(np.array(s["m"], dtype=float), np.array(s["v"], dtype=float)) for k, s in m.items()}
            for m in opt["instances"]
        ]
        state.assigns, state.anchors = assigns, anchors
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed state document (missing {exc})") from exc
    return state

