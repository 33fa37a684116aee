"""Central finite-difference certification of the analytic energy gradients.

Each probe re-evaluates the true energy (nearest neighbours recomputed) with
the anchor and part assignment frozen. A coordinate is skipped when any
probe changes the discrete structure (neighbour indices, active hinge set):
those are the tie regions where the energy is not differentiable.

Differences are taken per term and the weighted total is assembled from the
term differences. Differencing the total directly quantizes the estimate at
``ulp(E) / 2h`` (about 4e-10 for E ~ 50), which swamps gradient components
below 1e-6. The default five-point stencil removes the O(h^2) truncation that
the three-point one shows near sharply curved direction normalizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .articulation import PRISMATIC, REVOLUTE, JointSpec
from .energy import TERMS, EnergyConfig, LossWeights, backward, forward
from .params import N_ANCHORS, PARAM_NAMES, InstanceParams

CHECK_TERMS = TERMS + ("total",)
GRAD_KEYS = PARAM_NAMES + ("base",)


@dataclass
class GradInstance:
    x: np.ndarray
    base: np.ndarray
    params: InstanceParams
    specs: list
    anchor: int
    cfg: EnergyConfig
    assign: object = None


@dataclass
class GradReport:
    max_rel: dict = field(default_factory=lambda: {t: 0.0 for t in CHECK_TERMS})
    checked: int = 0
    skipped: int = 0

    def merge(self, other: "GradReport") -> None:
        for t in CHECK_TERMS:
            self.max_rel[t] = max(self.max_rel[t], other.max_rel[t])
        self.checked += other.checked
        self.skipped += other.skipped

    def worst(self) -> float:
        return max(self.max_rel.values())


def random_instance(seed: int, n_points: int = 32, n_parts: int = 2, kinds=None, knn_k: int = 16) -> GradInstance:
    """Random, generic-position instance for gradient checks."""
    rng = np.random.default_rng(seed)
    n_joints = n_parts - 1
    if kinds is None:
        kinds = [REVOLUTE if rng.random() < 0.5 else PRISMATIC for _ in range(n_joints)]
    specs = [JointSpec(k) for k in kinds]
    x = rng.normal(scale=0.4, size=(n_points, 3))
    base = rng.normal(scale=0.4, size=(n_points, 3))
    seg_y = rng.normal(size=(n_parts, n_points))
    # push one part below beta now and then so the hinge of regW is exercised
    if rng.random() < 0.5:
        seg_y[rng.integers(n_parts)] -= 5.0
    params = InstanceParams(
        anchor_rot=rng.normal(scale=0.5, size=(N_ANCHORS, 3)),
        anchor_trans=rng.normal(scale=0.05, size=(N_ANCHORS, 3)),
        seg_x=rng.normal(size=(n_parts, n_points)),
        seg_y=seg_y,
        pivot_x=rng.normal(scale=0.3, size=(n_joints, 3)),
        dir_x=rng.normal(size=(n_joints, 3)),
        state_x=rng.normal(size=(n_joints, 2)),
        pivot_y=rng.normal(scale=0.3, size=(n_joints, 3)),
        dir_y=rng.normal(size=(n_joints, 3)),
        state_y=rng.normal(size=(n_joints, 2)),
        deform=rng.normal(scale=0.05, size=(n_points, 3)),
    )
    cfg = EnergyConfig(knn_k=min(knn_k, n_points))
    anchor = int(rng.integers(N_ANCHORS))
    inst = GradInstance(x, base, params, specs, anchor, cfg)
    inst.assign = forward(x, base, params, specs, cfg, anchor).assign
    return inst


# central stencils: offsets (in units of h) and coefficients (divided by h)
STENCILS = {
    3: ((1, -1), (0.5, -0.5)),
    5: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def _terms_vector(inst: GradInstance, params, base):
    c = forward(inst.x, base, params, inst.specs, inst.cfg, inst.anchor, inst.assign)
    return np.array([c.breakdown.terms[t] for t in TERMS]), c.structure


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def _coords(inst: GradInstance, key: str, rng, per_key):
    arr = inst.base if key == "base" else getattr(inst.params, key)
    if key in ("anchor_rot", "anchor_trans"):
        flat = [inst.anchor * 3 + k for k in range(3)]
    else:
        flat = list(range(arr.size))
    if per_key is not None and len(flat) > per_key:
        flat = sorted(rng.choice(flat, size=per_key, replace=False).tolist())
    return flat


def check_instance(inst: GradInstance, h: float = 1e-5, floor: float = 1e-6, per_key: int | None = None,
                   seed: int = 0, terms=CHECK_TERMS, stencil: int = 5) -> GradReport:
    """Compare analytic and central-difference gradients for every term.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    cache = forward(inst.x, inst.base, inst.params, inst.specs, inst.cfg, inst.anchor, inst.assign)
    base_struct = cache.structure
    analytic = {t: backward(cache, LossWeights.only(t)) for t in TERMS}
    analytic["total"] = backward(cache, inst.cfg.weights)
    offsets, coefs = STENCILS[stencil]
    w = inst.cfg.weights.as_array()
    report = GradReport()
    for key in GRAD_KEYS:
        for flat in _coords(inst, key, rng, per_key):
            params = inst.params.copy()
            base = inst.base.copy()
            arr = base if key == "base" else getattr(params, key)
            orig = arr.flat[flat]
            numeric = np.zeros(len(TERMS))
            tie = False
            for off, coef in zip(offsets, coefs):
                arr.flat[flat] = orig + off * h
                vals, struct = _terms_vector(inst, params, base)
                if not _same(struct, base_struct):
                    tie = True
                    break
                numeric += coef * vals
            if tie:
                report.skipped += 1
                continue
            numeric /= h
            numeric = dict(zip(TERMS, numeric))
            numeric["total"] = float(w @ [numeric[t] for t in TERMS])
            report.checked += 1
            for t in terms:
                a = analytic[t][key].flat[flat]
                n = numeric[t]
                rel = abs(a - n) / max(abs(a), abs(n), floor)
                report.max_rel[t] = max(report.max_rel[t], rel)
    return report


def run_suite(n_instances: int = 100, seed: int = 0, n_points: int = 32, per_key: int | None = 4,
              h: float = 1e-5, terms=CHECK_TERMS, stencil: int = 5) -> GradReport:
    """Check ``n_instances`` random instances alternating P = 2 and P = 3."""
    total = GradReport()
    for k in range(n_instances):
        inst = random_instance(seed * 100003 + k, n_points=n_points, n_parts=2 + (k % 2))
        total.merge(check_instance(inst, h=h, per_key=per_key, seed=k, terms=terms, stencil=stencil))
    return total
