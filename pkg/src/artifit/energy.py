"""Object- and part-level losses, their weighted total and analytic gradients.

The discrete choices (nearest neighbours, selected anchor, part assignment)
are frozen inside one evaluation; gradients are exact for the resulting
smooth piece of the energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .articulation import (
    REVOLUTE,
    JointParams,
    JointSpec,
    direction_alignment_and_jac,
    joint_state_derivative,
    joint_state_from_raw,
    part_aligned_input,
    residual_rotation_vector,
    unit_direction,
)
from .assignment import Assignment, select_assignment
from .distance import dcd_value_and_grad, mutual_nearest, scatter_rows
from .geom import axis_angle_to_rotation, icosahedral_anchors, knn, rodrigues_jacobian
from .params import PARAM_NAMES, InstanceParams

TERMS = ("o", "p", "regS", "regD", "regW", "regP", "regA", "regJ")


@dataclass(frozen=True)
class LossWeights:
    o: float = 10.0
    p: float = 10.0
    regS: float = 100.0
    regD: float = 10.0
    regW: float = 10.0
    regP: float = 10.0
    regA: float = 10.0
    regJ: float = 10.0

    def __post_init__(self):
        for t in TERMS:
            v = getattr(self, t)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {t}={v} must be finite and nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, t) for t in TERMS])

    @classmethod
    def only(cls, term: str) -> "LossWeights":
        return cls(**{t: (1.0 if t == term else 0.0) for t in TERMS})


@dataclass(frozen=True)
class EnergyConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    alpha_l: float = 30.0
    alpha_r: float = 120.0
    knn_k: int = 64
    beta: float = 0.05
    exponent: str = "sq"


@dataclass
class EnergyBreakdown:
    terms: dict
    weights: LossWeights
    total: float

    @classmethod
    def from_terms(cls, terms: dict, weights: LossWeights) -> "EnergyBreakdown":
        total = float(sum(getattr(weights, t) * terms[t] for t in TERMS))
        return cls(dict(terms), weights, total)

    def __getitem__(self, term: str) -> float:
        return self.terms[term]


# -- individual terms ----------------------------------------------------


def _bidir_dcd(p, q, wp, wq, alpha_pq, alpha_qp, exponent, nn=None):
    """``DCD(p->q, wp) + DCD(q->p, wq)`` with one shared distance matrix.

    Returns ``(value, grad_p, grad_q, grad_wp, grad_wq, (idx_pq, idx_qp))``.
    """
    idx_pq, idx_qp = mutual_nearest(p, q) if nn is None else nn
    v1, gp1, gwp, gq1, _ = dcd_value_and_grad(p, q, wp, alpha_pq, exponent, idx_pq)
    v2, gq2, gwq, gp2, _ = dcd_value_and_grad(q, p, wq, alpha_qp, exponent, idx_qp)
    return v1 + v2, gp1 + gp2, gq1 + gq2, gwp, gwq, (idx_pq, idx_qp)


def loss_object(x_aligned, y, alpha_l=30.0, alpha_r=120.0, exponent="sq") -> float:
    ones_x, ones_y = np.ones(len(x_aligned)), np.ones(len(y))
    return _bidir_dcd(np.asarray(x_aligned, float), np.asarray(y, float), ones_x, ones_y, alpha_l, alpha_r, exponent)[0]


def _regS(y, y_base):
    diff = np.asarray(y) - np.asarray(y_base)
    if diff.shape != np.shape(y_base):
        raise ValueError("reconstruction and base shape differ in size")
    norms = np.linalg.norm(diff, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = np.where(norms[:, None] > 0, diff / norms[:, None], 0.0) / len(diff)
    return float(norms.mean()), grad


def loss_regS(y, y_base) -> float:
    return _regS(y, y_base)[0]


def _regD(y, k, structure=None):
    m = len(y)
    if m < k:
        raise ValueError(f"density regularization needs N >= K ({m} < {k})")
    idx, dist = knn(y, k)
    if structure is not None:
        structure.append(idx)
    e = dist[:, 1:]
    dev = e - e.mean(axis=0)
    value = float((dev**2).mean(axis=0).sum()) / (k - 1)
    ge = 2.0 * dev / m / (k - 1)
    nbr = idx[:, 1:]
    delta = y[:, None, :] - y[nbr]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(e[..., None] > 0, delta / e[..., None], 0.0)
    contrib = ge[..., None] * unit
    grad = contrib.sum(axis=1) - scatter_rows(nbr.ravel(), contrib.reshape(-1, 3), m)
    return value, grad


def loss_regD(y, k: int = 64) -> float:
    """Mean over neighbour ranks 2..K of the variance of rank-k neighbour distances."""
    return _regD(np.asarray(y, dtype=float), k)[0]


def _regW(w_y, beta):
    n_parts, n = w_y.shape
    short = beta - w_y.mean(axis=1)
    active = short > 0
    grad = np.zeros_like(w_y)
    grad[active] = -1.0 / (n_parts * n)
    return float(np.where(active, short, 0.0).sum()) / n_parts, grad


def loss_regW(w_y, beta: float = 0.05) -> float:
    return _regW(np.asarray(w_y, dtype=float), beta)[0]


def _regP(z, assign: Assignment):
    n_joints, _, n, _ = z.shape
    norm = 1.0 / (2 * n_joints)
    grad = np.zeros_like(z)
    value = 0.0
    for part in range(int(np.max(assign.sigma)) + 1):
        slots = assign.slots_of(part)
        if len(slots) < 2:
            continue
        stack = np.stack([z[j, i] for j, i in slots])
        dev = stack - stack.mean(axis=0)
        nrm = np.linalg.norm(dev, axis=2)
        value += float(nrm.mean(axis=1).sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(nrm[..., None] > 0, dev / nrm[..., None], 0.0) / n
        u -= u.mean(axis=0)
        for s, (j, i) in enumerate(slots):
            grad[j, i] += norm * u[s]
    return norm * value, grad


def loss_regP(z, assign: Assignment) -> float:
    """Mean per-point distance of each slot's cloud to the mean of its share class."""
    return _regP(np.asarray(z, dtype=float), assign)[0]


def loss_regA(a_y) -> float:
    a_y = np.asarray(a_y, dtype=float)
    return float((a_y**2).sum()) / a_y.size


def loss_regJ(c_x, c_y, x_aligned, y, alpha_l=30.0, alpha_r=120.0, exponent="sq") -> float:
    c_x = np.asarray(c_x, dtype=float).reshape(-1, 3)
    c_y = np.asarray(c_y, dtype=float).reshape(-1, 3)
    ones = np.ones(len(c_x))
    a = dcd_value_and_grad(c_y, np.asarray(y, dtype=float), ones, alpha_l, exponent)[0]
    b = dcd_value_and_grad(c_x, np.asarray(x_aligned, dtype=float), ones, alpha_r, exponent)[0]
    return a + b


def loss_part(z, y, w_x, w_y, assign: Assignment, alpha_l=30.0, alpha_r=120.0, exponent="sq") -> float:
    """``sum_{j,i} [DCD(Z_ji->Y, W_x[s]) + DCD(Y->Z_ji, W_y[s])] / b_ji`` with ``s = sigma(j,i)``."""
    b = assign.share_counts
    total = 0.0
    for j, row in enumerate(assign.sigma):
        for i, p in enumerate(row):
            total += _bidir_dcd(z[j, i], y, w_x[p], w_y[p], alpha_l, alpha_r, exponent)[0] / b[j, i]
    return total


# -- full energy -----------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


_ANCHORS = icosahedral_anchors()


def object_pose(params: InstanceParams, anchor: int):
    """``(R_o, t_o)`` of one anchor candidate: residual rotation times anchor rotation."""
    rv, _ = residual_rotation_vector(params.anchor_rot[anchor])
    return axis_angle_to_rotation(rv) @ _ANCHORS[anchor], params.anchor_trans[anchor].copy()


def joint_values(params: InstanceParams, specs, side: str):
    """Realized ``(pivots, unit directions, states)`` for side ``"x"`` or ``"y"``."""
    piv = getattr(params, f"pivot_{side}")
    raw = getattr(params, f"dir_{side}")
    st = getattr(params, f"state_{side}")
    dirs = np.stack([unit_direction(r)[0] for r in raw])
    states = np.stack([joint_state_from_raw(st[j], specs[j]) for j in range(len(specs))])
    return piv.copy(), dirs, states


def forward(x, base, params: InstanceParams, specs: list[JointSpec], cfg: EnergyConfig,
            anchor: int, assign: Assignment | None = None):
    """Evaluate every term; returns a cache consumed by :func:`backward`.

    When ``assign`` is None the assignment is selected from the current
    part-aligned inputs.
    """
    c = SimpleNamespace(x=x, base=base, params=params, specs=specs, cfg=cfg, anchor=anchor)
    n_joints = params.n_joints
    c.rv, c.jres = residual_rotation_vector(params.anchor_rot[anchor])
    c.r_res = axis_angle_to_rotation(c.rv)
    c.r_o = c.r_res @ _ANCHORS[anchor]
    c.xa = x @ c.r_o.T + params.anchor_trans[anchor]
    c.y = base + params.deform
    c.w_x = softmax(params.seg_x)
    c.w_y = softmax(params.seg_y)

    c.dx, c.jdx, c.dy, c.jdy = [], [], [], []
    c.ax = np.empty((n_joints, 2))
    c.ay = np.empty((n_joints, 2))
    for j, spec in enumerate(specs):
        d, jd = unit_direction(params.dir_x[j])
        c.dx.append(d)
        c.jdx.append(jd)
        d, jd = unit_direction(params.dir_y[j])
        c.dy.append(d)
        c.jdy.append(jd)
        c.ax[j] = joint_state_from_raw(params.state_x[j], spec)
        c.ay[j] = joint_state_from_raw(params.state_y[j], spec)

    c.z = np.empty((n_joints, 2) + c.xa.shape)
    c.slots = []
    for j, spec in enumerate(specs):
        rd, jrd_x, jrd_y = direction_alignment_and_jac(c.dx[j], c.dy[j])
        per_side = []
        for i in range(2):
            delta = c.ay[j, i] - c.ax[j, i]
            s = SimpleNamespace(rd=rd, jrd_x=jrd_x, jrd_y=jrd_y, delta=delta)
            if spec.kind == REVOLUTE:
                s.va = c.dy[j] * delta
                s.ra = axis_angle_to_rotation(s.va)
                s.a = s.ra @ rd
                shift = params.pivot_y[j]
            else:
                s.a = rd
                shift = params.pivot_y[j] + c.dy[j] * delta
            s.centered = c.xa - params.pivot_x[j]
            c.z[j, i] = s.centered @ s.a.T + shift
            per_side.append(s)
        c.slots.append(per_side)

    # slot-to-reconstruction neighbours, shared by the assignment search and L_p
    slot_nn = [[mutual_nearest(c.z[j, i], c.y) for i in range(2)] for j in range(n_joints)]
    if assign is None:
        slot_dists = np.empty(c.z.shape[:3])
        for j in range(n_joints):
            for i in range(2):
                delta = c.z[j, i] - c.y[slot_nn[j][i][0]]
                slot_dists[j, i] = np.sqrt(np.einsum("ij,ij->i", delta, delta))
        assign = select_assignment(c.z, c.y, c.w_x, slot_dists=slot_dists)
    c.assign = assign
    c.b = assign.share_counts

    terms = {}
    ones_x, ones_y = np.ones(len(c.xa)), np.ones(len(c.y))
    # discrete choices made during this evaluation; compared across finite-difference probes
    c.structure = []
    v, c.g_o_xa, c.g_o_y, _, _, nn = _bidir_dcd(c.xa, c.y, ones_x, ones_y, cfg.alpha_l, cfg.alpha_r, cfg.exponent)
    c.structure.extend(nn)
    terms["o"] = v
    terms["regS"], c.g_regS = _regS(c.y, base)
    terms["regD"], c.g_regD = _regD(c.y, cfg.knn_k, c.structure)

    total_p = 0.0
    c.g_p_z = np.zeros_like(c.z)
    c.g_p_y = np.zeros_like(c.y)
    c.g_p_wx = np.zeros_like(c.w_x)
    c.g_p_wy = np.zeros_like(c.w_y)
    for j, row in enumerate(assign.sigma):
        for i, p in enumerate(row):
            inv_b = 1.0 / c.b[j, i]
            v, gz, gy, gwx, gwy, nn = _bidir_dcd(
                c.z[j, i], c.y, c.w_x[p], c.w_y[p], cfg.alpha_l, cfg.alpha_r, cfg.exponent, slot_nn[j][i]
            )
            c.structure.extend(nn)
            total_p += inv_b * v
            c.g_p_z[j, i] += inv_b * gz
            c.g_p_y += inv_b * gy
            c.g_p_wx[p] += inv_b * gwx
            c.g_p_wy[p] += inv_b * gwy
    terms["p"] = total_p
    terms["regW"], c.g_regW = _regW(c.w_y, cfg.beta)
    c.structure.append(c.g_regW[:, 0] != 0)
    terms["regP"], c.g_regP = _regP(c.z, assign)
    terms["regA"] = float((c.ay**2).sum()) / c.ay.size
    c.g_regA = 2.0 * c.ay / c.ay.size

    ones_j = np.ones(n_joints)
    v1, c.g_j_cy, _, c.g_j_y, nn1 = dcd_value_and_grad(params.pivot_y, c.y, ones_j, cfg.alpha_l, cfg.exponent)
    v2, c.g_j_cx, _, c.g_j_xa, nn2 = dcd_value_and_grad(params.pivot_x, c.xa, ones_j, cfg.alpha_r, cfg.exponent)
    c.structure += [nn1, nn2]
    terms["regJ"] = v1 + v2
    c.breakdown = EnergyBreakdown.from_terms(terms, cfg.weights)
    return c


def _softmax_backward(w, g):
    return w * (g - (w * g).sum(axis=0, keepdims=True))


def backward(c, weights: LossWeights | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``sum_t weights.t * term_t`` for every parameter and the base shape."""
    lam = dict(zip(TERMS, (weights or c.cfg.weights).as_array()))
    params = c.params
    grads = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}

    g_xa = lam["o"] * c.g_o_xa + lam["regJ"] * c.g_j_xa
    g_y = lam["o"] * c.g_o_y + lam["regD"] * c.g_regD + lam["p"] * c.g_p_y + lam["regJ"] * c.g_j_y
    g_wx = lam["p"] * c.g_p_wx
    g_wy = lam["p"] * c.g_p_wy + lam["regW"] * c.g_regW
    g_z = lam["p"] * c.g_p_z + lam["regP"] * c.g_regP
    g_cx = lam["regJ"] * c.g_j_cx
    g_cy = lam["regJ"] * c.g_j_cy
    g_ax = np.zeros_like(c.ax)
    g_ay = lam["regA"] * c.g_regA
    g_dx = np.zeros((params.n_joints, 3))
    g_dy = np.zeros((params.n_joints, 3))

    for j, spec in enumerate(c.specs):
        for i in range(2):
            s = c.slots[j][i]
            gz = g_z[j, i]
            if not gz.any():
                continue
            gsum = gz.sum(axis=0)
            g_a = gz.T @ s.centered
            g_xa += gz @ s.a
            g_cx[j] -= s.a.T @ gsum
            g_cy[j] += gsum
            if spec.kind == REVOLUTE:
                g_ra = g_a @ s.rd.T
                g_rd = s.ra.T @ g_a
                g_va = np.einsum("iab,ab->i", rodrigues_jacobian(s.va), g_ra)
                g_dy[j] += s.delta * g_va
                g_delta = float(c.dy[j] @ g_va)
            else:
                g_rd = g_a
                g_dy[j] += s.delta * gsum
                g_delta = float(c.dy[j] @ gsum)
            g_dx[j] += np.einsum("kab,ab->k", s.jrd_x, g_rd)
            g_dy[j] += np.einsum("kab,ab->k", s.jrd_y, g_rd)
            g_ay[j, i] += g_delta
            g_ax[j, i] -= g_delta

    grads["pivot_x"] = g_cx
    grads["pivot_y"] = g_cy
    for j, spec in enumerate(c.specs):
        grads["dir_x"][j] = c.jdx[j].T @ g_dx[j]
        grads["dir_y"][j] = c.jdy[j].T @ g_dy[j]
        grads["state_x"][j] = g_ax[j] * joint_state_derivative(params.state_x[j], spec)
        grads["state_y"][j] = g_ay[j] * joint_state_derivative(params.state_y[j], spec)

    grads["seg_x"] = _softmax_backward(c.w_x, g_wx)
    grads["seg_y"] = _softmax_backward(c.w_y, g_wy)

    k = c.anchor
    g_ro = g_xa.T @ c.x
    g_rres = g_ro @ _ANCHORS[k].T
    g_rv = np.einsum("iab,ab->i", rodrigues_jacobian(c.rv), g_rres)
    grads["anchor_rot"][k] = c.jres.T @ g_rv
    grads["anchor_trans"][k] = g_xa.sum(axis=0)

    grads["deform"] = g_y + lam["regS"] * c.g_regS
    grads["base"] = g_y
    return grads


def total_energy(x, base, params, specs, cfg: EnergyConfig, anchor: int, assign=None) -> EnergyBreakdown:
    return forward(x, base, params, specs, cfg, anchor, assign).breakdown


def total_energy_grad(x, base, params, specs, cfg: EnergyConfig, anchor: int, assign=None):
    """``(breakdown, grads)``; ``grads`` maps parameter names (and ``"base"``) to arrays."""
    c = forward(x, base, params, specs, cfg, anchor, assign)
    return c.breakdown, backward(c)


def part_aligned_inputs(x_aligned, params: InstanceParams, specs) -> np.ndarray:
    """All ``Z_ji`` for realized joint parameters, shape ``(J, 2, N, 3)``."""
    cx, dx, ax = joint_values(params, specs, "x")
    cy, dy, ay = joint_values(params, specs, "y")
    out = np.empty((len(specs), 2) + np.shape(x_aligned))
    for j, spec in enumerate(specs):
        jx = JointParams(cx[j], dx[j], ax[j])
        jy = JointParams(cy[j], dy[j], ay[j])
        for i in range(2):
            out[j, i] = part_aligned_input(x_aligned, jx, jy, spec, i)
    return out

