"""Joint parameterization and the closed-form part alignment transforms.

For joint ``j`` and side ``i`` the object-level aligned input ``X`` is mapped to

    revolute:  Z = R_a R_d (X - c_x) + c_y
    prismatic: Z = R_d (X - c_x) + c_y + T_a

where ``R_d`` sends ``d_x`` to ``d_y``, ``R_a`` rotates about ``d_y`` by
``a_y[i] - a_x[i]`` and ``T_a = d_y (a_y[i] - a_x[i])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import axis_angle_to_rotation, rodrigues_jacobian, skew

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
RESIDUAL_MAX_ANGLE = 0.2 * np.pi
_ANTIPARALLEL_EPS = 1e-9
_SERIES_EPS = 1e-3


@dataclass(frozen=True)
class JointSpec:
    kind: str = REVOLUTE
    range: float | None = None

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        if self.range is None:
            object.__setattr__(self, "range", 2 * np.pi / 3 if self.kind == REVOLUTE else 0.2)
        if not self.range > 0:
            raise ValueError("joint range must be positive")


@dataclass
class JointParams:
    pivot: np.ndarray
    direction: np.ndarray
    states: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.pivot = np.asarray(self.pivot, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        self.states = np.asarray(self.states, dtype=float)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def joint_state_from_raw(theta, spec: JointSpec):
    """``range * (sigmoid(theta) - 0.5)``; odd, monotone, within ``(-range/2, range/2)``."""
    return spec.range * 0.5 * np.tanh(0.5 * np.asarray(theta, dtype=float))


def joint_state_derivative(theta, spec: JointSpec):
    s = sigmoid(theta)
    return spec.range * s * (1.0 - s)


def unit_direction(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized direction and its Jacobian w.r.t. the raw vector."""
    n = np.linalg.norm(raw)
    d = raw / n
    return d, (np.eye(3) - np.outer(d, d)) / n


def _fallback_axis(dx: np.ndarray) -> np.ndarray:
    e = np.zeros(3)
    e[np.argmin(np.abs(dx))] = 1.0
    a = np.cross(dx, e)
    return a / np.linalg.norm(a)


def _align_vectors(dx, dy):
    """Rotation vector (axis * angle) taking ``dx`` to ``dy`` plus helper terms."""
    u = np.cross(dx, dy)
    s = np.linalg.norm(u)
    c = float(dx @ dy)
    if s < _SERIES_EPS and c > 0:
        x2 = (s / c) ** 2
        h = (1.0 - x2 / 3.0 + x2 * x2 / 5.0 - x2**3 / 7.0) / c
        k = (-2.0 / 3.0 + 4.0 * x2 / 5.0 - 6.0 * x2 * x2 / 7.0) / c**3
    else:
        ang = np.arctan2(s, c)
        h = ang / s
        k = (c * s / (s * s + c * c) - ang) / s**3
    dh_dc = -1.0 / (s * s + c * c)
    return u, h, k, dh_dc


def direction_alignment(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Rotation ``R_d`` with ``R_d @ dx == dy`` for unit ``dx``, ``dy``."""
    return direction_alignment_and_jac(dx, dy)[0]


def direction_alignment_and_jac(dx: np.ndarray, dy: np.ndarray):
    """``R_d`` and its derivatives ``dR/d(dx)_j``, ``dR/d(dy)_j`` (each (3, 3, 3)).

    Near-antiparallel inputs take a half-turn about a fixed axis orthogonal to
    ``dx`` followed by the small residual alignment; the Jacobians are returned
    as zeros there since the map is discontinuous.
    """
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    c = float(dx @ dy)
    if c < -1.0 + _ANTIPARALLEL_EPS:
        flip = axis_angle_to_rotation(np.pi * _fallback_axis(dx))
        fine = direction_alignment(flip @ dx, dy)
        return fine @ flip, np.zeros((3, 3, 3)), np.zeros((3, 3, 3))
    u, h, k, dh_dc = _align_vectors(dx, dy)
    v = h * u
    dv_du = h * np.eye(3) + k * np.outer(u, u)
    dv_ddx = dv_du @ -skew(dy) + dh_dc * np.outer(u, dy)
    dv_ddy = dv_du @ skew(dx) + dh_dc * np.outer(u, dx)
    rot = axis_angle_to_rotation(v)
    jr = rodrigues_jacobian(v)
    return rot, np.einsum("iab,ij->jab", jr, dv_ddx), np.einsum("iab,ij->jab", jr, dv_ddy)


def state_rotation(dy: np.ndarray, delta: float) -> np.ndarray:
    return axis_angle_to_rotation(np.asarray(dy, dtype=float) * delta)


def state_translation(dy: np.ndarray, delta: float) -> np.ndarray:
    return np.asarray(dy, dtype=float) * delta


def part_transform(jx: JointParams, jy: JointParams, spec: JointSpec, side: int):
    """Affine map ``(A, b)`` with ``Z = X @ A.T + b`` for side ``side`` in {0, 1}."""
    rd = direction_alignment(jx.direction, jy.direction)
    delta = jy.states[side] - jx.states[side]
    if spec.kind == REVOLUTE:
        a = state_rotation(jy.direction, delta) @ rd
        b = jy.pivot - a @ jx.pivot
    else:
        a = rd
        b = jy.pivot - a @ jx.pivot + state_translation(jy.direction, delta)
    return a, b


def part_aligned_input(x_aligned, jx: JointParams, jy: JointParams, spec: JointSpec, side: int):
    a, b = part_transform(jx, jy, spec, side)
    return np.asarray(x_aligned) @ a.T + b


def residual_rotation_vector(r_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squashed rotation vector ``r/|r| * 0.2pi * tanh(|r|)`` and its Jacobian."""
    r = np.asarray(r_raw, dtype=float)
    s = float(np.linalg.norm(r))
    if s < _SERIES_EPS:
        s2 = s * s
        g = RESIDUAL_MAX_ANGLE * (1.0 - s2 / 3.0 + 2.0 * s2 * s2 / 15.0)
        gp_over_s = RESIDUAL_MAX_ANGLE * (-2.0 / 3.0 + 8.0 * s2 / 15.0 - 102.0 * s2 * s2 / 315.0)
    else:
        t = np.tanh(s)
        g = RESIDUAL_MAX_ANGLE * t / s
        gp_over_s = RESIDUAL_MAX_ANGLE * (s * (1.0 - t * t) - t) / s**3
    return g * r, g * np.eye(3) + gp_over_s * np.outer(r, r)


def residual_rotation_from_raw(r_raw: np.ndarray) -> np.ndarray:
    """Rotation by ``0.2pi * tanh(|r|)`` about ``r``; always strictly below 0.2pi."""
    return axis_angle_to_rotation(residual_rotation_vector(r_raw)[0])
