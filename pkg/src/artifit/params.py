"""Free parameters fitted per instance and the shared template."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

N_ANCHORS = 60

PARAM_NAMES = (
    "anchor_rot",
    "anchor_trans",
    "seg_x",
    "seg_y",
    "pivot_x",
    "dir_x",
    "state_x",
    "pivot_y",
    "dir_y",
    "state_y",
    "deform",
)


@dataclass
class InstanceParams:
    """Direct stand-ins for the network heads of one instance.

    Shapes: ``anchor_rot``/``anchor_trans`` (60, 3); ``seg_x`` (P, N);
    ``seg_y`` (P, M); ``pivot_*``/``dir_*`` (J, 3); ``state_*`` (J, 2);
    ``deform`` (M, 3). Directions are raw and normalized on use.
    """

    anchor_rot: np.ndarray
    anchor_trans: np.ndarray
    seg_x: np.ndarray
    seg_y: np.ndarray
    pivot_x: np.ndarray
    dir_x: np.ndarray
    state_x: np.ndarray
    pivot_y: np.ndarray
    dir_y: np.ndarray
    state_y: np.ndarray
    deform: np.ndarray

    def copy(self) -> "InstanceParams":
        return InstanceParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def zeros_like(cls, other: "InstanceParams") -> "InstanceParams":
        return cls(**{name: np.zeros_like(getattr(other, name)) for name in PARAM_NAMES})

    @property
    def n_parts(self) -> int:
        return self.seg_x.shape[0]

    @property
    def n_joints(self) -> int:
        return self.pivot_x.shape[0]


@dataclass
class Template:
    """Category-common base shape, ``(M, 3)``."""

    base: np.ndarray

    def copy(self) -> "Template":
        return Template(self.base.copy())
