"""Deformation-state parameterization and target-pose grids.

The relative pose between the robot gripper and the human grasp proxy is
parameterized by three translations and two rotations (about y, then z);
rotation about x is identically zero and not represented.  All angles are
radians, all lengths meters; degrees are accepted only at config boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

AXES = ("x", "y", "z", "theta", "gamma")

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for invalid poses, transforms, or grid specs."""


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise GeometryError(f"{name}: non-finite component {v!r}")


@dataclass(frozen=True)
class DeformationState:
    """5-parameter relative pose (x, y, z meters; theta, gamma radians)."""

    x: float
    y: float
    z: float
    theta: float
    gamma: float

    def __post_init__(self) -> None:
        _check_finite("DeformationState", self.x, self.y, self.z, self.theta, self.gamma)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta, self.gamma], dtype=np.float64)

    @staticmethod
    def from_array(v) -> "DeformationState":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (5,):
            raise GeometryError(f"expected 5 components, got shape {v.shape}")
        return DeformationState(*(float(c) for c in v))


@dataclass(frozen=True)
class RestConfiguration:
    """Desired rest deformation state the controller regulates toward."""

    desired: DeformationState


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3 orthonormal, det +1) plus translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or tra.shape != (3,):
            raise GeometryError(f"bad shapes: rotation {rot.shape}, translation {tra.shape}")
        if not (np.isfinite(rot).all() and np.isfinite(tra).all()):
            raise GeometryError("non-finite transform")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise GeometryError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise GeometryError(f"rotation determinant {det:.12f} != +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Map points (3,) or (N, 3) through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self · other (apply `other` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_transform(s: DeformationState) -> RigidTransform:
    """Rigid transform of the grasp-proxy frame: R = Ry(theta)·Rz(gamma), t = (x, y, z)."""
    return RigidTransform(rot_y(s.theta) @ rot_z(s.gamma),
                          np.array([s.x, s.y, s.z]))


def from_transform(t: RigidTransform, x_residual_tol: float = 1e-6) -> DeformationState:
    """Invert :func:`to_transform`.

    The rotation must be expressible as Ry(theta)·Rz(gamma); a residual
    x-axis rotation larger than `x_residual_tol` (radians) is an error
    because the parameterization cannot represent it.
    """
    rot = t.rotation
    # For R = Ry(th)·Rz(ga): R[1,0] = sin(ga), R[1,1] = cos(ga),
    # R[0,2] = sin(th), R[2,2] = cos(th).
    gamma = math.atan2(rot[1, 0], rot[1, 1])
    theta = math.atan2(rot[0, 2], rot[2, 2])
    rebuilt = rot_y(theta) @ rot_z(gamma)
    # Residual rotation angle of rebuiltᵀ·R; nonzero only through an x component.
    cos_res = (np.trace(rebuilt.T @ rot) - 1.0) / 2.0
    residual = math.acos(min(1.0, max(-1.0, cos_res)))
    if residual > x_residual_tol:
        raise GeometryError(
            f"rotation has a non-recoverable x component (residual {residual:.3e} rad)")
    return DeformationState(float(t.translation[0]), float(t.translation[1]),
                            float(t.translation[2]), theta, gamma)


def delta(current: DeformationState, desired: DeformationState) -> np.ndarray:
    """Component-wise difference current − desired as a 5-vector."""
    return current.as_array() - desired.as_array()


@dataclass(frozen=True)
class AxisSpec:
    """Lattice of one grid axis: center − half_range … center + half_range."""

    center: float
    half_range: float
    step: float

    def __post_init__(self) -> None:
        _check_finite("AxisSpec", self.center, self.half_range, self.step)
        if self.half_range < 0:
            raise GeometryError(f"half_range must be >= 0, got {self.half_range}")
        if self.step <= 0:
            raise GeometryError(f"step must be > 0, got {self.step}")

    def values(self) -> np.ndarray:
        if self.half_range == 0.0:
            return np.array([self.center])
        span = 2.0 * self.half_range
        if self.step > span:
            raise GeometryError(
                f"step {self.step} exceeds axis span {span}")
        n = span / self.step
        n_round = round(n)
        if abs(n - n_round) > 1e-9 * max(1.0, n):
            raise GeometryError(
                f"step {self.step} does not evenly divide span {span}")
        # Endpoint inclusive lattice; linspace keeps both ends exact.
        return np.linspace(self.center - self.half_range,
                           self.center + self.half_range, n_round + 1)


@dataclass(frozen=True)
class PoseGridSpec:
    """Per-axis lattices for the 5 deformation-state axes."""

    x: AxisSpec
    y: AxisSpec
    z: AxisSpec
    theta: AxisSpec
    gamma: AxisSpec

    def axes(self) -> tuple[AxisSpec, ...]:
        return (self.x, self.y, self.z, self.theta, self.gamma)

    def axis_values(self) -> list[np.ndarray]:
        return [a.values() for a in self.axes()]

    def pose_count(self) -> int:
        return int(np.prod([len(v) for v in self.axis_values()]))


def enumerate_grid(spec: PoseGridSpec) -> list[DeformationState]:
    """All grid poses, ordered lexicographically by (x, y, z, theta, gamma) index."""
    return list(iter_grid(spec))


def iter_grid(spec: PoseGridSpec) -> Iterator[DeformationState]:
    """Lazy variant of :func:`enumerate_grid` (same deterministic order)."""
    vx, vy, vz, vth, vga = spec.axis_values()
    for x in vx:
        for y in vy:
            for z in vz:
                for th in vth:
                    for ga in vga:
                        yield DeformationState(float(x), float(y), float(z),
                                               float(th), float(ga))


def grid_pose(spec: PoseGridSpec, index: int) -> DeformationState:
    """Pose at a flat grid index (same ordering as :func:`enumerate_grid`)."""
    values = spec.axis_values()
    counts = [len(v) for v in values]
    total = int(np.prod(counts))
    if not 0 <= index < total:
        raise GeometryError(f"pose index {index} outside grid of {total}")
    out = []
    rem = index
    for v, c in zip(reversed(values), reversed(counts)):
        out.append(float(v[rem % c]))
        rem //= c
    ga, th, z, y, x = out
    return DeformationState(x, y, z, th, ga)
