"""Quasi-static tension-only mass-spring membrane for the co-manipulated ply.

The ply is a regular particle grid clamped along the robot gripper edge and,
on the opposite edge, along the rigid segment between the two human clips.
Springs carry tension only (no compression, no bending), which is the minimal
model for a membrane without flexural rigidity.  Equilibrium shapes are found
by energy minimization; transient motion uses damped semi-implicit Euler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from softply.geometry import DeformationState, RigidTransform, to_transform


class PlysimError(ValueError):
    """Raised for invalid material specs, grasp configs, or mesh states."""


@dataclass(frozen=True)
class PlyMaterialSpec:
    """Geometry and stiffness of the rectangular ply."""

    width: float = 0.9            # robot-edge length (m)
    length: float = 0.6           # robot-to-human extent (m)
    grid_nu: int = 19             # node count along width
    grid_nv: int = 13             # node count along length
    areal_density: float = 0.3    # kg/m^2
    spring_stiffness: float = 400.0   # N/m, structural springs
    shear_stiffness: float = 200.0    # N/m, diagonal springs

    def __post_init__(self) -> None:
        if min(self.width, self.length, self.areal_density,
               self.spring_stiffness, self.shear_stiffness) <= 0:
            raise PlysimError("material parameters must be positive")
        if self.grid_nu < 2 or self.grid_nv < 2:
            raise PlysimError("grid must be at least 2x2 nodes")

    @property
    def node_mass(self) -> float:
        return self.areal_density * self.width * self.length / (self.grid_nu * self.grid_nv)


@dataclass(frozen=True)
class GraspConfig:
    """Placement of the two human clips along the far ply edge.

    Offsets are meters from the edge midpoint, left < right.
    """

    id: int
    clip_left_offset: float
    clip_right_offset: float

    def __post_init__(self) -> None:
        if self.clip_right_offset <= self.clip_left_offset:
            raise PlysimError(
                f"grasp {self.id}: clip separation must be positive "
                f"({self.clip_left_offset} >= {self.clip_right_offset})")


@dataclass(frozen=True)
class GraspFrame:
    """Pose of the human grasp proxy point relative to the robot gripper."""

    pose: RigidTransform

    @staticmethod
    def from_state(state: DeformationState) -> "GraspFrame":
        return GraspFrame(to_transform(state))


@dataclass
class EquilibriumResult:
    converged: bool
    iterations: int
    residual: float                      # max free-node force norm (N)
    energies: Optional[np.ndarray] = None  # per accepted iteration, if requested


class PlyMesh:
    """Particle grid with tension-only springs and clamped boundary rows.

    Node n = j * grid_nu + i; row j = 0 is the robot edge, row grid_nv - 1
    the human edge.  `positions` is the mutable simulation state; `home` is
    the flat layout in the robot gripper frame.
    """

    def __init__(self, positions: np.ndarray, springs: np.ndarray,
                 rest_lengths: np.ndarray, stiffness: np.ndarray,
                 free_idx: np.ndarray, node_mass: float,
                 grid_shape: Optional[tuple[int, int]] = None,
                 robot_edge_idx: Optional[np.ndarray] = None,
                 human_clamp_idx: Optional[np.ndarray] = None,
                 human_local: Optional[np.ndarray] = None,
                 clip_node_idx: Optional[np.ndarray] = None):
        self.positions = np.asarray(positions, dtype=np.float64).copy()
        self.velocities = np.zeros_like(self.positions)
        self.home = self.positions.copy()
        self.springs = np.asarray(springs, dtype=np.int64)
        self.rest_lengths = np.asarray(rest_lengths, dtype=np.float64)
        self.stiffness = np.asarray(stiffness, dtype=np.float64)
        self.free_idx = np.asarray(free_idx, dtype=np.int64)
        self.node_mass = float(node_mass)
        self.grid_shape = grid_shape
        self.robot_edge_idx = robot_edge_idx
        self.human_clamp_idx = human_clamp_idx
        self.human_local = human_local
        self.clip_node_idx = clip_node_idx
        if np.any(self.rest_lengths <= 0):
            raise PlysimError("spring rest lengths must be positive")

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def is_free(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.free_idx] = True
        return mask

    def reset_flat(self) -> None:
        """Return every node to the flat home layout with zero velocity."""
        self.positions[:] = self.home
        self.velocities[:] = 0.0

    def triangles(self) -> np.ndarray:
        """Two triangles per grid cell, diagonal fixed from (i, j) to (i+1, j+1)."""
        if self.grid_shape is None:
            raise PlysimError("mesh has no grid structure to triangulate")
        nu, nv = self.grid_shape
        tris = []
        for j in range(nv - 1):
            for i in range(nu - 1):
                a = j * nu + i
                b = j * nu + i + 1
                c = (j + 1) * nu + i
                d = (j + 1) * nu + i + 1
                tris.append((a, b, d))
                tris.append((a, d, c))
        return np.array(tris, dtype=np.int64)

    def forces(self, gravity: float = 9.81) -> np.ndarray:
        """Current spring + gravity force on every node (N, 3)."""
        force = np.zeros_like(self.positions)
        _accumulate_spring_forces(self.positions, self.springs,
                                  self.rest_lengths, self.stiffness, force)
        force[:, 2] -= self.node_mass * gravity
        return force

    def spring_tensions(self) -> np.ndarray:
        """Current tension of every spring (N,), zero when slack."""
        d = self.positions[self.springs[:, 1]] - self.positions[self.springs[:, 0]]
        ell = np.linalg.norm(d, axis=1)
        return np.maximum(0.0, ell - self.rest_lengths) * self.stiffness

    def energy(self, gravity: float = 9.81) -> float:
        return float(_total_energy(self.positions, self.springs, self.rest_lengths,
                                   self.stiffness, self.node_mass, gravity))


def spring_force(rest: float, current_length: float, k: float) -> float:
    """Tension of one spring: k·(length − rest) when stretched, else zero."""
    if current_length < 0:
        raise PlysimError("spring length cannot be negative")
    ext = current_length - rest
    return k * ext if ext > 0.0 else 0.0


def build_mesh(mat: PlyMaterialSpec, grasp: GraspConfig) -> PlyMesh:
    """Flat grid in the gripper frame with structural and shear springs.

    Structural springs join 4-neighbors, shear springs both diagonals of each
    cell; no bending springs.  The robot-edge row and the human-edge nodes
    from clip to clip (inclusive) are clamped.
    """
    nu, nv = mat.grid_nu, mat.grid_nv
    du = mat.width / (nu - 1)

    xs = np.linspace(-mat.width / 2.0, mat.width / 2.0, nu)
    ys = np.linspace(0.0, mat.length, nv)
    gx, gy = np.meshgrid(xs, ys)          # shape (nv, nu)
    positions = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(nu * nv)])

    def node(i: int, j: int) -> int:
        return j * nu + i

    # Rest lengths are the as-built distances so the flat layout is exactly
    # stress-free (nominal spacings differ from fp node distances by ulps).
    # Same arithmetic as the force kernel, down to summation order.
    def dist(a: int, b: int) -> float:
        dx = positions[b, 0] - positions[a, 0]
        dy = positions[b, 1] - positions[a, 1]
        dz = positions[b, 2] - positions[a, 2]
        return math.sqrt(dx * dx + dy * dy + dz * dz)

    springs, rest, ks = [], [], []
    for j in range(nv):
        for i in range(nu):
            if i + 1 < nu:
                springs.append((node(i, j), node(i + 1, j)))
                rest.append(dist(*springs[-1]))
                ks.append(mat.spring_stiffness)
            if j + 1 < nv:
                springs.append((node(i, j), node(i, j + 1)))
                rest.append(dist(*springs[-1]))
                ks.append(mat.spring_stiffness)
            if i + 1 < nu and j + 1 < nv:
                springs.append((node(i, j), node(i + 1, j + 1)))
                rest.append(dist(*springs[-1]))
                ks.append(mat.shear_stiffness)
                springs.append((node(i + 1, j), node(i, j + 1)))
                rest.append(dist(*springs[-1]))
                ks.append(mat.shear_stiffness)

    half_w = mat.width / 2.0
    if not (-half_w <= grasp.clip_left_offset <= half_w
            and -half_w <= grasp.clip_right_offset <= half_w):
        raise PlysimError(f"grasp {grasp.id}: clip offsets outside the ply edge")
    col_left = round((grasp.clip_left_offset + half_w) / du)
    col_right = round((grasp.clip_right_offset + half_w) / du)
    if col_left == col_right:
        raise PlysimError(
            f"grasp {grasp.id}: clips round to the same grid column {col_left}")

    robot_edge = np.array([node(i, 0) for i in range(nu)], dtype=np.int64)
    human_clamp = np.array([node(i, nv - 1) for i in range(col_left, col_right + 1)],
                           dtype=np.int64)
    clip_nodes = np.array([node(col_left, nv - 1), node(col_right, nv - 1)],
                          dtype=np.int64)

    clamped = np.zeros(nu * nv, dtype=bool)
    clamped[robot_edge] = True
    clamped[human_clamp] = True
    free_idx = np.flatnonzero(~clamped).astype(np.int64)

    # Human-segment offsets from the grasp proxy point (edge midpoint at rest).
    h_gp_home = np.array([0.0, mat.length, 0.0])
    human_local = positions[human_clamp] - h_gp_home

    return PlyMesh(positions, np.array(springs, dtype=np.int64),
                   np.array(rest, dtype=np.float64), np.array(ks, dtype=np.float64),
                   free_idx, mat.node_mass, grid_shape=(nu, nv),
                   robot_edge_idx=robot_edge, human_clamp_idx=human_clamp,
                   human_local=human_local, clip_node_idx=clip_nodes)


def set_boundary(mesh: PlyMesh, state: DeformationState) -> None:
    """Clamp the boundary for a commanded deformation state (gripper frame)."""
    set_boundary_world(mesh, RigidTransform.identity(), to_transform(state))


def set_boundary_world(mesh: PlyMesh, robot_pose: RigidTransform,
                       human_pose: RigidTransform) -> None:
    """Clamp boundary nodes for explicit robot and grasp-proxy poses.

    `robot_pose` maps the gripper frame into the simulation frame and carries
    the robot-edge nodes; `human_pose` places the rigid clip segment.
    """
    if mesh.robot_edge_idx is None or mesh.human_clamp_idx is None:
        raise PlysimError("mesh has no boundary structure")
    mesh.positions[mesh.robot_edge_idx] = robot_pose.apply(mesh.home[mesh.robot_edge_idx])
    mesh.positions[mesh.human_clamp_idx] = human_pose.apply(mesh.human_local)
    mesh.velocities[mesh.robot_edge_idx] = 0.0
    mesh.velocities[mesh.human_clamp_idx] = 0.0


def solve_equilibrium(mesh: PlyMesh, gravity: float = 9.81, tol: float = 1e-6,
                      max_iters: int = 500,
                      record_energy: bool = False) -> EquilibriumResult:
    """Minimize total energy over the free nodes; damped Newton descent.

    The tension-only energy is convex, so each step solves the regularized
    system (H + λI)·dx = F on the free nodes (banded Cholesky; the grid graph
    has small bandwidth) and backtracks (halving) until the energy does not
    increase, making accepted iterations monotone in energy.  λ adapts
    Levenberg-style so fully slack nodes cannot produce unbounded steps.
    Converged when the max free-node force norm is at most `tol`.
    `mesh.positions` is the starting guess, updated in place.
    """
    from scipy.linalg import solveh_banded

    if tol <= 0:
        raise PlysimError("tol must be positive")
    pos = mesh.positions
    free = mesh.free_idx
    nfree = free.shape[0]
    mesh.velocities[:] = 0.0
    energies = [float(_total_energy(pos, mesh.springs, mesh.rest_lengths,
                                    mesh.stiffness, mesh.node_mass, gravity))]
    if nfree == 0:
        return EquilibriumResult(True, 0, 0.0,
                                 np.array(energies) if record_energy else None)

    node_to_free = np.full(mesh.n_nodes, -1, dtype=np.int64)
    node_to_free[free] = np.arange(nfree)
    fa = node_to_free[mesh.springs[:, 0]]
    fb = node_to_free[mesh.springs[:, 1]]
    both = (fa >= 0) & (fb >= 0)
    bw_nodes = int(np.abs(fa[both] - fb[both]).max()) if both.any() else 0
    bw = 3 * bw_nodes + 2
    ab = np.zeros((bw + 1, 3 * nfree))

    force = np.zeros_like(pos)
    grad = np.zeros((nfree, 3))
    kmax = float(mesh.stiffness.max()) if mesh.stiffness.size else 1.0
    lam_min = 1e-8 * kmax
    lam = lam_min

    residual = _free_gradient(pos, mesh.springs, mesh.rest_lengths,
                              mesh.stiffness, free, mesh.node_mass, gravity,
                              force, grad)
    converged = residual <= tol
    it = 0
    while not converged and it < max_iters:
        _hessian_banded(pos, mesh.springs, mesh.rest_lengths, mesh.stiffness,
                        node_to_free, bw, lam, ab)
        try:
            dx = solveh_banded(ab, -grad.ravel(), lower=False).reshape(nfree, 3)
        except np.linalg.LinAlgError:
            lam = lam * 100.0
            if lam > 1e8 * kmax:
                break
            continue

        x0 = pos[free].copy()
        energy = energies[-1]
        scale = 1.0
        accepted = False
        for _ in range(60):
            pos[free] = x0 + scale * dx
            trial = float(_total_energy(pos, mesh.springs, mesh.rest_lengths,
                                        mesh.stiffness, mesh.node_mass, gravity))
            if trial <= energy:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            pos[free] = x0
            if lam >= 1e4 * kmax:
                break   # energy at floating-point resolution; cannot descend
            lam *= 100.0
            continue
        lam = max(lam_min, lam * (0.25 if scale == 1.0 else 10.0))
        energies.append(trial)
        it += 1
        residual = _free_gradient(pos, mesh.springs, mesh.rest_lengths,
                                  mesh.stiffness, free, mesh.node_mass,
                                  gravity, force, grad)
        converged = residual <= tol

    return EquilibriumResult(bool(converged), it, float(residual),
                             np.array(energies) if record_energy else None)


def step_dynamics(mesh: PlyMesh, dt: float, damping: float = 0.0,
                  gravity: float = 9.81) -> None:
    """One semi-implicit Euler step; clamped nodes stay where the boundary put them.

    Viscous damping (1/s) is applied implicitly for stability:
    v' = (v + dt·F/m) / (1 + damping·dt).
    """
    if dt <= 0:
        raise PlysimError("dt must be positive")
    _step_dynamics(mesh.positions, mesh.velocities, mesh.springs,
                   mesh.rest_lengths, mesh.stiffness, mesh.free_idx,
                   mesh.node_mass, float(gravity), float(dt), float(damping))


# -- numba kernels ----------------------------------------------------------

@njit(cache=True)
def _accumulate_spring_forces(pos, springs, rest, ks, force):
    for s in range(springs.shape[0]):
        a = springs[s, 0]
        b = springs[s, 1]
        dx = pos[b, 0] - pos[a, 0]
        dy = pos[b, 1] - pos[a, 1]
        dz = pos[b, 2] - pos[a, 2]
        ell = math.sqrt(dx * dx + dy * dy + dz * dz)
        ext = ell - rest[s]
        if ext > 0.0 and ell > 0.0:
            f = ks[s] * ext / ell
            fx = f * dx
            fy = f * dy
            fz = f * dz
            force[a, 0] += fx
            force[a, 1] += fy
            force[a, 2] += fz
            force[b, 0] -= fx
            force[b, 1] -= fy
            force[b, 2] -= fz


@njit(cache=True)
def _total_energy(pos, springs, rest, ks, node_mass, gravity):
    e = 0.0
    for s in range(springs.shape[0]):
        a = springs[s, 0]
        b = springs[s, 1]
        dx = pos[b, 0] - pos[a, 0]
        dy = pos[b, 1] - pos[a, 1]
        dz = pos[b, 2] - pos[a, 2]
        ext = math.sqrt(dx * dx + dy * dy + dz * dz) - rest[s]
        if ext > 0.0:
            e += 0.5 * ks[s] * ext * ext
    for n in range(pos.shape[0]):
        e += node_mass * gravity * pos[n, 2]
    return e


@njit(cache=True)
def _free_gradient(pos, springs, rest, ks, free_idx, node_mass, gravity,
                   force, grad):
    """Energy gradient w.r.t. free positions; returns max force norm (residual)."""
    force[:] = 0.0
    _accumulate_spring_forces(pos, springs, rest, ks, force)
    res = 0.0
    for f in range(free_idx.shape[0]):
        n = free_idx[f]
        fx = force[n, 0]
        fy = force[n, 1]
        fz = force[n, 2] - node_mass * gravity
        grad[f, 0] = -fx
        grad[f, 1] = -fy
        grad[f, 2] = -fz
        norm = math.sqrt(fx * fx + fy * fy + fz * fz)
        if norm > res:
            res = norm
    return res


@njit(cache=True)
def _hessian_banded(pos, springs, rest, ks, node_to_free, bw, lam, ab):
    """Generalized Hessian of the tension-only energy in LAPACK upper-banded form.

    Per taut spring the 3x3 block is k·[(1−ℓ₀/ℓ)·I + (ℓ₀/ℓ)·d̂d̂ᵀ] (PSD for
    ℓ ≥ ℓ₀); slack springs contribute nothing.  `ab[bw + r - c, c]` holds
    entry (r, c) of H + λI for r ≤ c.
    """
    ab[:] = 0.0
    n = ab.shape[1]
    for i in range(n):
        ab[bw, i] = lam
    for s in range(springs.shape[0]):
        a = springs[s, 0]
        b = springs[s, 1]
        fa = node_to_free[a]
        fb = node_to_free[b]
        if fa < 0 and fb < 0:
            continue
        dx = pos[b, 0] - pos[a, 0]
        dy = pos[b, 1] - pos[a, 1]
        dz = pos[b, 2] - pos[a, 2]
        ell = math.sqrt(dx * dx + dy * dy + dz * dz)
        if ell <= rest[s] or ell <= 0.0:
            continue
        k = ks[s]
        iso = k * (1.0 - rest[s] / ell)
        aniso = k * rest[s] / (ell * ell * ell)
        for ci in range(3):
            di = dx if ci == 0 else (dy if ci == 1 else dz)
            for cj in range(3):
                dj = dx if cj == 0 else (dy if cj == 1 else dz)
                block = aniso * di * dj
                if ci == cj:
                    block += iso
                if fa >= 0 and ci <= cj:
                    ab[bw + ci - cj, 3 * fa + cj] += block
                if fb >= 0 and ci <= cj:
                    ab[bw + ci - cj, 3 * fb + cj] += block
                if fa >= 0 and fb >= 0:
                    # Off-diagonal block −B; keep the upper-triangle copy.
                    lo = fa if fa < fb else fb
                    hi = fb if fa < fb else fa
                    r = 3 * lo + (ci if fa < fb else cj)
                    c = 3 * hi + (cj if fa < fb else ci)
                    ab[bw + r - c, c] += -block


@njit(cache=True)
def _step_dynamics(pos, vel, springs, rest, ks, free_idx, node_mass, gravity,
                   dt, damping):
    force = np.zeros_like(pos)
    _accumulate_spring_forces(pos, springs, rest, ks, force)
    damp = 1.0 / (1.0 + damping * dt)
    inv_m = 1.0 / node_mass
    for f in range(free_idx.shape[0]):
        n = free_idx[f]
        ax = force[n, 0] * inv_m
        ay = force[n, 1] * inv_m
        az = force[n, 2] * inv_m - gravity
        vel[n, 0] = (vel[n, 0] + dt * ax) * damp
        vel[n, 1] = (vel[n, 1] + dt * ay) * damp
        vel[n, 2] = (vel[n, 2] + dt * az) * damp
        pos[n, 0] += dt * vel[n, 0]
        pos[n, 1] += dt * vel[n, 1]
        pos[n, 2] += dt * vel[n, 2]
