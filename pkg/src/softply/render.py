"""Synthetic depth camera: pinhole projection, z-buffer rasterization, noise.

Depth images are row-major float32 grids in meters with 0 marking
no-return/background.  Pixel (u, v) samples the continuous image point
(u + 0.5, v + 0.5) (top-left pixel-center convention).  The camera is rigid
to the robot gripper; its `pose` maps camera-frame points into the gripper
frame (z forward, x right, y down in the image).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from softply.geometry import RigidTransform
from softply.plysim import PlyMesh


class RenderError(ValueError):
    """Raised for invalid camera parameters or geometry behind the camera."""


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform          # camera frame -> robot gripper frame
    z_near: float = 0.2
    z_far: float = 2.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")
        if not 0 < self.z_near < self.z_far:
            raise RenderError("need 0 < z_near < z_far")
        if self.width < 1 or self.height < 1:
            raise RenderError("image dimensions must be positive")


@dataclass
class DepthImage:
    width: int
    height: int
    values: np.ndarray            # (height, width) float32, meters, 0 = invalid

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (self.height, self.width):
            raise RenderError(
                f"value grid {self.values.shape} does not match "
                f"{self.height}x{self.width}")

    def copy(self) -> "DepthImage":
        return DepthImage(self.width, self.height, self.values.copy())


@dataclass(frozen=True)
class NoiseModel:
    sigma_per_meter: float = 0.0  # std of additive noise = sigma_per_meter * depth
    dropout_prob: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_per_meter < 0:
            raise RenderError("sigma_per_meter must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise RenderError("dropout_prob must be in [0, 1]")


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose with +z toward `target` and image-down along world −up."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise RenderError("eye and target coincide")
    zc = fwd / n
    xc = np.cross(zc, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(xc)
    if nx < 1e-12:
        raise RenderError("view direction parallel to up vector")
    xc /= nx
    yc = np.cross(zc, xc)
    rot = np.column_stack([xc, yc, zc])
    # Re-orthonormalize to survive the strict RigidTransform check.
    u, _, vt = np.linalg.svd(rot)
    return RigidTransform(u @ vt, eye)


def project(cam: CameraModel, point) -> tuple[float, float, float]:
    """Pinhole projection of one camera-frame point to (u, v, depth)."""
    x, y, z = (float(c) for c in np.asarray(point, dtype=np.float64))
    if z <= 0.0:
        raise RenderError(f"point behind camera (z = {z})")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z)


def rasterize(cam: CameraModel, mesh: PlyMesh,
              camera_pose: Optional[RigidTransform] = None) -> DepthImage:
    """Z-buffered depth render of the triangulated ply mesh.

    `camera_pose` is the camera pose in the mesh's coordinate frame and
    defaults to `cam.pose` (mesh in the gripper frame).  Depth interpolation
    is perspective-correct; the nearest surface wins per pixel; pixels with
    no hit or with depth outside [z_near, z_far] read 0.
    """
    pose = cam.pose if camera_pose is None else camera_pose
    verts = pose.inverse().apply(mesh.positions)
    return rasterize_triangles(cam, verts, mesh.triangles())


def rasterize_triangles(cam: CameraModel, verts_cam: np.ndarray,
                        tris: np.ndarray) -> DepthImage:
    """Rasterize explicit camera-frame triangles (also used by test oracles)."""
    verts = np.ascontiguousarray(verts_cam, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    buf = _raster_kernel(verts, tris, cam.fx, cam.fy, cam.cx, cam.cy,
                         cam.width, cam.height, cam.z_near, cam.z_far)
    return DepthImage(cam.width, cam.height, buf.astype(np.float32))


def project_anchors(cam: CameraModel, mesh: PlyMesh,
                    camera_pose: Optional[RigidTransform] = None) -> np.ndarray:
    """Pixel coordinates (2, 2) of the two human-clip endpoint nodes.

    Synthetic stand-in for fiducial tags on the clip frame; feeds the
    preprocessing mask line.
    """
    if mesh.clip_node_idx is None:
        raise RenderError("mesh has no clip endpoints")
    pose = cam.pose if camera_pose is None else camera_pose
    pts = pose.inverse().apply(mesh.positions[mesh.clip_node_idx])
    out = np.empty((2, 2), dtype=np.float64)
    for i in range(2):
        u, v, _ = project(cam, pts[i])
        out[i] = (u, v)
    return out


def apply_noise(img: DepthImage, noise: NoiseModel, z_near: float,
                z_far: float) -> DepthImage:
    """Seeded sensor noise: per-pixel dropout, then depth-proportional Gaussian.

    Pure function of (image, noise model): the per-pixel streams come from a
    counter-based generator keyed by the seed, so outputs are bit-identical
    across runs and platforms.  Zero (invalid) pixels stay zero; noisy values
    clamp to [z_near, z_far].
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(noise.seed)))
    shape = img.values.shape
    drop = rng.random(shape)
    gauss = rng.standard_normal(shape)
    vals = img.values.astype(np.float64)
    nonzero = vals > 0.0
    noisy = vals + gauss * noise.sigma_per_meter * vals
    noisy = np.clip(noisy, z_near, z_far)
    keep = nonzero & (drop >= noise.dropout_prob)
    out = np.where(keep, noisy, 0.0).astype(np.float32)
    return DepthImage(img.width, img.height, out)


def write_pgm(img: DepthImage, path) -> None:
    """Debug dump as 16-bit PGM in millimeters."""
    mm = np.clip(np.round(img.values * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())


@njit(cache=True)
def _raster_kernel(verts, tris, fx, fy, cx, cy, width, height, z_near, z_far):
    depth = np.full((height, width), np.inf)
    for t in range(tris.shape[0]):
        i0 = tris[t, 0]
        i1 = tris[t, 1]
        i2 = tris[t, 2]
        z0 = verts[i0, 2]
        z1 = verts[i1, 2]
        z2 = verts[i2, 2]
        if z0 <= 1e-12 or z1 <= 1e-12 or z2 <= 1e-12:
            continue
        u0 = fx * verts[i0, 0] / z0 + cx
        v0 = fy * verts[i0, 1] / z0 + cy
        u1 = fx * verts[i1, 0] / z1 + cx
        v1 = fy * verts[i1, 1] / z1 + cy
        u2 = fx * verts[i2, 0] / z2 + cx
        v2 = fy * verts[i2, 1] / z2 + cy

        area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
        if abs(area) < 1e-14:
            continue

        umin = min(u0, min(u1, u2))
        umax = max(u0, max(u1, u2))
        vmin = min(v0, min(v1, v2))
        vmax = max(v0, max(v1, v2))
        px_lo = max(0, int(math.ceil(umin - 0.5)))
        px_hi = min(width - 1, int(math.floor(umax - 0.5)))
        py_lo = max(0, int(math.ceil(vmin - 0.5)))
        py_hi = min(height - 1, int(math.floor(vmax - 0.5)))

        inv_z0 = 1.0 / z0
        inv_z1 = 1.0 / z1
        inv_z2 = 1.0 / z2
        for py in range(py_lo, py_hi + 1):
            pv = py + 0.5
            for px in range(px_lo, px_hi + 1):
                pu = px + 0.5
                w0 = (u2 - u1) * (pv - v1) - (v2 - v1) * (pu - u1)
                w1 = (u0 - u2) * (pv - v2) - (v0 - v2) * (pu - u2)
                w2 = (u1 - u0) * (pv - v0) - (v1 - v0) * (pu - u0)
                if area > 0.0:
                    inside = w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0
                else:
                    inside = w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0
                if not inside:
                    continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                inv_z = b0 * inv_z0 + b1 * inv_z1 + b2 * inv_z2
                if inv_z <= 0.0:
                    continue
                z = 1.0 / inv_z
                if z < depth[py, px]:
                    depth[py, px] = z
    out = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            z = depth[py, px]
            if np.isfinite(z) and z_near <= z <= z_far:
                out[py, px] = z
    return out
