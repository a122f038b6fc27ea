import numpy as np
import pytest

from softply.geometry import DeformationState, RigidTransform
from softply.plysim import GraspConfig, PlyMaterialSpec, build_mesh, set_boundary, solve_equilibrium
from softply.render import (
    CameraModel,
    DepthImage,
    NoiseModel,
    RenderError,
    apply_noise,
    look_at,
    project,
    project_anchors,
    rasterize,
    rasterize_triangles,
    write_pgm,
)

CAM32 = CameraModel(fx=20.0, fy=20.0, cx=16.0, cy=16.0, width=32, height=32,
                    pose=RigidTransform.identity(), z_near=0.1, z_far=10.0)


def raycast_oracle(cam, verts, tris):
    """Per-pixel Moller-Trumbore intersection; independent of the rasterizer.

    Casts the ray through each pixel center and keeps the nearest hit, then
    applies the same [z_near, z_far] validity rule.
    """
    out = np.zeros((cam.height, cam.width), dtype=np.float64)
    for py in range(cam.height):
        for px in range(cam.width):
            d = np.array([(px + 0.5 - cam.cx) / cam.fx,
                          (py + 0.5 - cam.cy) / cam.fy,
                          1.0])
            best = np.inf
            for (i0, i1, i2) in tris:
                v0, v1, v2 = verts[i0], verts[i1], verts[i2]
                e1 = v1 - v0
                e2 = v2 - v0
                pvec = np.cross(d, e2)
                det = e1 @ pvec
                if abs(det) < 1e-14:
                    continue
                inv = 1.0 / det
                tvec = -v0
                u = (tvec @ pvec) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qvec = np.cross(tvec, e1)
                v = (d @ qvec) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2 @ qvec) * inv
                if t > 0.0 and t < best:
                    best = t
            if np.isfinite(best) and cam.z_near <= best <= cam.z_far:
                out[py, px] = best
    return out


def random_mesh(rng, n_tris):
    n_verts = n_tris + 2
    verts = np.empty((n_verts, 3))
    verts[:, 0] = rng.uniform(-1.2, 1.2, n_verts)
    verts[:, 1] = rng.uniform(-1.2, 1.2, n_verts)
    verts[:, 2] = rng.uniform(0.5, 3.0, n_verts)
    tris = rng.integers(0, n_verts, size=(n_tris, 3))
    good = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    return verts, tris[good].astype(np.int64)


class TestProject:
    def test_optical_axis(self):
        assert project(CAM32, (0, 0, 2.0)) == (16.0, 16.0, 2.0)

    def test_one_pixel_offset(self):
        z = 1.7
        u, v, d = project(CAM32, (z / CAM32.fx, 0.0, z))
        assert u == pytest.approx(17.0, abs=1e-6)
        assert v == pytest.approx(16.0, abs=1e-6)
        assert d == z

    def test_behind_camera(self):
        with pytest.raises(RenderError):
            project(CAM32, (0, 0, -1.0))


class TestRasterize:
    def test_fronto_parallel_triangle_constant_depth(self):
        verts = np.array([[-5.0, -5.0, 1.0], [5.0, -5.0, 1.0], [0.0, 5.0, 1.0]])
        tris = np.array([[0, 1, 2]])
        img = rasterize_triangles(CAM32, verts, tris)
        covered = img.values[img.values > 0]
        assert covered.size > 200
        np.testing.assert_array_equal(covered, np.float32(1.0))

    def test_z_buffer_prefers_near(self):
        verts = np.array([
            [-5.0, -5.0, 1.0], [5.0, -5.0, 1.0], [0.0, 5.0, 1.0],
            [-10.0, -10.0, 2.0], [10.0, -10.0, 2.0], [0.0, 10.0, 2.0],
        ])
        tris = np.array([[0, 1, 2], [3, 4, 5]])
        img = rasterize_triangles(CAM32, verts, tris)
        near = rasterize_triangles(CAM32, verts[:3], tris[:1])
        mask = near.values > 0
        np.testing.assert_array_equal(img.values[mask], near.values[mask])
        assert np.all(img.values[~mask & (img.values > 0)] == np.float32(2.0))

    def test_slanted_quad_matches_raycast(self):
        verts = np.array([
            [-1.013, -0.991, 1.007], [1.021, -1.017, 1.503],
            [0.989, 1.023, 2.211], [-1.031, 0.979, 1.613],
        ])
        tris = np.array([[0, 1, 2], [0, 2, 3]])
        img = rasterize_triangles(CAM32, verts, tris)
        oracle = raycast_oracle(CAM32, verts, tris)
        np.testing.assert_allclose(img.values, oracle, atol=1e-5)

    def test_random_meshes_match_raycast(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            verts, tris = random_mesh(rng, n_tris=rng.integers(5, 50))
            img = rasterize_triangles(CAM32, verts, tris)
            oracle = raycast_oracle(CAM32, verts, tris)
            np.testing.assert_allclose(img.values, oracle, atol=1e-5)

    def test_out_of_range_depths_are_zero(self):
        cam = CameraModel(fx=20, fy=20, cx=16, cy=16, width=32, height=32,
                          pose=RigidTransform.identity(), z_near=1.5, z_far=2.0)
        verts = np.array([[-5.0, -5.0, 1.0], [5.0, -5.0, 1.0], [0.0, 5.0, 1.0]])
        img = rasterize_triangles(cam, verts, np.array([[0, 1, 2]]))
        np.testing.assert_array_equal(img.values, 0.0)

    def test_ply_mesh_render_has_content(self):
        mat = PlyMaterialSpec(width=0.4, length=0.3, grid_nu=7, grid_nv=5)
        mesh = build_mesh(mat, GraspConfig(0, -0.2, 0.2))
        set_boundary(mesh, DeformationState(0, 0.3, 0, 0, 0))
        solve_equilibrium(mesh, tol=1e-6)
        cam = CameraModel(fx=60, fy=60, cx=32, cy=24, width=64, height=48,
                          pose=look_at((0.0, 0.0, 0.4), (0.0, 0.2, 0.0)),
                          z_near=0.05, z_far=2.0)
        img = rasterize(cam, mesh)
        assert np.count_nonzero(img.values) > 100
        inside = img.values[img.values > 0]
        assert inside.min() >= cam.z_near and inside.max() <= cam.z_far


class TestAnchors:
    def _scene(self, state):
        mat = PlyMaterialSpec(width=0.4, length=0.3, grid_nu=7, grid_nv=5)
        mesh = build_mesh(mat, GraspConfig(0, -0.2, 0.2))
        set_boundary(mesh, state)
        cam = CameraModel(fx=60, fy=60, cx=32, cy=24, width=64, height=48,
                          pose=look_at((0.0, 0.0, 0.4), (0.0, 0.2, 0.0)),
                          z_near=0.05, z_far=2.0)
        return mesh, cam

    def test_symmetric_pose_symmetric_anchors(self):
        mesh, cam = self._scene(DeformationState(0, 0.3, 0, 0, 0))
        anchors = project_anchors(cam, mesh)
        mid = 0.5 * (anchors[0, 0] + anchors[1, 0])
        assert mid == pytest.approx(cam.cx, abs=0.5)
        assert anchors[0, 1] == pytest.approx(anchors[1, 1], abs=0.5)

    def test_matches_project(self):
        mesh, cam = self._scene(DeformationState(0.02, 0.32, -0.01, 0.1, -0.05))
        anchors = project_anchors(cam, mesh)
        pts = cam.pose.inverse().apply(mesh.positions[mesh.clip_node_idx])
        for i in range(2):
            u, v, _ = project(cam, pts[i])
            np.testing.assert_allclose(anchors[i], (u, v), atol=1e-12)

    def test_anchor_on_optical_axis(self):
        cam = CameraModel(fx=50, fy=50, cx=20, cy=15, width=40, height=30,
                          pose=RigidTransform.identity(), z_near=0.1, z_far=5.0)
        mat = PlyMaterialSpec(width=0.4, length=0.3, grid_nu=7, grid_nv=5)
        mesh = build_mesh(mat, GraspConfig(0, -0.2, 0.2))
        # Place the left clip node on the camera axis by brute translation.
        left = mesh.clip_node_idx[0]
        mesh.positions -= mesh.positions[left]
        mesh.positions[:, 2] += 1.0
        anchors = project_anchors(cam, mesh)
        np.testing.assert_allclose(anchors[0], (cam.cx, cam.cy), atol=1e-9)

    def test_behind_camera_rejected(self):
        mesh, cam = self._scene(DeformationState(0, 0.3, 0, 0, 0))
        mesh.positions[:, :] = [0.0, 0.0, 10.0]  # far behind given camera z axis
        with pytest.raises(RenderError):
            project_anchors(cam, mesh)


class TestNoise:
    def _img(self):
        rng = np.random.default_rng(5)
        vals = rng.uniform(0.5, 1.5, size=(24, 32)).astype(np.float32)
        vals[rng.random((24, 32)) < 0.2] = 0.0
        return DepthImage(32, 24, vals)

    def test_noiseless_identity(self):
        img = self._img()
        out = apply_noise(img, NoiseModel(0.0, 0.0, seed=9), 0.1, 3.0)
        np.testing.assert_array_equal(out.values, img.values)

    def test_full_dropout(self):
        img = self._img()
        out = apply_noise(img, NoiseModel(0.01, 1.0, seed=9), 0.1, 3.0)
        np.testing.assert_array_equal(out.values, 0.0)

    def test_deterministic(self):
        img = self._img()
        noise = NoiseModel(0.02, 0.1, seed=1234)
        a = apply_noise(img, noise, 0.1, 3.0)
        b = apply_noise(img, noise, 0.1, 3.0)
        np.testing.assert_array_equal(a.values, b.values)

    def test_different_seeds_differ(self):
        img = self._img()
        a = apply_noise(img, NoiseModel(0.02, 0.0, seed=1), 0.1, 3.0)
        b = apply_noise(img, NoiseModel(0.02, 0.0, seed=2), 0.1, 3.0)
        assert not np.array_equal(a.values, b.values)

    def test_zero_pixels_stay_zero_and_range(self):
        img = self._img()
        out = apply_noise(img, NoiseModel(0.5, 0.3, seed=3), 0.5, 1.2)
        assert np.all(out.values[img.values == 0] == 0)
        nz = out.values[out.values > 0]
        assert nz.min() >= 0.5 and nz.max() <= 1.2


class TestPgm:
    def test_roundtrip_header(self, tmp_path):
        img = DepthImage(4, 2, np.array([[0, 0.5, 1.0, 2.0], [0.25, 0, 0.75, 1.5]],
                                        dtype=np.float32))
        path = tmp_path / "d.pgm"
        write_pgm(img, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n4 2\n65535\n")
        body = np.frombuffer(raw.split(b"65535\n", 1)[1], dtype=">u2").reshape(2, 4)
        assert body[0, 3] == 2000  # 2.0 m -> 2000 mm
