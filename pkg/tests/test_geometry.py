import math

import numpy as np
import pytest

from softply.geometry import (
    AxisSpec,
    DeformationState,
    GeometryError,
    PoseGridSpec,
    RigidTransform,
    delta,
    enumerate_grid,
    from_transform,
    grid_pose,
    rot_y,
    to_transform,
)


def make_grid(ht, st, hr, sr):
    return PoseGridSpec(
        x=AxisSpec(0.0, ht, st),
        y=AxisSpec(0.6, ht, st),
        z=AxisSpec(0.0, ht, st),
        theta=AxisSpec(0.0, hr, sr),
        gamma=AxisSpec(0.0, hr, sr),
    )


PAPER_GRID = make_grid(0.105, 0.03, math.radians(20.0), math.radians(5.0))


class TestToTransform:
    def test_rest_pose(self):
        t = to_transform(DeformationState(0.0, 0.6, 0.0, 0.0, 0.0))
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(t.translation, [0.0, 0.6, 0.0])

    def test_identity(self):
        t = to_transform(DeformationState(0, 0, 0, 0, 0))
        np.testing.assert_allclose(t.rotation, np.eye(3))
        np.testing.assert_allclose(t.translation, np.zeros(3))

    def test_quarter_turn_about_y(self):
        t = to_transform(DeformationState(0, 0, 0, math.pi / 2, 0))
        np.testing.assert_allclose(t.rotation @ [1, 0, 0], [0, 0, -1], atol=1e-15)

    def test_rotation_order_is_y_then_z(self):
        s = DeformationState(0, 0, 0, 0.3, -0.7)
        t = to_transform(s)
        expected = rot_y(0.3) @ np.array(
            [[math.cos(-0.7), -math.sin(-0.7), 0],
             [math.sin(-0.7), math.cos(-0.7), 0],
             [0, 0, 1]])
        np.testing.assert_allclose(t.rotation, expected, atol=1e-15)


class TestFromTransform:
    def test_identity(self):
        s = from_transform(RigidTransform.identity())
        assert s == DeformationState(0, 0, 0, 0, 0)

    def test_roundtrip(self):
        s = DeformationState(0.1, 0.6, -0.05, 0.2, -0.3)
        r = from_transform(to_transform(s))
        np.testing.assert_allclose(r.as_array(), s.as_array(), atol=1e-9)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            v = rng.uniform(-1, 1, size=5)
            v[3:] *= 1.4  # keep well inside (−π/2, π/2)
            s = DeformationState.from_array(v)
            r = from_transform(to_transform(s))
            np.testing.assert_allclose(r.as_array(), s.as_array(), atol=1e-9)

    def test_x_rotation_rejected(self):
        a = 0.01
        rx = np.array([[1, 0, 0],
                       [0, math.cos(a), -math.sin(a)],
                       [0, math.sin(a), math.cos(a)]])
        t = RigidTransform(rx @ rot_y(0.2), np.zeros(3))
        with pytest.raises(GeometryError):
            from_transform(t)

    def test_loose_tolerance_recovers(self):
        a = 1e-4
        rx = np.array([[1, 0, 0],
                       [0, math.cos(a), -math.sin(a)],
                       [0, math.sin(a), math.cos(a)]])
        t = RigidTransform(rx @ rot_y(0.2), np.zeros(3))
        s = from_transform(t, x_residual_tol=1e-3)
        assert abs(s.theta - 0.2) < 1e-3


class TestDelta:
    def test_zero(self):
        a = DeformationState(0.1, 0.6, 0.0, 0.05, -0.02)
        np.testing.assert_array_equal(delta(a, a), np.zeros(5))

    def test_single_axis(self):
        cur = DeformationState(0.03, 0, 0, 0, 0)
        des = DeformationState(0, 0, 0, 0, 0)
        np.testing.assert_allclose(delta(cur, des), [0.03, 0, 0, 0, 0])

    def test_offset_from_rest(self):
        rest = DeformationState(0.0, 0.6, 0.0, 0.0, 0.0)
        off = np.array([0.03, -0.03, 0.06, math.radians(5), math.radians(-5)])
        cur = DeformationState.from_array(rest.as_array() + off)
        np.testing.assert_allclose(delta(cur, rest), off, atol=1e-15)

    def test_antisymmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = DeformationState.from_array(rng.normal(size=5))
            b = DeformationState.from_array(rng.normal(size=5))
            np.testing.assert_allclose(delta(a, b), -delta(b, a), atol=1e-15)


class TestEnumerateGrid:
    def test_paper_grid_count(self):
        poses = enumerate_grid(PAPER_GRID)
        assert len(poses) == 41472  # 8^3 · 9^2

    def test_paper_axis_counts(self):
        assert len(AxisSpec(0.0, 0.105, 0.03).values()) == 8
        assert len(AxisSpec(0.0, math.radians(20), math.radians(5)).values()) == 9

    def test_translation_lattice_skips_zero(self):
        vals = AxisSpec(0.0, 0.105, 0.03).values()
        assert not np.any(np.isclose(vals, 0.0))
        np.testing.assert_allclose(vals[0], -0.105)
        np.testing.assert_allclose(vals[-1], 0.105)

    def test_degenerate_grid(self):
        spec = make_grid(0.0, 0.03, 0.0, 0.1)
        poses = enumerate_grid(spec)
        assert len(poses) == 1
        assert poses[0] == DeformationState(0.0, 0.6, 0.0, 0.0, 0.0)

    def test_72_pose_grid(self):
        # 2 translation values per axis, 3 rotation values per axis.
        spec = PoseGridSpec(
            x=AxisSpec(0.0, 0.05, 0.1),
            y=AxisSpec(0.6, 0.05, 0.1),
            z=AxisSpec(0.0, 0.05, 0.1),
            theta=AxisSpec(0.0, 0.2, 0.2),
            gamma=AxisSpec(0.0, 0.2, 0.2),
        )
        poses = enumerate_grid(spec)
        assert len(poses) == 72
        # Exhaustive oracle: hand-built cartesian product in the same order.
        tvals = [-0.05, 0.05]
        rvals = [-0.2, 0.0, 0.2]
        expected = [
            (x, 0.6 + y, z, th, ga)
            for x in tvals for y in tvals for z in tvals
            for th in rvals for ga in rvals
        ]
        got = [tuple(p.as_array()) for p in poses]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_uniqueness_and_determinism(self):
        spec = make_grid(0.1, 0.05, 0.2, 0.1)
        a = enumerate_grid(spec)
        b = enumerate_grid(spec)
        assert a == b
        assert len(set((p.x, p.y, p.z, p.theta, p.gamma) for p in a)) == len(a)

    def test_rejects_oversized_step(self):
        with pytest.raises(GeometryError):
            AxisSpec(0.0, 0.05, 0.2).values()

    def test_rejects_uneven_step(self):
        with pytest.raises(GeometryError):
            AxisSpec(0.0, 0.105, 0.04).values()

    def test_grid_pose_matches_enumeration(self):
        spec = make_grid(0.1, 0.05, 0.2, 0.1)
        poses = enumerate_grid(spec)
        for i in [0, 1, 17, len(poses) - 1]:
            assert grid_pose(spec, i) == poses[i]
        with pytest.raises(GeometryError):
            grid_pose(spec, len(poses))


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            RigidTransform(m, np.zeros(3))

    def test_compose_inverse(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            s = DeformationState.from_array(rng.uniform(-0.5, 0.5, 5))
            t = to_transform(s)
            r = t.compose(t.inverse())
            np.testing.assert_allclose(r.rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(r.translation, np.zeros(3), atol=1e-12)

    def test_apply_batch(self):
        t = to_transform(DeformationState(0.1, 0.2, 0.3, 0.4, -0.2))
        pts = np.random.default_rng(0).normal(size=(10, 3))
        batch = t.apply(pts)
        for i in range(10):
            np.testing.assert_allclose(batch[i], t.apply(pts[i]), atol=1e-14)
