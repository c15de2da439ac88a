import math
from dataclasses import replace

import numpy as np
import pytest

from diffbev.dynamics import (
    angular_drag, resistance_acceleration, rk2_step, simulate, simulate_full, step_scene,
)
from diffbev.scene import Body, BodyParams, BodyState, GlobalPhysics, InvalidScene, SceneConfig, ShapeKind
from diffbev.synth import GeneratorSpec, generate_scene
from oracles import euler_slide


def body(i, pos, vel, shape=ShapeKind.CUBE, m=1.0, r=1.0, R=0.5, alpha=0.0, omega=0.0):
    return Body(i, BodyParams(m, r, R, shape), BodyState(pos, vel, alpha, omega))


class TestResistance:
    def test_cube(self):
        a = resistance_acceleration((2.0, 0.0), ShapeKind.CUBE, GlobalPhysics(lam1=0.1, lam3=0.01))
        assert np.allclose(a, [-1.021, 0.0], atol=1e-12)

    def test_rest(self):
        for shape in ShapeKind:
            assert not resistance_acceleration((0.0, 0.0), shape, GlobalPhysics()).any()

    def test_sphere(self):
        a = resistance_acceleration((0.0, 3.0), ShapeKind.SPHERE, GlobalPhysics(lam2=0.02, lam3=0.0))
        assert np.allclose(a, [0.0, -0.1962], atol=1e-12)

    def test_cylinder_uses_sliding_branch(self):
        ph = GlobalPhysics(lam1=0.3, lam2=0.01, lam3=0.0)
        a = resistance_acceleration((1.0, 0.0), ShapeKind.CYLINDER, ph)
        assert math.isclose(a[0], -0.3 * 9.81)

    def test_opposes_velocity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v = rng.normal(size=2)
            a = resistance_acceleration(v, ShapeKind.SPHERE, GlobalPhysics(lam2=0.1, lam3=0.05))
            assert a @ v <= 0 and abs(a[0] * v[1] - a[1] * v[0]) < 1e-12


class TestRK2:
    def test_free_motion(self):
        ph = GlobalPhysics(lam1=0, lam2=0, lam3=0)
        s = rk2_step(BodyState((0.0, 0.0), (1.0, 0.0)), BodyParams(1, 1, 0.5, ShapeKind.CUBE), ph)
        assert s.position == (0.004, 0.0) and s.velocity == (1.0, 0.0)

    def test_constant_acceleration_exact(self):
        ph = GlobalPhysics(dt=0.1)
        s = rk2_step(BodyState((0.0, 0.0), (1.0, 0.0)), BodyParams(1, 1, 0.5, ShapeKind.CUBE), ph,
                     accel=lambda v: np.array([-1.0, 0.0]))
        assert np.allclose(s.velocity, (0.9, 0.0), atol=1e-15) and np.allclose(s.position, (0.095, 0.0), atol=1e-15)

    def test_against_fine_euler(self):
        ph = GlobalPhysics(lam1=0.1, lam3=0.0)
        s = BodyState((0.0, 0.0), (2.0, 1.0))
        p = BodyParams(1, 1, 0.5, ShapeKind.CUBE)
        for _ in range(250):
            s = rk2_step(s, p, ph)
        ref, _ = euler_slide((0.0, 0.0), (2.0, 1.0), 0.1 * 9.81, 0.0, 1e-6, 1_000_000)
        assert np.max(np.abs(np.array(s.position) - ref)) < 1e-5

    def test_static_stop(self):
        ph = GlobalPhysics(lam1=0.5)
        s = rk2_step(BodyState((0.0, 0.0), (1e-3, 0.0)), BodyParams(1, 1, 0.5, ShapeKind.CUBE), ph)
        assert s.velocity == (0.0, 0.0)

    def test_angle(self):
        ph = GlobalPhysics(lam_omega=0.0)
        s = rk2_step(BodyState((0.0, 0.0), (0.0, 0.0), 0.0, 2.0), BodyParams(1, 1, 0.5, ShapeKind.CUBE), ph)
        assert math.isclose(s.angle, 0.008) and s.omega == 2.0


class TestAngularDrag:
    def test_examples(self):
        assert angular_drag(0.0, GlobalPhysics()) == 0.0
        assert angular_drag(5.0, GlobalPhysics(lam_omega=0.0)) == 5.0
        assert math.isclose(angular_drag(2.0, GlobalPhysics(lam_omega=0.5)), 2 * math.exp(-0.002), rel_tol=1e-15)


class TestStep:
    def test_single_body_matches_rk2(self):
        ph = GlobalPhysics(lam1=0.2, lam3=0.03)
        b = body(0, (0.0, 0.0), (1.0, -2.0), omega=1.0)
        res = step_scene(SceneConfig((b,), ph))
        ref = rk2_step(b.state, b.params, ph)
        assert res.scene.bodies[0].state == ref and res.contacts == []

    def test_head_on_swap(self):
        ph = GlobalPhysics(lam1=0, lam2=0, lam3=0)
        a = body(0, (-0.499, 0.0), (1.0, 0.0), ShapeKind.SPHERE)
        b = body(1, (0.499, 0.0), (-1.0, 0.0), ShapeKind.SPHERE)
        res = step_scene(SceneConfig((a, b), ph))
        assert len(res.contacts) == 1
        assert res.scene.bodies[0].state.velocity == (-1.0, 0.0) and res.scene.bodies[1].state.velocity == (1.0, 0.0)


class TestSimulate:
    def test_static(self):
        sc = SceneConfig((body(0, (0.0, 0.0), (0.0, 0.0)), body(1, (3.0, 1.0), (0.0, 0.0), ShapeKind.SPHERE)))
        tr, ev = simulate(sc, 30)
        assert np.array_equal(tr.pos, np.broadcast_to(tr.pos[0], tr.pos.shape))
        assert tr.pos[0, 1].tolist() == [3.0, 1.0]
        assert not ev.collisions

    def test_speed_non_increasing(self):
        sc = SceneConfig((body(0, (0.0, 0.0), (3.0, 1.0)),), GlobalPhysics(lam1=0.1, lam3=0.02))
        _, _, ro = simulate_full(sc, 128)
        speed = np.linalg.norm(ro.vel[:, 0], axis=-1)
        assert np.all(np.diff(speed) <= 0)

    def test_generator_self_consistency(self):
        gt = generate_scene(GeneratorSpec(seed=11))
        tr, ev = simulate(gt.scene, gt.spec.n_frames)
        assert tr.equals(gt.trajectory) and ev == gt.events

    def test_deterministic(self):
        gt = generate_scene(GeneratorSpec(seed=2))
        a, _ = simulate(gt.scene, 64)
        b, _ = simulate(gt.scene, 64)
        assert a.equals(b)

    def test_invalid(self):
        sc = SceneConfig((body(0, (0.0, 0.0), (1.0, 0.0)), body(1, (0.1, 0.0), (0.0, 0.0))))
        with pytest.raises(InvalidScene):
            simulate(sc, 5)
        with pytest.raises(ValueError):
            simulate(SceneConfig((body(0, (0.0, 0.0), (1.0, 0.0)),)), 0)

    def test_frame_count(self):
        tr, _ = simulate(SceneConfig((body(0, (0.0, 0.0), (1.0, 0.0)),), GlobalPhysics(lam1=0, lam2=0, lam3=0)), 11)
        assert tr.n_frames == 11
        assert math.isclose(tr.pos[-1, 0, 0], 10 * 10 * 0.004, rel_tol=1e-12)


def _refine(scene, k):
    ph = scene.physics
    return replace(scene, physics=replace(ph, dt=ph.dt / k, substeps=ph.substeps * k))


def test_step_refinement_ratio():
    sc = SceneConfig((body(0, (0.0, 0.0), (3.0, 1.5)), body(1, (0.0, 5.0), (-2.0, 0.5), ShapeKind.SPHERE)),
                     GlobalPhysics(dt=0.02, substeps=2, lam1=0.3, lam2=0.05, lam3=0.2))
    ref = simulate(_refine(sc, 100), 20)[0].pos[-1]
    e1 = np.abs(simulate(sc, 20)[0].pos[-1] - ref).max()
    e2 = np.abs(simulate(_refine(sc, 2), 20)[0].pos[-1] - ref).max()
    assert 3.5 <= e1 / e2 <= 4.5


def test_fine_step_contact_free_frames():
    gt = generate_scene(GeneratorSpec(seed=1, n_bodies=(3, 3)))
    fine = simulate(_refine(gt.scene, 100), 128)[0]
    first = min(e.frame for e in gt.events.collisions)
    assert np.abs(fine.pos[:first] - gt.trajectory.pos[:first]).max() < 1e-3


@pytest.mark.xfail(strict=True, reason="contacts are detected at step boundaries, so contact timing and the "
                   "post-impact path carry an O(dt) error (about 1 cm at 4 m/s); see the decisions ledger")
def test_fine_step_full_rollout():
    gt = generate_scene(GeneratorSpec(seed=1, n_bodies=(3, 3)))
    fine = simulate(_refine(gt.scene, 100), 128)[0]
    assert np.abs(fine.pos - gt.trajectory.pos).max() < 1e-3
