import numpy as np
import pytest

from diffbev.dynamics import simulate_full
from diffbev.events import EventKind
from diffbev.scene import Visibility, validate_scene
from diffbev.synth import (TABLE_LENGTH, TABLE_WIDTH, GenerationExhausted, GeneratorSpec, billiards_truth,
                           generate_scene, make_billiards, observe)


def test_seed_determinism():
    a = generate_scene(GeneratorSpec(seed=7))
    b = generate_scene(GeneratorSpec(seed=7))
    assert a.scene == b.scene
    assert a.trajectory.equals(b.trajectory)
    assert np.array_equal(a.trajectory.pos, b.trajectory.pos)
    assert a.events == b.events


def test_collision_required():
    for s in range(5):
        gt = generate_scene(GeneratorSpec(seed=s))
        assert len(gt.events.collisions) >= 1
        assert not validate_scene(gt.scene)


def test_every_body_collides():
    gt = generate_scene(GeneratorSpec(seed=4, n_bodies=(3, 3), every_body_collides=True))
    hit = {p for e in gt.events.collisions for p in e.participants}
    assert hit == set(gt.scene.ids)


def test_single_body_only_visibility_events():
    gt = generate_scene(GeneratorSpec(seed=2, n_bodies=(1, 1), require_collision=False))
    assert len(gt.scene.bodies) == 1
    assert {e.kind for e in gt.events} <= {EventKind.ENTER, EventKind.EXIT}


def test_self_consistency():
    gt = generate_scene(GeneratorSpec(seed=11))
    traj, events, _ = simulate_full(gt.scene, gt.trajectory.n_frames)
    assert np.array_equal(traj.pos, gt.trajectory.pos)
    assert events == gt.events


def test_parameter_ranges():
    for s in range(8):
        sc = generate_scene(GeneratorSpec(seed=s)).scene
        for b in sc.bodies:
            assert 0.5 <= b.params.mass <= 5.0
            assert 0.5 <= b.params.restitution <= 1.0
            assert all(abs(v) <= 4.0 for v in b.state.velocity)


def test_bad_specs():
    with pytest.raises(ValueError):
        GeneratorSpec(mass=(3.0, 1.0))
    with pytest.raises(ValueError):
        GeneratorSpec(noise_sigma=-0.1)


def test_exhaustion():
    spec = GeneratorSpec(seed=0, n_bodies=(2, 2), speed=(1.5, 1.5), first_collision=(0, 0), max_attempts=5)
    with pytest.raises(GenerationExhausted):
        generate_scene(spec)


def test_noiseless_observation_is_exact():
    gt = generate_scene(GeneratorSpec(seed=1))
    obs = observe(gt.scene, gt.trajectory, gt.spec)
    assert np.array_equal(obs.pos, gt.trajectory.pos)


def test_noise_level():
    gt = generate_scene(GeneratorSpec(seed=1, n_frames=2000, n_bodies=(3, 3)))
    obs = observe(gt.scene, gt.trajectory, sigma=0.01, seed=5)
    d = (obs.pos - gt.trajectory.pos).reshape(-1, 2)
    assert d.shape[0] >= 5000
    for k in range(2):
        assert abs(d[:, k].std() - 0.01) < 0.05 * 0.01
    again = observe(gt.scene, gt.trajectory, sigma=0.01, seed=5)
    assert np.array_equal(again.pos, obs.pos)


def test_visibility_flags():
    gt = generate_scene(GeneratorSpec(seed=3, visibility=Visibility(-1.0, -1.0, 1.0, 1.0)))
    obs = observe(gt.scene, gt.trajectory)
    p = gt.trajectory.pos
    inside = (np.abs(p[..., 0]) <= 1.0) & (np.abs(p[..., 1]) <= 1.0)
    assert np.array_equal(obs.present, inside)
    assert not inside.all()


def test_billiards_layout():
    for s in range(5):
        sc = make_billiards(s)
        assert len(sc.bodies) == 3 and len(sc.walls) == 4
        assert all(w.restitution == 0.9 for w in sc.walls)
        assert sc.physics.lam2 > 0
        assert make_billiards(s) == sc
    xs = [w.a[0] for w in make_billiards(0).walls] + [w.b[0] for w in make_billiards(0).walls]
    ys = [w.a[1] for w in make_billiards(0).walls] + [w.b[1] for w in make_billiards(0).walls]
    assert (max(xs) - min(xs)) == pytest.approx(2 * (max(ys) - min(ys)))


def test_billiards_contained():
    for s in range(5):
        gt = billiards_truth(s, 200)
        p = gt.trajectory.pos
        assert np.all(p[..., 0] >= -1e-6) and np.all(p[..., 0] <= TABLE_LENGTH + 1e-6)
        assert np.all(p[..., 1] >= -1e-6) and np.all(p[..., 1] <= TABLE_WIDTH + 1e-6)
