import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffbev.dynamics import simulate_full
from diffbev.gradients import (POSITIVE, RESTITUTION, IDENTITY, EmptyMask, ParamVector, central_difference,
                               finite_diff_grad, grad_loss, trajectory_loss)
from diffbev.scene import Trajectory

from suites import (contact_free_cases, gradient_error, gradient_names, one_collision_cases, perturbed,
                    topology_stable)


def _traj(pos, present=None):
    pos = np.asarray(pos, dtype=float)
    f, n = pos.shape[:2]
    pres = np.ones((f, n), dtype=bool) if present is None else present
    return Trajectory(tuple(range(n)), np.arange(f), pos, np.full((f, n), np.nan), pres)


def test_loss_identical_is_zero():
    rng = np.random.default_rng(0)
    t = _traj(rng.normal(size=(5, 2, 2)))
    assert trajectory_loss(t, t) == 0.0


def test_loss_single_offset():
    a = _traj(np.zeros((1, 1, 2)))
    b = _traj([[[0.1, 0.0]]])
    assert trajectory_loss(b, a) == pytest.approx(0.01, abs=1e-15)


def test_loss_matches_double_loop():
    rng = np.random.default_rng(3)
    sim = rng.normal(size=(10, 3, 2))
    obs = sim + rng.normal(scale=0.2, size=sim.shape)
    ref = 0.0
    for f in range(10):
        for n in range(3):
            ref += (sim[f, n, 0] - obs[f, n, 0]) ** 2 + (sim[f, n, 1] - obs[f, n, 1]) ** 2
    assert abs(trajectory_loss(_traj(sim), _traj(obs)) - ref) < 1e-12


def test_loss_respects_presence_and_window():
    sim = np.zeros((4, 2, 2))
    obs = np.ones((4, 2, 2))
    pres = np.ones((4, 2), dtype=bool)
    pres[:, 1] = False
    assert trajectory_loss(_traj(sim), _traj(obs, pres)) == pytest.approx(8.0)
    assert trajectory_loss(_traj(sim), _traj(obs, pres), frame_range=(1, 3)) == pytest.approx(4.0)


def test_loss_empty_mask():
    t = _traj(np.zeros((3, 1, 2)))
    with pytest.raises(EmptyMask):
        trajectory_loss(t, t, mask=np.zeros((3, 1), dtype=bool))
    with pytest.raises(EmptyMask):
        trajectory_loss(t, t, frame_range=(10, 20))


def test_central_difference_quadratic():
    g = central_difference(lambda x: float(x[0] ** 2), [3.0], 1e-4)
    assert abs(g[0] - 6.0) < 1e-6
    with pytest.raises(ValueError):
        central_difference(lambda x: 0.0, [0.0], 0.0)


@given(st.floats(-50, 50))
def test_identity_roundtrip(x):
    assert IDENTITY.decode(IDENTITY.encode(x)) == x


@given(st.floats(1e-6, 1e6))
def test_positive_roundtrip(x):
    assert abs(POSITIVE.decode(POSITIVE.encode(x)) - x) <= 1e-12 * max(1.0, x)


@given(st.floats(1e-3, RESTITUTION.hi - 1e-3))
def test_sigmoid_roundtrip(x):
    assert abs(RESTITUTION.decode(RESTITUTION.encode(x)) - x) < 1e-12


def test_param_vector_rejects_duplicates():
    with pytest.raises(ValueError):
        ParamVector(["b0.v0x", "b0.v0x"], [0.0, 1.0], [IDENTITY, IDENTITY])


def test_zero_gradient_at_truth():
    for _, gt in list(contact_free_cases(n=3)) + list(one_collision_cases(n=3)):
        sc = gt.scene
        n = gt.trajectory.n_frames
        obs = simulate_full(sc, n)[0]
        has_contact = bool(gt.events.collisions)
        th = ParamVector.from_scene(sc, gradient_names(sc, has_contact))
        loss, g = grad_loss(sc, th, obs)
        assert loss < 1e-20
        assert np.max(np.abs(g)) < 1e-8


def test_mass_gradient_zero_without_contacts():
    _, gt = next(contact_free_cases(n=1))
    sc = gt.scene
    b = sc.bodies[0].id
    th = ParamVector.from_scene(sc, [f"b{b}.m", f"b{b}.v0x"])
    th = th.with_u(th.u + np.array([0.3, 0.05]))
    _, g = grad_loss(sc, th, gt.trajectory)
    assert g[0] == 0.0
    assert g[1] != 0.0


def test_contact_free_v0x_matches_fd():
    _, gt = next(contact_free_cases(n=1))
    sc = gt.scene
    th = perturbed(sc, [f"b{sc.bodies[0].id}.v0x"], seed=1, scale=0.05)
    assert gradient_error(sc, th, gt.trajectory) < 1e-6


@pytest.mark.parametrize("case", list(contact_free_cases(n=5)), ids=lambda c: f"seed{c[0]}")
def test_contact_free_full_vector(case):
    _, gt = case
    sc = gt.scene
    th = perturbed(sc, gradient_names(sc, False), seed=7, scale=0.05)
    assert gradient_error(sc, th, gt.trajectory) < 1e-6


@pytest.mark.parametrize("case", list(one_collision_cases(n=5)), ids=lambda c: f"seed{c[0]}")
def test_one_collision_fixed_topology(case):
    _, gt = case
    sc = gt.scene
    th = perturbed(sc, gradient_names(sc, True), seed=11, scale=0.01)
    assert topology_stable(sc, th, gt.trajectory.n_frames)
    assert gradient_error(sc, th, gt.trajectory) < 1e-2


def test_finite_diff_rejects_bad_step():
    _, gt = next(contact_free_cases(n=1))
    th = ParamVector.from_scene(gt.scene, ["g.lam1"])
    with pytest.raises(ValueError):
        finite_diff_grad(gt.scene, th, gt.trajectory, h=-1.0)
