import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffbev.scene import (
    Body, BodyParams, BodyState, GlobalPhysics, InvalidScene, SceneConfig, ShapeKind, Trajectory, Visibility, Wall,
    check_scene, scene_from_dict, scene_to_dict, validate_scene,
)
from diffbev.synth import GeneratorSpec, generate_scene


def circle(i, x, y, r=1.0, m=1.0):
    return Body(i, BodyParams(m, 0.9, r, ShapeKind.SPHERE), BodyState((x, y)))


def test_separated_circles_ok():
    assert validate_scene(SceneConfig((circle(0, 0, 0), circle(1, 3, 0)))) == []


def test_overlap_reported():
    problems = validate_scene(SceneConfig((circle(0, 0, 0), circle(1, 1.5, 0))))
    assert any("initial overlap" in p for p in problems)


def test_zero_mass_reported():
    problems = validate_scene(SceneConfig((circle(0, 0, 0, m=0.0), circle(1, 3, 0))))
    assert any("non-positive mass" in p for p in problems)


def test_several_violations_returned_together():
    sc = SceneConfig((circle(0, 0, 0, m=0.0), circle(0, 1.0, 0)), GlobalPhysics(dt=-1.0))
    assert len(validate_scene(sc)) >= 3
    with pytest.raises(InvalidScene):
        check_scene(sc)


def test_restitution_bound():
    b = Body(0, BodyParams(1.0, 1.3, 0.5, ShapeKind.CUBE), BodyState((0.0, 0.0)))
    assert validate_scene(SceneConfig((b,)))


def test_generated_scenes_validate():
    for seed in range(5):
        assert validate_scene(generate_scene(GeneratorSpec(seed=seed)).scene) == []


finite = st.floats(-50, 50, allow_nan=False)


@st.composite
def scenes(draw):
    n = draw(st.integers(1, 4))
    bodies = []
    for k in range(n):
        shape = draw(st.sampled_from(list(ShapeKind)))
        p = BodyParams(draw(st.floats(0.1, 9)), draw(st.floats(0.05, 1.2)), draw(st.floats(0.05, 2)), shape,
                       {"color": draw(st.sampled_from(["red", "blue"])), "shape": shape.value})
        s = BodyState((draw(finite), draw(finite)), (draw(finite), draw(finite)), draw(finite), draw(finite))
        bodies.append(Body(k, p, s))
    walls = tuple(Wall((draw(finite), draw(finite)), (draw(finite), draw(finite)), 0.9) for _ in range(draw(st.integers(0, 2))))
    ph = GlobalPhysics(lam1=draw(st.floats(0, 1)), substeps=draw(st.integers(1, 20)))
    return SceneConfig(tuple(bodies), ph, walls, Visibility(-7, -8, 9, 10), draw(st.integers(0, 50)))


@given(scenes())
@settings(max_examples=60, deadline=None)
def test_json_round_trip(sc):
    back = scene_from_dict(scene_to_dict(sc))
    assert back == sc


def test_trajectory_records_round_trip():
    pos = np.arange(12, dtype=float).reshape(3, 2, 2)
    ang = np.array([[0.0, np.nan]] * 3)
    present = np.array([[True, False], [True, True], [False, True]])
    tr = Trajectory((4, 7), np.array([0, 1, 2]), pos, ang, present)
    assert Trajectory.from_records(tr.to_records()).equals(tr)


def test_trajectory_frames_must_increase():
    with pytest.raises(ValueError):
        Trajectory((0,), np.array([0, 0]), np.zeros((2, 1, 2)), np.zeros((2, 1)), np.ones((2, 1), bool))


def test_frame_time():
    ph = GlobalPhysics(dt=0.004, substeps=10)
    assert math.isclose(ph.frame_dt, 0.04)
