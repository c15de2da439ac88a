import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffbev.projection import (CameraMatrix, DegenerateConfiguration, RayParallelToGround, bev_to_image,
                                calibrate_camera, image_to_bev, load_camera, save_camera)

from suites import demo_camera, random_bev_points


def test_identity_camera():
    cam = CameraMatrix(np.eye(4), ground=1.0)
    x, y = image_to_bev((0.3, 0.4), cam)
    assert abs(x - 0.3) < 1e-15 and abs(y - 0.4) < 1e-15


def test_pinhole_known_point():
    cam = demo_camera()
    img = bev_to_image((2.0, 3.0), cam)
    x, y = image_to_bev(img, cam)
    assert abs(x - 2.0) < 1e-9 and abs(y - 3.0) < 1e-9


@pytest.mark.parametrize("ground", [0.0, 0.35])
def test_round_trip_many(ground):
    cam = demo_camera(ground)
    pts = random_bev_points(500, seed=4)
    back = np.array([image_to_bev(bev_to_image(p, cam), cam) for p in pts])
    assert np.max(np.abs(back - pts)) < 1e-9


def test_horizon_raises():
    cam = demo_camera()
    # image points p with (H^-1 p)[2] == 0 lie on the horizon and map to infinity
    line = np.linalg.inv(cam.homography())[2]
    x = 320.0
    y = -(line[0] * x + line[2]) / line[1]
    with pytest.raises(RayParallelToGround):
        image_to_bev((x, y), cam)


def test_singular_rejected():
    with pytest.raises(ValueError):
        CameraMatrix(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        CameraMatrix(np.eye(3))


def test_ill_conditioned_warns(caplog):
    K = np.diag([1.0, 1.0, 1.0, 1e-10])
    with caplog.at_level("WARNING"):
        CameraMatrix(K)
    assert "ill-conditioned" in caplog.text


@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3), st.floats(-4, 4), st.floats(-3, 5))
def test_scale_invariance(c, X, Y):
    cam = demo_camera()
    img = bev_to_image((X, Y), cam)
    a = image_to_bev(img, cam)
    b = image_to_bev(img, cam.scaled(c))
    assert np.allclose(a, b, atol=1e-9, rtol=0)


def test_calibration_noiseless():
    cam = demo_camera()
    bev = random_bev_points(20, seed=2)
    corr = [(bev_to_image(p, cam), p) for p in bev]
    cal = calibrate_camera(corr)
    got = np.array([image_to_bev(c[0], cal.camera) for c in corr])
    assert np.max(np.abs(got - bev)) < 1e-6
    assert cal.n_points == 20


def test_calibration_noisy_reports_error():
    cam = demo_camera()
    rng = np.random.default_rng(5)
    bev = random_bev_points(30, seed=6)
    corr = [(np.add(bev_to_image(p, cam), rng.normal(0, 0.5, 2)), p) for p in bev]
    cal = calibrate_camera(corr)
    assert 0.0 < cal.mean_bev_error < 0.1


def test_calibration_needs_six_points():
    cam = demo_camera()
    corr = [(bev_to_image(p, cam), p) for p in random_bev_points(5, seed=1)]
    with pytest.raises(ValueError):
        calibrate_camera(corr)


def test_calibration_collinear():
    cam = demo_camera()
    bev = np.c_[np.linspace(-2, 2, 8), 0.5 * np.linspace(-2, 2, 8) + 1]
    corr = [(bev_to_image(p, cam), p) for p in bev]
    with pytest.raises(DegenerateConfiguration):
        calibrate_camera(corr)


def test_camera_json_round_trip(tmp_path):
    cam = demo_camera(0.2)
    save_camera(cam, tmp_path / "cam.json")
    back = load_camera(tmp_path / "cam.json")
    assert np.array_equal(back.K, cam.K) and back.ground == cam.ground
