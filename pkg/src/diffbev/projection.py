"""Image-plane to ground-plane (BEV) projection and camera calibration.

The camera is a 4x4 projective matrix ``K`` taking a homogeneous ground
point ``(X, Y, g, 1)`` to ``(x*z, y*z, z, w)``, where ``g`` is the height of
the ground plane in the third slot. Everything is defined up to a common
scale of ``K``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from diffbev.optim import lbfgs_minimize

log = logging.getLogger(__name__)

COND_WARN = 1e8
_PARALLEL_TOL = 1e-12


class RayParallelToGround(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CameraMatrix:
    K: np.ndarray
    ground: float = 0.0

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        if K.shape != (4, 4) or not np.all(np.isfinite(K)):
            raise ValueError("camera matrix must be a finite 4x4 array")
        if abs(np.linalg.det(K)) == 0.0:
            raise ValueError("camera matrix is singular")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "ground", float(self.ground))
        if self.condition > COND_WARN:
            log.warning("camera matrix is ill-conditioned (cond %.3g)", self.condition)

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.K))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def scaled(self, c: float) -> "CameraMatrix":
        return CameraMatrix(c * self.K, self.ground)

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "ground": self.ground}

    @classmethod
    def from_dict(cls, d) -> "CameraMatrix":
        return cls(np.asarray(d["K"], dtype=float), d.get("ground", 0.0))

    @classmethod
    def from_homography(cls, H, ground: float = 0.0) -> "CameraMatrix":
        """Embed a ground-plane homography (BEV -> image) in the 4x4 form."""
        H = np.asarray(H, dtype=float)
        K = np.zeros((4, 4))
        K[:3, [0, 1, 3]] = H
        K[3, 2] = 1.0
        K[3, 3] = 1.0 - ground
        return cls(K, ground)

    def homography(self) -> np.ndarray:
        """BEV -> image homography for points on the ground plane."""
        H = self.K[:3, [0, 1, 3]].copy()
        H[:, 2] += self.ground * self.K[:3, 2]
        return H


def save_camera(cam: CameraMatrix, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2, sort_keys=True) + "\n")


def load_camera(path: str | Path) -> CameraMatrix:
    return CameraMatrix.from_dict(json.loads(Path(path).read_text()))


def bev_to_image(point, cam: CameraMatrix) -> tuple[float, float]:
    """Forward projection of a ground-plane point."""
    X = np.array([point[0], point[1], cam.ground, 1.0])
    c = cam.K @ X
    if abs(c[2]) <= _PARALLEL_TOL * max(1.0, float(np.abs(c).max())):
        raise RayParallelToGround("point projects to infinity")
    return float(c[0] / c[2]), float(c[1] / c[2])


def image_to_bev(point, cam: CameraMatrix) -> tuple[float, float]:
    """Back-project an image point onto the ground plane.

    The depth ``z`` is chosen so that ``K^-1 (x z, y z, z, 1)`` lands at the
    ground height once normalized by its last component.
    """
    x, y = float(point[0]), float(point[1])
    Kinv = cam.inverse
    a = Kinv @ np.array([x, y, 1.0, 0.0])  # part proportional to z
    b = Kinv[:, 3]
    g = cam.ground
    den = a[2] - g * a[3]
    scale = max(abs(a[2]), abs(g * a[3]), abs(b[2]), abs(g * b[3]), 1e-300)
    if abs(den) <= _PARALLEL_TOL * scale:
        raise RayParallelToGround(f"ray through ({x}, {y}) never meets the ground plane")
    z = (g * b[3] - b[2]) / den
    w = z * a + b
    if abs(w[3]) <= _PARALLEL_TOL * float(np.abs(w).max()):
        raise RayParallelToGround(f"ray through ({x}, {y}) meets the ground at infinity")
    return float(w[0] / w[3]), float(w[1] / w[3])


def images_to_bev(points, cam: CameraMatrix) -> np.ndarray:
    return np.array([image_to_bev(p, cam) for p in np.asarray(points, dtype=float)])


# ---------------------------------------------------------------------------
# calibration


@dataclass
class Calibration:
    camera: CameraMatrix
    mean_bev_error: float
    n_points: int
    dlt_error: float


def _normalizer(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _check_spread(p: np.ndarray, what: str) -> None:
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration(f"{what} points are collinear")


def _dlt(img: np.ndarray, bev: np.ndarray) -> np.ndarray:
    """Homography G with image ~ G @ bev (normalized direct linear transform)."""
    Ti, Tb = _normalizer(img), _normalizer(bev)
    hi = (Ti @ np.c_[img, np.ones(len(img))].T).T
    hb = (Tb @ np.c_[bev, np.ones(len(bev))].T).T
    rows = []
    for (u, v, _), X in zip(hi, hb):
        rows.append(np.r_[np.zeros(3), -X, v * X])
        rows.append(np.r_[X, np.zeros(3), -u * X])
    _, s, vt = np.linalg.svd(np.asarray(rows))
    if s[-2] <= 1e-12 * s[0]:
        raise DegenerateConfiguration("correspondences do not determine a homography")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Ti) @ Hn @ Tb
    return H / np.linalg.norm(H)


def _bev_residuals(Ginv: np.ndarray, img_h: np.ndarray, bev: np.ndarray):
    q = img_h @ Ginv.T
    return q[:, :2] / q[:, 2:3] - bev, q


def calibrate_camera(correspondences: Sequence, ground: float = 0.0, refine_steps: int = 50) -> Calibration:
    """Fit a camera from (image point, BEV point) pairs.

    A normalized DLT gives the starting homography; L-BFGS then refines its
    inverse on the mean squared BEV reprojection error.
    """
    if len(correspondences) < 6:
        raise ValueError(f"calibration needs at least 6 correspondences, got {len(correspondences)}")
    img = np.array([c[0] for c in correspondences], dtype=float)
    bev = np.array([c[1] for c in correspondences], dtype=float)
    if img.shape[1:] != (2,) or bev.shape[1:] != (2,):
        raise ValueError("correspondences must be pairs of 2D points")
    _check_spread(img, "image")
    _check_spread(bev, "BEV")
    H = _dlt(img, bev)
    G0 = np.linalg.inv(H)
    G0 = G0 / np.linalg.norm(G0)
    # work in normalized image coordinates for conditioning
    Ti = _normalizer(img)
    img_h = (Ti @ np.c_[img, np.ones(len(img))].T).T
    M0 = G0 @ np.linalg.inv(Ti)
    M0 = M0 / np.linalg.norm(M0)
    n = len(img)

    def fun(m):
        M = m.reshape(3, 3)
        r, q = _bev_residuals(M, img_h, bev)
        w = q[:, 2]
        # d(q_k / w)/dM = (e_k x^T - (q_k / w^2) e_3 x^T) / w
        g = np.zeros((3, 3))
        for k in range(2):
            coef = 2.0 * r[:, k] / (w * n)
            g[k] += coef @ img_h
            g[2] -= (coef * q[:, k] / w) @ img_h
        return float((r ** 2).sum() / n), g.ravel()

    dlt_err = fun(M0.ravel())[0]
    out = lbfgs_minimize(fun, M0.ravel(), max_steps=refine_steps)
    M = out.x.reshape(3, 3) if out.loss <= dlt_err else M0
    Ginv = M @ Ti
    cam = CameraMatrix.from_homography(np.linalg.inv(Ginv / np.linalg.norm(Ginv)), ground)
    err = float(np.mean(np.linalg.norm(images_to_bev(img, cam) - bev, axis=1)))
    return Calibration(cam, err, n, float(np.sqrt(dlt_err)))


def pinhole_camera(focal: float, center: tuple[float, float], eye, target, up=(0.0, 0.0, 1.0),
                   ground: float = 0.0) -> CameraMatrix:
    """Perspective camera at ``eye`` looking at ``target``; the ground is the plane z = ground."""
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])
    A = np.array([[focal, 0.0, center[0]], [0.0, focal, center[1]], [0.0, 0.0, 1.0]])
    P = A @ np.c_[R, -R @ eye]  # 3x4 on (X, Y, Z, 1)
    K = np.vstack([P, [0.0, 0.0, 0.0, 1.0]])
    return CameraMatrix(K, ground)
