"""Staged recovery of physical parameters from observed trajectories.

The stages run in order:

1. ``fit_global``: resistance coefficients and per-shape radii shared by all
   scenes, from the collision-free parts of K observations.
2. ``fit_initial``: each body's initial position, velocity (and angle and spin
   for squares) from the frames before its first collision.
3. ``fit_collision_params``: masses and restitutions over growing frame
   windows, each stage warm-started from the previous one.
4. the fitted scene is re-simulated over the whole clip.
5. ``refit_for_prediction``: all per-scene parameters are refined on the last
   few observed frames, starting from the fitted state there.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares, linprog

from diffbev.dynamics import World, rollout, state_at
from diffbev.gradients import EmptyMask, ParamVector, evaluate
from diffbev.optim import NonFiniteObjective, OptimResult, lbfgs_minimize
from diffbev.scene import (
    Body, BodyParams, BodyState, SceneConfig, ShapeKind, Trajectory,
)

log = logging.getLogger(__name__)

DEFAULT_MASS = 1.0
DEFAULT_RESTITUTION = 0.8
DEFAULT_LAMBDA = 0.1
DEFAULT_RADIUS = 0.5
MARGIN = 0.05
EPS_MOVE = 0.02  # m/s
SETTLE_FRAMES = 5  # frames after a first collision before its parameters are fitted

FITTED = "fitted"
PINNED = "pinned"
DEFAULTED = "defaulted"
UNIDENTIFIABLE = "unidentifiable"
FIXED = "fixed"


class InsufficientPreCollisionFrames(ValueError):
    def __init__(self, body_id: int, n_frames: int):
        super().__init__(f"body {body_id}: only {n_frames} frame(s) before its first collision (need 3)")
        self.body_id = body_id
        self.n_frames = n_frames


class InsufficientFrames(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and report


@dataclass(frozen=True)
class FitSchedule:
    windows: tuple[tuple[int, int], ...] = ((0, 40), (0, 80), (0, 128))
    thresholds: tuple[float, ...] = (2e-4, 1e-3, 1e-2)
    initial_threshold: float = 5e-4
    max_steps: int = 20
    refit_frames: int = 20
    refit_threshold: float = 5e-4
    global_steps: int = 300
    global_gtol: float = 1e-10
    refine_states: bool = False  # collision stages also adjust initial states in a second pass

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple((int(a), int(b)) for a, b in self.windows))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.windows or len(self.windows) != len(self.thresholds):
            raise ValueError("one threshold per curriculum window is required")
        prev = None
        for a, b in self.windows:
            if b <= a:
                raise ValueError(f"empty window [{a}, {b})")
            if prev is not None and (a > prev[0] or b <= prev[1]):
                raise ValueError("curriculum windows must be nested and growing")
            prev = (a, b)
        if any(t < 0 for t in self.thresholds) or self.initial_threshold < 0:
            raise ValueError("thresholds must be >= 0 (0 disables early stopping)")
        if self.max_steps < 1 or self.refit_frames < 2:
            raise ValueError("max_steps >= 1 and refit_frames >= 2 are required")

    def scaled(self, n_frames: int) -> "FitSchedule":
        """Same schedule with the windows stretched so the last one ends at ``n_frames``."""
        end = self.windows[-1][1]
        wins = []
        for a, b in self.windows:
            nb = max(2, int(round(b * n_frames / end)))
            wins.append((int(round(a * n_frames / end)), nb))
        # keep strict growth after rounding
        for k in range(1, len(wins)):
            if wins[k][1] <= wins[k - 1][1]:
                wins[k] = (wins[k][0], wins[k - 1][1] + 1)
        return replace(self, windows=tuple(wins))

    def without_thresholds(self) -> "FitSchedule":
        return replace(self, thresholds=tuple(0.0 for _ in self.thresholds), initial_threshold=0.0,
                       refit_threshold=0.0)

    def to_dict(self) -> dict:
        return {"windows": [list(w) for w in self.windows], "thresholds": list(self.thresholds),
                "initial_threshold": self.initial_threshold, "max_steps": self.max_steps,
                "refit_frames": self.refit_frames, "refit_threshold": self.refit_threshold,
                "global_steps": self.global_steps, "global_gtol": self.global_gtol,
                "refine_states": self.refine_states}

    @classmethod
    def from_dict(cls, d) -> "FitSchedule":
        kw = dict(d)
        if "windows" in kw:
            kw["windows"] = tuple(tuple(w) for w in kw["windows"])
        if "thresholds" in kw:
            kw["thresholds"] = tuple(kw["thresholds"])
        return cls(**kw)


@dataclass
class Globals:
    lam1: float = DEFAULT_LAMBDA
    lam2: float = DEFAULT_LAMBDA
    lam3: float = DEFAULT_LAMBDA
    lam_omega: float = 0.1
    radius: dict = field(default_factory=dict)  # shape value -> R
    flags: dict = field(default_factory=dict)
    loss: float = float("nan")

    def apply(self, scene: SceneConfig) -> SceneConfig:
        ph = replace(scene.physics, lam1=self.lam1, lam2=self.lam2, lam3=self.lam3, lam_omega=self.lam_omega)
        bodies = []
        for b in scene.bodies:
            r = self.radius.get(b.params.shape.value, b.params.radius)
            bodies.append(Body(b.id, replace(b.params, radius=float(r)), b.state))
        return replace(scene, physics=ph, bodies=tuple(bodies))

    def to_dict(self) -> dict:
        return {"lam1": self.lam1, "lam2": self.lam2, "lam3": self.lam3, "lam_omega": self.lam_omega,
                "radius": dict(self.radius), "flags": dict(self.flags), "loss": self.loss}

    @classmethod
    def from_dict(cls, d) -> "Globals":
        return cls(d["lam1"], d["lam2"], d["lam3"], d.get("lam_omega", 0.1), dict(d.get("radius", {})),
                   dict(d.get("flags", {})), d.get("loss", float("nan")))

    @classmethod
    def from_physics(cls, scene: SceneConfig) -> "Globals":
        ph = scene.physics
        radius = {}
        for b in scene.bodies:
            radius.setdefault(b.params.shape.value, b.params.radius)
        return cls(ph.lam1, ph.lam2, ph.lam3, ph.lam_omega, radius)


@dataclass
class StageLog:
    name: str
    loss: float
    trace: list
    converged: bool
    seconds: float
    steps: int = 0

    def to_dict(self):
        return {"name": self.name, "loss": self.loss, "trace": list(self.trace),
                "converged": self.converged, "seconds": self.seconds, "steps": self.steps}


@dataclass
class FitReport:
    scene: SceneConfig
    stages: list[StageLog] = field(default_factory=list)
    first_collisions: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)  # body id -> {"m": flag, "r": flag}
    globals: Globals | None = None

    @property
    def stage_losses(self) -> dict[str, float]:
        return {s.name: s.loss for s in self.stages}

    def to_dict(self, timings: bool = True) -> dict:
        from diffbev.scene import scene_to_dict

        stages = []
        for s in self.stages:
            d = s.to_dict()
            if not timings:
                d.pop("seconds")
            stages.append(d)
        return {
            "scene": scene_to_dict(self.scene),
            "stages": stages,
            "first_collisions": {str(k): v for k, v in self.first_collisions.items()},
            "flags": {str(k): v for k, v in self.flags.items()},
            "globals": self.globals.to_dict() if self.globals else None,
        }


# ---------------------------------------------------------------------------
# templates


def bounding_radius(shape: ShapeKind, radius: float) -> float:
    return radius * math.sqrt(2.0) if shape.is_rect else radius


def make_template(scene: SceneConfig, radius: float | None = None, lam: float = DEFAULT_LAMBDA) -> SceneConfig:
    """Strip a scene down to what an observer knows: ids, shapes, attributes, walls and camera region.

    Masses, restitutions and states are reset to the optimizer's starting
    values; ``radius`` (if given) replaces every body's size.
    """
    bodies = []
    for b in scene.bodies:
        p = BodyParams(DEFAULT_MASS, DEFAULT_RESTITUTION, b.params.radius if radius is None else radius,
                       b.params.shape, dict(b.params.attributes))
        bodies.append(Body(b.id, p, BodyState(b.state.position)))
    ph = replace(scene.physics, lam1=lam, lam2=lam, lam3=lam)
    return replace(scene, bodies=tuple(bodies), physics=ph)


def _start_frame(observed: Trajectory) -> int:
    return int(observed.frames[0])


def _valid(observed: Trajectory) -> np.ndarray:
    return observed.present & np.all(np.isfinite(observed.pos), axis=-1)


# ---------------------------------------------------------------------------
# first-collision marks


@dataclass
class Marks:
    frames: dict  # body id -> first-collision frame or None
    pairs: dict  # (id_i, id_j) -> first frame the pair gets close
    walls: dict  # body id -> first frame near a wall

    def window_end(self, body_id: int, default: int) -> int:
        f = self.frames.get(body_id)
        return default if f is None else f


def _segment_min_dist(p, dp, a, b, samples: int = 11) -> float:
    seg = b - a
    ll = float(seg @ seg)
    best = math.inf
    for t in np.linspace(0.0, 1.0, samples):
        q = p + t * dp - a
        u = min(1.0, max(0.0, float(q @ seg) / ll))
        best = min(best, float(np.linalg.norm(q - u * seg)))
    return best


def mark_first_collisions(observed: Trajectory, radii: dict, walls: Sequence = (),
                          margin: float = MARGIN) -> Marks:
    """Earliest frame at which each body gets within touching range of another body or a wall.

    ``radii`` maps body id to a bounding radius. Over the interval after frame
    k each body is extrapolated with its frame-to-frame displacement, and the
    pair is flagged at k when the closest approach falls below
    ``(R_i + R_j) * (1 + margin)``.
    """
    ids = list(observed.ids)
    valid = _valid(observed)
    pos = observed.pos
    F = observed.n_frames
    pairs: dict = {}
    first: dict = {i: None for i in ids}
    wall_hit: dict = {}

    def note(bid, frame):
        if first[bid] is None or frame < first[bid]:
            first[bid] = frame

    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            lim = (radii[ids[a]] + radii[ids[b]]) * (1.0 + margin)
            for k in range(F):
                if not (valid[k, a] and valid[k, b]):
                    continue
                rel = pos[k, a] - pos[k, b]
                dmin = float(np.linalg.norm(rel))
                # extrapolate with the forward and the backward displacement; a
                # collision inside the interval bends the forward one
                for j0, j1 in ((k, k + 1), (k - 1, k)):
                    if j0 < 0 or j1 >= F or not (valid[j0, a] and valid[j0, b] and valid[j1, a] and valid[j1, b]):
                        continue
                    drel = (pos[j1, a] - pos[j0, a]) - (pos[j1, b] - pos[j0, b])
                    dd = float(drel @ drel)
                    t = 0.0 if dd == 0 else min(1.0, max(0.0, -float(rel @ drel) / dd))
                    dmin = min(dmin, float(np.linalg.norm(rel + t * drel)))
                if dmin < lim:
                    f = int(observed.frames[k])
                    pairs[(ids[a], ids[b])] = f
                    note(ids[a], f)
                    note(ids[b], f)
                    break
    for a, bid in enumerate(ids):
        for w in walls:
            wa, wb = np.asarray(w.a, dtype=float), np.asarray(w.b, dtype=float)
            lim = radii[bid] * (1.0 + margin)
            for k in range(F):
                if not valid[k, a]:
                    continue
                near = math.inf
                for j0, j1 in ((k, k + 1), (k - 1, k)):
                    if j0 < 0 or j1 >= F or not (valid[j0, a] and valid[j1, a]):
                        continue
                    near = min(near, _segment_min_dist(pos[k, a], pos[j1, a] - pos[j0, a], wa, wb))
                if near == math.inf:
                    near = _segment_min_dist(pos[k, a], np.zeros(2), wa, wb)
                if near < lim:
                    f = int(observed.frames[k])
                    if bid not in wall_hit or f < wall_hit[bid]:
                        wall_hit[bid] = f
                    note(bid, f)
                    break
    return Marks(first, pairs, wall_hit)


def template_radii(template: SceneConfig) -> dict:
    return {b.id: bounding_radius(b.params.shape, b.params.radius) for b in template.bodies}


# ---------------------------------------------------------------------------
# helpers shared by the stages


def _init_state(observed: Trajectory, col: int, end: int, frame_dt: float) -> tuple:
    """First observed position and first finite-difference velocity inside the window."""
    valid = _valid(observed)
    rows = [k for k in range(observed.n_frames) if valid[k, col] and observed.frames[k] < end]
    if not rows:
        return (0.0, 0.0), (0.0, 0.0), 0.0, 0.0
    k0 = rows[0]
    p0 = observed.pos[k0, col]
    v0 = np.zeros(2)
    if len(rows) > 1:
        k1 = rows[1]
        v0 = (observed.pos[k1, col] - p0) / ((observed.frames[k1] - observed.frames[k0]) * frame_dt)
    a0 = w0 = 0.0
    ang = observed.angle[:, col]
    if np.isfinite(ang[k0]):
        a0 = float(ang[k0])
        if len(rows) > 1 and np.isfinite(ang[rows[1]]):
            da = _wrap_quarter(float(ang[rows[1]] - ang[k0]))
            w0 = da / ((observed.frames[rows[1]] - observed.frames[k0]) * frame_dt)
    return (float(p0[0]), float(p0[1])), (float(v0[0]), float(v0[1])), a0, w0


def _wrap_quarter(a: float) -> float:
    q = math.pi / 2
    return (a + q / 2) % q - q / 2


def _has_angles(observed: Trajectory, body_id: int) -> bool:
    return bool(np.any(np.isfinite(observed.angle[:, observed.column(body_id)])))


def _state_names(scene: SceneConfig, observed: Trajectory, body_id: int) -> list[str]:
    names = [f"b{body_id}.{f}" for f in ("l0x", "l0y", "v0x", "v0y")]
    if scene.body(body_id).params.shape.is_rect and _has_angles(observed, body_id):
        names += [f"b{body_id}.a0", f"b{body_id}.w0"]
    return names


def _minimize(scene, theta: ParamVector, observed, frame_range, mask, threshold, max_steps,
              contacts=True, angle_weight=1.0, gtol=0.0, precondition=False) -> tuple[ParamVector, OptimResult]:
    scale = np.ones(len(theta))
    if precondition:
        r = evaluate(scene, theta, observed, frame_range, mask, contacts=contacts, angle_weight=angle_weight)
        (rows, cols) = _jacobian_rows(r, observed, frame_range, scene)
        J = r.rollout.dpos[rows][:, :, cols]  # (F, P, N, 2)
        d = np.sqrt(np.einsum("fpnc,fpnc->p", J, J))
        # floor tiny scales so nearly inert parameters cannot take huge steps
        scale = np.maximum(d, 1e-3 * d.max()) if d.max() > 0 else np.ones_like(d)
    u0 = theta.u.copy()

    def fun(z):
        th = theta.with_u(u0 + z / scale)
        res = evaluate(scene, th, observed, frame_range, mask, contacts=contacts, angle_weight=angle_weight)
        if not np.isfinite(res.loss):
            raise NonFiniteObjective("loss is not finite")
        return res.loss, res.grad / scale

    out = lbfgs_minimize(fun, np.zeros(len(theta)), max_steps=max_steps, threshold=threshold, gtol=gtol)
    return theta.with_u(u0 + out.x / scale), out


def _polish(scene, theta: ParamVector, observed, frame_range, mask, max_nfev: int = 60) -> tuple[ParamVector, float]:
    """Levenberg-Marquardt on the position residuals, Jacobian from the forward tangents."""
    cache: dict = {}

    def run(u):
        key = u.tobytes()
        if key not in cache:
            cache.clear()
            th = theta.with_u(u)
            res = evaluate(scene, th, observed, frame_range, mask, contacts=False)
            at = {int(f): k for k, f in enumerate(observed.frames)}
            (rows, cols) = _jacobian_rows(res, observed, frame_range, scene)
            rows = np.array([k for k in rows if int(res.rollout.frames[k]) + res.scene.start_frame in at], dtype=int)
            sim = res.rollout.pos[rows][:, cols]
            obs_rows = [at[int(f)] for f in res.rollout.frames[rows] + res.scene.start_frame]
            obs_cols = [observed.column(i) for i in res.scene.ids]
            m = (observed.present if mask is None else np.asarray(mask, dtype=bool))[obs_rows][:, obs_cols]
            o = observed.pos[obs_rows][:, obs_cols]
            m = m & np.all(np.isfinite(o), axis=-1)
            r = np.where(m[..., None], sim - np.where(m[..., None], o, 0.0), 0.0)
            J = res.rollout.dpos[rows][:, :, cols] * m[:, None, :, None]
            cache[key] = (r.ravel(), np.moveaxis(J, 1, -1).reshape(-1, len(theta)))
        return cache[key]

    out = least_squares(lambda u: run(u)[0], theta.u.copy(), jac=lambda u: run(u)[1], method="lm",
                        max_nfev=max_nfev, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    th = theta.with_u(out.x)
    return th, 2.0 * float(out.cost)


def _derivative_free(scene, theta: ParamVector, observed, frame_range, max_evals: int = 4000):
    from scipy.optimize import minimize
    r = evaluate(scene, theta, observed, frame_range, None)
    rows, cols = _jacobian_rows(r, observed, frame_range, scene)
    J = r.rollout.dpos[rows][:, :, cols]
    d = np.sqrt(np.einsum("fpnc,fpnc->p", J, J))
    scale = np.maximum(d, 1e-3 * d.max()) if d.max() > 0 else np.ones_like(d)
    u0 = theta.u.copy()

    def f(z):
        try:
            return evaluate(scene, theta.with_u(u0 + z / scale), observed, frame_range, None, grad=False).loss
        except (FloatingPointError, OverflowError, ValueError):
            return np.inf
    out = minimize(f, np.zeros(len(u0)), method="Nelder-Mead",
                   options={"maxfev": max_evals, "xatol": 1e-9, "fatol": 1e-14, "adaptive": True,
                            "initial_simplex": np.vstack([np.zeros(len(u0)), 0.05 * np.eye(len(u0))])})
    return theta.with_u(u0 + out.x / scale), float(out.fun)


def _jacobian_rows(res, observed, frame_range, scene):
    lo, hi = frame_range
    rows = [k for k, f in enumerate(res.rollout.frames + res.scene.start_frame) if lo <= f < hi]
    return np.array(rows, dtype=int), np.arange(len(scene.bodies))


def _simulate_single(scene: SceneConfig, body_id: int, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Step-resolution free flight of one body: positions and velocities at steps 0..n_steps."""
    sc = replace(scene, bodies=(scene.body(body_id),), walls=(),
                 physics=replace(scene.physics, substeps=1))
    ro = rollout(World.from_scene(sc), n_steps + 1, contacts=False)
    return ro.pos[:, 0], ro.vel[:, 0]


# ---------------------------------------------------------------------------
# stage 1: global parameters


@dataclass
class GlobalFitDetail:
    globals: Globals
    free_scenes: list  # per observation: scene with nuisance initial states written in
    marks: list
    result: OptimResult | None = None
    radius_samples: list = field(default_factory=list)


def _moving(observed: Trajectory, col: int, end: int, frame_dt: float) -> bool:
    valid = _valid(observed)
    rows = [k for k in range(observed.n_frames) if valid[k, col] and observed.frames[k] < end]
    if len(rows) < 2:
        return False
    d = observed.pos[rows[1], col] - observed.pos[rows[0], col]
    return float(np.linalg.norm(d)) / ((observed.frames[rows[1]] - observed.frames[rows[0]]) * frame_dt) > EPS_MOVE


def fit_global(observations: Sequence[tuple[Trajectory, SceneConfig]], schedule: FitSchedule = FitSchedule(),
               fit_radius: bool = True, detail: bool = False):
    """Shared resistance coefficients and per-shape radii from K observed scenes.

    Every body's frames before its first collision are fitted jointly in one
    contact-free rollout over the coefficients plus every body's initial
    position and velocity. Radii are then measured from the collision
    geometry: see :func:`estimate_radii`. Returns :class:`Globals` (or a
    :class:`GlobalFitDetail` when ``detail`` is set).
    """
    if not observations:
        raise ValueError("fit_global needs at least one observation")
    templates = [t for _, t in observations]
    res = _fit_lambdas(observations, templates, schedule)
    if fit_radius:
        radius, flags, samples = estimate_radii(observations, res.free_scenes, res.marks)
        # redo the windows once if the measured sizes moved the collision marks
        old = res.globals.radius
        moved = any(abs(radius[s] - old.get(s, radius[s])) > 0.1 * radius[s] for s in radius)
        res.globals.radius.update(radius)
        res.globals.flags.update(flags)
        res.radius_samples = samples
        if moved:
            templates = [res.globals.apply(t) for t in templates]
            res2 = _fit_lambdas(observations, templates, schedule)
            res2.globals.radius = dict(res.globals.radius)
            res2.globals.flags.update(flags)
            radius, flags, samples = estimate_radii(observations, res2.free_scenes, res2.marks)
            res2.globals.radius.update(radius)
            res2.globals.flags.update(flags)
            res2.radius_samples = samples
            res = res2
    return res if detail else res.globals


def _fit_lambdas(observations, templates, schedule: FitSchedule) -> GlobalFitDetail:
    # one contact-free world holding every body of every scene
    big_bodies, marks_all, remap = [], [], []
    ph0 = templates[0].physics
    for k, ((obs, _), tpl) in enumerate(zip(observations, templates)):
        marks = mark_first_collisions(obs, template_radii(tpl), tpl.walls)
        marks_all.append(marks)
        f0 = _start_frame(obs)
        frame_dt = tpl.physics.frame_dt
        for b in tpl.bodies:
            col = obs.column(b.id)
            end = marks.window_end(b.id, int(obs.frames[-1]) + 1)
            n_pre = int(np.sum(_valid(obs)[:, col] & (obs.frames < end)))
            if n_pre < 3 or not _moving(obs, col, end, frame_dt):
                continue  # resting bodies say nothing about resistance
            p0, v0, _, _ = _init_state(obs, col, end, frame_dt)
            new_id = len(big_bodies)
            big_bodies.append(Body(new_id, b.params, BodyState(p0, v0)))
            remap.append((k, b.id, col, f0, end))
    if not big_bodies:
        raise InsufficientPreCollisionFrames(-1, 0)
    # stack every body's observation into one trajectory on frames relative to its scene start
    F = max(end - s0 for (_, _, _, s0, end) in remap)
    pos = np.full((F, len(big_bodies), 2), np.nan)
    present = np.zeros((F, len(big_bodies)), dtype=bool)
    mask = np.zeros((F, len(big_bodies)), dtype=bool)
    for c, (k, bid, col, s0, end) in enumerate(remap):
        obs = observations[k][0]
        for r, f in enumerate(obs.frames):
            loc = int(f) - s0
            if 0 <= loc < F:
                pos[loc, c] = obs.pos[r, col]
                present[loc, c] = obs.present[r, col]
                mask[loc, c] = present[loc, c] and int(f) < end
    frames = np.arange(F)
    joint_obs = Trajectory(tuple(range(len(big_bodies))), frames, pos, np.full((F, len(big_bodies)), np.nan), present)
    scene = SceneConfig(tuple(big_bodies), ph0, (), templates[0].visibility)
    moving_kinds = set()
    for c, (k, bid, col, s0, end) in enumerate(remap):
        if _moving(observations[k][0], col, end, ph0.frame_dt):
            moving_kinds.add(big_bodies[c].params.shape.rolls)
    names = []
    flags = {}
    if False in moving_kinds:
        names.append("g.lam1")
        flags["lam1"] = FITTED
    else:
        flags["lam1"] = UNIDENTIFIABLE
    if True in moving_kinds:
        names.append("g.lam2")
        flags["lam2"] = FITTED
    else:
        flags["lam2"] = UNIDENTIFIABLE
    if moving_kinds:
        names.append("g.lam3")
        flags["lam3"] = FITTED
    else:
        flags["lam3"] = UNIDENTIFIABLE
    flags["lam_omega"] = FIXED
    for b in big_bodies:
        names += [f"b{b.id}.{f}" for f in ("l0x", "l0y", "v0x", "v0y")]
    theta = ParamVector.from_scene(scene, names)
    theta, out = _minimize(scene, theta, joint_obs, (0, F), mask, 0.0, schedule.global_steps,
                           contacts=False, angle_weight=0.0, gtol=schedule.global_gtol, precondition=True)
    polished, loss = _polish(scene, theta, joint_obs, (0, F), mask)
    if loss <= out.loss:
        theta, out.loss = polished, loss
    fitted = theta.apply(scene)
    ph = fitted.physics
    radius = {}
    for tpl in templates:
        for b in tpl.bodies:
            radius.setdefault(b.params.shape.value, b.params.radius)
    g = Globals(ph.lam1, ph.lam2, ph.lam3, ph.lam_omega, radius, flags, out.loss)
    # hand each scene its bodies' fitted free-flight initial states
    free_scenes = []
    for k, ((obs, _), tpl) in enumerate(zip(observations, templates)):
        bodies = list(tpl.bodies)
        for c, (kk, bid, col, s0, end) in enumerate(remap):
            if kk != k:
                continue
            idx = tpl.index_of(bid)
            bodies[idx] = Body(bid, bodies[idx].params, fitted.bodies[c].state)
        sc = g.apply(replace(tpl, bodies=tuple(bodies), start_frame=_start_frame(obs)))
        free_scenes.append(sc)
    return GlobalFitDetail(g, free_scenes, marks_all, out)


def estimate_radii(observations, free_scenes, marks_list) -> tuple[dict, dict, list]:
    """Per-shape radii from the geometry of first collisions between round bodies.

    For every pair whose first contact is also each body's first contact, the
    observed departure from the fitted free flight gives the contact time; the
    free-flight centre distance around that time gives ``R_i + R_j``.
    Radii follow by least squares over all pairs. Round bodies need this
    measurement because an impulse between circles does not depend on their
    size, so the loss gradient carries no radius information.
    """
    rows, bounds, samples = [], [], []
    classes: list[str] = []
    for (obs, _), sc, marks in zip(observations, free_scenes, marks_list):
        # bodies close to more than one partner at their first mark are ambiguous
        crowded = {}
        for (a, b), f in marks.pairs.items():
            for x in (a, b):
                if marks.frames.get(x) == f:
                    crowded[x] = crowded.get(x, 0) + 1
        for (a, b), f in marks.pairs.items():
            if marks.frames.get(a) != f or marks.frames.get(b) != f:
                continue
            if crowded.get(a, 0) > 1 or crowded.get(b, 0) > 1:
                continue
            if a in marks.walls and marks.walls[a] <= f or b in marks.walls and marks.walls[b] <= f:
                continue
            if min(_n_before(obs, x, f) for x in (a, b)) < 3:
                continue  # free flight was not fitted
            ba, bb = sc.body(a), sc.body(b)
            if ba.params.shape.is_rect or bb.params.shape.is_rect:
                continue
            # rows after the contact must stop before each body's next event
            limit = {}
            for x in (a, b):
                later = [g for pq, g in marks.pairs.items() if x in pq and g > f]
                if x in marks.walls:
                    later.append(marks.walls[x])
                if later:
                    limit[x] = min(later)
            iv = _pair_contact_interval(obs, sc, a, b, f, limit)
            if iv is None:
                continue
            ka, kb = ba.params.shape.value, bb.params.shape.value
            for kname in (ka, kb):
                if kname not in classes:
                    classes.append(kname)
            rows.append((ka, kb))
            bounds.append(iv)
            samples.append({"pair": (a, b), "frame": f, "sum": 0.5 * (iv[0] + iv[1]), "bounds": iv})
    radius, flags = {}, {}
    if rows:
        A = np.zeros((len(rows), len(classes)))
        for r, (ka, kb) in enumerate(rows):
            A[r, classes.index(ka)] += 1.0
            A[r, classes.index(kb)] += 1.0
        if np.linalg.matrix_rank(A) < len(classes):
            # not every class separable: share one radius among round shapes
            sol = np.full(len(classes), _interval_center(A.sum(axis=1, keepdims=True), bounds)[0])
        else:
            sol = _interval_center(A, bounds)
        for c, kname in enumerate(classes):
            radius[kname] = float(sol[c])
            flags[f"R.{kname}"] = FITTED
    all_shapes = {b.params.shape.value for sc in free_scenes for b in sc.bodies}
    for s in all_shapes - set(radius):
        flags[f"R.{s}"] = UNIDENTIFIABLE
    return radius, flags, samples


def _n_before(obs: Trajectory, body_id: int, frame: int) -> int:
    return int(np.sum(_valid(obs)[:, obs.column(body_id)] & (obs.frames < frame)))


def _interval_center(A: np.ndarray, bounds: list) -> np.ndarray:
    """Point deepest inside all slabs ``lo <= A x <= hi``; least squares on midpoints if they disagree."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    n = A.shape[1]
    ones = np.ones((len(bounds), 1))
    A_ub = np.vstack([np.hstack([-A, ones]), np.hstack([A, ones])])
    b_ub = np.concatenate([-lo, hi])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    out = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(0, None)] * n + [(None, None)], method="highs")
    if out.status == 0 and out.x[-1] >= 0:
        return out.x[:n]
    return np.linalg.lstsq(A, 0.5 * (lo + hi), rcond=None)[0]


def _pair_contact_interval(obs: Trajectory, sc: SceneConfig, a: int, b: int, mark: int,
                           limit: dict | None = None, post_frames: int = 3, search: int = 15) -> tuple[float, float] | None:
    """Bounds on ``R_a + R_b`` from the step at which the impulse hit.

    The departure from free flight is extrapolated back to a rough contact
    time. Every step near it is then tried as the impulse step: with the
    free-flight position at that step and a refitted velocity, the body must
    reproduce its next few observed positions. At the best step the centres
    are closer than the radius sum, and one step earlier they were not.
    """
    ph = sc.physics
    s = ph.substeps
    valid = _valid(obs)
    ca, cb = obs.column(a), obs.column(b)
    f_hi = min(int(obs.frames[-1]), mark + 6)
    n_steps = (f_hi - sc.start_frame) * s
    if n_steps <= 0:
        return None
    pa, va = _simulate_single(sc, a, n_steps)
    pb, vb = _simulate_single(sc, b, n_steps)
    pre = [k for k, f in enumerate(obs.frames) if sc.start_frame <= f < mark and valid[k, ca] and valid[k, cb]]
    if not pre:
        return None
    res = []
    for k in pre:
        n = (int(obs.frames[k]) - sc.start_frame) * s
        res += [np.linalg.norm(obs.pos[k, ca] - pa[n]), np.linalg.norm(obs.pos[k, cb] - pb[n])]
    tol = 1e-9 + 4.0 * float(np.sqrt(np.mean(np.square(res))))
    t_est, w_est = [], []
    for col, traj in ((ca, pa), (cb, pb)):
        pts = []
        for k, f in enumerate(obs.frames):
            f = int(f)
            if f < mark or f > f_hi or not valid[k, col]:
                continue
            n = (f - sc.start_frame) * s
            dev = float(np.linalg.norm(obs.pos[k, col] - traj[n]))
            if dev > tol:
                pts.append((n * ph.dt, dev))
            elif pts:
                break
            if len(pts) == post_frames:
                break
        if len(pts) >= 2:
            t = np.array([p[0] for p in pts])
            d = np.array([p[1] for p in pts])
            slope, icpt = np.polyfit(t, d, 1)
            if slope > 0:
                t_est.append(-icpt / slope)
                w_est.append(slope)
    if not t_est:
        return None
    n_lin = int(round(float(np.average(t_est, weights=w_est)) / ph.dt))
    lo_n = max(1, min(n_lin - search, (mark - 1 - sc.start_frame) * s))
    hi_n = min(len(pa) - 1, max(n_lin + search, (mark + 2 - sc.start_frame) * s))
    limit = limit or {}
    costs = {}
    for n in range(lo_n, hi_n + 1):
        cost = 0.0
        for bid, col, traj, vel in ((a, ca, pa, va), (b, cb, pb, vb)):
            rows = [k for k, f in enumerate(obs.frames)
                    if (int(f) - sc.start_frame) * s > n and valid[k, col]
                    and int(f) <= limit.get(bid, f)][:post_frames]
            cost += _post_impulse_cost(obs, sc, bid, rows, n, traj[n], vel[n]) if len(rows) >= 2 else math.inf
        costs[n] = cost
    n_c = min(costs, key=costs.get)
    # the minimum must be bracketed by evaluable neighbours
    if not (math.isfinite(costs[n_c]) and math.isfinite(costs.get(n_c + 1, math.inf))
            and math.isfinite(costs.get(n_c - 1, math.inf))):
        return None
    d_now = float(np.linalg.norm(pa[n_c] - pb[n_c]))
    d_prev = float(np.linalg.norm(pa[n_c - 1] - pb[n_c - 1]))
    return min(d_now, d_prev), max(d_now, d_prev)


def _post_impulse_cost(obs: Trajectory, sc: SceneConfig, bid: int, rows: list, n: int, p_n, v_guess) -> float:
    """Squared misfit of a free flight restarted at step ``n`` with the best constant-free velocity."""
    s = sc.physics.substeps
    col = obs.column(bid)
    offs = [(int(obs.frames[k]) - sc.start_frame) * s - n for k in rows]
    if min(offs) <= 0:
        return math.inf
    target = obs.pos[rows, col]
    body = sc.body(bid)
    span = max(offs)

    def resid(v):
        b1 = Body(bid, body.params, BodyState((float(p_n[0]), float(p_n[1])), (float(v[0]), float(v[1]))))
        p, _ = _simulate_single(replace(sc, bodies=(b1,)), bid, span)
        return (p[offs] - target).ravel()

    k0, k1 = rows[0], rows[1]
    v0 = (obs.pos[k1, col] - obs.pos[k0, col]) / ((offs[1] - offs[0]) * sc.physics.dt)
    out = least_squares(resid, v0, method="lm", xtol=1e-12, ftol=1e-12)
    return float(out.cost)


# ---------------------------------------------------------------------------
# stage 2: initial states


def fit_initial(observed: Trajectory, marks: Marks | dict, scene: SceneConfig,
                schedule: FitSchedule = FitSchedule()) -> tuple[SceneConfig, dict]:
    """Fit every body's initial state on its own pre-collision frames.

    ``scene`` carries the global parameters and shapes. Returns the scene with
    fitted states (masses and restitutions untouched) and per-body losses.
    """
    frames = marks.frames if isinstance(marks, Marks) else dict(marks)
    f0 = _start_frame(observed)
    end_all = int(observed.frames[-1]) + 1
    valid = _valid(observed)
    scene = replace(scene, start_frame=f0)
    bodies = list(scene.bodies)
    losses = {}
    for idx, b in enumerate(scene.bodies):
        col = observed.column(b.id)
        end = frames.get(b.id)
        end = end_all if end is None else end
        n_pre = int(np.sum(valid[:, col] & (observed.frames < end)))
        if n_pre < 3:
            raise InsufficientPreCollisionFrames(b.id, n_pre)
        p0, v0, a0, w0 = _init_state(observed, col, end, scene.physics.frame_dt)
        single = replace(scene, bodies=(Body(b.id, b.params, BodyState(p0, v0, a0, w0)),), walls=())
        names = _state_names(single, observed, b.id)
        theta = ParamVector.from_scene(single, names)
        obs1 = observed.select([b.id])
        theta, out = _minimize(single, theta, obs1, (f0, end), None, schedule.initial_threshold,
                               schedule.max_steps, contacts=False)
        fitted = theta.apply(single).bodies[0]
        bodies[idx] = Body(b.id, b.params, fitted.state)
        losses[b.id] = out.loss
    return replace(scene, bodies=tuple(bodies)), losses


# ---------------------------------------------------------------------------
# stage 3: masses and restitutions


def collision_components(pairs: Iterable[tuple[int, int]]) -> list[list[int]]:
    parent: dict = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for x in list(parent):
        groups.setdefault(find(x), []).append(x)
    return [sorted(g) for g in sorted(groups.values(), key=min)]


def collision_flags(scene: SceneConfig, marks: Marks) -> dict:
    """Which masses are pinned, fitted or left at their defaults."""
    flags = {b.id: {"m": DEFAULTED, "r": DEFAULTED} for b in scene.bodies}
    for comp in collision_components(marks.pairs):
        first = min(comp, key=lambda i: (marks.frames.get(i) if marks.frames.get(i) is not None else 10**9, i))
        for i in comp:
            flags[i] = {"m": PINNED if i == first else FITTED, "r": FITTED}
    for i in marks.walls:
        flags[i]["r"] = FITTED  # a cushion bounce measures restitution on its own
    return flags


def fit_collision_params(observed: Trajectory, schedule: FitSchedule, scene: SceneConfig,
                         marks: Marks, flags: dict | None = None) -> tuple[SceneConfig, list[StageLog], dict]:
    """Curriculum fit of masses and restitutions over the schedule's growing windows."""
    flags = collision_flags(scene, marks) if flags is None else flags
    bodies = []
    for b in scene.bodies:
        m = DEFAULT_MASS if flags[b.id]["m"] in (PINNED, DEFAULTED) else b.params.mass
        r = DEFAULT_RESTITUTION if flags[b.id]["r"] == DEFAULTED else b.params.restitution
        bodies.append(Body(b.id, replace(b.params, mass=m, restitution=r), b.state))
    scene = replace(scene, bodies=tuple(bodies))
    names = [f"b{i}.m" for i in scene.ids if flags[i]["m"] == FITTED]
    names += [f"b{i}.r" for i in scene.ids if flags[i]["r"] == FITTED]
    logs: list[StageLog] = []
    if not names:
        return scene, logs, flags
    f0 = _start_frame(observed)
    end_all = int(observed.frames[-1]) + 1
    last = len(schedule.windows) - 1
    for k, ((a, b), thr) in enumerate(zip(schedule.windows, schedule.thresholds)):
        lo, hi = f0 + a, min(f0 + b, end_all)
        # a body's parameters join once its first collision is followed by enough frames
        active = [n for n in names if k == last or _settled(marks, int(n[1:n.index(".")]), hi)]
        if not active:
            logs.append(StageLog(f"collision[{a},{b})", float("nan"), [], False, 0.0, 0))
            continue
        t0 = time.perf_counter()
        theta, out = _minimize(scene, ParamVector.from_scene(scene, active), observed, (lo, hi), None, thr,
                               schedule.max_steps, precondition=True)
        scene = theta.apply(scene)
        trace, steps = list(out.trace), out.n_iter
        if schedule.refine_states and not out.converged:
            # second pass: let the initial states follow the collision parameters
            active += [n for b in scene.bodies for n in _state_names(scene, observed, b.id)]
            theta, out = _minimize(scene, ParamVector.from_scene(scene, active), observed, (lo, hi), None, thr,
                                   schedule.max_steps, precondition=True)
            scene = theta.apply(scene)
            trace += out.trace[1:]
            steps += out.n_iter
            if out.reason == "line search failed":
                theta, loss = _derivative_free(scene, ParamVector.from_scene(scene, active), observed, (lo, hi))
                if loss < out.loss:
                    scene = theta.apply(scene)
                    out.loss = loss
                    trace.append(loss)
        logs.append(StageLog(f"collision[{a},{b})", out.loss, trace, out.converged,
                             time.perf_counter() - t0, steps))
    return scene, logs, flags


def _settled(marks: Marks, body_id: int, hi: int) -> bool:
    f = marks.frames.get(body_id)
    return f is not None and f + SETTLE_FRAMES <= hi


# ---------------------------------------------------------------------------
# stage 5: prediction refit


def refit_for_prediction(observed: Trajectory, scene: SceneConfig, schedule: FitSchedule = FitSchedule(),
                         flags: dict | None = None) -> tuple[SceneConfig, StageLog]:
    """Refine per-scene parameters on the last ``schedule.refit_frames`` observed frames.

    The returned scene starts at the first frame of that window with the
    refined state, so simulating it forward continues past the clip.
    """
    n = schedule.refit_frames
    if observed.n_frames < n:
        raise InsufficientFrames(f"refit needs {n} observed frames, got {observed.n_frames}")
    f0 = _start_frame(observed)
    end = int(observed.frames[-1]) + 1
    anchor = int(observed.frames[-n])
    base = replace(scene, start_frame=scene.start_frame if scene.start_frame else f0)
    ro = rollout(World.from_scene(base), anchor - base.start_frame + 1)
    anchored = state_at(base, ro, anchor - base.start_frame)
    names = []
    for b in anchored.bodies:
        names += _state_names(anchored, observed, b.id)
    if flags is not None:
        names += [f"b{i}.m" for i in anchored.ids if flags.get(i, {}).get("m") == FITTED]
        names += [f"b{i}.r" for i in anchored.ids if flags.get(i, {}).get("r") == FITTED]
    theta = ParamVector.from_scene(anchored, names)
    t0 = time.perf_counter()
    try:
        theta, out = _minimize(anchored, theta, observed, (anchor, end), None, schedule.refit_threshold,
                               schedule.max_steps, precondition=True)
    except EmptyMask:
        log.info("refit skipped: nothing visible in frames [%d, %d)", anchor, end)
        return anchored, StageLog(f"refit[{anchor},{end})", float("nan"), [], False, 0.0, 0)
    log_ = StageLog(f"refit[{anchor},{end})", out.loss, out.trace, out.converged, time.perf_counter() - t0,
                    out.n_iter)
    return theta.apply(anchored), log_


# ---------------------------------------------------------------------------
# pipeline

STAGES = ("global", "initial", "collision", "refit")


def identify(observed: Trajectory, template: SceneConfig, globals_: Globals | None = None,
             schedule: FitSchedule = FitSchedule(), stages: Sequence[str] = ("global", "initial", "collision"),
             ) -> FitReport:
    """Run the selected stages on one observation.

    Without ``globals_`` and with the "global" stage selected, the shared
    parameters come from this observation alone.
    """
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {sorted(unknown)}")
    report_stages: list[StageLog] = []
    f0 = _start_frame(observed)
    if globals_ is None:
        if "global" in stages:
            t0 = time.perf_counter()
            globals_ = fit_global([(observed, template)], schedule)
            report_stages.append(StageLog("global", globals_.loss, [], True, time.perf_counter() - t0))
        else:
            globals_ = Globals.from_physics(template)
    scene = replace(globals_.apply(template), start_frame=f0)
    marks = mark_first_collisions(observed, template_radii(scene), scene.walls)
    flags = collision_flags(scene, marks)
    if "initial" in stages:
        t0 = time.perf_counter()
        scene, losses = fit_initial(observed, marks, scene, schedule)
        report_stages.append(StageLog("initial", float(sum(losses.values())), [], True, time.perf_counter() - t0))
    if "collision" in stages:
        scene, logs, flags = fit_collision_params(observed, schedule, scene, marks, flags)
        report_stages.extend(logs)
    if "refit" in stages:
        scene, lg = refit_for_prediction(observed, scene, schedule, flags)
        report_stages.append(lg)
    return FitReport(scene, report_stages, dict(marks.frames), flags, globals_)
