"""Seeded ground-truth scenes, noisy observations and billiards tables for testing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from diffbev.dynamics import simulate_full
from diffbev.events import EventLog
from diffbev.scene import (
    Body, BodyParams, BodyState, GlobalPhysics, SceneConfig, ShapeKind, Trajectory, Visibility, Wall,
    validate_scene,
)

COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
MATERIALS = ("rubber", "metal")
TRUE_PHYSICS = GlobalPhysics(g=9.81, dt=0.004, lam1=0.12, lam2=0.02, lam3=0.01, lam_omega=0.1, substeps=10)


class GenerationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 0
    n_bodies: tuple[int, int] = (2, 3)
    shapes: tuple[str, ...] = ("sphere", "cylinder", "cube")
    mass: tuple[float, float] = (0.5, 5.0)
    restitution: tuple[float, float] = (0.5, 1.0)
    speed: tuple[float, float] = (1.5, 4.0)  # aimed launch speed, m/s
    v_max: float = 4.0  # per-axis bound on launch velocity
    aim_jitter_deg: float = 10.0
    radius: float = 0.5
    noise_sigma: float = 0.0
    n_frames: int = 128
    spawn: tuple[float, float, float, float] = (-3.0, -3.0, 3.0, 3.0)
    min_gap: float = 0.6  # clearance between footprints at t = 0
    visibility: Visibility = Visibility()
    physics: GlobalPhysics = TRUE_PHYSICS
    require_collision: bool = True
    every_body_collides: bool = False
    min_approach_speed: float = 0.5
    first_collision: tuple[int, int] = (12, 80)  # allowed frame range of each first collision
    max_attempts: int = 1000

    def __post_init__(self):
        for lo, hi in (self.n_bodies, self.mass, self.restitution, self.speed):
            if lo > hi:
                raise ValueError("empty parameter range")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.shapes:
            raise ValueError("no shapes to draw from")


@dataclass
class GroundTruth:
    scene: SceneConfig
    trajectory: Trajectory
    events: EventLog
    spec: GeneratorSpec
    attempts: int = 1
    approach_speeds: dict = field(default_factory=dict)


def _footprint_reach(shape: ShapeKind, radius: float) -> float:
    return radius * math.sqrt(2.0) if shape.is_rect else radius


def _draw_scene(rng: np.random.Generator, spec: GeneratorSpec) -> SceneConfig | None:
    n = int(rng.integers(spec.n_bodies[0], spec.n_bodies[1] + 1))
    shapes = [ShapeKind(spec.shapes[int(rng.integers(len(spec.shapes)))]) for _ in range(n)]
    x0, y0, x1, y1 = spec.spawn
    pos: list[np.ndarray] = []
    for k in range(n):
        for _ in range(200):
            p = rng.uniform((x0, y0), (x1, y1))
            ok = all(np.linalg.norm(p - q) >= _footprint_reach(shapes[k], spec.radius)
                     + _footprint_reach(shapes[c], spec.radius) + spec.min_gap for c, q in enumerate(pos))
            if ok:
                pos.append(p)
                break
        else:
            return None
    bodies = []
    for k in range(n):
        if n > 1:
            target = int(rng.integers(n - 1))
            target += target >= k
            d = pos[target] - pos[k]
            ang = math.atan2(d[1], d[0]) + math.radians(rng.uniform(-spec.aim_jitter_deg, spec.aim_jitter_deg))
        else:
            ang = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(*spec.speed)
        vel = np.clip(speed * np.array([math.cos(ang), math.sin(ang)]), -spec.v_max, spec.v_max)
        params = BodyParams(
            mass=float(rng.uniform(*spec.mass)),
            restitution=float(rng.uniform(*spec.restitution)),
            radius=spec.radius,
            shape=shapes[k],
            attributes={"color": COLORS[int(rng.integers(len(COLORS)))],
                        "material": MATERIALS[int(rng.integers(len(MATERIALS)))],
                        "shape": shapes[k].value},
        )
        alpha = float(rng.uniform(-math.pi / 4, math.pi / 4)) if shapes[k].is_rect else 0.0
        state = BodyState((float(pos[k][0]), float(pos[k][1])), (float(vel[0]), float(vel[1])), alpha, 0.0)
        bodies.append(Body(k, params, state))
    return SceneConfig(tuple(bodies), spec.physics, (), spec.visibility)


def _accept(scene: SceneConfig, ro, events: EventLog, spec: GeneratorSpec) -> tuple[bool, dict]:
    ids = scene.ids
    body_hits = [c for c in ro.contacts if c.j >= 0]
    onsets = [c for c in body_hits if c.onset]
    speeds = {}
    for c in onsets:
        key = (ids[c.i], ids[c.j])
        speeds.setdefault(key, c.approach_speed)
    if spec.require_collision and not onsets:
        return False, speeds
    if any(v < spec.min_approach_speed for v in speeds.values()):
        return False, speeds
    lo, hi = spec.first_collision
    s = scene.physics.substeps
    first: dict[int, int] = {}
    for c in onsets:
        f = c.step // s
        for b in (ids[c.i], ids[c.j]):
            first.setdefault(b, f)
    if spec.require_collision and any(not (lo <= f <= hi) for f in first.values()):
        return False, speeds
    if spec.every_body_collides and len(first) < len(ids):
        return False, speeds
    return True, speeds


def generate_scene(spec: GeneratorSpec) -> GroundTruth:
    """Rejection-sample a scene that meets the spec, simulate it and keep the result as truth."""
    rng = np.random.default_rng(spec.seed)
    needs_pair = spec.require_collision or spec.every_body_collides
    for attempt in range(1, spec.max_attempts + 1):
        scene = _draw_scene(rng, spec)
        if scene is None or validate_scene(scene):
            continue
        if needs_pair and len(scene.bodies) < 2:
            continue
        traj, events, ro = simulate_full(scene, spec.n_frames, validate=False)
        ok, speeds = _accept(scene, ro, events, spec)
        if ok:
            return GroundTruth(scene, traj, events, spec, attempt, speeds)
    raise GenerationExhausted(f"no acceptable scene after {spec.max_attempts} attempts (seed {spec.seed})")


def observe(scene: SceneConfig, traj: Trajectory, spec: GeneratorSpec | None = None,
            sigma: float | None = None, seed: int | None = None) -> Trajectory:
    """Frame samples with seeded Gaussian noise per coordinate and visibility flags.

    Square bodies also get noise on their angle. With zero noise the
    positions and angles come back exactly as simulated.
    """
    sigma = (spec.noise_sigma if spec is not None else 0.0) if sigma is None else sigma
    seed = (spec.seed if spec is not None else 0) if seed is None else seed
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    pos = traj.pos.copy()
    ang = traj.angle.copy()
    if sigma > 0:
        rect = np.array([scene.body(i).params.shape.is_rect for i in traj.ids], dtype=bool)
        rng = np.random.default_rng([seed, 0x0B5E])
        pos = pos + rng.normal(0.0, sigma, size=pos.shape)
        ang = ang + np.where(rect[None, :], rng.normal(0.0, sigma, size=ang.shape), 0.0)
    present = scene.visibility.contains(traj.pos[..., 0], traj.pos[..., 1])
    return Trajectory(traj.ids, traj.frames.copy(), pos, ang, present)


# ---------------------------------------------------------------------------
# billiards

TABLE_LENGTH = 2.84
TABLE_WIDTH = 1.42
BALL_RADIUS = 0.03075
BALL_MASS = 0.21
CUSHION_RESTITUTION = 0.9
BILLIARDS_PHYSICS = GlobalPhysics(g=9.81, dt=0.004, lam1=0.2, lam2=0.015, lam3=0.005, lam_omega=0.1, substeps=10)


def table_walls(length: float = TABLE_LENGTH, width: float = TABLE_WIDTH,
                restitution: float = CUSHION_RESTITUTION) -> tuple[Wall, ...]:
    c = [(0.0, 0.0), (length, 0.0), (length, width), (0.0, width)]
    return tuple(Wall(c[k], c[(k + 1) % 4], restitution) for k in range(4))


def make_billiards(seed: int, physics: GlobalPhysics = BILLIARDS_PHYSICS) -> SceneConfig:
    """Three balls on a 2:1 table: the cue ball is shot at ball 1 while the others rest."""
    rng = np.random.default_rng([seed, 0xB11])
    margin = 0.15
    lo = np.array([margin, margin])
    hi = np.array([TABLE_LENGTH - margin, TABLE_WIDTH - margin])
    pos: list[np.ndarray] = []
    while len(pos) < 3:
        p = rng.uniform(lo, hi)
        if all(np.linalg.norm(p - q) > 8 * BALL_RADIUS for q in pos):
            pos.append(p)
    d = pos[1] - pos[0]
    ang = math.atan2(d[1], d[0]) + math.radians(rng.uniform(-3.0, 3.0))
    speed = rng.uniform(1.5, 3.0)
    colors = ("white", "yellow", "red")
    bodies = []
    for k in range(3):
        v = (speed * math.cos(ang), speed * math.sin(ang)) if k == 0 else (0.0, 0.0)
        params = BodyParams(BALL_MASS, 0.95, BALL_RADIUS, ShapeKind.SPHERE,
                            {"color": colors[k], "material": "resin", "shape": "sphere"})
        bodies.append(Body(k, params, BodyState((float(pos[k][0]), float(pos[k][1])), v)))
    vis = Visibility(0.0, 0.0, TABLE_LENGTH, TABLE_WIDTH)
    return SceneConfig(tuple(bodies), physics, table_walls(), vis)


def billiards_truth(seed: int, n_frames: int, physics: GlobalPhysics = BILLIARDS_PHYSICS) -> GroundTruth:
    scene = make_billiards(seed, physics)
    traj, events, ro = simulate_full(scene, n_frames)
    spec = GeneratorSpec(seed=seed, n_frames=n_frames, shapes=("sphere",), radius=BALL_RADIUS,
                         visibility=scene.visibility, physics=physics)
    return GroundTruth(scene, traj, events, spec)


def with_noise(spec: GeneratorSpec, sigma: float) -> GeneratorSpec:
    return replace(spec, noise_sigma=sigma)
