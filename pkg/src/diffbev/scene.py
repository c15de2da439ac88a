"""Scene, body and trajectory types shared by the simulator, the fitter and the executor.

All positions live in the bird's-eye-view (BEV) ground frame, in metres.
Everything here is an immutable value object; the simulator copies the
numbers into arrays before touching them.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
GRAVITY = 9.81
R_MAX = 1.2


class InvalidScene(ValueError):
    """Raised when a scene violates its invariants and cannot be simulated."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ShapeKind(str, enum.Enum):
    SPHERE = "sphere"
    CUBE = "cube"
    CYLINDER = "cylinder"

    @property
    def is_rect(self) -> bool:
        # cubes have a square footprint, the other two a circle
        return self is ShapeKind.CUBE

    @property
    def rolls(self) -> bool:
        return self is ShapeKind.SPHERE


@dataclass(frozen=True)
class BodyParams:
    mass: float
    restitution: float
    radius: float
    shape: ShapeKind
    attributes: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class BodyState:
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    angle: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class Body:
    id: int
    params: BodyParams
    state: BodyState


@dataclass(frozen=True)
class GlobalPhysics:
    g: float = GRAVITY
    dt: float = 0.004
    lam1: float = 0.1  # sliding friction
    lam2: float = 0.02  # rolling resistance
    lam3: float = 0.01  # air resistance
    lam_omega: float = 0.1  # angular drag rate, 1/s
    substeps: int = 10

    @property
    def frame_dt(self) -> float:
        return self.dt * self.substeps


@dataclass(frozen=True)
class Wall:
    a: tuple[float, float]
    b: tuple[float, float]
    restitution: float = 0.9


@dataclass(frozen=True)
class Visibility:
    xmin: float = -6.0
    ymin: float = -6.0
    xmax: float = 6.0
    ymax: float = 6.0

    def contains(self, x, y):
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)


@dataclass(frozen=True)
class SceneConfig:
    bodies: tuple[Body, ...]
    physics: GlobalPhysics = GlobalPhysics()
    walls: tuple[Wall, ...] = ()
    visibility: Visibility = Visibility()
    # frame index of the initial state; non-zero for scenes re-anchored mid-clip
    start_frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "walls", tuple(self.walls))

    @property
    def ids(self) -> list[int]:
        return [b.id for b in self.bodies]

    def index_of(self, body_id: int) -> int:
        for k, b in enumerate(self.bodies):
            if b.id == body_id:
                return k
        raise KeyError(body_id)

    def body(self, body_id: int) -> Body:
        return self.bodies[self.index_of(body_id)]

    def without(self, body_id: int) -> "SceneConfig":
        self.index_of(body_id)
        return replace(self, bodies=tuple(b for b in self.bodies if b.id != body_id))

    def replace_body(self, body_id: int, *, params: BodyParams | None = None,
                     state: BodyState | None = None) -> "SceneConfig":
        k = self.index_of(body_id)
        old = self.bodies[k]
        new = Body(old.id, params or old.params, state or old.state)
        return replace(self, bodies=self.bodies[:k] + (new,) + self.bodies[k + 1:])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-body positions sampled at frame boundaries.

    ``pos`` has shape (F, N, 2), ``angle`` (F, N) with NaN where no angle is
    known, ``present`` (F, N). Frame ``frames[k]`` sits at time
    ``frames[k] * substeps * dt``.
    """

    ids: tuple[int, ...]
    frames: np.ndarray
    pos: np.ndarray
    angle: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.int64))
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))
        object.__setattr__(self, "angle", np.asarray(self.angle, dtype=float))
        object.__setattr__(self, "present", np.asarray(self.present, dtype=bool))
        f, n = len(self.frames), len(self.ids)
        if self.pos.shape != (f, n, 2) or self.angle.shape != (f, n) or self.present.shape != (f, n):
            raise ValueError("trajectory arrays do not match frames x bodies")
        if f > 1 and np.any(np.diff(self.frames) <= 0):
            raise ValueError("frame indices must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def column(self, body_id: int) -> int:
        return self.ids.index(body_id)

    def frame_slice(self, start: int, stop: int) -> "Trajectory":
        sel = (self.frames >= start) & (self.frames < stop)
        return Trajectory(self.ids, self.frames[sel], self.pos[sel], self.angle[sel], self.present[sel])

    def select(self, ids: Iterable[int]) -> "Trajectory":
        cols = [self.column(i) for i in ids]
        return Trajectory(tuple(self.ids[c] for c in cols), self.frames, self.pos[:, cols],
                          self.angle[:, cols], self.present[:, cols])

    def equals(self, other: "Trajectory") -> bool:
        return (self.ids == other.ids
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.pos, other.pos)
                and np.array_equal(self.angle, other.angle, equal_nan=True)
                and np.array_equal(self.present, other.present))

    def to_records(self) -> list[dict]:
        out = []
        for k, f in enumerate(self.frames):
            bodies = []
            for c, bid in enumerate(self.ids):
                a = self.angle[k, c]
                bodies.append({
                    "id": bid,
                    "x": float(self.pos[k, c, 0]),
                    "y": float(self.pos[k, c, 1]),
                    "alpha": None if math.isnan(a) else float(a),
                    "present": bool(self.present[k, c]),
                })
            out.append({"frame": int(f), "bodies": bodies})
        return out

    @classmethod
    def from_records(cls, records: Sequence[Mapping[str, Any]]) -> "Trajectory":
        if not records:
            raise ValueError("empty trajectory")
        ids = [int(b["id"]) for b in records[0]["bodies"]]
        f, n = len(records), len(ids)
        pos = np.full((f, n, 2), np.nan)
        ang = np.full((f, n), np.nan)
        present = np.zeros((f, n), dtype=bool)
        frames = []
        for k, rec in enumerate(records):
            frames.append(int(rec["frame"]))
            for b in rec["bodies"]:
                c = ids.index(int(b["id"]))
                pos[k, c] = (_num(b.get("x")), _num(b.get("y")))
                ang[k, c] = _num(b.get("alpha"))
                present[k, c] = bool(b.get("present", True))
        return cls(tuple(ids), np.array(frames), pos, ang, present)


def _num(x) -> float:
    return float("nan") if x is None else float(x)


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: SceneConfig) -> list[str]:
    """Return every invariant violation in ``scene``; an empty list means ok."""
    from diffbev import collision

    problems: list[str] = []
    ph = scene.physics
    if not ph.dt > 0:
        problems.append("non-positive time step")
    if ph.substeps < 1:
        problems.append("substeps_per_frame must be >= 1")
    for name in ("lam1", "lam2", "lam3", "lam_omega"):
        if not getattr(ph, name) >= 0:
            problems.append(f"negative coefficient {name}")
    ids = scene.ids
    if len(set(ids)) != len(ids):
        problems.append("duplicate body id")
    for b in scene.bodies:
        p, s = b.params, b.state
        if not p.mass > 0:
            problems.append(f"body {b.id}: non-positive mass")
        if not p.radius > 0:
            problems.append(f"body {b.id}: non-positive radius")
        if not (0 < p.restitution <= R_MAX):
            problems.append(f"body {b.id}: restitution outside (0, {R_MAX}]")
        nums = (*s.position, *s.velocity, s.angle, s.omega)
        if not all(math.isfinite(v) for v in nums):
            problems.append(f"body {b.id}: non-finite state")
    for k, w in enumerate(scene.walls):
        if not (0 < w.restitution <= R_MAX):
            problems.append(f"wall {k}: restitution outside (0, {R_MAX}]")
        if w.a == w.b:
            problems.append(f"wall {k}: zero length")
    if problems:
        return problems
    bodies = scene.bodies
    for i in range(len(bodies)):
        for j in range(i + 1, len(bodies)):
            try:
                c = collision.detect_pair(_footprint(bodies[i]), _footprint(bodies[j]))
            except collision.DegenerateCenters:
                c = True
            if c is not None:
                problems.append(f"initial overlap between bodies {bodies[i].id} and {bodies[j].id}")
    return problems


def _footprint(body: Body):
    from diffbev import collision

    return collision.Footprint(np.array(body.state.position, dtype=float), body.params.radius,
                               body.params.shape.is_rect, body.state.angle)


def check_scene(scene: SceneConfig) -> None:
    problems = validate_scene(scene)
    if problems:
        raise InvalidScene(problems)


# ---------------------------------------------------------------------------
# JSON


def scene_to_dict(scene: SceneConfig) -> dict:
    ph = scene.physics
    return {
        "v": SCHEMA_VERSION,
        "physics": {
            "g": ph.g, "dt": ph.dt, "lam1": ph.lam1, "lam2": ph.lam2, "lam3": ph.lam3,
            "lam_omega": ph.lam_omega, "substeps": ph.substeps,
        },
        "bodies": [
            {
                "id": b.id,
                "shape": b.params.shape.value,
                "mass": b.params.mass,
                "restitution": b.params.restitution,
                "radius": b.params.radius,
                "attributes": dict(b.params.attributes),
                "position": list(b.state.position),
                "velocity": list(b.state.velocity),
                "angle": b.state.angle,
                "omega": b.state.omega,
            }
            for b in scene.bodies
        ],
        "walls": [{"a": list(w.a), "b": list(w.b), "restitution": w.restitution} for w in scene.walls],
        "visibility": {
            "xmin": scene.visibility.xmin, "ymin": scene.visibility.ymin,
            "xmax": scene.visibility.xmax, "ymax": scene.visibility.ymax,
        },
        "start_frame": scene.start_frame,
    }


def scene_from_dict(d: Mapping[str, Any]) -> SceneConfig:
    if d.get("v", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema version {d.get('v')}")
    ph = d.get("physics", {})
    physics = GlobalPhysics(
        g=float(ph.get("g", GRAVITY)), dt=float(ph.get("dt", 0.004)),
        lam1=float(ph.get("lam1", 0.1)), lam2=float(ph.get("lam2", 0.02)),
        lam3=float(ph.get("lam3", 0.01)), lam_omega=float(ph.get("lam_omega", 0.1)),
        substeps=int(ph.get("substeps", 10)),
    )
    bodies = []
    for b in d["bodies"]:
        params = BodyParams(
            mass=float(b.get("mass", 1.0)), restitution=float(b.get("restitution", 0.8)),
            radius=float(b.get("radius", 0.5)), shape=ShapeKind(b["shape"]),
            attributes={str(k): str(v) for k, v in b.get("attributes", {}).items()},
        )
        state = BodyState(
            position=_pair(b["position"]), velocity=_pair(b.get("velocity", (0.0, 0.0))),
            angle=float(b.get("angle", 0.0)), omega=float(b.get("omega", 0.0)),
        )
        bodies.append(Body(int(b["id"]), params, state))
    walls = tuple(Wall(_pair(w["a"]), _pair(w["b"]), float(w.get("restitution", 0.9)))
                  for w in d.get("walls", []))
    vis = d.get("visibility")
    visibility = Visibility(**{k: float(v) for k, v in vis.items()}) if vis else Visibility()
    return SceneConfig(tuple(bodies), physics, walls, visibility, int(d.get("start_frame", 0)))


def _pair(v) -> tuple[float, float]:
    x, y = v
    return (float(x), float(y))


def save_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())


def save_scene(scene: SceneConfig, path: str | Path) -> None:
    save_json(scene_to_dict(scene), path)


def load_scene(path: str | Path) -> SceneConfig:
    return scene_from_dict(load_json(path))


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    save_json(traj.to_records(), path)


def load_trajectory(path: str | Path) -> Trajectory:
    return Trajectory.from_records(load_json(path))
