"""Trajectory-fit loss with forward-mode gradients, plus a finite-difference oracle.

Parameters are addressed by string ids:

* per body ``b<id>.<field>`` with field in v0x, v0y, l0x, l0y, a0, w0, m, r
* global ``g.lam1``, ``g.lam2``, ``g.lam3``, ``g.lamw`` and ``g.R.<shape>``

Each id carries a reparameterization from an unconstrained variable ``u`` to
the physical value. Gradients are taken with respect to ``u``; every
parameter's tangent is pushed through the same rollout as one batched pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from diffbev.dynamics import Rollout, World, rollout
from diffbev.scene import R_MAX, Body, SceneConfig, ShapeKind, Trajectory

BODY_FIELDS = ("v0x", "v0y", "l0x", "l0y", "a0", "w0", "m", "r")
GLOBAL_FIELDS = ("lam1", "lam2", "lam3", "lamw")
_POS_FLOOR = 1e-12


class EmptyMask(ValueError):
    pass


# ---------------------------------------------------------------------------
# reparameterizations


@dataclass(frozen=True)
class Transform:
    kind: str  # identity | exp | sigmoid
    lo: float = 0.0
    hi: float = 1.0

    def decode(self, u: float) -> float:
        if self.kind == "exp":
            return math.exp(u)
        if self.kind == "sigmoid":
            return self.lo + (self.hi - self.lo) / (1.0 + math.exp(-u))
        return float(u)

    def encode(self, x: float) -> float:
        if self.kind == "exp":
            return math.log(max(x, _POS_FLOOR))
        if self.kind == "sigmoid":
            span = self.hi - self.lo
            t = min(max((x - self.lo) / span, 1e-12), 1.0 - 1e-12)
            return math.log(t / (1.0 - t))
        return float(x)

    def slope(self, u: float) -> float:
        """dx/du at ``u``."""
        if self.kind == "exp":
            return math.exp(u)
        if self.kind == "sigmoid":
            z = 1.0 / (1.0 + math.exp(-u))
            return (self.hi - self.lo) * z * (1.0 - z)
        return 1.0


IDENTITY = Transform("identity")
POSITIVE = Transform("exp")
RESTITUTION = Transform("sigmoid", 0.0, R_MAX)


def default_transform(name: str) -> Transform:
    field = name.split(".", 1)[1]
    if field in ("m",) or field in GLOBAL_FIELDS or field.startswith("R."):
        return POSITIVE
    if field == "r":
        return RESTITUTION
    return IDENTITY


def body_param(body_id: int, field: str) -> str:
    if field not in BODY_FIELDS:
        raise KeyError(field)
    return f"b{body_id}.{field}"


def _split(name: str) -> tuple[str, str]:
    head, field = name.split(".", 1)
    return head, field


# ---------------------------------------------------------------------------
# parameter vectors


@dataclass
class ParamVector:
    """Ordered parameter ids with their unconstrained values."""

    names: list[str]
    u: np.ndarray
    transforms: list[Transform]

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).copy()
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate parameter ids")
        if not (len(self.names) == len(self.u) == len(self.transforms)):
            raise ValueError("names, values and transforms differ in length")

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_physical(cls, values: dict[str, float] | Sequence[tuple[str, float]],
                      transforms: dict[str, Transform] | None = None) -> "ParamVector":
        items = list(values.items()) if isinstance(values, dict) else list(values)
        transforms = transforms or {}
        names = [k for k, _ in items]
        tr = [transforms.get(k, default_transform(k)) for k in names]
        u = [t.encode(float(v)) for t, (_, v) in zip(tr, items)]
        return cls(names, np.array(u), tr)

    @classmethod
    def from_scene(cls, scene: SceneConfig, names: Sequence[str],
                   transforms: dict[str, Transform] | None = None) -> "ParamVector":
        return cls.from_physical([(n, read_param(scene, n)) for n in names], transforms)

    def with_u(self, u: np.ndarray) -> "ParamVector":
        return ParamVector(list(self.names), u, list(self.transforms))

    def physical(self) -> np.ndarray:
        return np.array([t.decode(x) for t, x in zip(self.transforms, self.u)])

    def slopes(self) -> np.ndarray:
        return np.array([t.slope(x) for t, x in zip(self.transforms, self.u)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.physical().tolist()))

    def index(self, name: str) -> int:
        return self.names.index(name)

    # -- scene binding ----------------------------------------------------

    def apply(self, scene: SceneConfig) -> SceneConfig:
        """Scene with the decoded physical values written in."""
        vals = self.as_dict()
        ph = scene.physics
        gkw = {}
        for n, v in vals.items():
            head, field = _split(n)
            if head == "g" and field in GLOBAL_FIELDS:
                gkw["lam_omega" if field == "lamw" else field] = v
        if gkw:
            ph = replace(ph, **gkw)
        bodies = []
        for b in scene.bodies:
            p, s = b.params, b.state
            key = f"b{b.id}."
            rk = f"g.R.{p.shape.value}"
            pkw, skw = {}, {}
            if rk in vals:
                pkw["radius"] = vals[rk]
            if key + "m" in vals:
                pkw["mass"] = vals[key + "m"]
            if key + "r" in vals:
                pkw["restitution"] = vals[key + "r"]
            pos, vel = list(s.position), list(s.velocity)
            for f, arr, c in (("l0x", pos, 0), ("l0y", pos, 1), ("v0x", vel, 0), ("v0y", vel, 1)):
                if key + f in vals:
                    arr[c] = vals[key + f]
            skw["position"] = (float(pos[0]), float(pos[1]))
            skw["velocity"] = (float(vel[0]), float(vel[1]))
            if key + "a0" in vals:
                skw["angle"] = vals[key + "a0"]
            if key + "w0" in vals:
                skw["omega"] = vals[key + "w0"]
            bodies.append(Body(b.id, replace(p, **pkw) if pkw else p, replace(s, **skw)))
        return replace(scene, bodies=tuple(bodies), physics=ph)

    def seed(self, world: World) -> None:
        """Set the world's tangent rows to d(physical)/du of each parameter."""
        slopes = self.slopes()
        col = {bid: k for k, bid in enumerate(world.ids)}
        for p, (n, d) in enumerate(zip(self.names, slopes)):
            head, field = _split(n)
            if head == "g":
                if field in GLOBAL_FIELDS:
                    world.dlam[p, GLOBAL_FIELDS.index(field)] = d
                elif field.startswith("R."):
                    shape = ShapeKind(field[2:])
                    for k, s in enumerate(world.shapes):
                        if s == shape:
                            world.dradius[p, k] = d
                else:
                    raise KeyError(n)
                continue
            k = col[int(head[1:])]
            if field == "v0x":
                world.dvel[p, k, 0] = d
            elif field == "v0y":
                world.dvel[p, k, 1] = d
            elif field == "l0x":
                world.dpos[p, k, 0] = d
            elif field == "l0y":
                world.dpos[p, k, 1] = d
            elif field == "a0":
                world.dang[p, k] = d
            elif field == "w0":
                world.domg[p, k] = d
            elif field == "m":
                world.dmass[p, k] = d
            elif field == "r":
                world.drest[p, k] = d
            else:
                raise KeyError(n)


def read_param(scene: SceneConfig, name: str) -> float:
    head, field = _split(name)
    ph = scene.physics
    if head == "g":
        if field == "lamw":
            return ph.lam_omega
        if field in GLOBAL_FIELDS:
            return getattr(ph, field)
        shape = ShapeKind(field[2:])
        radii = [b.params.radius for b in scene.bodies if b.params.shape == shape]
        return radii[0] if radii else 0.5
    b = scene.body(int(head[1:]))
    return {
        "v0x": b.state.velocity[0], "v0y": b.state.velocity[1],
        "l0x": b.state.position[0], "l0y": b.state.position[1],
        "a0": b.state.angle, "w0": b.state.omega,
        "m": b.params.mass, "r": b.params.restitution,
    }[field]


# ---------------------------------------------------------------------------
# loss


def trajectory_loss(simulated: Trajectory, observed: Trajectory, frame_range=None, mask=None) -> float:
    """Sum of squared position errors over included (frame, body) samples.

    ``mask`` has the observed trajectory's (F, N) shape; by default every
    present sample with finite coordinates is included.
    """
    (rows, obs_cols), loc, cols, m = _alignment(observed, simulated.frames, simulated.ids, frame_range, mask)
    diff = simulated.pos[loc][:, cols] - observed.pos[rows, obs_cols]
    diff = np.where(m[..., None], diff, 0.0)
    return float(np.sum(diff * diff))


def _alignment(observed: Trajectory, sim_frames, sim_ids, frame_range, mask):
    obs_frames = observed.frames
    lo, hi = (frame_range if frame_range is not None else (obs_frames[0], obs_frames[-1] + 1))
    pos_in_sim = {int(f): k for k, f in enumerate(sim_frames)}
    rows, loc = [], []
    for k, f in enumerate(obs_frames):
        f = int(f)
        if lo <= f < hi and f in pos_in_sim:
            rows.append(k)
            loc.append(pos_in_sim[f])
    rows, loc = np.array(rows, dtype=int), np.array(loc, dtype=int)
    sim_col = {bid: c for c, bid in enumerate(sim_ids)}
    obs_cols = [c for c, bid in enumerate(observed.ids) if bid in sim_col]
    cols = np.array([sim_col[observed.ids[c]] for c in obs_cols], dtype=int)
    m = observed.present.copy() if mask is None else np.asarray(mask, dtype=bool).copy()
    m &= np.all(np.isfinite(observed.pos), axis=-1)
    m = m[rows][:, obs_cols] if len(rows) else np.zeros((0, len(obs_cols)), dtype=bool)
    if not m.any():
        raise EmptyMask("no observed samples fall inside the loss window")
    # return observed rows restricted to matched columns through fancy indexing
    return (rows[:, None], obs_cols), loc, cols, m


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray | None
    rollout: Rollout
    scene: SceneConfig


def evaluate(scene: SceneConfig, theta: ParamVector, observed: Trajectory, frame_range=None,
             mask=None, grad: bool = True, contacts: bool = True, angle_weight: float = 0.0) -> LossResult:
    """Loss and d(loss)/du for the scene with ``theta`` written in.

    ``angle_weight`` adds ``w * (1 - cos 4(a_sim - a_obs)) / 8`` per cube sample
    with a known observed angle; the 4-fold period makes it blind to the
    square's symmetry.
    """
    sc = theta.apply(scene)
    hi = int(frame_range[1]) if frame_range is not None else int(observed.frames[-1]) + 1
    n_frames = max(1, hi - sc.start_frame)
    world = World.from_scene(sc, len(theta) if grad else 0)
    if grad:
        theta.seed(world)
    ro = rollout(world, n_frames, contacts)
    sim_frames = ro.frames + sc.start_frame
    (rows, obs_cols), loc, cols, m = _alignment(observed, sim_frames, sc.ids, frame_range, mask)
    diff = ro.pos[loc][:, cols] - observed.pos[rows, obs_cols]
    diff = np.where(m[..., None], diff, 0.0)
    loss = float(np.sum(diff * diff))
    g = None
    if grad:
        dp = ro.dpos[loc][:, :, cols]  # (F, P, N, 2)
        g = 2.0 * np.einsum("fnc,fpnc->p", diff, dp)
    if angle_weight > 0:
        rect = np.array([sc.bodies[c].params.shape.is_rect for c in cols], dtype=bool)
        obs_a = observed.angle[rows, obs_cols]
        am = m & rect[None, :] & np.isfinite(obs_a)
        if am.any():
            da = np.where(am, ro.ang[loc][:, cols] - np.where(am, obs_a, 0.0), 0.0)
            loss += angle_weight * float(np.sum((1.0 - np.cos(4.0 * da)) / 8.0))
            if grad:
                w = np.where(am, 0.5 * np.sin(4.0 * da), 0.0)
                g = g + angle_weight * np.einsum("fn,fpn->p", w, ro.dang[loc][:, :, cols])
    return LossResult(loss, g, ro, sc)


def grad_loss(scene: SceneConfig, theta: ParamVector, observed: Trajectory, frame_range=None,
              mask=None, **kw) -> tuple[float, np.ndarray]:
    r = evaluate(scene, theta, observed, frame_range, mask, grad=True, **kw)
    return r.loss, r.grad


def loss_only(scene, theta, observed, frame_range=None, mask=None, **kw) -> float:
    return evaluate(scene, theta, observed, frame_range, mask, grad=False, **kw).loss


def central_difference(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def finite_diff_grad(scene: SceneConfig, theta: ParamVector, observed: Trajectory, frame_range=None,
                     h: float = 1e-6, mask=None, **kw) -> np.ndarray:
    """Central differences of the loss in the unconstrained coordinates."""
    return central_difference(
        lambda u: loss_only(scene, theta.with_u(u), observed, frame_range, mask, **kw), theta.u, h)


def contact_sequence(scene: SceneConfig, theta: ParamVector, n_frames: int) -> list[tuple]:
    """Ordered (step, i, j, wall) of contact onsets with impulses, for topology checks."""
    world = World.from_scene(theta.apply(scene))
    ro = rollout(world, n_frames)
    return [(c.step, c.i, c.j, c.wall) for c in ro.contacts if c.applied]
