"""Time stepping: ground resistance, midpoint RK2, angular drag, contacts and rollouts.

Free flight runs inside a numba kernel that also pushes forward-mode tangents
(one row per seeded parameter). The kernel hands control back to Python on
any step whose broad phase reports a possible contact; that step's contacts
are detected and resolved with the :mod:`diffbev.collision` functions on
:class:`~diffbev.jet.Jet` values, which keeps a single implementation of the
contact laws for both plain and differentiated runs.

Per step the order is fixed: resolve contacts from current positions, then
integrate free motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from diffbev import collision
from diffbev.jet import Jet
from diffbev.scene import (
    Body, BodyParams, BodyState, GlobalPhysics, SceneConfig, ShapeKind, Trajectory, check_scene,
)

EPS_V = 1e-6  # m/s; below this a body is treated as resting
_BROAD_SLACK = 1.0 + 1e-9


# ---------------------------------------------------------------------------
# scalar laws (reference implementations of the kernel maths)


def resistance_acceleration(v, shape: ShapeKind, phys: GlobalPhysics) -> np.ndarray:
    """Deceleration from sliding/rolling friction plus quadratic air drag."""
    vx, vy = float(v[0]), float(v[1])
    s = math.sqrt(vx * vx + vy * vy)
    if s < EPS_V:
        return np.zeros(2)
    lam = phys.lam2 if shape.rolls else phys.lam1
    k = lam * phys.g / s + phys.lam3 * s
    return np.array([-vx * k, -vy * k])


def angular_drag(omega: float, phys: GlobalPhysics) -> float:
    return omega * math.exp(-phys.lam_omega * phys.dt)


def rk2_step(state: BodyState, params: BodyParams, phys: GlobalPhysics, accel=None) -> BodyState:
    """Advance one body by one time step with the midpoint method.

    ``accel`` overrides the resistance law (callable v -> a); the override
    path skips the static-stop rule.
    """
    if accel is not None:
        dt = phys.dt
        l = np.asarray(state.position, dtype=float)
        v = np.asarray(state.velocity, dtype=float)
        v_mid = v + np.asarray(accel(v), dtype=float) * (0.5 * dt)
        v_new = v + np.asarray(accel(v_mid), dtype=float) * dt
        l_new = l + v_mid * dt
        half, full = _decay(phys)
        return BodyState((float(l_new[0]), float(l_new[1])), (float(v_new[0]), float(v_new[1])),
                         state.angle + state.omega * half * dt, state.omega * full)
    pos = np.array([state.position], dtype=float)
    vel = np.array([state.velocity], dtype=float)
    ang = np.array([state.angle])
    omg = np.array([state.omega])
    lam = phys.lam2 if params.shape.rolls else phys.lam1
    c0 = np.array([lam * phys.g])
    half, full = _decay(phys)
    e1, e2 = np.zeros((0, 1, 2)), np.zeros((0, 1))
    _body_step(0, pos, vel, ang, omg, np.zeros((0, 1, 2)), e1.copy(), e2, e2.copy(),
               c0, np.zeros((0, 1)), phys.lam3, np.zeros(0), half, np.zeros(0), full, np.zeros(0),
               phys.dt, EPS_V)
    return BodyState((float(pos[0, 0]), float(pos[0, 1])), (float(vel[0, 0]), float(vel[0, 1])),
                     float(ang[0]), float(omg[0]))


def _decay(phys: GlobalPhysics) -> tuple[float, float]:
    return math.exp(-phys.lam_omega * phys.dt * 0.5), math.exp(-phys.lam_omega * phys.dt)


# ---------------------------------------------------------------------------
# numba kernel


@numba.njit(cache=True)
def _body_step(i, pos, vel, ang, omg, dpos, dvel, dang, domg,
               c0, dc0, c3, dc3, half, dhalf, full, dfull, dt, eps):
    P = dpos.shape[0]
    vx = vel[i, 0]
    vy = vel[i, 1]
    ci = c0[i]
    s = math.sqrt(vx * vx + vy * vy)
    if s >= eps and (ci + c3 * s * s) * dt >= s:
        # static stop: the body comes to rest inside this step
        c = ci + c3 * s * s
        f = s / (2.0 * c)
        for p in range(P):
            ds = (vx * dvel[p, i, 0] + vy * dvel[p, i, 1]) / s
            dc = dc0[p, i] + dc3[p] * s * s + 2.0 * c3 * s * ds
            df = ds / (2.0 * c) - s * dc / (2.0 * c * c)
            dpos[p, i, 0] += dvel[p, i, 0] * f + vx * df
            dpos[p, i, 1] += dvel[p, i, 1] * f + vy * df
            dvel[p, i, 0] = 0.0
            dvel[p, i, 1] = 0.0
        pos[i, 0] += vx * f
        pos[i, 1] += vy * f
        vel[i, 0] = 0.0
        vel[i, 1] = 0.0
    else:
        h = 0.5 * dt
        k1 = ci / s + c3 * s if s >= eps else 0.0
        mx = vx + (-vx * k1) * h
        my = vy + (-vy * k1) * h
        sm = math.sqrt(mx * mx + my * my)
        k2 = ci / sm + c3 * sm if sm >= eps else 0.0
        for p in range(P):
            dvx = dvel[p, i, 0]
            dvy = dvel[p, i, 1]
            dk1 = 0.0
            if s >= eps:
                ds = (vx * dvx + vy * dvy) / s
                dk1 = dc0[p, i] / s - ci * ds / (s * s) + dc3[p] * s + c3 * ds
            dmx = dvx - (dvx * k1 + vx * dk1) * h
            dmy = dvy - (dvy * k1 + vy * dk1) * h
            dk2 = 0.0
            if sm >= eps:
                dsm = (mx * dmx + my * dmy) / sm
                dk2 = dc0[p, i] / sm - ci * dsm / (sm * sm) + dc3[p] * sm + c3 * dsm
            dvel[p, i, 0] = dvx - (dmx * k2 + mx * dk2) * dt
            dvel[p, i, 1] = dvy - (dmy * k2 + my * dk2) * dt
            dpos[p, i, 0] += dmx * dt
            dpos[p, i, 1] += dmy * dt
        vel[i, 0] = vx + (-mx * k2) * dt
        vel[i, 1] = vy + (-my * k2) * dt
        pos[i, 0] += mx * dt
        pos[i, 1] += my * dt
    w = omg[i]
    for p in range(P):
        dang[p, i] += (domg[p, i] * half + w * dhalf[p]) * dt
        domg[p, i] = domg[p, i] * full + w * dfull[p]
    ang[i] += w * half * dt
    omg[i] = w * full


@numba.njit(cache=True)
def _maybe_contact(pos, bound, wall_a, wall_b):
    n = pos.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            r = (bound[i] + bound[j]) * 1.000000001
            if dx * dx + dy * dy < r * r:
                return True
        for w in range(wall_a.shape[0]):
            sx = wall_b[w, 0] - wall_a[w, 0]
            sy = wall_b[w, 1] - wall_a[w, 1]
            px = pos[i, 0] - wall_a[w, 0]
            py = pos[i, 1] - wall_a[w, 1]
            t = (px * sx + py * sy) / (sx * sx + sy * sy)
            t = min(1.0, max(0.0, t))
            qx = px - t * sx
            qy = py - t * sy
            r = bound[i] * 1.000000001
            if qx * qx + qy * qy < r * r:
                return True
    return False


@numba.njit(cache=True)
def _record(f, pos, vel, ang, omg, dpos, dang, rec_pos, rec_dpos, rec_ang, rec_dang, rec_vel, rec_omg):
    if f >= rec_pos.shape[0]:
        return
    rec_pos[f] = pos
    rec_vel[f] = vel
    rec_ang[f] = ang
    rec_omg[f] = omg
    rec_dpos[f] = dpos
    rec_dang[f] = dang


@numba.njit(cache=True)
def _advance(n, n_end, skip_at, check, substeps, dt, eps,
             pos, vel, ang, omg, dpos, dvel, dang, domg,
             c0, dc0, c3, dc3, half, dhalf, full, dfull,
             bound, wall_a, wall_b,
             rec_pos, rec_dpos, rec_ang, rec_dang, rec_vel, rec_omg):
    nb = pos.shape[0]
    while n < n_end:
        if n % substeps == 0:
            _record(n // substeps, pos, vel, ang, omg, dpos, dang,
                    rec_pos, rec_dpos, rec_ang, rec_dang, rec_vel, rec_omg)
        if check and n != skip_at and _maybe_contact(pos, bound, wall_a, wall_b):
            return n
        for i in range(nb):
            _body_step(i, pos, vel, ang, omg, dpos, dvel, dang, domg,
                       c0, dc0, c3, dc3, half, dhalf, full, dfull, dt, eps)
        n += 1
    if n % substeps == 0:
        _record(n // substeps, pos, vel, ang, omg, dpos, dang,
                rec_pos, rec_dpos, rec_ang, rec_dang, rec_vel, rec_omg)
    return n


# ---------------------------------------------------------------------------
# world state with tangents


@dataclass
class World:
    """Mutable simulation arrays for one rollout, plus tangents of shape (P, ...)."""

    ids: list
    shapes: list
    physics: GlobalPhysics
    walls: tuple
    pos: np.ndarray
    vel: np.ndarray
    ang: np.ndarray
    omg: np.ndarray
    mass: np.ndarray
    rest: np.ndarray
    radius: np.ndarray
    lam: np.ndarray  # [lam1, lam2, lam3, lam_omega]
    dpos: np.ndarray
    dvel: np.ndarray
    dang: np.ndarray
    domg: np.ndarray
    dmass: np.ndarray
    drest: np.ndarray
    dradius: np.ndarray
    dlam: np.ndarray

    @classmethod
    def from_scene(cls, scene: SceneConfig, n_tan: int = 0) -> "World":
        n = len(scene.bodies)
        ph = scene.physics
        z2, z1 = np.zeros((n_tan, n, 2)), np.zeros((n_tan, n))
        return cls(
            ids=scene.ids,
            shapes=[b.params.shape for b in scene.bodies],
            physics=ph,
            walls=scene.walls,
            pos=np.array([b.state.position for b in scene.bodies], dtype=float).reshape(n, 2),
            vel=np.array([b.state.velocity for b in scene.bodies], dtype=float).reshape(n, 2),
            ang=np.array([b.state.angle for b in scene.bodies], dtype=float),
            omg=np.array([b.state.omega for b in scene.bodies], dtype=float),
            mass=np.array([b.params.mass for b in scene.bodies], dtype=float),
            rest=np.array([b.params.restitution for b in scene.bodies], dtype=float),
            radius=np.array([b.params.radius for b in scene.bodies], dtype=float),
            lam=np.array([ph.lam1, ph.lam2, ph.lam3, ph.lam_omega], dtype=float),
            dpos=z2, dvel=z2.copy(), dang=z1, domg=z1.copy(),
            dmass=z1.copy(), drest=z1.copy(), dradius=z1.copy(), dlam=np.zeros((n_tan, 4)),
        )

    @property
    def n_tan(self) -> int:
        return self.dpos.shape[0]

    @property
    def n_bodies(self) -> int:
        return self.pos.shape[0]

    def is_rect(self, i: int) -> bool:
        return self.shapes[i].is_rect

    def jet(self, name: str, i: int) -> Jet:
        return Jet(getattr(self, name)[i].copy(), getattr(self, "d" + name)[:, i].copy())

    def put(self, name: str, i: int, x) -> None:
        if isinstance(x, Jet):
            getattr(self, name)[i] = x.val
            getattr(self, "d" + name)[:, i] = x.tan
        else:
            getattr(self, name)[i] = x
            getattr(self, "d" + name)[:, i] = 0.0


@dataclass
class ContactRecord:
    step: int
    i: int
    j: int  # -1 for walls
    wall: int
    approach_speed: float
    applied: bool
    onset: bool


@dataclass
class Rollout:
    frames: np.ndarray
    pos: np.ndarray  # (F, N, 2)
    dpos: np.ndarray  # (F, P, N, 2)
    ang: np.ndarray
    dang: np.ndarray
    vel: np.ndarray
    omg: np.ndarray
    contacts: list = field(default_factory=list)


def _body_kin(world: World, i: int) -> collision.Kinematics:
    return collision.Kinematics(
        mass=Jet(float(world.mass[i]), world.dmass[:, i].copy()),
        restitution=Jet(float(world.rest[i]), world.drest[:, i].copy()),
        velocity=world.jet("vel", i),
        center=world.jet("pos", i),
        radius=Jet(float(world.radius[i]), world.dradius[:, i].copy()),
        is_rect=world.is_rect(i),
    )


def _footprint(world: World, i: int) -> collision.Footprint:
    return collision.Footprint(world.jet("pos", i), Jet(float(world.radius[i]), world.dradius[:, i].copy()),
                               world.is_rect(i), Jet(float(world.ang[i]), world.dang[:, i].copy()))


def _bounds(world: World) -> np.ndarray:
    rect = np.array([s.is_rect for s in world.shapes], dtype=bool)
    return np.where(rect, world.radius * math.sqrt(2.0), world.radius)


def resolve_contacts(world: World, step: int, touching: dict | None = None) -> list[ContactRecord]:
    """Detect and resolve every contact at the current positions, in place.

    Body pairs go first in ascending (i, j) order, then walls per body.
    ``touching`` maps pair keys to the last step they were in contact, to
    tell contact onsets from continuing contact.
    """
    touching = {} if touching is None else touching
    records = []
    n = world.n_bodies
    bound = _bounds(world)
    found = []
    for i in range(n):
        for j in range(i + 1, n):
            d = world.pos[i] - world.pos[j]
            if d @ d >= (bound[i] + bound[j]) ** 2 * _BROAD_SLACK:
                continue
            c = collision.detect_pair(_footprint(world, i), _footprint(world, j))
            if c is not None:
                c.i, c.j = i, j
                found.append(c)
    for c in found:
        i, j = c.i, c.j
        bi, bj = _body_kin(world, i), _body_kin(world, j)
        approach = -float(collision.value(collision.dot(c.normal, bi.velocity - bj.velocity)))
        dv_i, dv_j = collision.resolve_impulse(c, bi, bj)
        applied = approach > 0
        if applied:
            world.put("vel", i, bi.velocity + dv_i)
            world.put("vel", j, bj.velocity + dv_j)
            if bi.is_rect or bj.is_rect:
                dw_i, dw_j = collision.resolve_angular_impulse(c, bi, bj, bi.mass * dv_i, bj.mass * dv_j)
                if bi.is_rect:
                    world.put("omg", i, world.jet("omg", i) + dw_i)
                if bj.is_rect:
                    world.put("omg", j, world.jet("omg", j) + dw_j)
        key = (i, j)
        onset = touching.get(key) != step - 1
        touching[key] = step
        records.append(ContactRecord(step, i, j, -1, approach, applied, onset))
    for i in range(n):
        for w, wall in enumerate(world.walls):
            if _seg_dist2(world.pos[i], wall) >= bound[i] ** 2 * _BROAD_SLACK:
                continue
            c = collision.detect_wall(_footprint(world, i), wall)
            if c is None:
                continue
            c.i, c.wall = i, w
            bi = _body_kin(world, i)
            approach = -float(collision.value(collision.dot(c.normal, bi.velocity)))
            dv = collision.resolve_wall(c, bi, wall.restitution)
            applied = approach > 0
            if applied:
                world.put("vel", i, bi.velocity + dv)
                if bi.is_rect:
                    dw, _ = collision.resolve_angular_impulse(c, bi, None, bi.mass * dv)
                    world.put("omg", i, world.jet("omg", i) + dw)
            key = (i, "w", w)
            onset = touching.get(key) != step - 1
            touching[key] = step
            records.append(ContactRecord(step, i, -1, w, approach, applied, onset))
    return records


def _seg_dist2(p, wall) -> float:
    a = np.asarray(wall.a, dtype=float)
    s = np.asarray(wall.b, dtype=float) - a
    t = min(1.0, max(0.0, float((p - a) @ s / (s @ s))))
    q = p - a - t * s
    return float(q @ q)


def _kernel_params(world: World):
    ph = world.physics
    g = ph.g
    rolls = np.array([s.rolls for s in world.shapes], dtype=bool)
    lam_lin = np.where(rolls, world.lam[1], world.lam[0])
    dlam_lin = np.where(rolls[None, :], world.dlam[:, 1:2], world.dlam[:, 0:1])
    c0 = lam_lin * g
    dc0 = dlam_lin * g
    c3 = float(world.lam[2])
    dc3 = world.dlam[:, 2].copy()
    lw = float(world.lam[3])
    half = math.exp(-lw * ph.dt * 0.5)
    full = math.exp(-lw * ph.dt)
    dhalf = world.dlam[:, 3] * (-0.5 * ph.dt * half)
    dfull = world.dlam[:, 3] * (-ph.dt * full)
    return c0, np.ascontiguousarray(dc0), c3, dc3, half, dhalf, full, dfull


def rollout(world: World, n_frames: int, contacts: bool = True) -> Rollout:
    """Run ``(n_frames - 1) * substeps`` steps and sample the state at every frame boundary."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    ph = world.physics
    s = ph.substeps
    total = (n_frames - 1) * s
    nb, P = world.n_bodies, world.n_tan
    rec_pos = np.zeros((n_frames, nb, 2))
    rec_dpos = np.zeros((n_frames, P, nb, 2))
    rec_ang = np.zeros((n_frames, nb))
    rec_dang = np.zeros((n_frames, P, nb))
    rec_vel = np.zeros((n_frames, nb, 2))
    rec_omg = np.zeros((n_frames, nb))
    c0, dc0, c3, dc3, half, dhalf, full, dfull = _kernel_params(world)
    bound = _bounds(world)
    if world.walls:
        wall_a = np.array([w.a for w in world.walls], dtype=float)
        wall_b = np.array([w.b for w in world.walls], dtype=float)
    else:
        wall_a = wall_b = np.zeros((0, 2))
    check = contacts and (nb > 1 or len(world.walls) > 0)
    records: list[ContactRecord] = []
    touching: dict = {}
    n, skip = 0, -1
    while True:
        n = _advance(n, total, skip, check, s, ph.dt, EPS_V,
                     world.pos, world.vel, world.ang, world.omg,
                     world.dpos, world.dvel, world.dang, world.domg,
                     c0, dc0, c3, dc3, half, dhalf, full, dfull,
                     bound, wall_a, wall_b,
                     rec_pos, rec_dpos, rec_ang, rec_dang, rec_vel, rec_omg)
        if n >= total:
            break
        records.extend(resolve_contacts(world, n, touching))
        skip = n
    return Rollout(np.arange(n_frames), rec_pos, rec_dpos, rec_ang, rec_dang, rec_vel, rec_omg, records)


# ---------------------------------------------------------------------------
# scene-level API


@dataclass
class StepResult:
    scene: SceneConfig
    contacts: list


def _scene_with_world_state(scene: SceneConfig, world: World) -> SceneConfig:
    bodies = []
    for k, b in enumerate(scene.bodies):
        st = BodyState((float(world.pos[k, 0]), float(world.pos[k, 1])),
                       (float(world.vel[k, 0]), float(world.vel[k, 1])),
                       float(world.ang[k]), float(world.omg[k]))
        bodies.append(Body(b.id, b.params, st))
    return replace(scene, bodies=tuple(bodies))


def step_scene(scene: SceneConfig) -> StepResult:
    """Advance every body of ``scene`` by one time step."""
    world = World.from_scene(scene)
    records = resolve_contacts(world, 0)
    _free_steps(world, 1)
    return StepResult(_scene_with_world_state(scene, world), records)


def _free_steps(world: World, n_steps: int) -> None:
    c0, dc0, c3, dc3, half, dhalf, full, dfull = _kernel_params(world)
    for _ in range(n_steps):
        for i in range(world.n_bodies):
            _body_step(i, world.pos, world.vel, world.ang, world.omg,
                       world.dpos, world.dvel, world.dang, world.domg,
                       c0, dc0, c3, dc3, half, dhalf, full, dfull, world.physics.dt, EPS_V)


def to_trajectory(scene: SceneConfig, ro: Rollout) -> Trajectory:
    vis = scene.visibility
    present = vis.contains(ro.pos[..., 0], ro.pos[..., 1])
    return Trajectory(tuple(scene.ids), ro.frames + scene.start_frame, ro.pos.copy(), ro.ang.copy(), present)


def simulate_full(scene: SceneConfig, n_frames: int, validate: bool = True):
    """Rollout plus trajectory and event log; the rollout keeps velocities and contacts."""
    from diffbev.events import extract_events

    if validate:
        check_scene(scene)
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    ro = rollout(World.from_scene(scene), n_frames)
    traj = to_trajectory(scene, ro)
    events = extract_events(traj, scene, ro.contacts)
    return traj, events, ro


def simulate(scene: SceneConfig, n_frames: int):
    """Simulate ``n_frames`` frames; returns ``(Trajectory, EventLog)``."""
    traj, events, _ = simulate_full(scene, n_frames)
    return traj, events


def state_at(scene: SceneConfig, ro: Rollout, k: int) -> SceneConfig:
    """Scene whose initial state is the rollout's state at local frame ``k``."""
    bodies = []
    for c, b in enumerate(scene.bodies):
        st = BodyState((float(ro.pos[k, c, 0]), float(ro.pos[k, c, 1])),
                       (float(ro.vel[k, c, 0]), float(ro.vel[k, c, 1])),
                       float(ro.ang[k, c]), float(ro.omg[k, c]))
        bodies.append(Body(b.id, b.params, st))
    return replace(scene, bodies=tuple(bodies), start_frame=scene.start_frame + k)
