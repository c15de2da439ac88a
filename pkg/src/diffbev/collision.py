"""Contact detection between circle/square footprints and walls, and impulse resolution.

Normals follow one convention throughout: ``Contact.normal`` is the unit
direction of the force acting on the *first* body (``d1``); the second body
receives ``d2 = -d1``. Every function accepts plain numpy values or
:class:`~diffbev.jet.Jet` values, so the simulator reuses them to carry
derivatives through contact steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from diffbev import jet
from diffbev.jet import cross, dot, norm, rotate, rotate_back, value, vec

DEGENERATE_DIST = 1e-9


class DegenerateCenters(ValueError):
    pass


@dataclass
class Contact:
    normal: Any  # d1, unit 2-vector acting on the first body
    point: Any
    penetration: Any
    i: int = -1
    j: int = -1  # other body index, or -1 for a wall
    wall: int = -1


@dataclass
class Footprint:
    center: Any
    radius: Any  # radius for circles, half side length for squares
    is_rect: bool = False
    angle: Any = 0.0


@dataclass
class Kinematics:
    """What the impulse laws need to know about one body at the contact instant."""

    mass: Any
    restitution: Any
    velocity: Any
    center: Any = None
    radius: Any = 0.5
    is_rect: bool = False


def _sign(x) -> float:
    return -1.0 if value(x) < 0 else 1.0


def _abs(x):
    return x * _sign(x)


# ---------------------------------------------------------------------------
# detection


def detect_circle_circle(c1, r1, c2, r2) -> Contact | None:
    delta = c1 - c2
    dist = norm(delta)
    d = value(dist)
    if d < DEGENERATE_DIST:
        raise DegenerateCenters("coincident circle centres")
    if d >= value(r1) + value(r2):
        return None
    d1 = delta / dist
    point = c2 + delta * (r2 / (r1 + r2))
    return Contact(d1, point, r1 + r2 - dist)


def detect_circle_rect(c, r, rc, half, alpha) -> Contact | None:
    """Circle against a square of half side ``half`` rotated by ``alpha``.

    The circle centre is moved into the square's frame; which of the side,
    corner or outside regions it falls in decides the contact. Inside the
    square the shallower side wins.
    """
    co, si = jet.cos(alpha), jet.sin(alpha)
    rel = rotate_back(c - rc, co, si)
    lx, ly = rel[0], rel[1]
    sx, sy = _sign(lx), _sign(ly)
    ax, ay = lx * sx, ly * sy
    h = value(half)
    if value(ax) <= h and value(ay) <= h:
        if value(ax) >= value(ay):
            n_loc, pen, p_loc = vec(sx, 0.0), r + half - ax, vec(half * sx, ly)
        else:
            n_loc, pen, p_loc = vec(0.0, sy), r + half - ay, vec(lx, half * sy)
    elif value(ay) <= h:
        if value(ax) >= h + value(r):
            return None
        n_loc, pen, p_loc = vec(sx, 0.0), r + half - ax, vec(half * sx, ly)
    elif value(ax) <= h:
        if value(ay) >= h + value(r):
            return None
        n_loc, pen, p_loc = vec(0.0, sy), r + half - ay, vec(lx, half * sy)
    else:
        corner = vec(half * sx, half * sy)
        d = rel - corner
        dist = norm(d)
        if value(dist) >= value(r):
            return None
        n_loc, pen, p_loc = d / dist, r - dist, corner
    return Contact(rotate(n_loc, co, si), rc + rotate(p_loc, co, si), pen)


def rect_corners(center, half, alpha) -> list:
    co, si = jet.cos(alpha), jet.sin(alpha)
    return [center + rotate(vec(sx * half, sy * half), co, si)
            for sx, sy in ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0))]


def detect_rect_rect(ca, ha, alpha_a, cb, hb, alpha_b) -> Contact | None:
    """Separating-axis test over the face normals of both squares.

    The contact normal is the least-penetration axis pointing from B to A; the
    contact point is the centroid of the overlap polygon.
    """
    ua = (jet.cos(alpha_a), jet.sin(alpha_a))
    ub = (jet.cos(alpha_b), jet.sin(alpha_b))
    axes = [vec(ua[0], ua[1]), vec(-ua[1], ua[0]), vec(ub[0], ub[1]), vec(-ub[1], ub[0])]
    frames = [(axes[0], axes[1], ha), (axes[2], axes[3], hb)]
    delta = ca - cb
    best = None
    for n in axes:
        reach = 0.0
        for u, w, h in frames:
            reach = reach + h * (_abs(dot(u, n)) + _abs(dot(w, n)))
        dn = dot(delta, n)
        overlap = reach - _abs(dn)
        if value(overlap) <= 0:
            return None
        if best is None or value(overlap) < value(best[1]):
            best = (n * _sign(dn), overlap)
    normal, pen = best
    poly = clip_polygon(rect_corners(ca, ha, alpha_a), rect_corners(cb, hb, alpha_b))
    point = polygon_centroid(poly) if poly else (ca + cb) * 0.5
    return Contact(normal, point, pen)


def clip_polygon(subject: list, clip: list) -> list:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clip``."""
    out = subject
    for k in range(len(clip)):
        if not out:
            break
        p1, p2 = clip[k], clip[(k + 1) % len(clip)]
        edge = p2 - p1
        src, out = out, []
        for m in range(len(src)):
            a, b = src[m], src[(m + 1) % len(src)]
            da, db = cross(edge, a - p1), cross(edge, b - p1)
            a_in, b_in = value(da) >= 0, value(db) >= 0
            if a_in:
                out.append(a)
            if a_in != b_in:
                out.append(a + (b - a) * (da / (da - db)))
    return out


def polygon_centroid(poly: list):
    area2 = 0.0
    acc = None
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        w = cross(a, b)
        area2 = area2 + w
        term = (a + b) * w
        acc = term if acc is None else acc + term
    if abs(value(area2)) < 1e-14:
        total = poly[0]
        for p in poly[1:]:
            total = total + p
        return total * (1.0 / len(poly))
    return acc / (area2 * 3.0)


def detect_pair(a: Footprint, b: Footprint) -> Contact | None:
    """Dispatch on footprint kinds; the returned normal acts on ``a``."""
    if not a.is_rect and not b.is_rect:
        return detect_circle_circle(a.center, a.radius, b.center, b.radius)
    if not a.is_rect:
        return detect_circle_rect(a.center, a.radius, b.center, b.radius, b.angle)
    if not b.is_rect:
        c = detect_circle_rect(b.center, b.radius, a.center, a.radius, a.angle)
        if c is not None:
            c.normal = -c.normal
        return c
    return detect_rect_rect(a.center, a.radius, a.angle, b.center, b.radius, b.angle)


def detect_circle_wall(c, r, wa, wb) -> Contact | None:
    wa = np.asarray(wa, dtype=float)
    seg = np.asarray(wb, dtype=float) - wa
    t = float(np.clip(dot(value(c) - wa, seg) / dot(seg, seg), 0.0, 1.0))
    q = wa + seg * t
    d = c - q
    dist = norm(d)
    if value(dist) >= value(r):
        return None
    if value(dist) < DEGENERATE_DIST:
        raise DegenerateCenters("circle centre on wall")
    return Contact(d / dist, q, r - dist)


def detect_rect_wall(c, half, alpha, wa, wb) -> Contact | None:
    wa = np.asarray(wa, dtype=float)
    seg = np.asarray(wb, dtype=float) - wa
    length = math.hypot(seg[0], seg[1])
    tangent = seg / length
    n = np.array([-tangent[1], tangent[0]])
    if dot(value(c) - wa, n) < 0:
        n = -n
    best = None
    for corner in rect_corners(c, half, alpha):
        rel = corner - wa
        s = dot(value(rel), tangent)
        if s < 0 or s > length:
            continue
        depth = -dot(rel, n)
        if value(depth) > 0 and (best is None or value(depth) > value(best[1])):
            best = (corner, depth)
    if best is None:
        return None
    return Contact(n, best[0], best[1])


def detect_wall(fp: Footprint, wall) -> Contact | None:
    if fp.is_rect:
        return detect_rect_wall(fp.center, fp.radius, fp.angle, wall.a, wall.b)
    return detect_circle_wall(fp.center, fp.radius, wall.a, wall.b)


# ---------------------------------------------------------------------------
# resolution


def resolve_impulse(contact: Contact, bi: Kinematics, bj: Kinematics):
    """Velocity changes from the normal impulse; zero unless the bodies approach."""
    d1 = contact.normal
    d2 = -d1
    rel = bi.velocity - bj.velocity
    if value(dot(d1, rel)) >= 0:
        zero = np.zeros(2)
        return zero, zero.copy()
    e = 1.0 + bi.restitution * bj.restitution
    total = bi.mass + bj.mass
    dv_i = -(e * (bj.mass / total) * dot(d1, bi.velocity - bj.velocity)) * d1
    dv_j = -(e * (bi.mass / total) * dot(d2, bj.velocity - bi.velocity)) * d2
    return dv_i, dv_j


def moment_of_inertia(mass, half):
    """Square of side 2*half about its centre."""
    return mass * (2.0 * half) * (2.0 * half) / 6.0


def resolve_angular_impulse(contact: Contact, bi: Kinematics, bj: Kinematics | None, j_i, j_j=None):
    """Spin changes from linear impulses ``j_i``/``j_j`` applied at the contact point.

    Circles get none: their normal always passes through the centre.
    """
    def spin(b, impulse):
        if b is None or not b.is_rect or impulse is None:
            return 0.0
        arm = contact.point - b.center
        return cross(arm, impulse) / moment_of_inertia(b.mass, b.radius)

    return spin(bi, j_i), spin(bj, j_j)


def resolve_wall(contact: Contact, body: Kinematics, wall_restitution: float):
    """Reflect the normal velocity component scaled by the restitution product."""
    n = contact.normal
    vn = dot(n, body.velocity)
    if value(vn) >= 0:
        return np.zeros(2)
    return -((1.0 + body.restitution * wall_restitution) * vn) * n


def kinetic_energy(mass, velocity) -> float:
    return 0.5 * mass * float(dot(velocity, velocity))
