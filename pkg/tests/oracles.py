"""Independent reference computations used by the tests.

Nothing here calls the code under test for the quantity being checked:
query answers are enumerated straight from a ground-truth event log, the
collision oracles are textbook formulas, and the integrator reference is a
fine-step explicit Euler loop.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# mechanics


def elastic_1d(m1, m2, v1, v2):
    """Classical perfectly elastic 1D collision."""
    u1 = ((m1 - m2) * v1 + 2 * m2 * v2) / (m1 + m2)
    u2 = ((m2 - m1) * v2 + 2 * m1 * v1) / (m1 + m2)
    return u1, u2


def euler_slide(pos, vel, lam_g, lam3, dt, n_steps):
    """Fine-step explicit Euler for a body under Coulomb-like plus quadratic drag."""
    p = np.array(pos, dtype=float)
    v = np.array(vel, dtype=float)
    for _ in range(n_steps):
        s = math.hypot(v[0], v[1])
        if s < 1e-9:
            break
        a = -v / s * (lam_g + lam3 * s * s)
        if np.linalg.norm(a) * dt >= s:
            v[:] = 0.0
            break
        p += v * dt
        v += a * dt
    return p, v


# ---------------------------------------------------------------------------
# brute-force query answers over an event log


def _sort(evs):
    return sorted(evs, key=lambda e: (e["frame"], {"start": 0, "enter": 1, "collision": 2, "exit": 3, "end": 4}[e["kind"]],
                                      tuple(e["participants"])))


def _ev(e, source=None):
    d = {"kind": e.kind.value, "frame": int(e.frame), "participants": list(e.participants),
         "source": source or e.source.value}
    return d


def brute_ancestors(events: list[dict], target: dict) -> list[dict]:
    """Transitive closure by repeated relaxation over all event pairs."""
    pool = list(events)
    if target not in pool:
        pool.append(target)
    n = len(pool)
    reach = [[False] * n for _ in range(n)]  # reach[a][b]: a is an ancestor of b
    for a, b in itertools.product(range(n), range(n)):
        if pool[a]["frame"] < pool[b]["frame"] and set(pool[a]["participants"]) & set(pool[b]["participants"]):
            reach[a][b] = True
    for k, a, b in itertools.product(range(n), range(n), range(n)):
        if reach[a][k] and reach[k][b]:
            reach[a][b] = True
    t = pool.index(target)
    return [e for k, e in enumerate(pool) if reach[k][t] and e in events]


def central_speed(pos: np.ndarray, k: int, frame_dt: float) -> float:
    lo, hi = max(k - 1, 0), min(k + 1, len(pos) - 1)
    return float(math.dist(pos[hi], pos[lo]) / ((hi - lo) * frame_dt))


class QuerySuite:
    """Programs with brute-force answers for one ground-truth scene.

    ``resim(scene, n)`` must return the event log of a fresh simulation; it
    stands in for the generator re-running the truth.
    """

    def __init__(self, gt, resim, rng: np.random.Generator):
        self.gt = gt
        self.resim = resim
        self.rng = rng
        self.scene = gt.scene
        self.events = [_ev(e) for e in gt.events]
        self.n = gt.trajectory.n_frames
        self.ids = sorted(self.scene.ids)
        self.attr = {b.id: {k: str(v).lower() for k, v in b.params.attributes.items()} for b in self.scene.bodies}
        self.items: list[tuple[list, dict]] = []

    # helpers
    def _with(self, key, value):
        return [i for i in self.ids if self.attr[i][key] == value]

    def _colls(self, evs, ids):
        return [e for e in evs if e["kind"] == "collision" and set(e["participants"]) & set(ids)]

    def add(self, program, answer):
        self.items.append((program, answer))

    @staticmethod
    def err(name):
        return {"error": name}

    def build(self) -> list[tuple[list, dict]]:
        ev, ids = self.events, self.ids
        colls = [e for e in ev if e["kind"] == "collision"]
        self.add(["Objects", "Count"], {"type": "int", "value": len(ids)})
        self.add(["Events", "Count"], {"type": "int", "value": len(ev)})
        for i in ids:
            color, mat, shape = self.attr[i]["color"], self.attr[i]["material"], self.attr[i]["shape"]
            same = self._with("color", color)
            sel = [{"op": "Objects"}, {"op": "Filter_static_concept", "args": [color]}]
            self.add(sel + ["Count"], {"type": "int", "value": len(same)})
            self.add(["Objects", ["Filter_static_concept", mat], ["Filter_static_concept", shape], "Exist"],
                     {"type": "bool", "value": bool(set(self._with("material", mat)) & set(self._with("shape", shape)))})
            if len(same) != 1:
                self.add(sel + ["Unique"], self.err("UniqueViolation"))
                continue
            uniq = sel + ["Unique"]
            self.add(uniq + ["Query_material"], {"type": "concept", "value": mat})
            self.add(uniq + ["Query_shape"], {"type": "concept", "value": shape})
            self.add(uniq + ["Query_color"], {"type": "concept", "value": color})
            mine = self._colls(ev, [i])
            self.add(uniq + ["Events", "Filter_collision", "Count"], {"type": "int", "value": len(mine)})
            self.add(uniq + ["Events", "Filter_collision", "Exist", "Negate"], {"type": "bool", "value": not mine})
            ins = [e for e in ev if e["kind"] == "enter" and i in e["participants"]]
            outs = [e for e in ev if e["kind"] == "exit" and i in e["participants"]]
            self.add(uniq + ["Events", "Filter_in", "Count"], {"type": "int", "value": len(ins)})
            self.add(uniq + ["Events", "Filter_out"], {"type": "events", "value": _sort(outs)})
            if mine:
                first = min(mine, key=lambda e: (e["frame"], tuple(e["participants"])))
                a, b = first["participants"]
                partner = b if a == i else a
                self.add(uniq + ["Events", "Filter_collision", ["Filter_order", "First"],
                                 {"op": "Get_col_partner", "args": ["PIPE", {"ref": 2}]}, "Query_color"],
                         {"type": "concept", "value": self.attr[partner]["color"]})
            # physics branches
            n = self.n
            cf = [_ev(e) for e in self.resim(self.scene.without(i), n)]
            self.add(uniq + ["Counterfactual_simulation", "Objects", "Filter_collision", "Count"],
                     {"type": "int", "value": len([e for e in cf if e["kind"] == "collision"])})
            for op, f in (("Apply_heavier", 5.0), ("Apply_lighter", 0.2)):
                b = self.scene.body(i)
                from dataclasses import replace
                sc = self.scene.replace_body(i, params=replace(b.params, mass=b.params.mass * f))
                cf = [_ev(e) for e in self.resim(sc, n)]
                self.add(uniq + [op, "Counterfactual_simulation", "Objects", "Filter_collision", "Count"],
                         {"type": "int", "value": len([e for e in cf if e["kind"] == "collision"])})
            fut = self.future()
            self.add(uniq + ["Predictive_simulation", "Count"],
                     {"type": "int", "value": len([e for e in fut if i in e["participants"]])})
        # ordering and temporal filters
        for order, pick in (("First", 0), ("Second", 1), ("Last", -1)):
            prog = ["Events", "Objects", "Filter_collision", ["Filter_order", order]]
            srt = sorted(colls, key=lambda e: (e["frame"], tuple(e["participants"])))
            if order == "Last" and srt:
                last = srt[-1]["frame"]
                target = [e for e in srt if e["frame"] == last][0]
            elif pick < len(srt) and pick >= 0:
                target = srt[pick]
            else:
                self.add(prog, self.err("UniqueViolation"))
                continue
            self.add(prog + ["Get_frame"], {"type": "frame", "value": target["frame"]})
            self.add(prog + ["Events", "Filter_after", "Count"],
                     {"type": "int", "value": len([e for e in ev if e["frame"] > target["frame"]])})
            self.add(prog + ["Events", "Filter_before"],
                     {"type": "events", "value": _sort([e for e in ev if e["frame"] < target["frame"]])})
            self.add(prog + ["Events", "Belong_to"], {"type": "bool", "value": True})
            self.add(prog + ["Events", "Filter_ancestor"],
                     {"type": "events", "value": _sort(brute_ancestors(ev, target))})
            for j in ids:
                cj = self.attr[j]["color"]
                js = self._with("color", cj)
                self.add(prog + ["Events", "Objects", ["Filter_static_concept", cj], "Filter_collision", "Belong_to"],
                         {"type": "bool", "value": bool(set(target["participants"]) & set(js))})
        if len(colls) == 1:
            self.add(["Events", "Objects", "Filter_collision", "Unique", "Get_frame"],
                     {"type": "frame", "value": colls[0]["frame"]})
        else:
            self.add(["Events", "Objects", "Filter_collision", "Unique"], self.err("UniqueViolation"))
        first_frame = int(self.gt.trajectory.frames[0])
        last_frame = int(self.gt.trajectory.frames[-1])
        self.add(["Events", "Start", "Filter_after", "Count"],
                 {"type": "int", "value": len([e for e in ev if e["frame"] > first_frame])})
        self.add(["Events", "End", "Filter_before", "Count"],
                 {"type": "int", "value": len([e for e in ev if e["frame"] < last_frame])})
        # dynamic concepts
        dt = self.scene.physics.frame_dt
        for f in sorted(self.rng.choice(self.n, size=4, replace=False)):
            mov = []
            for c, bid in enumerate(self.gt.trajectory.ids):
                if not self.gt.trajectory.present[f, c]:
                    continue
                if central_speed(self.gt.trajectory.pos[:, c], int(f), dt) > 0.02:
                    mov.append(bid)
            vis = [bid for c, bid in enumerate(self.gt.trajectory.ids) if self.gt.trajectory.present[f, c]]
            self.add(["Objects", ["Filter_dynamic_concept", "moving", int(f)], "Count"],
                     {"type": "int", "value": len(mov)})
            self.add(["Objects", ["Filter_dynamic_concept", "stationary", int(f)], "Count"],
                     {"type": "int", "value": len(vis) - len(mov)})
        fut = self.future()
        self.add(["UnseenEvents", "Objects", "Filter_collision", "Count"],
                 {"type": "int", "value": len([e for e in fut if e["kind"] == "collision"])})
        self.add(["Objects", "Filter_static_concept", "Count"], self.err("TypeMismatch"))
        self.add(["Objects", ["Filter_static_concept", "chartreuse"], "Count"], self.err("UnknownConcept"))
        return self.items

    def future(self) -> list[dict]:
        n = self.n
        evs = [_ev(e, "predicted") for e in self.resim(self.scene, 2 * n + 1)]
        return [e for e in evs if n <= e["frame"] < 2 * n]
