"""Symbolic program executor over a fitted scene and its event log.

Programs are lists of ``{"op": name, "args": [...]}``. Each step pushes its
result on a value stack. Arguments a step does not spell out are taken
from the stack: for every missing slot the most recent value of a fitting
type is popped. ``"PIPE"`` names the top of the stack explicitly and
``{"ref": k}`` the result of step ``k``. Literal strings are concepts or
orders, literal integers are frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from diffbev.dynamics import simulate_full
from diffbev.events import (
    Event, EventKind, EventLog, Source, build_causal_graph, end_event, extract_events, start_event,
)
from diffbev.scene import SceneConfig, Trajectory
from diffbev.synth import COLORS, MATERIALS

EPS_MOVE = 0.02  # m/s
HEAVIER = 5.0
LIGHTER = 0.2
ORDERS = {"first": 0, "second": 1, "third": 2, "fourth": 3, "fifth": 4, "last": -1}
DYNAMIC_CONCEPTS = ("moving", "stationary")
BASE_VOCABULARY = frozenset(COLORS) | frozenset(MATERIALS) | {"sphere", "cube", "cylinder"}


class ExecutionError(ValueError):
    pass


class UniqueViolation(ExecutionError):
    pass


class TypeMismatch(ExecutionError):
    pass


class UnknownConcept(ExecutionError):
    pass


class UnknownBody(KeyError):
    pass


class UnknownOperation(ExecutionError):
    pass


# ---------------------------------------------------------------------------
# values


@dataclass(frozen=True)
class Value:
    type: str
    value: Any
    mass_scale: float = 1.0  # pending Apply_heavier / Apply_lighter on an object

    def to_json(self):
        v = self.value
        if self.type == "objects":
            v = list(v)
        elif self.type == "event":
            v = v.to_dict()
        elif self.type == "events":
            v = [e.to_dict() for e in v]
        return {"type": self.type, "value": v}


def dumps_answer(value: Value) -> str:
    return json.dumps(value.to_json(), sort_keys=True)


# ---------------------------------------------------------------------------
# physics branches


def _body_check(scene: SceneConfig, body_id: int) -> None:
    if body_id not in scene.ids:
        raise UnknownBody(f"no body {body_id} in scene")


def _scale_mass(scene: SceneConfig, body_id: int, factor: float) -> SceneConfig:
    _body_check(scene, body_id)
    b = scene.body(body_id)
    return scene.replace_body(body_id, params=replace(b.params, mass=b.params.mass * factor))


def apply_heavier(scene: SceneConfig, body_id: int) -> SceneConfig:
    return _scale_mass(scene, body_id, HEAVIER)


def apply_lighter(scene: SceneConfig, body_id: int) -> SceneConfig:
    return _scale_mass(scene, body_id, LIGHTER)


def rerun(scene: SceneConfig, n_frames: int, source: Source = Source.COUNTERFACTUAL) -> tuple[EventLog, Trajectory]:
    traj, events, _ = simulate_full(scene, n_frames)
    return events.tagged(source), traj


def counterfactual_simulation(scene: SceneConfig, body_id: int, n_frames: int) -> tuple[EventLog, Trajectory]:
    """Re-simulate from the fitted initial state with one body removed."""
    _body_check(scene, body_id)
    return rerun(scene.without(body_id), n_frames)


def predictive_simulation(scene: SceneConfig, horizon: int, observed_end: int | None = None) -> EventLog:
    """Events after the observed clip.

    ``scene`` starts somewhere inside the clip (typically the refit anchor);
    the rollout runs to ``observed_end + horizon`` and only events from
    ``observed_end`` on are kept. Defaults to ``observed_end = start_frame``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    end = scene.start_frame if observed_end is None else int(observed_end)
    if end < scene.start_frame:
        raise ValueError("observed_end precedes the scene's start frame")
    n = end + horizon - scene.start_frame
    traj, events, ro = simulate_full(scene, n + 1)
    kept = []
    for e in events:
        if e.frame < end or e.frame >= end + horizon:
            continue
        if e.kind == EventKind.ENTER and e.frame == scene.start_frame:
            continue  # already visible when the rollout starts
        kept.append(replace(e, source=Source.PREDICTED))
    return EventLog(tuple(kept))


# ---------------------------------------------------------------------------
# operation table

OBJ = ("object",)
OBJS = ("objects", "object")
EVS = ("events",)
EV = ("event",)
ANY_SET = ("objects", "events", "object")

# name -> (argument type options per slot, result type or None when it depends on input)
SIGNATURES: dict[str, tuple[tuple[tuple[str, ...], ...], str | None]] = {
    "start": ((), "event"),
    "end": ((), "event"),
    "objects": ((), "objects"),
    "events": ((), "events"),
    "unseenevents": ((), "events"),
    "query_color": ((OBJ,), "concept"),
    "query_material": ((OBJ,), "concept"),
    "query_shape": ((OBJ,), "concept"),
    "count": ((ANY_SET,), "int"),
    "exist": ((ANY_SET,), "bool"),
    "belong_to": ((EV, EVS), "bool"),
    "negate": ((("bool",),), "bool"),
    "counterfactual_simulation": ((OBJ,), "events"),
    "predictive_simulation": ((OBJS,), "events"),
    "apply_heavier": ((OBJ,), "object"),
    "apply_lighter": ((OBJ,), "object"),
    "filter_static_concept": ((OBJS, ("concept",)), "objects"),
    "filter_dynamic_concept": ((OBJS, ("concept",), ("frame",)), "objects"),
    "unique": ((("objects", "events"),), None),
    "filter_in": ((EVS, OBJS), "events"),
    "filter_out": ((EVS, OBJS), "events"),
    "filter_collision": ((EVS, OBJS), "events"),
    "get_col_partner": ((EV, OBJ), "object"),
    "filter_before": ((EVS, EV), "events"),
    "filter_after": ((EVS, EV), "events"),
    "filter_order": ((EVS, ("order",)), "event"),
    "filter_ancestor": ((EV, EVS), "events"),
    "get_frame": ((EV,), "frame"),
}
OPERATIONS = tuple(SIGNATURES)


def _norm_op(name: str) -> str:
    key = str(name).strip().lower()
    if key not in SIGNATURES:
        raise UnknownOperation(f"unknown operation {name!r}")
    return key


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple = ()

    @classmethod
    def parse(cls, item) -> "Step":
        if isinstance(item, str):
            return cls(_norm_op(item))
        if isinstance(item, (list, tuple)):
            return cls(_norm_op(item[0]), tuple(item[1:]))
        if not isinstance(item, dict) or "op" not in item:
            raise TypeMismatch(f"cannot read program step {item!r}")
        return cls(_norm_op(item["op"]), tuple(item.get("args", ())))

    def to_dict(self) -> dict:
        return {"op": self.op, "args": list(self.args)}


def parse_program(items: Sequence) -> list[Step]:
    return [Step.parse(it) for it in items]


def load_program(text: str) -> list[Step]:
    return parse_program(json.loads(text))


# ---------------------------------------------------------------------------
# argument resolution (shared by type checking and execution)


def _literal_type(arg, slot: tuple[str, ...]) -> str:
    if isinstance(arg, bool):
        raise TypeMismatch(f"boolean literal {arg!r} is not a valid argument")
    if isinstance(arg, (int, np.integer)):
        if "frame" in slot:
            return "frame"
        if "object" in slot:
            return "object"
    if isinstance(arg, str):
        if "order" in slot:
            return "order"
        if "concept" in slot:
            return "concept"
    raise TypeMismatch(f"literal {arg!r} does not fit a {'/'.join(slot)} slot")


def _resolve(step: Step, k: int, stack: list, results: list, type_of: Callable, make_literal: Callable):
    slots, _ = SIGNATURES[step.op]
    if len(step.args) > len(slots):
        raise TypeMismatch(f"{step.op} takes {len(slots)} argument(s), got {len(step.args)}")
    explicit: dict[int, Any] = {}
    # explicit arguments fill the trailing slots so that leading inputs can come from the stack
    offset = len(slots) - len(step.args)
    for j, arg in enumerate(step.args):
        slot = slots[offset + j]
        if arg == "PIPE":
            if not stack:
                raise TypeMismatch(f"step {k} ({step.op}): PIPE with an empty stack")
            item = stack.pop()
        elif isinstance(arg, dict) and "ref" in arg:
            r = int(arg["ref"])
            if not 0 <= r < k:
                raise TypeMismatch(f"step {k} ({step.op}): bad reference {r}")
            item = results[r]
        else:
            item = make_literal(arg, _literal_type(arg, slot))
        if type_of(item) not in slot:
            raise TypeMismatch(f"step {k} ({step.op}): argument {j} is {type_of(item)}, expected {'/'.join(slot)}")
        explicit[offset + j] = item
    out = [None] * len(slots)
    for j in range(len(slots) - 1, -1, -1):
        if j in explicit:
            out[j] = explicit[j]
            continue
        for s in range(len(stack) - 1, -1, -1):
            if type_of(stack[s]) in slots[j]:
                out[j] = stack.pop(s)
                break
        else:
            raise TypeMismatch(f"step {k} ({step.op}): no {'/'.join(slots[j])} value available")
    return out


def _result_type(op: str, arg_types: list[str]) -> str:
    res = SIGNATURES[op][1]
    if res is not None:
        return res
    return "object" if arg_types[0] == "objects" else "event"


def type_check(program: Sequence[Step]) -> str:
    """Type of the program's answer; raises TypeMismatch on a malformed program."""
    stack: list[str] = []
    results: list[str] = []
    for k, step in enumerate(program):
        args = _resolve(step, k, stack, results, lambda t: t, lambda a, t: t)
        t = _result_type(step.op, args)
        stack.append(t)
        results.append(t)
    if not stack:
        raise TypeMismatch("empty program")
    return stack[-1]


# ---------------------------------------------------------------------------
# execution


@dataclass
class ExecutionContext:
    scene: SceneConfig
    trajectory: Trajectory
    events: EventLog
    horizon: int | None = None
    eps_move: float = EPS_MOVE
    vocabulary: frozenset = BASE_VOCABULARY
    _unseen: EventLog | None = field(default=None, repr=False)
    _dynamic: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        vocab = set(self.vocabulary)
        for b in self.scene.bodies:
            vocab.update(str(v).lower() for v in b.params.attributes.values())
        self.vocabulary = frozenset(vocab)

    @property
    def first_frame(self) -> int:
        return int(self.trajectory.frames[0])

    @property
    def end_frame(self) -> int:
        """One past the last observed frame."""
        return int(self.trajectory.frames[-1]) + 1

    @property
    def clip_length(self) -> int:
        return self.trajectory.n_frames

    def unseen(self) -> EventLog:
        if self._unseen is None:
            h = self.horizon if self.horizon is not None else self.clip_length
            self._unseen = predictive_simulation(self.scene, h, self.end_frame)
        return self._unseen

    def speed(self, body_id: int, frame: int) -> float | None:
        tr = self.trajectory
        c = tr.column(body_id)
        k = int(frame) - self.first_frame
        if not 0 <= k < tr.n_frames or not tr.present[k, c]:
            return None
        dt = self.scene.physics.frame_dt
        lo, hi = max(k - 1, 0), min(k + 1, tr.n_frames - 1)
        if hi == lo:
            return 0.0
        return float(np.linalg.norm(tr.pos[hi, c] - tr.pos[lo, c]) / ((hi - lo) * dt))


def _event_sort(events) -> tuple:
    return tuple(sorted(events, key=Event.sort_key))


def _objects_of(v: Value) -> tuple:
    return (v.value,) if v.type == "object" else tuple(v.value)


class Executor:
    def __init__(self, ctx: ExecutionContext):
        self.ctx = ctx

    def run(self, program: Sequence) -> Value:
        steps = [s if isinstance(s, Step) else Step.parse(s) for s in program]
        type_check(steps)
        stack: list[Value] = []
        results: list[Value] = []
        for k, step in enumerate(steps):
            args = _resolve(step, k, stack, results, lambda v: v.type, lambda a, t: Value(t, a))
            out = getattr(self, "op_" + step.op)(*args)
            stack.append(out)
            results.append(out)
        return stack[-1]

    # -- helpers
    def _concept(self, v: Value) -> str:
        c = str(v.value).lower()
        if c not in self.ctx.vocabulary:
            raise UnknownConcept(f"unknown concept {v.value!r}")
        return c

    def _body(self, bid: int) -> int:
        if bid not in self.ctx.scene.ids:
            raise UnknownBody(f"no body {bid} in scene")
        return int(bid)

    def _attr(self, v: Value, key: str) -> Value:
        b = self.ctx.scene.body(self._body(v.value))
        return Value("concept", str(b.params.attributes.get(key, "")).lower())

    # -- input operations
    def op_start(self):
        return Value("event", start_event(self.ctx.first_frame))

    def op_end(self):
        return Value("event", end_event(self.ctx.end_frame - 1))

    def op_objects(self):
        return Value("objects", tuple(sorted(self.ctx.scene.ids)))

    def op_events(self):
        return Value("events", _event_sort(self.ctx.events))

    def op_unseenevents(self):
        return Value("events", _event_sort(self.ctx.unseen()))

    # -- output operations
    def op_query_color(self, o):
        return self._attr(o, "color")

    def op_query_material(self, o):
        return self._attr(o, "material")

    def op_query_shape(self, o):
        return self._attr(o, "shape")

    def op_count(self, xs):
        return Value("int", len(_objects_of(xs)) if xs.type != "events" else len(xs.value))

    def op_exist(self, xs):
        return Value("bool", self.op_count(xs).value > 0)

    def op_belong_to(self, e, es):
        return Value("bool", any(x.key() == e.value.key() for x in es.value))

    def op_negate(self, b):
        return Value("bool", not b.value)

    # -- physics operations
    def op_counterfactual_simulation(self, o):
        bid = self._body(o.value)
        n = self.ctx.end_frame - self.ctx.scene.start_frame
        if o.mass_scale != 1.0:
            events, _ = rerun(_scale_mass(self.ctx.scene, bid, o.mass_scale), n)
        else:
            events, _ = counterfactual_simulation(self.ctx.scene, bid, n)
        return Value("events", _event_sort(events))

    def op_predictive_simulation(self, os_):
        ids = set(_objects_of(os_))
        return Value("events", _event_sort(e for e in self.ctx.unseen() if ids & set(e.participants)))

    def op_apply_heavier(self, o):
        return Value("object", self._body(o.value), o.mass_scale * HEAVIER)

    def op_apply_lighter(self, o):
        return Value("object", self._body(o.value), o.mass_scale * LIGHTER)

    # -- object filters
    def op_filter_static_concept(self, os_, c):
        concept = self._concept(c)
        if concept in DYNAMIC_CONCEPTS:
            raise TypeMismatch(f"{concept!r} is a dynamic concept")
        keep = [i for i in _objects_of(os_)
                if concept in {str(v).lower() for v in self.ctx.scene.body(self._body(i)).params.attributes.values()}]
        return Value("objects", tuple(keep))

    def op_filter_dynamic_concept(self, os_, c, f):
        concept = str(c.value).lower()
        if concept not in DYNAMIC_CONCEPTS:
            raise UnknownConcept(f"unknown dynamic concept {c.value!r}")
        keep = []
        for i in _objects_of(os_):
            s = self.ctx.speed(self._body(i), int(f.value))
            if s is None:
                continue
            if (s > self.ctx.eps_move) == (concept == "moving"):
                keep.append(i)
        return Value("objects", tuple(keep))

    def op_unique(self, xs):
        items = tuple(xs.value)
        if len(items) != 1:
            raise UniqueViolation(f"Unique expects exactly one item, got {len(items)}")
        return Value("object" if xs.type == "objects" else "event", items[0])

    # -- event filters
    def _with_objects(self, es, os_, kinds):
        ids = set(_objects_of(os_))
        return Value("events", tuple(e for e in es.value if e.kind in kinds and ids & set(e.participants)))

    def op_filter_in(self, es, os_):
        return self._with_objects(es, os_, (EventKind.ENTER,))

    def op_filter_out(self, es, os_):
        return self._with_objects(es, os_, (EventKind.EXIT,))

    def op_filter_collision(self, es, os_):
        return self._with_objects(es, os_, (EventKind.COLLISION,))

    def op_get_col_partner(self, e, o):
        ev = e.value
        bid = self._body(o.value)
        if ev.kind != EventKind.COLLISION or bid not in ev.participants:
            raise TypeMismatch(f"body {bid} is not a participant of {ev.key()}")
        a, b = ev.participants
        return Value("object", b if a == bid else a)

    def op_filter_before(self, es, e):
        return Value("events", tuple(x for x in es.value if x.frame < e.value.frame))

    def op_filter_after(self, es, e):
        return Value("events", tuple(x for x in es.value if x.frame > e.value.frame))

    def op_filter_order(self, es, order):
        key = str(order.value).lower()
        if key not in ORDERS:
            raise UnknownConcept(f"unknown order {order.value!r}")
        items = sorted(es.value, key=lambda x: (x.frame, x.participants))
        if not items:
            raise UniqueViolation("no event to order")
        if key == "last":
            last = items[-1].frame
            return Value("event", next(x for x in items if x.frame == last))
        k = ORDERS[key]
        if k >= len(items):
            raise UniqueViolation(f"only {len(items)} event(s), no {key!r}")
        return Value("event", items[k])

    def op_filter_ancestor(self, e, es):
        pool = list(es.value)
        if not any(x.key() == e.value.key() for x in pool):
            pool.append(e.value)
        graph = build_causal_graph(pool)
        anc = {x.key() for x in graph.ancestors(e.value)}
        return Value("events", tuple(x for x in es.value if x.key() in anc))

    def op_get_frame(self, e):
        return Value("frame", int(e.value.frame))


def execute_program(program: Sequence, scene: SceneConfig, trajectory: Trajectory, events: EventLog | None = None,
                    horizon: int | None = None, eps_move: float = EPS_MOVE) -> Value:
    """Run ``program`` and return its answer.

    Without ``events`` the log is extracted from ``trajectory`` alone
    (enter and exit only), so callers normally pass the simulator's log.
    """
    if events is None:
        events = extract_events(trajectory, scene)
    ctx = ExecutionContext(scene, trajectory, events, horizon, eps_move)
    return Executor(ctx).run(program)
