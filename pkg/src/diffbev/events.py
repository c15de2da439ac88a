"""Typed scene events and the causal graph over them."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class EventKind(str, enum.Enum):
    ENTER = "enter"
    EXIT = "exit"
    COLLISION = "collision"
    START = "start"
    END = "end"


class Source(str, enum.Enum):
    OBSERVED = "observed"
    PREDICTED = "predicted"
    COUNTERFACTUAL = "counterfactual"


_KIND_RANK = {EventKind.START: 0, EventKind.ENTER: 1, EventKind.COLLISION: 2, EventKind.EXIT: 3, EventKind.END: 4}


@dataclass(frozen=True)
class Event:
    kind: EventKind
    frame: int
    participants: tuple[int, ...]
    source: Source = Source.OBSERVED

    def __post_init__(self):
        parts = tuple(int(p) for p in self.participants)
        if self.kind == EventKind.COLLISION:
            if len(parts) != 2 or parts[0] == parts[1]:
                raise ValueError("a collision needs two distinct participants")
            parts = tuple(sorted(parts))
        elif self.kind in (EventKind.ENTER, EventKind.EXIT) and len(parts) != 1:
            raise ValueError(f"{self.kind.value} events have one participant")
        object.__setattr__(self, "participants", parts)
        object.__setattr__(self, "frame", int(self.frame))

    def sort_key(self):
        return (self.frame, _KIND_RANK[self.kind], self.participants)

    def key(self):
        """Identity ignoring the source tag."""
        return (self.kind.value, self.frame, self.participants)

    def involves(self, body_id: int) -> bool:
        return body_id in self.participants

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "frame": self.frame,
                "participants": list(self.participants), "source": self.source.value}

    @classmethod
    def from_dict(cls, d) -> "Event":
        return cls(EventKind(d["kind"]), d["frame"], tuple(d["participants"]), Source(d.get("source", "observed")))


def start_event(frame: int = 0) -> Event:
    return Event(EventKind.START, frame, ())


def end_event(frame: int) -> Event:
    return Event(EventKind.END, frame, ())


@dataclass(frozen=True)
class EventLog:
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=Event.sort_key)))

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def of_kind(self, kind: EventKind) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    @property
    def collisions(self) -> list[Event]:
        return self.of_kind(EventKind.COLLISION)

    def involving(self, body_id: int) -> list[Event]:
        return [e for e in self.events if e.involves(body_id)]

    def tagged(self, source: Source) -> "EventLog":
        return EventLog(tuple(replace(e, source=source) for e in self.events))

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.events]

    @classmethod
    def from_list(cls, items) -> "EventLog":
        return cls(tuple(Event.from_dict(d) for d in items))


def visibility_events(traj, source: Source = Source.OBSERVED) -> list[Event]:
    """Enter/exit events from the per-sample presence flags."""
    out = []
    for c, bid in enumerate(traj.ids):
        inside = np.asarray(traj.present[:, c], dtype=bool)
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            continue
        out.append(Event(EventKind.ENTER, traj.frames[idx[0]], (bid,), source))
        last = idx[-1]
        if last + 1 < len(inside):
            out.append(Event(EventKind.EXIT, traj.frames[last + 1], (bid,), source))
    return out


def extract_events(traj, scene, contacts: Iterable = (), source: Source = Source.OBSERVED) -> EventLog:
    """Enter, exit and collision events of one rollout.

    ``contacts`` are the simulator's per-step contact records; a collision is
    logged at the frame containing the first step of each contiguous run of
    body-body contact.
    """
    ids = scene.ids
    s = scene.physics.substeps
    last_frame = int(traj.frames[-1]) if traj.n_frames else scene.start_frame
    events = visibility_events(traj, source)
    for rec in contacts:
        if rec.j < 0 or not rec.onset:
            continue
        frame = min(scene.start_frame + rec.step // s, last_frame)
        events.append(Event(EventKind.COLLISION, frame, (ids[rec.i], ids[rec.j]), source))
    return EventLog(tuple(events))


@dataclass
class CausalGraph:
    """DAG over events: an edge runs from an earlier to a later event sharing a participant."""

    events: list[Event]
    parents: dict = field(default_factory=dict)

    def ancestors(self, event: Event) -> list[Event]:
        k = self._index(event)
        seen: set[int] = set()
        stack = list(self.parents[k])
        while stack:
            p = stack.pop()
            if p in seen:
                continue
            seen.add(p)
            stack.extend(self.parents[p])
        return sorted((self.events[p] for p in seen), key=Event.sort_key)

    def edges(self) -> list[tuple[Event, Event]]:
        return [(self.events[p], self.events[k]) for k in range(len(self.events)) for p in self.parents[k]]

    def _index(self, event: Event) -> int:
        for k, e in enumerate(self.events):
            if e.key() == event.key():
                return k
        raise KeyError(f"event {event.key()} is not in the graph")


def build_causal_graph(events: EventLog | Sequence[Event]) -> CausalGraph:
    evs = sorted(events, key=Event.sort_key)
    parents = {}
    for k, e in enumerate(evs):
        parents[k] = [p for p in range(len(evs))
                      if evs[p].frame < e.frame and set(evs[p].participants) & set(e.participants)]
    return CausalGraph(evs, parents)
