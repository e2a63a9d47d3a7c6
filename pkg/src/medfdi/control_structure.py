"""Device control structures and false-data injection-point analysis.

A control structure is a directed graph of device components (sensors,
interfaces, the ML engine, actuators, ...) joined by data links. Any
component with a directed path into the ML engine is a candidate point for
injecting false data into the model's inputs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import yaml

from .errors import SchemaError, StructurePreconditionError


class ComponentKind(Enum):
    SENSOR = "Sensor"
    INTERFACE = "Interface"
    ML_ENGINE = "MLEngine"
    ACTUATOR = "Actuator"
    NETWORK = "Network"
    HUMAN = "Human"
    DATASTORE = "Datastore"
    OTHER = "Other"

    @classmethod
    def from_str(cls, value: str) -> "ComponentKind":
        for member in cls:
            if member.value == value:
                return member
        raise SchemaError(
            f"unknown component kind {value!r}; expected one of "
            + ", ".join(m.value for m in cls)
        )


@dataclass(frozen=True)
class Component:
    id: str
    name: str
    kind: ComponentKind
    description: str = ""


@dataclass(frozen=True)
class DataLink:
    """One directed data or control flow between two components."""

    from_id: str
    to_id: str
    medium: str = ""
    carries: str = ""


@dataclass(frozen=True)
class ControlStructure:
    device_name: str
    components: tuple[Component, ...]
    links: tuple[DataLink, ...]
    system_description: str = ""

    def component_by_id(self, component_id: str) -> Component:
        for c in self.components:
            if c.id == component_id:
                return c
        raise KeyError(component_id)

    def ml_engine(self) -> Component:
        engines = [c for c in self.components if c.kind is ComponentKind.ML_ENGINE]
        if len(engines) != 1:
            raise StructurePreconditionError(validate_structure(self))
        return engines[0]


@dataclass(frozen=True)
class InjectionPoint:
    """A component from which manipulated data can reach the ML engine.

    ``path_to_ml`` starts at the component itself and ends at the ML engine.
    """

    component: str
    path_to_ml: tuple[str, ...]


def validate_structure(s: ControlStructure) -> list[str]:
    """Check every structural invariant; return one message per violation.

    An empty list means the structure is valid. Violations name the
    offending component or link so callers can report them directly.
    """
    violations: list[str] = []

    ids = [c.id for c in s.components]
    seen: set[str] = set()
    for cid in ids:
        if cid in seen:
            violations.append(f"duplicate component id: {cid!r}")
        seen.add(cid)

    engines = [c.id for c in s.components if c.kind is ComponentKind.ML_ENGINE]
    if len(engines) == 0:
        violations.append("no MLEngine component present")
    elif len(engines) > 1:
        violations.append(
            "more than one MLEngine component: " + ", ".join(sorted(engines))
        )

    id_set = set(ids)
    for link in s.links:
        if link.from_id == link.to_id:
            violations.append(f"self-loop link on component {link.from_id!r}")
        for endpoint in (link.from_id, link.to_id):
            if endpoint not in id_set:
                violations.append(f"link references nonexistent component id {endpoint!r}")

    triples: set[tuple[str, str, str]] = set()
    for link in s.links:
        triple = (link.from_id, link.to_id, link.carries)
        if triple in triples:
            violations.append(f"duplicate link {link.from_id!r} -> {link.to_id!r} carrying {link.carries!r}")
        triples.add(triple)

    # Reachability: if there is anything besides the ML engine, at least one
    # component must have a directed path into it. A structure that is just
    # the ML engine on its own is accepted.
    if len(engines) == 1 and not violations:
        ml_id = engines[0]
        others = [c.id for c in s.components if c.id != ml_id]
        if others and not _reaching_components(s, ml_id):
            violations.append("no component has a directed path to the MLEngine")

    return violations


def _adjacency(s: ControlStructure) -> dict[str, set[str]]:
    adj: dict[str, set[str]] = {c.id: set() for c in s.components}
    for link in s.links:
        adj[link.from_id].add(link.to_id)
    return adj


def _reaching_components(s: ControlStructure, ml_id: str) -> set[str]:
    """All component ids (excluding the engine) that can reach ``ml_id``."""
    reverse: dict[str, set[str]] = {c.id: set() for c in s.components}
    for link in s.links:
        reverse[link.to_id].add(link.from_id)
    reached: set[str] = set()
    queue = deque([ml_id])
    while queue:
        node = queue.popleft()
        for pred in reverse[node]:
            if pred not in reached and pred != ml_id:
                reached.add(pred)
                queue.append(pred)
    return reached


def enumerate_injection_points(s: ControlStructure) -> list[InjectionPoint]:
    """Find every component that can deliver false data to the ML engine.

    Returns one injection point per reaching component (the engine itself is
    excluded), carrying a shortest path to the engine. When several shortest
    paths exist the lexicographically smallest id sequence is chosen, which
    makes the output independent of component and link ordering.

    Raises StructurePreconditionError when the structure fails validation.
    """
    violations = validate_structure(s)
    if violations:
        raise StructurePreconditionError(violations)

    ml_id = s.ml_engine().id
    adj = _adjacency(s)

    # Distance-to-engine for every node, over reversed edges.
    dist: dict[str, int] = {ml_id: 0}
    reverse: dict[str, set[str]] = {c.id: set() for c in s.components}
    for link in s.links:
        reverse[link.to_id].add(link.from_id)
    queue = deque([ml_id])
    while queue:
        node = queue.popleft()
        for pred in reverse[node]:
            if pred not in dist:
                dist[pred] = dist[node] + 1
                queue.append(pred)

    points: list[InjectionPoint] = []
    for cid in sorted(dist):
        if cid == ml_id:
            continue
        # Greedy reconstruction: every hop moves one step closer to the
        # engine; picking the smallest eligible successor id at each step
        # yields the lexicographically smallest shortest path.
        path = [cid]
        current = cid
        while current != ml_id:
            candidates = [
                nxt for nxt in adj[current]
                if nxt in dist and dist[nxt] == dist[current] - 1
            ]
            current = min(candidates)
            path.append(current)
        points.append(InjectionPoint(component=cid, path_to_ml=tuple(path)))
    return points


def derive_data_flow(s: ControlStructure) -> str:
    """Render every data link as one deterministic, human-readable string.

    Links are listed in topological order of the component graph when it is
    acyclic, otherwise sorted by (from, to, carries). Identical structures
    produce byte-identical output regardless of input ordering.
    """
    if not s.links:
        return ""

    order = _topological_index(s)
    if order is not None:
        links = sorted(s.links, key=lambda l: (order[l.from_id], order[l.to_id], l.carries))
    else:
        links = sorted(s.links, key=lambda l: (l.from_id, l.to_id, l.carries))

    names = {c.id: c.name for c in s.components}
    parts = []
    for link in links:
        segment = f"{names[link.from_id]} → {names[link.to_id]}"
        if link.carries:
            segment += f" ({link.carries})"
        parts.append(segment)
    return "; ".join(parts)


def _topological_index(s: ControlStructure) -> dict[str, int] | None:
    """Kahn's algorithm with smallest-id-first tie-breaking; None if cyclic."""
    adj = _adjacency(s)
    # Parallel links between the same pair count once for topology.
    indegree: dict[str, int] = {c.id: 0 for c in s.components}
    for targets in adj.values():
        for t in targets:
            indegree[t] += 1

    ready = sorted(cid for cid, deg in indegree.items() if deg == 0)
    order: dict[str, int] = {}
    while ready:
        node = ready.pop(0)
        order[node] = len(order)
        inserted = []
        for nxt in adj[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                inserted.append(nxt)
        ready = sorted(ready + inserted)
    if len(order) != len(indegree):
        return None
    return order


# --- On-disk encoding ------------------------------------------------------

_TOP_KEYS = {"device_name", "system_description", "components", "links"}
_COMPONENT_KEYS = {"id", "name", "kind", "description"}
_LINK_KEYS = {"from", "to", "medium", "carries"}


def load_control_structure(path: str | Path) -> ControlStructure:
    """Load a control structure from a YAML or JSON document.

    The document must contain only the keys ``device_name``,
    ``system_description``, ``components`` and ``links``; anything else is
    rejected with a SchemaError naming the key.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    return structure_from_dict(data, source=str(path))


def structure_from_dict(data: object, source: str = "<memory>") -> ControlStructure:
    if not isinstance(data, dict):
        raise SchemaError(f"{source}: control structure document must be a mapping")

    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise SchemaError(f"{source}: unknown key {sorted(unknown)[0]!r}")
    for required in ("device_name", "components", "links"):
        if required not in data:
            raise SchemaError(f"{source}: missing key {required!r}")

    components = []
    for i, raw in enumerate(data["components"]):
        if not isinstance(raw, dict):
            raise SchemaError(f"{source}: components[{i}] must be a mapping")
        extra = set(raw) - _COMPONENT_KEYS
        if extra:
            raise SchemaError(f"{source}: components[{i}] unknown key {sorted(extra)[0]!r}")
        for required in ("id", "name", "kind"):
            if required not in raw:
                raise SchemaError(f"{source}: components[{i}] missing key {required!r}")
        components.append(Component(
            id=str(raw["id"]),
            name=str(raw["name"]),
            kind=ComponentKind.from_str(str(raw["kind"])),
            description=str(raw.get("description", "")),
        ))

    links = []
    for i, raw in enumerate(data["links"]):
        if not isinstance(raw, dict):
            raise SchemaError(f"{source}: links[{i}] must be a mapping")
        extra = set(raw) - _LINK_KEYS
        if extra:
            raise SchemaError(f"{source}: links[{i}] unknown key {sorted(extra)[0]!r}")
        for required in ("from", "to"):
            if required not in raw:
                raise SchemaError(f"{source}: links[{i}] missing key {required!r}")
        links.append(DataLink(
            from_id=str(raw["from"]),
            to_id=str(raw["to"]),
            medium=str(raw.get("medium", "")),
            carries=str(raw.get("carries", "")),
        ))

    return ControlStructure(
        device_name=str(data["device_name"]),
        components=tuple(components),
        links=tuple(links),
        system_description=str(data.get("system_description", "")),
    )


def structure_to_dict(s: ControlStructure) -> dict:
    return {
        "device_name": s.device_name,
        "system_description": s.system_description,
        "components": [
            {"id": c.id, "name": c.name, "kind": c.kind.value, "description": c.description}
            for c in s.components
        ],
        "links": [
            {"from": l.from_id, "to": l.to_id, "medium": l.medium, "carries": l.carries}
            for l in s.links
        ],
    }
