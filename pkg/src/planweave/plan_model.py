"""Sub-task graph data model and plan-document parsing.

The manager agent replies with a JSON plan (optionally wrapped in
``[START]`` / ``[END]`` markers).  This module extracts that payload,
parses it into a :class:`SubTaskGraph`, validates the graph, and provides
the orderings the scheduler relies on.  Everything here is immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

START_MARK = "[START]"
END_MARK = "[END]"

# Plan payload field names (the external template contract).
_TASK_FIELDS = ("content", "tool", "parameters", "local_constraints", "require_data")


class PlanError(Exception):
    """Base class for plan extraction/parsing/validation failures."""


class NoPayload(PlanError):
    """Raised when a reply contains neither markers nor a braced object."""


class MalformedPlan(PlanError):
    """Raised when the payload is not syntactically valid."""


class MissingField(PlanError):
    """Raised when a sub-task lacks content, tool, or parameters."""


class ArityMismatch(PlanError):
    """Raised when a sub-task's parameter count differs from its tool count."""


class InvalidGraph(PlanError):
    """Raised when an operation requires a violation-free graph."""


class UnknownTask(PlanError):
    """Raised when a task id does not exist in the graph."""


@dataclass(frozen=True)
class SubTask:
    """One node of the decomposition.

    ``tool_names`` are executor names ("executor as tools"); ``parameters``
    holds one message payload per executor, in the same order.
    ``require_data`` lists the ids of tasks whose outcomes this task needs.
    """

    id: str
    content: str
    tool_names: tuple[str, ...]
    parameters: tuple[Mapping[str, Any], ...]
    local_constraints: tuple[str, ...] = ()
    require_data: tuple[str, ...] = ()
    extras: Mapping[str, Any] = field(default_factory=dict)

    def message_for(self, index: int) -> str:
        """Concatenated ``message`` payload for the executor at ``index``."""
        if index >= len(self.parameters):
            return ""
        entry = self.parameters[index]
        message = entry.get("message", []) if isinstance(entry, Mapping) else []
        if isinstance(message, str):
            return message
        return " ".join(str(part) for part in message)

    def replace_rewrite(self, content: str, parameters) -> "SubTask":
        """New task with ``content``/``parameters`` swapped, all else kept."""
        return SubTask(
            id=self.id,
            content=content,
            tool_names=self.tool_names,
            parameters=tuple(parameters),
            local_constraints=self.local_constraints,
            require_data=self.require_data,
            extras=self.extras,
        )


@dataclass(frozen=True)
class SubTaskGraph:
    """The manager's decomposition: tasks plus require_data edges.

    Edges are derived solely from ``require_data``; an edge ``(j, i)``
    means task ``j`` must finish before task ``i`` starts.
    """

    main_task: str
    global_constraints: tuple[str, ...]
    tasks: Mapping[str, SubTask]
    duplicate_ids: tuple[str, ...] = ()

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        out = []
        for tid, task in self.tasks.items():
            for dep in task.require_data:
                out.append((dep, tid))
        return tuple(out)

    def successors(self, task_id: str) -> tuple[str, ...]:
        return tuple(t for (j, t) in self.edges if j == task_id)


@dataclass(frozen=True)
class PlanDocument:
    """A manager reply together with its extracted and parsed plan."""

    raw_text: str
    payload: str
    graph: SubTaskGraph


@dataclass(frozen=True)
class Violation:
    kind: str  # cycle | dangling | duplicate-id | duplicate-dependency | empty-tools | arity-mismatch | empty-id
    task_id: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"{v.kind}[{v.task_id}]: {v.detail}" for v in self.violations)


def extract_plan_payload(raw_text: str) -> str:
    """Extract the structured plan text from a manager reply.

    Returns the text between the first ``[START]`` and the next ``[END]``
    when both markers exist; otherwise the first balanced top-level braced
    object.  Raises :class:`NoPayload` when neither is present.
    """
    if not raw_text:
        raise NoPayload("empty reply")
    start = raw_text.find(START_MARK)
    if start != -1:
        end = raw_text.find(END_MARK, start + len(START_MARK))
        if end != -1:
            return raw_text[start + len(START_MARK):end].strip()
    payload = _first_balanced_object(raw_text)
    if payload is None:
        raise NoPayload("reply contains no [START]/[END] block and no braced object")
    return payload


def _first_balanced_object(text: str) -> str | None:
    depth = 0
    begin = None
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                begin = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0 and begin is not None:
                    return text[begin:i + 1]
    return None


def _pairs_keep_duplicates(pairs):
    """json object hook that records duplicate keys instead of dropping them."""
    seen: dict[str, Any] = {}
    duplicates = []
    for key, value in pairs:
        if key in seen:
            duplicates.append(key)
        seen[key] = value
    if duplicates:
        seen["__duplicate_keys__"] = duplicates
    return seen


def parse_plan(payload: str) -> SubTaskGraph:
    """Parse a plan payload into a :class:`SubTaskGraph`.

    Tasks keep template order.  ``local_constraints``, ``require_data``
    and ``global_constraints`` default to empty; ``main_task`` defaults to
    the empty string.  Unknown fields are preserved in ``SubTask.extras``
    but otherwise ignored.
    """
    try:
        doc = json.loads(payload, object_pairs_hook=_pairs_keep_duplicates)
    except json.JSONDecodeError as exc:
        raise MalformedPlan(f"plan payload is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedPlan("plan payload must be a JSON object")

    sub_tasks = doc.get("sub_tasks")
    if not isinstance(sub_tasks, dict):
        raise MissingField("plan has no sub_tasks object")
    duplicate_ids = tuple(sub_tasks.pop("__duplicate_keys__", []))

    tasks: dict[str, SubTask] = {}
    for tid, body in sub_tasks.items():
        if not isinstance(body, dict):
            raise MalformedPlan(f"sub-task {tid!r} is not an object")
        body = dict(body)
        body.pop("__duplicate_keys__", None)
        for required in ("content", "tool", "parameters"):
            if required not in body:
                raise MissingField(f"sub-task {tid!r} lacks {required!r}")
        tools = body["tool"]
        params = body["parameters"]
        if not isinstance(tools, list) or not isinstance(params, list):
            raise MalformedPlan(f"sub-task {tid!r}: tool and parameters must be lists")
        if len(tools) != len(params):
            raise ArityMismatch(
                f"sub-task {tid!r} has {len(tools)} tools but {len(params)} parameter entries"
            )
        extras = {k: v for k, v in body.items() if k not in _TASK_FIELDS}
        tasks[tid] = SubTask(
            id=tid,
            content=str(body["content"]),
            tool_names=tuple(str(t) for t in tools),
            parameters=tuple(params),
            local_constraints=tuple(str(c) for c in body.get("local_constraints", []) or []),
            require_data=tuple(str(r) for r in body.get("require_data", []) or []),
            extras=extras,
        )

    return SubTaskGraph(
        main_task=str(doc.get("main_task", "") or ""),
        global_constraints=tuple(str(c) for c in doc.get("global_constraints", []) or []),
        tasks=tasks,
        duplicate_ids=duplicate_ids,
    )


def validate_graph(graph: SubTaskGraph) -> ValidationReport:
    """Report every structural violation of ``graph``.

    Violations are data, not exceptions; the report is deterministic for a
    given graph (violations sorted by kind then task id).
    """
    violations: list[Violation] = []
    ids = list(graph.tasks)

    for tid in graph.duplicate_ids:
        violations.append(Violation("duplicate-id", tid, f"sub-task id {tid!r} appears more than once"))
    for tid, task in graph.tasks.items():
        if not tid:
            violations.append(Violation("empty-id", tid, "sub-task has an empty id"))
        if task.id != tid:
            violations.append(Violation("duplicate-id", tid, f"task keyed {tid!r} carries id {task.id!r}"))
        if not task.tool_names:
            violations.append(Violation("empty-tools", tid, "sub-task names no executor"))
        if len(task.parameters) != len(task.tool_names):
            violations.append(Violation(
                "arity-mismatch", tid,
                f"{len(task.tool_names)} tools but {len(task.parameters)} parameter entries",
            ))
        seen_deps = set()
        for dep in task.require_data:
            if dep in seen_deps:
                violations.append(Violation("duplicate-dependency", tid, f"require_data repeats {dep!r}"))
            seen_deps.add(dep)
            if dep not in graph.tasks:
                violations.append(Violation("dangling", tid, f"require_data names unknown task {dep!r}"))

    cycle = _find_cycle(graph)
    if cycle is not None:
        violations.append(Violation("cycle", cycle[0], "cycle: " + " -> ".join(cycle)))

    violations.sort(key=lambda v: (v.kind, v.task_id, v.detail))
    return ValidationReport(tuple(violations))


def _find_cycle(graph: SubTaskGraph) -> list[str] | None:
    """Return one witness cycle (list of ids in order) or None."""
    preds = {tid: [d for d in t.require_data if d in graph.tasks] for tid, t in graph.tasks.items()}
    color: dict[str, int] = {}  # 0 unvisited / 1 on stack / 2 done
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = 1
        stack.append(node)
        for dep in sorted(preds[node]):
            state = color.get(dep, 0)
            if state == 1:
                cut = stack.index(dep)
                witness = stack[cut:]
                return sorted(witness) if len(witness) > 1 else witness
            if state == 0:
                found = visit(dep)
                if found is not None:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for tid in sorted(graph.tasks):
        if color.get(tid, 0) == 0:
            found = visit(tid)
            if found is not None:
                return found
    return None


def topological_order(graph: SubTaskGraph) -> list[str]:
    """Deterministic topological order of task ids.

    Every edge ``(j, i)`` places ``j`` before ``i``; simultaneously-ready
    tasks are emitted in lexicographic id order.  Requires a valid graph.
    """
    report = validate_graph(graph)
    if not report.ok:
        raise InvalidGraph(report.describe())

    indegree = {tid: len(task.require_data) for tid, task in graph.tasks.items()}
    dependents: dict[str, list[str]] = {tid: [] for tid in graph.tasks}
    for j, i in graph.edges:
        dependents[j].append(i)

    ready = [tid for tid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        tid = heapq.heappop(ready)
        order.append(tid)
        for nxt in dependents[tid]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(ready, nxt)
    return order


def neighbors(graph: SubTaskGraph, task_id: str) -> set[str]:
    """Direct predecessors of ``task_id`` (never transitive ancestors)."""
    if task_id not in graph.tasks:
        raise UnknownTask(task_id)
    return set(graph.tasks[task_id].require_data)


def descendants(graph: SubTaskGraph, task_id: str) -> set[str]:
    """All tasks reachable from ``task_id`` along require_data edges."""
    if task_id not in graph.tasks:
        raise UnknownTask(task_id)
    out: set[str] = set()
    frontier = [task_id]
    while frontier:
        node = frontier.pop()
        for succ in graph.successors(node):
            if succ not in out:
                out.add(succ)
                frontier.append(succ)
    return out


def serialize_graph(graph: SubTaskGraph) -> dict:
    """The graph as a plan-template dict (template field order, task order kept)."""
    return {
        "main_task": graph.main_task,
        "global_constraints": list(graph.global_constraints),
        "sub_tasks": {
            tid: {
                "content": task.content,
                "tool": list(task.tool_names),
                "parameters": [dict(p) if isinstance(p, Mapping) else p for p in task.parameters],
                "local_constraints": list(task.local_constraints),
                "require_data": list(task.require_data),
            }
            for tid, task in graph.tasks.items()
        },
    }


def canonical_dump(graph: SubTaskGraph) -> str:
    """Stable textual dump of the graph (fixed key order, 2-space indent)."""
    return json.dumps(serialize_graph(graph), indent=2, ensure_ascii=False)


_DOT_COLORS = {
    "pending": "lightgray",
    "running": "gold",
    "done": "palegreen",
    "failed": "lightcoral",
    "blocked": "plum",
    "awaiting_gate": "lightskyblue",
}


def to_dot(graph: SubTaskGraph, statuses: Mapping[str, str] | None = None) -> str:
    """Graphviz DOT export; nodes colored by status when one is supplied."""
    lines = ["digraph subtasks {", "  rankdir=LR;"]
    for tid, task in graph.tasks.items():
        label = task.content.replace('"', "'")
        if len(label) > 48:
            label = label[:45] + "..."
        attrs = [f'label="{tid}\\n{label}"']
        if statuses and tid in statuses:
            color = _DOT_COLORS.get(statuses[tid], "white")
            attrs.append(f'style=filled fillcolor="{color}"')
        lines.append(f'  "{tid}" [{" ".join(attrs)}];')
    for j, i in graph.edges:
        lines.append(f'  "{j}" -> "{i}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def build_graph(
    tasks: Iterable[SubTask],
    main_task: str = "",
    global_constraints: Iterable[str] = (),
) -> SubTaskGraph:
    """Assemble a graph from task objects (test/tooling convenience)."""
    return SubTaskGraph(
        main_task=main_task,
        global_constraints=tuple(global_constraints),
        tasks={t.id: t for t in tasks},
    )
