"""Agent roles and prompt assembly.

Four roles cooperate in a pipeline: a manager decomposes the query into a
sub-task graph, executors run tool-calling loops per sub-task, a supervisor
rewrites a sub-task from its direct predecessors' outcomes, and a deliverer
synthesizes the final answer under the global constraints.

Prompt templates are external text assets with ``{{slot}}`` placeholders,
one set per deployment profile, wired through a per-profile manifest.
Rendering is pure: the same inputs always produce byte-identical prompts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Sequence

from .llm_gateway import Message
from .plan_model import NoPayload, SubTask, extract_plan_payload
from .tools import ToolSpec

ROLE_MANAGER = "manager"
ROLE_EXECUTOR = "executor"
ROLE_SUPERVISOR = "supervisor"
ROLE_DELIVERER = "deliverer"

DELIVER_INFERENCE = "inference"
DELIVER_REPORTING = "reporting"


class AgentError(Exception):
    pass


class EmptyNeighborhood(AgentError):
    """Supervisor rendering needs at least one neighbor outcome."""


class NothingToDeliver(AgentError):
    """Deliverer rendering needs at least one finished task outcome."""


class MalformedRewrite(AgentError):
    """The supervisor reply carried no usable rewrite payload."""


@dataclass(frozen=True)
class AgentConfig:
    """Role, prompt template, visible tools, backend, and turn budget."""

    role: str
    name: str
    system_template: str
    backend: Any
    tool_specs: tuple[ToolSpec, ...] = ()
    step_budget: int = 6

    def __post_init__(self):
        if self.role in (ROLE_SUPERVISOR, ROLE_DELIVERER) and self.tool_specs:
            raise ValueError(f"{self.role} agents never expose tool specs")
        if self.role == ROLE_EXECUTOR and not self.tool_specs:
            raise ValueError("executor agents need a nonempty tool list")
        if self.step_budget < 1:
            raise ValueError("step_budget must be >= 1")


@dataclass
class AgentState:
    """Per-task conversation state; history grows append-only."""

    history: list[Message] = field(default_factory=list)
    turn_count: int = 0

    def append(self, message: Message) -> None:
        self.history.append(message)


_SLOT_RE = re.compile(r"\{\{(\w+)\}\}")


def fill_slots(template: str, slots: Mapping[str, str]) -> str:
    def replace(match: re.Match) -> str:
        name = match.group(1)
        if name not in slots:
            raise KeyError(f"template slot {{{{{name}}}}} has no value")
        return slots[name]

    return _SLOT_RE.sub(replace, template)


def render_catalog(specs: Sequence[ToolSpec]) -> str:
    return "\n\n".join(spec.render_doc() for spec in specs)


class PromptKit:
    """Template set for one deployment profile.

    Loads the profile's manifest (role -> template file) from package
    assets, or from an explicit directory for custom profiles.
    """

    def __init__(self, name: str, manifest: Mapping[str, Any], texts: Mapping[str, str]):
        self.name = name
        self.manifest = dict(manifest)
        self._texts = dict(texts)
        self.single_global_constraint = bool(manifest.get("single_global_constraint", False))
        self.previous_task_block = bool(manifest.get("previous_task_block", False))
        self.deliverer_mode = manifest.get("deliverer_mode", DELIVER_INFERENCE)

    @classmethod
    def load(cls, profile_name: str) -> "PromptKit":
        root = resources.files("planweave").joinpath("templates", profile_name)
        manifest = json.loads(root.joinpath("manifest.json").read_text(encoding="utf-8"))
        texts: dict[str, str] = {}
        for entry in root.iterdir():
            if entry.name.endswith(".txt"):
                texts[entry.name] = entry.read_text(encoding="utf-8")
        return cls(profile_name, manifest, texts)

    def text(self, key: str) -> str:
        filename = self.manifest[key]
        return self._texts[filename]

    def executor_template(self, executor_name: str) -> str:
        filename = self.manifest["executors"][executor_name]
        return self._texts[filename]

    # -- manager ------------------------------------------------------------

    def manager_system(self, executor_catalog: Sequence[ToolSpec],
                       hint_mode: bool = False, one_shot: bool = False) -> str:
        key = "manager_oneshot" if one_shot else "manager"
        if hint_mode and f"{key}_hint" in self.manifest:
            key = f"{key}_hint"
        rule = self.text("single_global_rule").strip() if self.single_global_constraint else ""
        return fill_slots(self.text(key), {
            "executor_catalog": render_catalog(executor_catalog),
            "single_global_rule": rule,
        }).strip("\n") + "\n"

    def manager_messages(self, query: str, executor_catalog: Sequence[ToolSpec],
                         hint_mode: bool = False, one_shot: bool = False) -> tuple[Message, ...]:
        system = self.manager_system(executor_catalog, hint_mode, one_shot)
        return (Message("system", system), Message("user", f"User Query:\n{query}"))

    def render_manager_prompt(self, query: str, executor_catalog: Sequence[ToolSpec],
                              hint_mode: bool = False, one_shot: bool = False) -> str:
        messages = self.manager_messages(query, executor_catalog, hint_mode, one_shot)
        return "\n\n".join(m.content for m in messages)

    # -- supervisor ----------------------------------------------------------

    def supervisor_messages(self, task: SubTask, neighbor_outcomes: Mapping[str, str],
                            query_context: str) -> tuple[Message, ...]:
        if not neighbor_outcomes:
            raise EmptyNeighborhood(f"task {task.id!r} has no neighbor outcomes to reference")
        task_json = json.dumps(
            {
                "content": task.content,
                "tool": list(task.tool_names),
                "parameters": [dict(p) for p in task.parameters],
            },
            indent=4, ensure_ascii=False,
        )
        blocks = []
        for nid in sorted(neighbor_outcomes):
            blocks.append(f"Outcome of {nid}:\n{neighbor_outcomes[nid]}")
        user = fill_slots(self.text("supervisor_user"), {
            "task_json": task_json,
            "neighbor_outcomes_block": "\n\n".join(blocks),
            "query_context": query_context,
        })
        return (Message("system", self.text("supervisor")), Message("user", user))

    def render_supervisor_prompt(self, task: SubTask, neighbor_outcomes: Mapping[str, str],
                                 query_context: str) -> str:
        messages = self.supervisor_messages(task, neighbor_outcomes, query_context)
        return "\n\n".join(m.content for m in messages)

    # -- deliverer -----------------------------------------------------------

    def deliverer_messages(self, query: str, all_outcomes: Mapping[str, str],
                           global_constraints: Sequence, hint_mode: bool = False,
                           mode: str | None = None) -> tuple[Message, ...]:
        done = {tid: text for tid, text in all_outcomes.items() if text}
        if not done:
            raise NothingToDeliver("no finished task produced an outcome")
        mode = mode or self.deliverer_mode
        if mode == DELIVER_INFERENCE:
            key = "deliverer_hint" if hint_mode and "deliverer_hint" in self.manifest else "deliverer"
        else:
            key = "deliverer"
        system = self.text(key)

        outcome_blocks = [f"[{tid}]\n{text}" for tid, text in done.items()]
        slots = {
            "query": query,
            "outcomes_block": "\n\n".join(outcome_blocks),
        }
        user_template = self.text("deliverer_user")
        if "{{global_constraints_block}}" in user_template:
            texts = [getattr(c, "text", str(c)) for c in global_constraints]
            slots["global_constraints_block"] = "\n".join(f"- {t}" for t in texts) if texts else "- none stated"
        user = fill_slots(user_template, slots)
        return (Message("system", system), Message("user", user))

    def render_deliverer_prompt(self, query: str, all_outcomes: Mapping[str, str],
                                global_constraints: Sequence, hint_mode: bool = False,
                                mode: str | None = None) -> str:
        messages = self.deliverer_messages(query, all_outcomes, global_constraints, hint_mode, mode)
        return "\n\n".join(m.content for m in messages)

    # -- executor ------------------------------------------------------------

    def executor_messages(self, executor_name: str, task: SubTask, message: str,
                          local_constraints: Sequence, neighbor_outcomes: Mapping[str, str],
                          neighbor_contents: Mapping[str, str]) -> tuple[Message, ...]:
        system = self.executor_template(executor_name)
        slots: dict[str, str] = {
            "content": task.content,
            "message": message,
        }
        user_template = self.text("executor_user")
        if "{{local_constraints_block}}" in user_template:
            texts = [getattr(c, "text", str(c)) for c in local_constraints]
            slots["local_constraints_block"] = (
                "Local constraints:\n" + "\n".join(f"- {t}" for t in texts) + "\n"
            ) if texts else ""
        if "{{previous_tasks_block}}" in user_template:
            blocks = []
            for nid in sorted(neighbor_outcomes):
                blocks.append(
                    "Previous Task ID:\n{}\n\nPrevious Task Content:\n{}\n\nPrevious Task Result:\n{}".format(
                        nid, neighbor_contents.get(nid, ""), neighbor_outcomes[nid]
                    )
                )
            slots["previous_tasks_block"] = ("\n\n".join(blocks) + "\n\n") if blocks else ""
        user = fill_slots(user_template, slots)
        return (Message("system", system), Message("user", user))


def parse_supervisor_rewrite(reply: str, original: SubTask) -> SubTask:
    """Apply a rewrite reply to ``original``.

    Only ``content`` and ``parameters`` are taken from the payload; the id,
    tool list, dependencies, and local constraints never change, and a
    parameter list whose arity no longer matches the tool list is discarded.
    Raises :class:`MalformedRewrite` when no usable payload exists; callers
    fall back to the original task.
    """
    if not reply:
        raise MalformedRewrite("empty supervisor reply")
    try:
        payload = extract_plan_payload(reply)
        data = json.loads(payload)
    except (NoPayload, json.JSONDecodeError) as exc:
        raise MalformedRewrite(f"unparseable rewrite: {exc}") from exc
    if not isinstance(data, Mapping):
        raise MalformedRewrite("rewrite payload is not an object")

    content = data.get("content")
    parameters = data.get("parameters")
    if content is None and parameters is None:
        raise MalformedRewrite("rewrite carries neither content nor parameters")

    new_content = str(content) if content is not None else original.content
    new_parameters = original.parameters
    if isinstance(parameters, list) and len(parameters) == len(original.tool_names):
        new_parameters = tuple(p if isinstance(p, Mapping) else {"message": [str(p)]}
                               for p in parameters)
    return original.replace_rewrite(new_content, new_parameters)
