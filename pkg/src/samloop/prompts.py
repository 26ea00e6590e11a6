"""Prompt assembly for the agents and parsing of their structured replies.

Every prompt is built from explicit inputs only (task text, memory, history,
skills), which keeps requests byte-stable for replay. Each first user message
starts with a ``Phase:``/``Node:``/``Iteration:`` header; scripted backends
key their rules on it.
"""

from __future__ import annotations

import json
import re

from .gateway import CompletionRequest, PHASE_ROLE
from .memory import render_entries, render_history
from .sam import SamDocument, extract_expectation, render_for_agent

SHELL_TOOL = {
    "name": "shell",
    "description": "Run a shell command inside the task sandbox. The task folder is the working directory.",
    "parameters": {
        "type": "object",
        "properties": {
            "command": {"type": "string"},
            "timeout": {"type": "number", "description": "seconds"},
        },
        "required": ["command"],
    },
}
FINISH_TOOL = {
    "name": "finish",
    "description": "End the work phase and report whether the node's to-do is complete.",
    "parameters": {
        "type": "object",
        "properties": {
            "status": {"type": "string", "enum": ["completed", "not-completed"]},
            "summary": {"type": "string"},
        },
        "required": ["status", "summary"],
    },
}

PRESCAN_SYSTEM = """You are the pre-scan agent of an unattended task loop.
Read the task tree, memory and history, then plan the next iteration.
Reply with one JSON object and nothing else:
{"order": [pending node ids, best first], "dependencies": [["before-id", "after-id"], ...], "context": "notes for the work agent"}
"order" must list every pending node except the root exactly once."""

WORK_SYSTEM = """You are the work agent of an unattended task loop.
Complete the to-do of the target node using the `shell` tool; commands run
without confirmation inside a sandbox where only the task folder and declared
mounts are visible. When done, or when you cannot make progress, call
`finish` with status completed or not-completed and a short summary.
An independent reviewer will check the expectation afterwards."""

REVIEW_SYSTEM = """You are the review agent of an unattended task loop.
Decide whether the expectation below is met. Verify it yourself with the
`shell` tool; do not trust the work agent's summary. Verification commands
must not modify files. Finish with one JSON object and nothing else:
{"verdict": "pass" | "fail", "reason": "...", "suggested_fixes": "...", "rank": "up" | "down" | null}
Use "rank": "up" when the work model looks too weak for this task."""

FINAL_REVIEW_SYSTEM = """You are the final review agent. Distil the run's task memory and
history into advice for future runs. Reply with one JSON object:
{"task_group": "suggestions for re-runs of this task", "global": "system-level suggestions"}"""

PLAN_REPAIR = 'Your reply could not be used ({error}). Reply with the JSON object only.'
REVIEW_REPAIR = 'Your reply could not be used ({error}). Reply with the verdict JSON object only.'
WORK_NUDGE = "No tool was called. Use `shell` to act or `finish` to end the phase."

_FENCED_JSON = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def parse_json_object(text: str) -> dict:
    """First JSON object in a model reply; fenced blocks are unwrapped."""
    text = text or ""
    m = _FENCED_JSON.search(text)
    if m:
        text = m.group(1)
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in reply")
    try:
        obj, _ = json.JSONDecoder().raw_decode(text[start:])
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValueError("reply is not a JSON object")
    return obj


def header(phase: str, node_id: str, iteration: int) -> str:
    return f"Phase: {phase}\nNode: {node_id}\nIteration: {iteration}\n"


def request(phase: str, messages: list[dict], tools: list[dict] | None = None) -> CompletionRequest:
    return CompletionRequest(role=PHASE_ROLE[phase], phase=phase, messages=messages, tools=list(tools or []))


def tree_outline(doc: SamDocument, statuses: dict[str, str]) -> str:
    rows = []
    for node in doc.nodes():
        depth = node.id.count("/")
        rows.append(f"{'  ' * depth}- {node.id} {node.title} [{statuses.get(node.id, 'pending')}]")
    return "\n".join(rows)


def prescan_messages(
    doc: SamDocument,
    statuses: dict[str, str],
    iteration: int,
    memories: dict[str, list],
    history: list,
    previous: str,
) -> list[dict]:
    pending = [n.id for n in doc.nodes() if statuses.get(n.id) != "done"]
    body = [
        header("pre-scan", doc.root.id, iteration),
        "## Task tree\n" + tree_outline(doc, statuses),
        "## Pending nodes\n" + ", ".join(pending),
        "## Root task\n" + render_for_agent(doc, doc.root.id),
    ]
    for label in ("task", "task-group", "global"):
        body.append(f"## {label} memory\n" + render_entries(memories.get(label, [])))
    body.append("## History\n" + render_history(history))
    body.append("## Previous iteration\n" + (previous or "(none)"))
    return [{"role": "system", "content": PRESCAN_SYSTEM}, {"role": "user", "content": "\n".join(body)}]


def work_messages(doc: SamDocument, node_id: str, iteration: int, plan, skills: list[tuple[str, str]], slice_seconds: float) -> list[dict]:
    body = [
        header("work", node_id, iteration),
        f"Time slice: {slice_seconds:g} s. Model rank: {plan.work_rank}.",
        "## Target\n" + render_for_agent(doc, node_id),
    ]
    if node_id != doc.root.id:
        body.append("## Whole task\n" + tree_outline(doc, {}))
    if plan.carried_context:
        body.append("## Carried context\n" + plan.carried_context)
    if skills:
        body.append("## Skills\n" + "\n\n".join(f"### {name}\n{text}" for name, text in skills))
    return [{"role": "system", "content": WORK_SYSTEM}, {"role": "user", "content": "\n".join(body)}]


def review_messages(doc: SamDocument, node_id: str, iteration: int, claim, history: list) -> list[dict]:
    node = doc.node(node_id)
    trace = "\n".join(f"- {t['call']} -> {t['digest']}" for t in claim.tool_trace) or "(no tool calls)"
    body = [
        header("review", node_id, iteration),
        f"## Node\n{node.title} [{node.id}]",
        f"## To-do (for reference)\n{node.todo}",
        # the expectation is taken from the parsed task file, never from the claim
        f"## Expectation\n{extract_expectation(doc, node_id)}",
        f"## Work agent claim\nstatus: {claim.claim}\nsummary: {claim.narrative or '(none)'}",
        "## Tool trace\n" + trace,
        "## History\n" + render_history(history),
    ]
    return [{"role": "system", "content": REVIEW_SYSTEM}, {"role": "user", "content": "\n".join(body)}]


def final_review_request(result, task_entries: list, events: list) -> CompletionRequest:
    verdicts = "\n".join(f"- {node}: {v.outcome} {v.reason}".rstrip() for node, v in sorted(result.verdicts.items()))
    body = [
        header("final-review", result.root_id, result.total_iterations),
        f"Run {result.run_id} ended: {result.outcome} after {result.total_iterations} iterations.",
        "## Verdicts\n" + (verdicts or "(none)"),
        "## Task memory\n" + render_entries(task_entries),
        "## History\n" + render_history(events, limit=50),
    ]
    return request("final-review", [{"role": "system", "content": FINAL_REVIEW_SYSTEM}, {"role": "user", "content": "\n".join(body)}])


def tool_result_text(exit_code: int, output: str, timed_out: bool = False) -> str:
    head = f"exit code: {exit_code}" + (" (timed out)" if timed_out else "")
    return f"{head}\n{output}" if output else head
