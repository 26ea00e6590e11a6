"""The pre-scan -> work -> review loop.

Each iteration plans against the whole task tree, works on one node, and has
an independent review check that node's expectation. A node is done only on a
review pass in the same iteration; a parent is only targeted once all of its
children are done. The run ends when the root passes or a hard limit fires.

All continuity between iterations flows through the stores (memory, history,
the checkpoint file), so a run can be resumed from disk at any iteration
boundary.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from . import prompts
from ._files import atomic_write
from .clock import SystemClock, iso
from .errors import (
    AllProvidersFailed,
    GatewayExhausted,
    LimitExceeded,
    MalformedPlan,
    NoUsableModel,
    SandboxError,
    SandboxFailure,
    StoreCorrupt,
    TamperDetected,
)
from .memory import MemoryScope, MemoryStore
from .sam import SamDocument, TaskMetadata, assert_unmodified

log = logging.getLogger(__name__)

MIN_SLICE = 30.0
OUTCOMES = ("pass", "fail", "timeout", "limit-exceeded")
FALSE_POSITIVE = "false-positive: "


@dataclass(frozen=True)
class Plan:
    target_node: str
    subtask_order: tuple[str, ...]
    dependencies: tuple[tuple[str, str], ...]
    work_rank: int
    carried_context: str
    fallback: bool = False

    def digest(self) -> str:
        data = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(data.encode()).hexdigest()[:16]


@dataclass
class WorkClaim:
    node_id: str
    claim: str  # completed | not-completed
    narrative: str
    tool_trace: list[dict] = field(default_factory=list)
    timed_out: bool = False
    model: str | None = None


@dataclass(frozen=True)
class Verdict:
    outcome: str
    reason: str
    suggested_fixes: str = ""

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown verdict outcome {self.outcome!r}")
        if self.outcome == "pass" and self.suggested_fixes:
            raise ValueError("a pass verdict carries no fixes")
        if self.outcome == "fail" and not self.reason:
            raise ValueError("a fail verdict needs a reason")


@dataclass
class IterationRecord:
    iteration: int  # run-wide, 1-based
    index: int  # per node, 1-based
    node_id: str
    plan_digest: str
    work_model: str | None
    claim: str
    verdict: Verdict
    started_at: str
    ended_at: str
    tokens: int = 0
    cost: float = 0.0


@dataclass
class RunConfig:
    run_id: str
    max_iterations: int
    wall_time_limit: float
    store: MemoryStore
    session: object  # GatewaySession or ReplaySession
    sandbox: object  # anything with exec(command, timeout) -> ExecResult
    task_id: str = "task"
    clock: object = field(default_factory=SystemClock)
    skills: list[tuple[str, str]] = field(default_factory=list)
    work_rank: int = 1
    control_rank: int = 1
    work_slice: float | None = None
    tool_timeout: float = 600.0
    work_max_turns: int = 40
    review_max_turns: int = 8
    plan_retries: int = 2
    review_retries: int = 2
    protocol_retries: int = 2
    state_path: Path | None = None
    after_iteration: Callable[["RunState"], None] | None = None
    # re-hashes the task file; replay swaps in a check driven by the recording
    task_check: Callable[[SamDocument], object] = assert_unmodified

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.wall_time_limit <= 0:
            raise ValueError("hard limits must be positive")

    @staticmethod
    def limits(metadata: TaskMetadata, defaults: dict | None = None) -> dict:
        """Hard limits: explicit task metadata wins over configured defaults."""
        defaults = defaults or {}
        out = {}
        for key in ("max_iterations", "wall_time_limit"):
            if key in metadata.explicit_keys or key not in defaults:
                out[key] = getattr(metadata, key)
            else:
                out[key] = defaults[key]
        return out

    def base_slice(self) -> float:
        if self.work_slice is not None:
            return self.work_slice
        return max(MIN_SLICE, self.wall_time_limit / self.max_iterations)


@dataclass
class RunState:
    run_id: str
    started_at: float
    statuses: dict[str, str]
    iteration: int = 0
    attempts: dict[str, int] = field(default_factory=dict)
    records: list[IterationRecord] = field(default_factory=list)
    verdicts: dict[str, Verdict] = field(default_factory=dict)
    previous: str = ""
    ranks: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunState":
        data = json.loads(text)
        data["records"] = [
            IterationRecord(**{**r, "verdict": Verdict(**r["verdict"])}) for r in data["records"]
        ]
        data["verdicts"] = {k: Verdict(**v) for k, v in data["verdicts"].items()}
        return cls(**data)


def load_state(path: str | Path) -> RunState:
    path = Path(path)
    try:
        return RunState.from_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise StoreCorrupt(path, f"unreadable run state: {exc}") from None


@dataclass
class TaskRunResult:
    run_id: str
    root_id: str
    outcome: str  # pass | limit-exceeded | gateway-exhausted | sandbox-failure | tamper
    records: list[IterationRecord]
    verdicts: dict[str, Verdict]
    statuses: dict[str, str]
    total_iterations: int
    wall_time: float
    stop_kind: str | None = None

    @property
    def passed(self) -> bool:
        return self.outcome == "pass"


def check_limits(state: RunState, config: RunConfig, now: float) -> str | None:
    """Stop kind, or None to continue. Evaluated before every iteration."""
    if state.iteration >= config.max_iterations:
        return "iterations"
    if now - state.started_at >= config.wall_time_limit:
        return "wall-time"
    if getattr(config.session, "exhausted", False):
        return "budget"
    return None


def _sha(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _assistant_message(resp) -> dict:
    msg = {"role": "assistant", "content": resp.content}
    if resp.tool_calls:
        msg["tool_calls"] = [{"id": c.id, "name": c.name, "arguments": c.arguments} for c in resp.tool_calls]
    return msg


def _stable_topo(order: list[str], deps: list[tuple[str, str]]) -> list[str]:
    """Topological sort that keeps ``order`` wherever the edges allow."""
    after: dict[str, set[str]] = {n: set() for n in order}
    for before, later in deps:
        after[later].add(before)
    done: list[str] = []
    left = list(order)
    while left:
        for n in left:
            if after[n] <= set(done):
                done.append(n)
                left.remove(n)
                break
        else:
            raise MalformedPlan("dependencies form a cycle")
    return done


class LoopEngine:
    def __init__(self, doc: SamDocument, config: RunConfig, state: RunState | None = None):
        self.doc = doc
        self.config = config
        self.store = config.store
        self.session = config.session
        self.clock = config.clock
        self.history = self.store.history(config.run_id)
        self.task_scope = MemoryScope.task(config.run_id)
        if state is None:
            state = RunState(
                run_id=config.run_id,
                started_at=self.clock.now(),
                statuses={n.id: "pending" for n in doc.nodes()},
            )
        self.state = state
        self.session.ranks.update(state.ranks)
        self.session.on_rank_revised = self._rank_revised
        self._iteration_usage = [0, 0.0]
        self._node = doc.root.id

    # -- plumbing ------------------------------------------------------------

    def _event(self, node_id: str, kind: str, payload) -> None:
        if not isinstance(payload, str):
            payload = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        self.history.append(self.state.iteration, node_id, kind, payload, self.clock.now())

    def _rank_revised(self, role, old, new, reason, caller) -> None:
        self.state.ranks[role] = new
        if old is None:
            old = self.config.work_rank if role == "work" else self.config.control_rank
        self._event(self._node, "direction-change", {
            "change": "rank", "role": role, "from": old, "to": new, "by": caller, "reason": reason,
        })

    def _call(self, request, rank):
        try:
            resp = self.session.complete(request, rank)
        except (NoUsableModel, AllProvidersFailed) as exc:
            raise GatewayExhausted(f"{request.phase}: {exc}") from exc
        usage = resp.usage or {}
        self._iteration_usage[0] += int(usage.get("prompt_tokens", 0)) + int(usage.get("completion_tokens", 0))
        self._iteration_usage[1] += resp.cost
        return resp

    def _exec(self, command: str, timeout: float, phase: str):
        try:
            result = self.config.sandbox.exec(command, timeout)
        except (SandboxError, OSError) as exc:
            raise SandboxFailure(f"sandbox exec failed: {exc}") from exc
        self._event(self._node, "tool-exec", {
            "phase": phase,
            "command": command,
            "exit_code": result.exit_code,
            "output": result.output,
            "timed_out": result.timed_out,
        })
        return result

    def _verify_task(self) -> None:
        try:
            self.config.task_check(self.doc)
        except TamperDetected as exc:
            self._event(self._node, "direction-change", {"change": "tamper", "expected": exc.expected, "actual": exc.actual})
            raise

    def _control_rank(self) -> int:
        return self.session.rank_for("control", self.config.control_rank)

    def _work_rank(self) -> int:
        return self.session.rank_for("work", self.config.work_rank)

    def slice_for(self, now: float) -> float:
        remaining = self.config.wall_time_limit - (now - self.state.started_at)
        return max(0.0, min(self.config.base_slice(), remaining))

    # -- phases --------------------------------------------------------------

    def _pending(self) -> list[str]:
        return [n.id for n in self.doc.nodes() if n.id != self.doc.root.id and self.state.statuses[n.id] != "done"]

    def _check_plan(self, data: dict, pending: list[str]) -> tuple[list[str], list[tuple[str, str]], str]:
        order = data.get("order") or []
        if not isinstance(order, list) or not all(isinstance(x, str) for x in order):
            raise MalformedPlan("'order' must be a list of node ids")
        unknown = [x for x in order if x not in pending]
        if unknown:
            raise MalformedPlan(f"'order' names nodes that are not pending: {unknown}")
        if len(set(order)) != len(order):
            raise MalformedPlan("'order' repeats a node")
        order = order + [x for x in pending if x not in order]
        deps = []
        for pair in data.get("dependencies") or []:
            if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, str) for x in pair)):
                raise MalformedPlan("each dependency must be a [before, after] pair")
            if pair[0] not in self.state.statuses or pair[1] not in self.state.statuses:
                raise MalformedPlan(f"dependency {pair} names an unknown node")
            if pair[0] in pending and pair[1] in pending:
                deps.append((pair[0], pair[1]))
        # children must finish before their parent; refuse dependencies that contradict that
        edges = list(deps)
        for nid in order:
            edges += [(c.id, nid) for c in self.doc.node(nid).children if c.id in pending]
        _stable_topo(order, edges)
        context = data.get("context") or ""
        if not isinstance(context, str):
            raise MalformedPlan("'context' must be text")
        return _stable_topo(order, deps), deps, context

    def _target(self, order: list[str], deps: list[tuple[str, str]]) -> str:
        done = {k for k, v in self.state.statuses.items() if v == "done"}
        for nid in order:
            node = self.doc.node(nid)
            if all(c.id in done for c in node.children) and all(b in done for b, a in deps if a == nid):
                return nid
        return self.doc.root.id

    def pre_scan(self) -> Plan:
        self._node = self.doc.root.id
        self.session.set_context(iteration=self.state.iteration, node=self._node)
        memories = {
            "task": self.store.read_memory(self.task_scope),
            "task-group": self.store.read_memory(MemoryScope.group(self.config.task_id)),
            "global": self.store.read_memory(MemoryScope.global_()),
        }
        pending = self._pending()
        messages = prompts.prescan_messages(
            self.doc, self.state.statuses, self.state.iteration, memories,
            self.history.read(), self.state.previous,
        )
        order, deps, context, fallback = None, [], "", False
        for attempt in range(self.config.plan_retries + 1):
            resp = self._call(prompts.request("pre-scan", messages), self._control_rank())
            try:
                order, deps, context = self._check_plan(prompts.parse_json_object(resp.content), pending)
                break
            except (ValueError, MalformedPlan) as exc:
                error = str(exc)
                messages = messages + [
                    {"role": "assistant", "content": resp.content},
                    {"role": "user", "content": prompts.PLAN_REPAIR.format(error=error)},
                ]
        if order is None:
            fallback = True
            order, deps = pending, []
            self._event(self._node, "direction-change", {
                "change": "plan-fallback", "reason": f"pre-scan output unusable: {error}", "order": "document",
            })
        carried = []
        if memories["task"]:
            carried.append("Task memory:\n" + prompts.render_entries(memories["task"]))
        if self.state.previous:
            carried.append("Previous iteration: " + self.state.previous)
        if context.strip():
            carried.append(context.strip())
        return Plan(
            target_node=self._target(order, deps),
            subtask_order=tuple(order),
            dependencies=tuple(deps),
            work_rank=self._work_rank(),
            carried_context="\n\n".join(carried),
            fallback=fallback,
        )

    def work_phase(self, node_id: str, plan: Plan) -> WorkClaim:
        self._node = node_id
        self.session.set_context(iteration=self.state.iteration, node=node_id)
        start = self.clock.now()
        slice_s = self.slice_for(start)
        deadline = start + slice_s
        messages = prompts.work_messages(self.doc, node_id, self.state.iteration, plan, self.config.skills, slice_s)
        tools = [prompts.SHELL_TOOL, prompts.FINISH_TOOL]
        trace: list[dict] = []
        model = None
        protocol_errors = 0

        def claim(status: str, narrative: str, timed_out: bool = False) -> WorkClaim:
            return WorkClaim(node_id, status, narrative, trace, timed_out, model)

        for _ in range(self.config.work_max_turns):
            if self.clock.now() >= deadline:
                return claim("not-completed", f"work slice of {slice_s:g} s expired", timed_out=True)
            resp = self._call(prompts.request("work", messages, tools), plan.work_rank)
            model = resp.model
            messages = messages + [_assistant_message(resp)]
            if not resp.tool_calls:
                protocol_errors += 1
                if protocol_errors > self.config.protocol_retries:
                    return claim("not-completed", "tool protocol: no usable tool call after retries")
                messages.append({"role": "user", "content": prompts.WORK_NUDGE})
                continue
            for call in resp.tool_calls:
                error = None
                if call.name == "finish":
                    status = call.arguments.get("status")
                    if status in ("completed", "not-completed"):
                        return claim(status, str(call.arguments.get("summary") or resp.content or ""))
                    error = "finish needs status 'completed' or 'not-completed'"
                elif call.name == "shell":
                    command = call.arguments.get("command")
                    if not isinstance(command, str) or not command.strip():
                        error = "shell needs a non-empty 'command' string"
                    else:
                        remaining = deadline - self.clock.now()
                        if remaining <= 0:
                            return claim("not-completed", f"work slice of {slice_s:g} s expired", timed_out=True)
                        timeout = min(self.config.tool_timeout, remaining)
                        asked = call.arguments.get("timeout")
                        if isinstance(asked, (int, float)) and asked > 0:
                            timeout = min(timeout, float(asked))
                        result = self._exec(command, timeout, "work")
                        text = prompts.tool_result_text(result.exit_code, result.output, result.timed_out)
                        trace.append({"call": f"shell: {command}", "digest": _sha(text)})
                        messages.append({"role": "tool", "tool_call_id": call.id, "content": text})
                        if result.timed_out and timeout >= remaining:
                            return claim("not-completed", f"work slice of {slice_s:g} s expired", timed_out=True)
                        continue
                else:
                    error = f"unknown tool {call.name!r}; available: shell, finish"
                protocol_errors += 1
                messages.append({"role": "tool", "tool_call_id": call.id, "content": f"error: {error}"})
            if protocol_errors > self.config.protocol_retries:
                return claim("not-completed", "tool protocol: malformed tool calls after retries")
        return claim("not-completed", f"turn limit of {self.config.work_max_turns} reached")

    def _parse_verdict(self, data: dict) -> tuple[Verdict, str | None]:
        outcome = data.get("verdict", data.get("outcome"))
        if outcome not in ("pass", "fail"):
            raise ValueError("'verdict' must be 'pass' or 'fail'")
        reason = str(data.get("reason") or "").strip()
        fixes = str(data.get("suggested_fixes") or "").strip()
        rank = data.get("rank")
        if rank not in (None, "up", "down"):
            raise ValueError("'rank' must be 'up', 'down' or null")
        if outcome == "pass":
            return Verdict("pass", reason or "expectation met"), rank
        return Verdict("fail", reason or "expectation not met", fixes), rank

    def review_phase(self, node_id: str, claim: WorkClaim) -> Verdict:
        self._node = node_id
        self.session.set_context(iteration=self.state.iteration, node=node_id)
        self._verify_task()
        if claim.timed_out:
            return Verdict(
                "timeout", claim.narrative,
                "The previous attempt ran out of time; split the work or run long steps in the background.",
            )
        messages = prompts.review_messages(self.doc, node_id, self.state.iteration, claim, self.history.read())
        verdict, rank, repairs = None, None, 0
        for _ in range(self.config.review_max_turns):
            resp = self._call(prompts.request("review", messages, [prompts.SHELL_TOOL]), self._control_rank())
            messages = messages + [_assistant_message(resp)]
            if resp.tool_calls:
                for call in resp.tool_calls:
                    command = call.arguments.get("command") if call.name == "shell" else None
                    if not isinstance(command, str) or not command.strip():
                        text = "error: only the shell tool with a 'command' is available"
                    else:
                        result = self._exec(command, self.config.tool_timeout, "review")
                        text = prompts.tool_result_text(result.exit_code, result.output, result.timed_out)
                    messages.append({"role": "tool", "tool_call_id": call.id, "content": text})
                continue
            try:
                verdict, rank = self._parse_verdict(prompts.parse_json_object(resp.content))
                break
            except ValueError as exc:
                repairs += 1
                if repairs > self.config.review_retries:
                    verdict = Verdict("fail", f"review output unreadable: {exc}")
                    break
                messages.append({"role": "user", "content": prompts.REVIEW_REPAIR.format(error=exc)})
        if verdict is None:
            verdict = Verdict("fail", "review reached its turn limit without a verdict")
        if verdict.outcome == "fail" and claim.claim == "completed" and not verdict.reason.startswith(FALSE_POSITIVE):
            verdict = Verdict("fail", FALSE_POSITIVE + verdict.reason, verdict.suggested_fixes)
        if verdict.outcome == "pass":
            # the review's own commands must not have touched the task file either
            self._verify_task()
        if rank is not None:
            current = self._work_rank()
            self.session.revise_rank("work", current + (1 if rank == "up" else -1), verdict.reason, "review")
        return verdict

    # -- iteration and run ---------------------------------------------------

    def run_sam_iteration(self, started: float) -> IterationRecord:
        st = self.state
        st.iteration += 1
        self._iteration_usage = [0, 0.0]
        plan = self.pre_scan()
        node_id = plan.target_node
        st.statuses[node_id] = "in-progress"
        st.attempts[node_id] = st.attempts.get(node_id, 0) + 1
        claim = self.work_phase(node_id, plan)
        verdict = self.review_phase(node_id, claim)
        if verdict.outcome == "fail":
            self.store.update_memory(self.task_scope, "suggestions", verdict.suggested_fixes or verdict.reason, "review")
        elif verdict.outcome == "timeout":
            self.store.update_memory(
                self.task_scope, "failure-patterns",
                f"{node_id}: {claim.narrative} (iteration {st.iteration})", "review",
            )
        self._event(node_id, "judgment", asdict(verdict))
        if verdict.outcome == "pass":
            st.statuses[node_id] = "done"
        st.verdicts[node_id] = verdict
        ended = self.clock.now()
        record = IterationRecord(
            iteration=st.iteration,
            index=st.attempts[node_id],
            node_id=node_id,
            plan_digest=plan.digest(),
            work_model=claim.model,
            claim=claim.claim,
            verdict=verdict,
            started_at=iso(started),
            ended_at=iso(ended),
            tokens=self._iteration_usage[0],
            cost=round(self._iteration_usage[1], 10),
        )
        self._event(node_id, "iteration-status", {
            "status": st.statuses[node_id],
            "attempt": record.index,
            "outcome": verdict.outcome,
            "claim": claim.claim,
            "plan": record.plan_digest,
            "model": claim.model,
            "rank": plan.work_rank,
        })
        st.records.append(record)
        st.previous = f"iteration {st.iteration} on {node_id}: claimed {claim.claim}; review {verdict.outcome}: {verdict.reason}"
        st.ranks = dict(self.session.ranks)
        self.checkpoint()
        return record

    def checkpoint(self) -> None:
        if self.config.state_path is not None:
            atomic_write(Path(self.config.state_path), self.state.to_json())

    def result(self, outcome: str, now: float, stop_kind: str | None = None) -> TaskRunResult:
        st = self.state
        return TaskRunResult(
            run_id=st.run_id,
            root_id=self.doc.root.id,
            outcome=outcome,
            records=list(st.records),
            verdicts=dict(st.verdicts),
            statuses=dict(st.statuses),
            total_iterations=st.iteration,
            wall_time=round(now - st.started_at, 6),
            stop_kind=stop_kind,
        )

    def run(self) -> TaskRunResult:
        root = self.doc.root.id
        outcome_for = {LimitExceeded: "limit-exceeded", GatewayExhausted: "gateway-exhausted",
                       SandboxFailure: "sandbox-failure", TamperDetected: "tamper"}
        now = None
        try:
            while self.state.statuses[root] != "done":
                now = self.clock.now()
                kind = check_limits(self.state, self.config, now)
                if kind == "budget":
                    raise GatewayExhausted("model budgets exhausted")
                if kind is not None:
                    self.state.verdicts[root] = Verdict("limit-exceeded", kind)
                    raise LimitExceeded(kind)
                self.run_sam_iteration(now)
                if self.config.after_iteration is not None:
                    self.config.after_iteration(self.state)
        except (LimitExceeded, GatewayExhausted, SandboxFailure, TamperDetected) as exc:
            self.checkpoint()
            end = self.clock.now()
            exc.result = self.result(outcome_for[type(exc)], end, getattr(exc, "kind", None))
            raise
        return self.result("pass", self.clock.now())


def run_task(doc: SamDocument, config: RunConfig, state: RunState | None = None) -> TaskRunResult:
    """Run ``doc`` to completion, or resume from ``state``. Raises a
    ``RunStopped`` subclass (or TamperDetected) carrying ``.result`` when the
    run ends without a root pass."""
    return LoopEngine(doc, config, state).run()
