"""Run orchestration: validate, sandbox, loop, finalize; plus resume and replay.

Per-run files live under ``<task folder>/.scifi``::

    runs/<run-id>/manifest.json   what replay needs: task digest, config,
                                  skills, rank bounds, memory snapshot
    runs/<run-id>/state.json      checkpoint after every iteration
    runs/<run-id>/gateway.json    budget counters and cursors at that point
    runs/<run-id>/clock.tape      every clock reading, in order
    audit/<run-id>.log            every model call
    history/<run-id>.log          the history tape
    memory/                       task and task-group memory
"""

from __future__ import annotations

import json
import logging
import secrets
import shutil
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from ._files import atomic_write
from .audit import AuditLog, open_replay
from .clock import RecordingClock, ReplayClock, iso
from .config import Config
from .engine import RunConfig, RunState, TaskRunResult, load_state, run_task
from .errors import (
    EXIT_OK,
    EXIT_USAGE,
    AuditMissing,
    ReplayDiverged,
    RunStopped,
    SamloopError,
    StoreCorrupt,
    TamperDetected,
)
from .gateway import Gateway
from .memory import MemoryScope, MemoryStore, finalize, read_history_file
from .sam import SamDocument, load_sam, validate
from .sandbox import STATE_DIR_NAME, ExecResult, make_driver, resolve_resources
from .sandbox import start as start_sandbox
from .skills import BUNDLED_SKILLS, load_library, select_skills

log = logging.getLogger(__name__)


class TaskInvalid(SamloopError):
    exit_code = EXIT_USAGE

    def __init__(self, path, violations) -> None:
        self.violations = violations
        lines = "\n".join(f"  {v.rule} [{v.subject}]: {v.message}" for v in violations)
        super().__init__(f"{path} is not a valid task file:\n{lines}")


class RunExists(SamloopError):
    exit_code = EXIT_USAGE


@dataclass(frozen=True)
class RunPaths:
    task_file: Path
    state_dir: Path
    run_dir: Path
    audit: Path
    history: Path

    @classmethod
    def for_run(cls, task_file: str | Path, run_id: str) -> "RunPaths":
        task_file = Path(task_file).resolve()
        state = task_file.parent / STATE_DIR_NAME
        return cls(
            task_file=task_file,
            state_dir=state,
            run_dir=state / "runs" / run_id,
            audit=state / "audit" / f"{run_id}.log",
            history=state / "history" / f"{run_id}.log",
        )

    @property
    def manifest(self) -> Path:
        return self.run_dir / "manifest.json"

    @property
    def state(self) -> Path:
        return self.run_dir / "state.json"

    @property
    def gateway_state(self) -> Path:
        return self.run_dir / "gateway.json"

    @property
    def task_snapshot(self) -> Path:
        return self.run_dir / "task.md"

    @property
    def clock_tape(self) -> Path:
        return self.run_dir / "clock.tape"

    def task_memory(self, run_id: str) -> Path:
        return self.state_dir / "memory" / f"task-{run_id}.md"


def new_run_id() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S") + "-" + secrets.token_hex(3)


def task_id_for(path: str | Path) -> str:
    return Path(path).stem


def check_task(path: str | Path) -> SamDocument:
    doc = load_sam(path)
    violations = validate(doc)
    if violations:
        raise TaskInvalid(path, violations)
    return doc


def initial_work_rank(doc: SamDocument, gateway: Gateway) -> int:
    """Model preference first, then the difficulty hint, else the lowest work rank."""
    ranks = gateway.ranks("work") or [1]
    pref = doc.metadata.model_preference
    if pref:
        try:
            return gateway.model(pref).rank
        except SamloopError:
            log.warning("preferred model %r is not configured; ignoring", pref)
    if doc.metadata.difficulty_hint is not None:
        return min(max(doc.metadata.difficulty_hint, ranks[0]), ranks[-1])
    return ranks[0]


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise StoreCorrupt(path, str(exc)) from None


def _write_json(path: Path, data: dict) -> None:
    atomic_write(path, json.dumps(data, indent=1, sort_keys=True) + "\n")


def _read_text(path: Path) -> str | None:
    return path.read_text(encoding="utf-8") if path.exists() else None


@dataclass
class RunReport:
    run_id: str
    result: TaskRunResult
    exit_code: int
    paths: RunPaths
    group_entries: list = field(default_factory=list)
    global_entries: list = field(default_factory=list)
    audit_records: int = 0
    gateway_calls: int = 0
    error: str | None = None

    def summary(self) -> dict:
        r = self.result
        return {
            "run_id": self.run_id,
            "outcome": r.outcome,
            "stop": r.stop_kind,
            "exit_code": self.exit_code,
            "iterations": r.total_iterations,
            "wall_time": r.wall_time,
            "verdicts": {n: v.outcome for n, v in sorted(r.verdicts.items())},
            "audit_records": self.audit_records,
            "history": str(self.paths.history),
            "audit": str(self.paths.audit),
            "task_memory": str(self.paths.task_memory(self.run_id)),
            "state_dir": str(self.paths.state_dir),
            "error": self.error,
        }


def execute_run(
    task_path: str | Path,
    config: Config,
    *,
    run_id: str | None = None,
    resume: bool = False,
    driver: str | None = None,
    clock_source=None,
    overrides: dict | None = None,
    after_iteration=None,
) -> RunReport:
    """parse -> validate -> resolve resources -> start sandbox -> loop ->
    finalize -> teardown. With ``resume`` the run continues from its last
    checkpoint instead of starting over."""
    doc = check_task(task_path)
    library = load_library([BUNDLED_SKILLS, *config.skills_dirs])
    skills = list(zip(doc.metadata.skills, select_skills(doc.metadata, library)))
    sandbox_cfg = config.sandbox
    spec = resolve_resources(
        doc.metadata,
        Path(doc.source_path).resolve().parent,
        image=sandbox_cfg.get("image", "host"),
        cpu_seconds=sandbox_cfg.get("cpu_seconds"),
        memory_bytes=sandbox_cfg.get("memory_bytes"),
        env_allowlist=sandbox_cfg.get("env_allowlist") or (),
    )
    gateway = config.build_gateway()

    state: RunState | None = None
    if resume:
        if not run_id:
            raise RunExists("resuming needs a run id")
        paths = RunPaths.for_run(task_path, run_id)
        try:
            manifest = _read_json(paths.manifest)
            state = load_state(paths.state) if paths.state.exists() else None
        except FileNotFoundError:
            raise RunExists(f"run {run_id} has no manifest under {paths.run_dir}") from None
        if manifest["task_digest"] != doc.source_digest:
            raise TamperDetected(manifest["task_digest"], doc.source_digest)
        snapshot = manifest["config"]
        if paths.gateway_state.exists():
            gateway.restore_state(_read_json(paths.gateway_state)["gateway"])
    else:
        run_id = run_id or new_run_id()
        paths = RunPaths.for_run(task_path, run_id)
        if paths.manifest.exists():
            raise RunExists(f"run {run_id} already exists; pass --resume to continue it")
        limits = RunConfig.limits(doc.metadata, config.defaults)
        limits.update({k: v for k, v in (overrides or {}).items() if v is not None})
        ranks = gateway.ranks("control") or [1]
        snapshot = {
            "max_iterations": limits["max_iterations"],
            "wall_time_limit": limits["wall_time_limit"],
            "work_rank": initial_work_rank(doc, gateway),
            "control_rank": config.run_default("control_rank") or ranks[0],
            "work_slice": limits.get("work_slice", config.run_default("work_slice")),
            "tool_timeout": config.run_default("tool_timeout"),
            "work_max_turns": config.run_default("work_max_turns"),
            "review_max_turns": config.run_default("review_max_turns"),
            "task_id": task_id_for(task_path),
        }
        manifest = {
            "run_id": run_id,
            "task_file": str(paths.task_file),
            "task_digest": doc.source_digest,
            "created": iso(datetime.now(timezone.utc).timestamp()),
            "config": snapshot,
            "skills": [[n, b] for n, b in skills],
            "rank_bounds": {},
            "memory_snapshot": {
                "task-group": _read_text(paths.state_dir / "memory" / "group.md"),
                "global": _read_text(config.store_root / "global.md"),
            },
            "sandbox": {"mounts": [str(m) for m in spec.mounts], "network": spec.network, "gpu": spec.gpu,
                        "job_system": spec.job_system, "image": spec.image},
            "outcome": None,
        }
        paths.run_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(paths.task_file, paths.task_snapshot)

    clock = RecordingClock(paths.clock_tape, clock_source)
    store = MemoryStore(paths.state_dir, config.store_root, clock)
    audit = AuditLog(paths.audit, run_id)
    session = gateway.session(audit)
    if not resume:
        manifest["rank_bounds"] = {role: list(session.rank_bounds(role)) for role in ("control", "work")}
        _write_json(paths.manifest, manifest)
    elif paths.gateway_state.exists():
        saved = _read_json(paths.gateway_state)
        if audit.count > saved["audit_count"]:
            # killed mid-iteration: the partial iteration's calls stay on record
            log.warning("run %s was interrupted mid-iteration; %d audit records belong to it",
                        run_id, audit.count - saved["audit_count"])
            store.history(run_id).append(
                state.iteration if state else 0, doc.root.id, "direction-change",
                json.dumps({"change": "resume", "orphaned_audit_records": audit.count - saved["audit_count"]}),
                clock.now(),
            )

    def checkpoint(run_state: RunState) -> None:
        _write_json(paths.gateway_state, {
            "gateway": gateway.export_state(),
            "audit_count": audit.count,
            "iteration": run_state.iteration,
        })
        if after_iteration is not None:
            after_iteration(run_state)

    handle = start_sandbox(spec, make_driver(driver or sandbox_cfg.get("driver", "auto")))
    rc = RunConfig(
        run_id=run_id,
        store=store,
        session=session,
        sandbox=handle,
        clock=clock,
        skills=skills,
        state_path=paths.state,
        after_iteration=checkpoint,
        **snapshot,
    )
    error = None
    try:
        try:
            result = run_task(doc, rc, state)
            exit_code = EXIT_OK
        except (RunStopped, TamperDetected) as exc:
            result, exit_code, error = exc.result, exc.exit_code, str(exc)
        finally:
            handle.teardown()
        group, glob = finalize(result, store, session, run_id=run_id, task_id=snapshot["task_id"],
                               rank=snapshot["control_rank"])
    finally:
        clock.close()
    manifest["outcome"] = result.outcome
    manifest["exit_code"] = exit_code
    manifest["iterations"] = result.total_iterations
    manifest["audit_count"] = audit.count
    manifest["history_count"] = len(store.read_history(run_id))
    _write_json(paths.manifest, manifest)
    return RunReport(run_id, result, exit_code, paths, group, glob, audit.count, session.calls, error)


# -- replay -----------------------------------------------------------------


class ReplaySandbox:
    """Serves recorded tool executions back in order."""

    def __init__(self, events):
        self.records = [json.loads(e.payload) for e in events]
        self.position = 0

    def exec(self, command: str, timeout: float) -> ExecResult:
        if self.position >= len(self.records):
            raise ReplayDiverged(f"replay ran more tool commands than the {len(self.records)} recorded")
        rec = self.records[self.position]
        self.position += 1
        if rec["command"] != command:
            raise ReplayDiverged(f"tool command {self.position} differs: recorded {rec['command']!r}, replayed {command!r}")
        return ExecResult(rec["exit_code"], rec["output"], "", 0.0, rec["timed_out"])


class ReplayTaskCheck:
    """Raises TamperDetected at the point where the recording detected an
    edited task file (the replayed tools never touch the disk)."""

    def __init__(self, recorded, tape):
        self.recorded = recorded
        self.tape = tape

    def __call__(self, doc) -> None:
        position = len(self.tape.read())
        if position < len(self.recorded):
            event = self.recorded[position]
            payload = json.loads(event.payload) if event.kind == "direction-change" else {}
            if payload.get("change") == "tamper":
                raise TamperDetected(payload["expected"], payload["actual"])


@dataclass
class ReplayReport:
    run_id: str
    match: bool
    recorded_events: int
    replayed_events: int
    first_difference: int | None
    outcome: str
    recorded_outcome: str | None
    calls_replayed: int
    calls_recorded: int

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.match else ReplayDiverged.exit_code

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "match": self.match,
            "history_events": [self.recorded_events, self.replayed_events],
            "first_difference": self.first_difference,
            "outcome": self.outcome,
            "recorded_outcome": self.recorded_outcome,
            "calls": [self.calls_recorded, self.calls_replayed],
            "exit_code": self.exit_code,
        }


def replay_run(task_path: str | Path, run_id: str, scratch: str | Path | None = None) -> ReplayReport:
    """Re-execute a recorded run against its audit log, clock tape and tool
    record, in a scratch store, and compare history tapes byte for byte."""
    paths = RunPaths.for_run(task_path, run_id)
    if not paths.manifest.exists():
        raise AuditMissing(run_id)
    manifest = _read_json(paths.manifest)
    # the run may itself have edited the task file; replay from the copy taken at start
    doc = load_sam(paths.task_snapshot if paths.task_snapshot.exists() else task_path)
    if doc.source_digest != manifest["task_digest"]:
        raise TamperDetected(manifest["task_digest"], doc.source_digest)
    session = open_replay(paths.audit, run_id, manifest.get("audit_count"),
                          {k: tuple(v) for k, v in manifest["rank_bounds"].items()})
    recorded = read_history_file(paths.history) if paths.history.exists() else []
    own_scratch = scratch is None
    scratch = Path(tempfile.mkdtemp(prefix="samloop-replay-") if own_scratch else scratch)
    try:
        state_dir = scratch / STATE_DIR_NAME
        global_root = scratch / "global"
        snap = manifest["memory_snapshot"]
        if snap.get("task-group") is not None:
            atomic_write(state_dir / "memory" / "group.md", snap["task-group"])
        if snap.get("global") is not None:
            atomic_write(global_root / "global.md", snap["global"])
        clock = ReplayClock(paths.clock_tape)
        store = MemoryStore(state_dir, global_root, clock)
        snapshot = manifest["config"]
        rc = RunConfig(
            run_id=run_id,
            store=store,
            session=session,
            sandbox=ReplaySandbox([e for e in recorded if e.kind == "tool-exec"]),
            clock=clock,
            skills=[tuple(s) for s in manifest["skills"]],
            task_check=ReplayTaskCheck(recorded, store.history(run_id)),
            **snapshot,
        )
        try:
            result = run_task(doc, rc)
        except (RunStopped, TamperDetected) as exc:
            result = exc.result
        finalize(result, store, session, run_id=run_id, task_id=snapshot["task_id"], rank=snapshot["control_rank"])
        original = paths.history.read_bytes() if paths.history.exists() else b""
        replayed_path = store.history(run_id).path
        replayed = replayed_path.read_bytes() if replayed_path.exists() else b""
        a, b = original.splitlines(), replayed.splitlines()
        first = next((i + 1 for i, (x, y) in enumerate(zip(a, b)) if x != y), None)
        if first is None and len(a) != len(b):
            first = min(len(a), len(b)) + 1
        return ReplayReport(
            run_id=run_id,
            match=original == replayed and session.remaining == 0,
            recorded_events=len(a),
            replayed_events=len(b),
            first_difference=first,
            outcome=result.outcome,
            recorded_outcome=manifest.get("outcome"),
            calls_replayed=session.position,
            calls_recorded=len(session.records),
        )
    finally:
        if own_scratch:
            shutil.rmtree(scratch, ignore_errors=True)


def latest_run_id(task_path: str | Path) -> str | None:
    runs = RunPaths.for_run(task_path, "x").run_dir.parent
    if not runs.is_dir():
        return None
    manifests = [p for p in runs.glob("*/manifest.json")]
    if not manifests:
        return None
    return max(manifests, key=lambda p: (_read_json(p).get("created", ""), p.parent.name)).parent.name


def task_memory_for(task_path: str | Path, run_id: str, config: Config):
    paths = RunPaths.for_run(task_path, run_id)
    store = MemoryStore(paths.state_dir, config.store_root)
    return store.read_memory(MemoryScope.task(run_id)), store.read_history(run_id)
