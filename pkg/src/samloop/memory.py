"""Scoped memory (task / task-group / global) and the append-only history tape.

Layout::

    <task>/.scifi/memory/task-<run-id>.md     task scope, one file per run
    <task>/.scifi/memory/group.md             task-group scope
    <store-root>/global.md                    global scope
    <task>/.scifi/history/<run-id>.log        history tape, JSON lines

Memory files are Markdown. Each entry is wrapped in ``<!-- entry ... -->`` /
``<!-- /entry -->`` markers under its section heading, so the file stays
readable while parsing stays exact.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from ._files import append_durable, atomic_write, dump_line, lock_for
from .clock import SystemClock, iso
from .errors import AllProvidersFailed, ForbiddenWriter, NoUsableModel, StoreCorrupt

log = logging.getLogger(__name__)

SCOPE_KINDS = ("task", "task-group", "global")
SECTIONS = ("failure-patterns", "explored-paths", "findings", "suggestions")
SECTION_HEADINGS = {
    "failure-patterns": "Failure patterns",
    "explored-paths": "Explored paths",
    "findings": "Findings",
    "suggestions": "Suggestions",
}
AUTHOR_PHASES = ("pre-scan", "work", "review", "final-review")

# phase -> scopes it may write; phases not listed write nothing
WRITER_MATRIX = {
    "review": frozenset({"task"}),
    "final-review": frozenset({"task-group", "global"}),
}

HISTORY_KINDS = ("iteration-status", "judgment", "direction-change", "tool-exec")
HISTORY_FIELDS = ("seq", "run", "iteration", "node", "kind", "payload", "ts")

_OPEN_RE = re.compile(
    r"^<!-- entry id=(\d+) section=([a-z-]+) phase=([a-z-]+) at=(\S+)( skipped)? -->$"
)
_CLOSE = "<!-- /entry -->"
_MARKER_LINE = re.compile(r"^(\\*)(<!-- /?entry\b.*)$")


def can_write(phase: str, scope_kind: str) -> bool:
    return scope_kind in WRITER_MATRIX.get(phase, frozenset())


@dataclass(frozen=True)
class MemoryScope:
    kind: str
    key: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCOPE_KINDS:
            raise ValueError(f"unknown memory scope {self.kind!r}")
        if self.kind == "global" and self.key is not None:
            raise ValueError("global memory takes no key")
        if self.kind != "global" and not self.key:
            raise ValueError(f"{self.kind} memory needs a key")

    @classmethod
    def task(cls, run_id: str) -> "MemoryScope":
        return cls("task", run_id)

    @classmethod
    def group(cls, task_id: str) -> "MemoryScope":
        return cls("task-group", task_id)

    @classmethod
    def global_(cls) -> "MemoryScope":
        return cls("global")

    def label(self) -> str:
        return self.kind if self.key is None else f"{self.kind}:{self.key}"


@dataclass(frozen=True)
class MemoryEntry:
    scope: MemoryScope
    section: str
    body: str
    updated_at: str
    author_phase: str
    id: int = 0
    skipped: bool = False


def _escape(body: str) -> str:
    return "\n".join(
        "\\" + line if _MARKER_LINE.match(line) else line for line in body.split("\n")
    )


def _unescape(body: str) -> str:
    out = []
    for line in body.split("\n"):
        m = _MARKER_LINE.match(line)
        out.append(line[1:] if m and m.group(1) else line)
    return "\n".join(out)


def _title(scope: MemoryScope) -> str:
    if scope.kind == "task":
        return f"# Task memory (run {scope.key})"
    if scope.kind == "task-group":
        return f"# Task-group memory ({scope.key})"
    return "# Global memory"


def render_memory_file(scope: MemoryScope, entries: list[MemoryEntry]) -> str:
    out = [_title(scope), ""]
    for section in SECTIONS:
        out += [f"## {SECTION_HEADINGS[section]}", ""]
        for e in sorted((e for e in entries if e.section == section), key=lambda e: e.id):
            flag = " skipped" if e.skipped else ""
            out += [
                f"<!-- entry id={e.id} section={e.section} phase={e.author_phase} at={e.updated_at}{flag} -->",
                _escape(e.body),
                _CLOSE,
                "",
            ]
    return "\n".join(out)


def parse_memory_file(path: Path, scope: MemoryScope) -> list[MemoryEntry]:
    entries = []
    current = None
    body: list[str] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        if current is None:
            m = _OPEN_RE.match(line)
            if m:
                current = (m, lineno)
                body = []
            elif line.startswith("<!-- "):
                raise StoreCorrupt(path, f"line {lineno}: unrecognised marker")
            continue
        if line == _CLOSE:
            m, _ = current
            if m.group(2) not in SECTIONS:
                raise StoreCorrupt(path, f"line {current[1]}: unknown section {m.group(2)!r}")
            entries.append(
                MemoryEntry(
                    scope=scope,
                    section=m.group(2),
                    body=_unescape("\n".join(body)),
                    updated_at=m.group(4),
                    author_phase=m.group(3),
                    id=int(m.group(1)),
                    skipped=bool(m.group(5)),
                )
            )
            current = None
        else:
            body.append(line)
    if current is not None:
        raise StoreCorrupt(path, f"line {current[1]}: entry never closed")
    return sorted(entries, key=lambda e: e.id)


def render_entries(entries: list[MemoryEntry]) -> str:
    """Compact prompt rendering of memory entries."""
    if not entries:
        return "(empty)"
    return "\n".join(f"- [{e.section}] {e.body}" for e in entries)


class MemoryStore:
    def __init__(self, state_dir: str | Path, global_root: str | Path, clock=None):
        self.state_dir = Path(state_dir)
        self.global_root = Path(global_root)
        self.clock = clock or SystemClock()

    def path_for(self, scope: MemoryScope) -> Path:
        if scope.kind == "task":
            return self.state_dir / "memory" / f"task-{scope.key}.md"
        if scope.kind == "task-group":
            return self.state_dir / "memory" / "group.md"
        return self.global_root / "global.md"

    def read_memory(self, scope: MemoryScope) -> list[MemoryEntry]:
        path = self.path_for(scope)
        if not path.exists():
            return []
        return parse_memory_file(path, scope)

    def update_memory(
        self, scope: MemoryScope, section: str, body: str, author_phase: str, skipped: bool = False
    ) -> str:
        """Write an entry. ``suggestions`` keeps only the latest entry; the one
        it replaces moves to ``explored-paths``. Other sections append."""
        if author_phase not in AUTHOR_PHASES:
            raise ValueError(f"unknown author phase {author_phase!r}")
        if not can_write(author_phase, scope.kind):
            raise ForbiddenWriter(author_phase, scope.kind)
        if section not in SECTIONS:
            raise ValueError(f"unknown memory section {section!r}")
        if not body.strip():
            raise ValueError("memory entries need a non-empty body")
        path = self.path_for(scope)
        with lock_for(path):
            entries = parse_memory_file(path, scope) if path.exists() else []
            next_id = max((e.id for e in entries), default=0) + 1
            if section == "suggestions":
                entries = [
                    MemoryEntry(scope, "explored-paths", f"superseded suggestion: {e.body}", e.updated_at,
                                e.author_phase, e.id, e.skipped)
                    if e.section == "suggestions" else e
                    for e in entries
                ]
            entry = MemoryEntry(scope, section, body.strip(), iso(self.clock.now()), author_phase, next_id, skipped)
            atomic_write(path, render_memory_file(scope, entries + [entry]))
        return f"{scope.label()}#{next_id}"

    # history

    def history(self, run_id: str) -> "HistoryTape":
        return HistoryTape(self.state_dir / "history" / f"{run_id}.log", run_id)

    def read_history(self, run_id: str, kind: str | None = None, node_id: str | None = None) -> list["HistoryEvent"]:
        return self.history(run_id).read(kind, node_id)


@dataclass(frozen=True)
class HistoryEvent:
    sequence: int
    run_id: str
    iteration: int
    node_id: str
    kind: str
    payload: str
    timestamp: str

    def to_record(self) -> dict:
        return {
            "seq": self.sequence,
            "run": self.run_id,
            "iteration": self.iteration,
            "node": self.node_id,
            "kind": self.kind,
            "payload": self.payload,
            "ts": self.timestamp,
        }


def read_history_file(path: str | Path) -> list[HistoryEvent]:
    path = Path(path)
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise StoreCorrupt(path, f"line {lineno}: truncated record")
            try:
                rec = json.loads(line)
                events.append(
                    HistoryEvent(rec["seq"], rec["run"], rec["iteration"], rec["node"], rec["kind"], rec["payload"], rec["ts"])
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise StoreCorrupt(path, f"line {lineno}: {exc}") from None
    for i, event in enumerate(events, start=1):
        if event.sequence != i:
            raise StoreCorrupt(path, f"sequence {event.sequence} where {i} was expected")
    return events


class HistoryTape:
    """Append-only event log for one run. There is no update or delete."""

    def __init__(self, path: str | Path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self._cache: tuple[int, int] | None = None  # (file size, last seq)

    def _last_sequence(self) -> int:
        if not self.path.exists():
            return 0
        size = self.path.stat().st_size
        if self._cache and self._cache[0] == size:
            return self._cache[1]
        events = read_history_file(self.path)
        return events[-1].sequence if events else 0

    def append(self, iteration: int, node_id: str, kind: str, payload: str, timestamp: float) -> int:
        if kind not in HISTORY_KINDS:
            raise ValueError(f"unknown history event kind {kind!r}")
        with lock_for(self.path):
            seq = self._last_sequence() + 1
            event = HistoryEvent(seq, self.run_id, iteration, node_id, kind, payload, iso(timestamp))
            append_durable(self.path, dump_line(event.to_record()))
            self._cache = (self.path.stat().st_size, seq)
        return seq

    def read(self, kind: str | None = None, node_id: str | None = None) -> list[HistoryEvent]:
        if not self.path.exists():
            return []
        return [
            e for e in read_history_file(self.path)
            if (kind is None or e.kind == kind) and (node_id is None or e.node_id == node_id)
        ]


def render_history(events: list[HistoryEvent], limit: int = 20) -> str:
    shown = [e for e in events if e.kind != "tool-exec"][-limit:]
    if not shown:
        return "(no history yet)"
    return "\n".join(f"- #{e.sequence} it{e.iteration} {e.node_id} {e.kind}: {e.payload}" for e in shown)


def finalize(result, store: MemoryStore, session, *, run_id: str, task_id: str, rank: int = 1):
    """Final task review: distil task memory and history into task-group and
    global suggestions. Degrades to flagged stub entries when no model can
    answer or its reply is unusable."""
    from . import prompts

    task_entries = store.read_memory(MemoryScope.task(run_id))
    events = store.read_history(run_id)
    request = prompts.final_review_request(result, task_entries, events)
    skipped_reason = None
    texts = {}
    try:
        reply = session.complete(request, rank)
        data = prompts.parse_json_object(reply.content)
        texts = {k: str(data.get(k) or "").strip() for k in ("task_group", "global")}
        if not all(texts.values()):
            raise ValueError("final review reply lacks task_group/global text")
    except (NoUsableModel, AllProvidersFailed) as exc:
        skipped_reason = f"no model available ({exc})"
    except ValueError as exc:
        skipped_reason = f"final review reply unusable ({exc})"
    if skipped_reason:
        log.warning("final review skipped: %s", skipped_reason)
        stub = f"distillation skipped: {skipped_reason}; run {run_id} ended {result.outcome} after {result.total_iterations} iterations"
        texts = {"task_group": stub, "global": stub}
    group_scope = MemoryScope.group(task_id)
    global_scope = MemoryScope.global_()
    store.update_memory(group_scope, "suggestions", texts["task_group"], "final-review", skipped=bool(skipped_reason))
    store.update_memory(global_scope, "suggestions", texts["global"], "final-review", skipped=bool(skipped_reason))
    group = [e for e in store.read_memory(group_scope) if e.section == "suggestions"]
    glob = [e for e in store.read_memory(global_scope) if e.section == "suggestions"]
    return group[-1:], glob[-1:]
