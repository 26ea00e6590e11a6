"""Audit log of every model call, exact replay, and fine-tuning export.

One JSON object per line in ``<state>/audit/<run-id>.log``; field order is
fixed (see ``AUDIT_FIELDS``) so files are byte-stable.
"""

from __future__ import annotations

import copy
import difflib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

from ._files import append_durable, dump_line
from .errors import (
    AllProvidersFailed,
    AuditError,
    AuditMissing,
    NoUsableModel,
    ReplayDiverged,
    RequestMismatch,
    SequenceGap,
    StoreCorrupt,
)
from .gateway import CompletionRequest, CompletionResponse, SessionBase

AUDIT_FIELDS = (
    "seq", "run", "phase", "iteration", "node", "model", "rank", "request",
    "response", "attempts", "latency", "usage", "cost", "error", "started_at",
)


class AuditLog:
    """Append-only call log for one run. ``context`` tags records with the
    current iteration and node."""

    def __init__(self, path: str | Path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self.context: dict = {"iteration": None, "node": None}
        self._seq = len(load_audit(self.path)) if self.path.exists() else 0

    @property
    def count(self) -> int:
        return self._seq

    def record_call(
        self,
        *,
        phase: str,
        request: dict,
        response: dict | None,
        model: str | None = None,
        rank: int | None = None,
        attempts: list | tuple = (),
        latency: float = 0.0,
        usage: dict | None = None,
        cost: float = 0.0,
        error: str | None = None,
        started_at: float | None = None,
    ) -> int:
        seq = self._seq + 1
        record = {
            "seq": seq,
            "run": self.run_id,
            "phase": phase,
            "iteration": self.context.get("iteration"),
            "node": self.context.get("node"),
            "model": model,
            "rank": rank,
            "request": request,
            "response": response,
            "attempts": list(attempts),
            "latency": round(latency, 6),
            "usage": usage,
            "cost": cost,
            "error": error,
            "started_at": started_at,
        }
        try:
            append_durable(self.path, dump_line(record))
        except OSError as exc:
            raise AuditError(self.path, f"audit write failed: {exc}") from exc
        self._seq = seq
        return seq


def load_audit(path: str | Path) -> list[dict]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreCorrupt(path, f"line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict) or "seq" not in rec:
                raise StoreCorrupt(path, f"line {lineno}: not an audit record")
            records.append(rec)
    return records


def semantic_request(request: dict, rank: int | None) -> dict:
    """Request payload minus sequence-local identifiers (tool-call ids)."""
    req = copy.deepcopy(request)
    for msg in req.get("messages", []):
        msg.pop("tool_call_id", None)
        for call in msg.get("tool_calls") or []:
            call.pop("id", None)
    req["rank"] = rank
    return req


def _diff(recorded: dict, actual: dict, limit: int = 60) -> str:
    a = json.dumps(recorded, indent=1, sort_keys=True, ensure_ascii=False).splitlines()
    b = json.dumps(actual, indent=1, sort_keys=True, ensure_ascii=False).splitlines()
    lines = list(difflib.unified_diff(a, b, "recorded", "replayed", lineterm="", n=2))
    if len(lines) > limit:
        lines = lines[:limit] + [f"... ({len(lines) - limit} more diff lines)"]
    return "\n".join(lines)


class ReplaySession(SessionBase):
    """Stands in for a gateway session, answering from a recorded audit log."""

    def __init__(self, records: list[dict], rank_bounds: Mapping[str, tuple[int, int]], on_rank_revised=None):
        super().__init__(on_rank_revised)
        self.records = records
        self.position = 0
        self._bounds = {k: tuple(v) for k, v in rank_bounds.items()}

    def rank_bounds(self, role: str) -> tuple[int, int]:
        return self._bounds.get(role, (1, 1))

    @property
    def remaining(self) -> int:
        return len(self.records) - self.position

    def complete(self, request: CompletionRequest, rank: int) -> CompletionResponse:
        self.calls += 1
        if self.position >= len(self.records):
            raise ReplayDiverged(f"replay asked for call {self.position + 1} but only {len(self.records)} were recorded")
        rec = self.records[self.position]
        self.position += 1
        want = semantic_request(rec["request"], rec.get("rank"))
        got = semantic_request(request.to_dict(), rank)
        if want != got:
            raise RequestMismatch(rec["seq"], _diff(want, got))
        if rec.get("error") == "no-usable-model":
            self.exhausted = True
            raise NoUsableModel(request.role)
        if rec.get("error") == "all-providers-failed":
            raise AllProvidersFailed(rec.get("attempts") or [])
        return CompletionResponse.from_dict(rec["response"])


def open_replay(path: str | Path, run_id: str, expected_count: int | None = None, rank_bounds=None) -> ReplaySession:
    path = Path(path)
    if not path.exists():
        raise AuditMissing(run_id)
    records = load_audit(path)
    for i, rec in enumerate(records, start=1):
        if rec["seq"] != i:
            raise SequenceGap(i, rec["seq"])
        if rec.get("run") != run_id:
            raise StoreCorrupt(path, f"record {i} belongs to run {rec.get('run')!r}")
    if expected_count is not None and len(records) < expected_count:
        raise SequenceGap(len(records) + 1, None)
    return ReplaySession(records, rank_bounds or {})


# -- export -----------------------------------------------------------------

_CREDENTIAL_NAME = re.compile(r"KEY|TOKEN|SECRET|PASSWORD|PASSWD|CREDENTIAL", re.IGNORECASE)


@dataclass
class RedactionProfile:
    name: str
    secrets: dict[str, str] = field(default_factory=dict)

    def apply(self, value):
        if isinstance(value, str):
            for env_name, secret in self.secrets.items():
                if secret in value:
                    value = value.replace(secret, f"[REDACTED:{env_name}]")
            return value
        if isinstance(value, list):
            return [self.apply(v) for v in value]
        if isinstance(value, dict):
            return {k: self.apply(v) for k, v in value.items()}
        return value


def redaction_profile(name: str = "credentials", extra_env: tuple[str, ...] = (), environ=None) -> RedactionProfile:
    """``credentials`` scrubs values of credential-looking env vars (and any
    listed in ``extra_env``); ``none`` exports verbatim."""
    if name == "none":
        return RedactionProfile("none")
    if name != "credentials":
        raise ValueError(f"unknown redaction profile {name!r}")
    environ = os.environ if environ is None else environ
    secrets = {
        key: value
        for key, value in environ.items()
        if (key in extra_env or _CREDENTIAL_NAME.search(key)) and len(value) >= 4
    }
    # longest first so overlapping secrets redact fully
    return RedactionProfile(name, dict(sorted(secrets.items(), key=lambda kv: -len(kv[1]))))


def export_records(
    audit_path: str | Path,
    run_id: str,
    profile: RedactionProfile,
    history_path: str | Path | None = None,
) -> Iterator[dict]:
    """Yield (prompt, response, verdict-context) records for fine-tuning data."""
    audit_path = Path(audit_path)
    if not audit_path.exists():
        raise AuditMissing(run_id)
    verdicts: dict[tuple, dict] = {}
    if history_path is not None and Path(history_path).exists():
        from .memory import read_history_file

        for event in read_history_file(history_path):
            if event.kind == "judgment":
                try:
                    verdicts[(event.iteration, event.node_id)] = json.loads(event.payload)
                except json.JSONDecodeError:
                    verdicts[(event.iteration, event.node_id)] = {"text": event.payload}
    for rec in load_audit(audit_path):
        response = rec.get("response") or {}
        yield profile.apply({
            "seq": rec["seq"],
            "phase": rec["phase"],
            "model": rec.get("model"),
            "iteration": rec.get("iteration"),
            "node": rec.get("node"),
            "prompt": rec["request"].get("messages", []),
            "tools": [t.get("name") for t in rec["request"].get("tools", [])],
            "response": {"content": response.get("content"), "tool_calls": response.get("tool_calls", [])},
            "error": rec.get("error"),
            "verdict_context": verdicts.get((rec.get("iteration"), rec.get("node"))),
        })
