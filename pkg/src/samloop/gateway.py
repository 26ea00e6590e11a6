"""Model gateway: ranked model registry, round-robin selection, budget
enforcement, provider fallback, and the provider adapters.

Every completion goes through :meth:`Gateway.complete`, which writes exactly
one audit record per call (including failed calls) before anything is handed
back to the caller.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import httpx
import yaml

from .errors import (
    AllProvidersFailed,
    DuplicateName,
    ForbiddenCaller,
    GatewayError,
    NoUsableModel,
    ProviderError,
    ProviderTimeout,
    RateLimited,
    UnknownModel,
)

log = logging.getLogger(__name__)

ROLES = ("control", "work")
PHASES = ("pre-scan", "work", "review", "final-review", "ui-tool")
PHASE_ROLE = {
    "pre-scan": "control",
    "review": "control",
    "final-review": "control",
    "ui-tool": "control",
    "work": "work",
}
RANK_REVISERS = ("pre-scan", "review")


@dataclass
class ModelSpec:
    name: str
    provider: str
    rank: int
    roles: frozenset[str]
    budget: float | None = None  # cost ceiling, None = unlimited
    consumed: float = 0.0
    enabled: bool = True
    base_url: str | None = None
    api_key_env: str | None = None
    remote_id: str | None = None
    price_in: float = 0.0  # per 1000 prompt tokens
    price_out: float = 0.0  # per 1000 completion tokens
    flat_cost: float = 0.0  # charged when the provider reports no usage
    timeout: float = 120.0

    def __post_init__(self) -> None:
        self.roles = frozenset(self.roles)
        if self.rank < 1:
            raise ValueError(f"model {self.name}: rank must be >= 1")
        unknown = self.roles - set(ROLES)
        if unknown:
            raise ValueError(f"model {self.name}: unknown roles {sorted(unknown)}")
        if self.budget is not None and self.consumed >= self.budget:
            self.enabled = False

    def usable_for(self, role: str) -> bool:
        return self.enabled and role in self.roles


@dataclass(frozen=True)
class BudgetState:
    model: str
    consumed: float
    ceiling: float | None
    enabled: bool


@dataclass
class ToolCall:
    id: str
    name: str
    arguments: dict


@dataclass
class CompletionRequest:
    role: str
    phase: str
    messages: list[dict]
    tools: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CompletionResponse:
    content: str
    tool_calls: list[ToolCall] = field(default_factory=list)
    usage: dict | None = None
    finish_reason: str = "stop"
    model: str = ""
    cost: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CompletionResponse":
        data = dict(data)
        data["tool_calls"] = [ToolCall(**tc) for tc in data.get("tool_calls", [])]
        return cls(**data)


class Provider(Protocol):
    def complete(self, model: ModelSpec, request: CompletionRequest) -> CompletionResponse: ...


class AuditSink(Protocol):
    def record_call(self, *, phase: str, request: dict, response: dict | None, **extra: Any) -> int: ...


# -- scripted backend -------------------------------------------------------


INERT_CONTENT = "no rule matched"


@dataclass
class ScriptRule:
    response: dict
    phase: str | None = None
    contains: str | None = None
    pattern: str | None = None
    model: str | None = None
    once: bool = False

    def matches(self, model: ModelSpec, request: CompletionRequest, latest: str) -> bool:
        if self.phase is not None and self.phase != request.phase:
            return False
        if self.model is not None and self.model != model.name:
            return False
        if self.contains is not None and self.contains not in latest:
            return False
        if self.pattern is not None and not re.search(self.pattern, latest, re.MULTILINE):
            return False
        return True


_ERRORS = {"timeout": ProviderTimeout, "rate-limit": RateLimited, "transport": ProviderError}


class ScriptedBackend:
    """Deterministic provider answering from an ordered rule list.

    The first matching rule fires; ``once`` rules fire a single time. Calls
    that match nothing get an inert ``"no rule matched"`` reply.
    """

    def __init__(self, rules: Iterable[ScriptRule | dict] = ()):
        self.rules = [r if isinstance(r, ScriptRule) else ScriptRule(**r) for r in rules]
        self._fired: set[int] = set()
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []  # (model, phase)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        rules = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
        if isinstance(rules, dict):
            rules = rules.get("rules", [])
        return cls(rules)

    def complete(self, model: ModelSpec, request: CompletionRequest) -> CompletionResponse:
        latest = str(request.messages[-1].get("content") or "") if request.messages else ""
        with self._lock:
            self.calls.append((model.name, request.phase))
            chosen = None
            for i, rule in enumerate(self.rules):
                if rule.once and i in self._fired:
                    continue
                if rule.matches(model, request, latest):
                    if rule.once:
                        self._fired.add(i)
                    chosen = rule
                    break
        if chosen is None:
            return CompletionResponse(INERT_CONTENT, finish_reason="no-rule", model=model.name)
        reply = chosen.response
        if "error" in reply:
            raise _ERRORS.get(reply["error"], ProviderError)(f"scripted {reply['error']}")
        calls = [
            ToolCall(tc.get("id", f"call-{i + 1}"), tc["name"], dict(tc.get("arguments") or {}))
            for i, tc in enumerate(reply.get("tool_calls") or [])
        ]
        return CompletionResponse(
            content=str(reply.get("content", "")),
            tool_calls=calls,
            usage=reply.get("usage"),
            finish_reason="tool_calls" if calls else "stop",
            model=model.name,
        )


# -- HTTP chat-completions adapter -----------------------------------------


class ChatCompletionsProvider:
    """OpenAI-style ``/chat/completions`` with tools over HTTP.

    Works against hosted APIs and local servers that speak the same contract.
    The API key is read from the environment variable named in the model's
    ``api_key_env`` at call time and is never stored.
    """

    def __init__(self, client: httpx.Client | None = None):
        self.client = client or httpx.Client()

    @staticmethod
    def _wire_messages(messages: list[dict]) -> list[dict]:
        out = []
        for msg in messages:
            wire = {"role": msg["role"], "content": msg.get("content") or ""}
            if msg.get("tool_calls"):
                wire["tool_calls"] = [
                    {
                        "id": tc["id"],
                        "type": "function",
                        "function": {"name": tc["name"], "arguments": json.dumps(tc["arguments"])},
                    }
                    for tc in msg["tool_calls"]
                ]
            if msg["role"] == "tool":
                wire["tool_call_id"] = msg.get("tool_call_id", "")
            out.append(wire)
        return out

    def complete(self, model: ModelSpec, request: CompletionRequest) -> CompletionResponse:
        if not model.base_url:
            raise ProviderError(f"model {model.name} has no base_url")
        headers = {}
        if model.api_key_env:
            key = os.environ.get(model.api_key_env)
            if not key:
                raise ProviderError(f"environment variable {model.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        body: dict[str, Any] = {
            "model": model.remote_id or model.name,
            "messages": self._wire_messages(request.messages),
            **request.params,
        }
        if request.tools:
            body["tools"] = [{"type": "function", "function": t} for t in request.tools]
        url = model.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self.client.post(url, json=body, headers=headers, timeout=model.timeout)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise ProviderError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited(resp.text[:200])
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            msg = choice["message"]
            calls = []
            for tc in msg.get("tool_calls") or []:
                fn = tc["function"]
                args = fn.get("arguments") or "{}"
                calls.append(ToolCall(tc.get("id", ""), fn["name"], json.loads(args) if isinstance(args, str) else args))
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unreadable provider response: {exc}") from exc
        usage = data.get("usage")
        if usage:
            usage = {
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            }
        return CompletionResponse(
            content=msg.get("content") or "",
            tool_calls=calls,
            usage=usage,
            finish_reason=choice.get("finish_reason") or "stop",
            model=model.name,
        )


# -- gateway ----------------------------------------------------------------


class Gateway:
    """Shared model registry. Safe to use from several task runs at once."""

    def __init__(self, providers: dict[str, Provider] | None = None):
        self._providers: dict[str, Provider] = dict(providers or {})
        self._models: dict[str, ModelSpec] = {}
        self._cursors: dict[tuple[int, str], int] = {}
        self._lock = threading.RLock()

    # registry

    def add_provider(self, name: str, provider: Provider) -> None:
        self._providers[name] = provider

    def register_model(self, spec: ModelSpec) -> None:
        with self._lock:
            if spec.name in self._models:
                raise DuplicateName(f"model {spec.name!r} already registered")
            self._models[spec.name] = spec

    def model(self, name: str) -> ModelSpec:
        try:
            return self._models[name]
        except KeyError:
            raise UnknownModel(f"unknown model {name!r}") from None

    @property
    def models(self) -> list[ModelSpec]:
        return list(self._models.values())

    def bucket(self, rank: int) -> list[ModelSpec]:
        return [m for m in self._models.values() if m.rank == rank and m.enabled]

    def ranks(self, role: str) -> list[int]:
        return sorted({m.rank for m in self._models.values() if role in m.roles})

    def rank_order(self, rank: int) -> list[int]:
        """Search order: the requested rank, then higher ranks, then lower ones."""
        ranks = sorted({m.rank for m in self._models.values()})
        higher = [r for r in ranks if r > rank]
        lower = [r for r in ranks if r < rank][::-1]
        return [rank, *higher, *lower]

    def usable(self, role: str) -> bool:
        return any(m.usable_for(role) for m in self._models.values())

    # selection

    def _pick_at(self, role: str, rank: int, exclude: Iterable[str] = ()) -> ModelSpec | None:
        exclude = set(exclude)
        bucket = [m for m in self._models.values() if m.rank == rank]
        if not bucket:
            return None
        cursor = self._cursors.get((rank, role), 0)
        for step in range(len(bucket)):
            candidate = bucket[(cursor + step) % len(bucket)]
            if candidate.usable_for(role) and candidate.name not in exclude:
                self._cursors[(rank, role)] = (cursor + step + 1) % len(bucket)
                return candidate
        return None

    def select_model(self, role: str, rank: int, exclude: Iterable[str] = ()) -> ModelSpec:
        with self._lock:
            for r in self.rank_order(rank):
                picked = self._pick_at(role, r, exclude)
                if picked is not None:
                    return picked
        raise NoUsableModel(role)

    # budget

    def cost_of(self, model: ModelSpec, usage: dict | None) -> float:
        if not usage:
            return model.flat_cost
        return (usage.get("prompt_tokens", 0) * model.price_in + usage.get("completion_tokens", 0) * model.price_out) / 1000.0

    def charge_budget(self, name: str, cost: float) -> BudgetState:
        with self._lock:
            model = self.model(name)
            model.consumed += max(cost, 0.0)
            if model.budget is not None and model.consumed >= model.budget and model.enabled:
                model.enabled = False
                log.info("model %s exhausted its budget (%.4g/%.4g); disabled", name, model.consumed, model.budget)
            return BudgetState(name, model.consumed, model.budget, model.enabled)

    def export_state(self) -> dict:
        """Budget counters and rotation cursors, for resuming a run."""
        with self._lock:
            return {
                "models": {m.name: {"consumed": m.consumed, "enabled": m.enabled} for m in self._models.values()},
                "cursors": [[rank, role, pos] for (rank, role), pos in sorted(self._cursors.items())],
            }

    def restore_state(self, state: dict) -> None:
        with self._lock:
            for name, values in state.get("models", {}).items():
                if name in self._models:
                    self._models[name].consumed = values["consumed"]
                    self._models[name].enabled = values["enabled"]
            self._cursors = {(rank, role): pos for rank, role, pos in state.get("cursors", [])}

    # completion

    def complete(self, request: CompletionRequest, rank: int, audit: AuditSink) -> CompletionResponse:
        if audit is None:
            raise GatewayError("completion requested without an audit tap")
        started = time.time()
        attempts: list[dict] = []
        try:
            model = self.select_model(request.role, rank)
        except NoUsableModel:
            audit.record_call(
                phase=request.phase, request=request.to_dict(), response=None, model=None,
                rank=rank, attempts=[], latency=0.0, usage=None, cost=0.0,
                error="no-usable-model", started_at=started,
            )
            raise
        tried = [model.name]
        home_rank = model.rank
        stage = "first"
        response = None
        while True:
            provider = self._providers.get(model.provider)
            try:
                if provider is None:
                    raise ProviderError(f"no provider named {model.provider!r}")
                response = provider.complete(model, request)
                break
            except ProviderError as exc:
                attempts.append({"model": model.name, "error": getattr(exc, "kind", "transport"), "detail": str(exc)})
                log.warning("model %s failed (%s); trying fallback", model.name, exc)
            nxt = None
            with self._lock:
                if stage == "first":
                    stage = "alternate"
                    nxt = self._pick_at(request.role, home_rank, tried)
                if nxt is None and stage == "alternate":
                    stage = "fallback"
                    order = self.rank_order(rank)
                    for r in order[order.index(home_rank) + 1 :]:
                        nxt = self._pick_at(request.role, r, tried)
                        if nxt is not None:
                            break
                elif stage == "fallback":
                    nxt = None
            if nxt is None:
                audit.record_call(
                    phase=request.phase, request=request.to_dict(), response=None, model=None,
                    rank=rank, attempts=attempts, latency=time.time() - started, usage=None,
                    cost=0.0, error="all-providers-failed", started_at=started,
                )
                raise AllProvidersFailed(attempts)
            model = nxt
            tried.append(model.name)

        response.model = model.name
        response.cost = self.cost_of(model, response.usage)
        self.charge_budget(model.name, response.cost)
        audit.record_call(
            phase=request.phase, request=request.to_dict(), response=response.to_dict(),
            model=model.name, rank=rank, attempts=attempts, latency=time.time() - started,
            usage=response.usage, cost=response.cost, error=None, started_at=started,
        )
        return response

    def session(self, audit: AuditSink, on_rank_revised: Callable[[str, int, int, str, str], None] | None = None) -> "GatewaySession":
        return GatewaySession(self, audit, on_rank_revised)


class SessionBase:
    """Run-local state shared by live and replayed sessions: rank revisions,
    exhaustion flag, call counter."""

    def __init__(self, on_rank_revised=None):
        self.on_rank_revised = on_rank_revised
        self.ranks: dict[str, int] = {}
        self.exhausted = False
        self.calls = 0

    def set_context(self, **context) -> None:
        pass

    def rank_bounds(self, role: str) -> tuple[int, int]:
        raise NotImplementedError

    def rank_for(self, role: str, default: int) -> int:
        return self.ranks.get(role, default)

    def revise_rank(self, role: str, new_rank: int, reason: str, caller: str) -> int:
        if caller not in RANK_REVISERS:
            raise ForbiddenCaller(f"phase {caller!r} may not revise model ranks")
        lo, hi = self.rank_bounds(role)
        new_rank = min(max(new_rank, lo), hi)
        old = self.ranks.get(role)
        self.ranks[role] = new_rank
        if self.on_rank_revised is not None and old != new_rank:
            self.on_rank_revised(role, old, new_rank, reason, caller)
        return new_rank


class GatewaySession(SessionBase):
    """Per-run view of a gateway: owns the audit tap and run-local rank revisions."""

    def __init__(self, gateway: Gateway, audit, on_rank_revised=None):
        super().__init__(on_rank_revised)
        self.gateway = gateway
        self.audit = audit

    def set_context(self, **context) -> None:
        self.audit.context.update(context)

    def complete(self, request: CompletionRequest, rank: int) -> CompletionResponse:
        self.calls += 1
        try:
            return self.gateway.complete(request, rank, self.audit)
        except NoUsableModel:
            self.exhausted = True
            raise

    def rank_bounds(self, role: str) -> tuple[int, int]:
        ranks = self.gateway.ranks(role) or [1]
        return ranks[0], ranks[-1]
