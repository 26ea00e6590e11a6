"""YAML configuration: models, providers, sandbox and run defaults.

Example::

    store_root: ~/.samloop           # global memory and helper-tool audit logs
    skills_dirs: [./skills]          # added to the bundled skills
    defaults:
      max_iterations: 200            # used when the task file does not set it
      wall_time_limit: 3600
      work_slice: null               # null = max(30 s, wall / iterations)
      tool_timeout: 600
      control_rank: 1
    sandbox:
      driver: auto                   # auto | apptainer | namespace | local
      image: host                    # container image (apptainer) or 'host'
      env_allowlist: [LANG]
    providers:
      scripted: {type: scripted, script: rules.yaml}
      openai: {type: chat-completions}
    models:
      - {name: small, provider: openai, rank: 1, roles: [work],
         base_url: https://api.example.com/v1, api_key_env: EXAMPLE_KEY,
         remote_id: small-model, price_in: 0.1, price_out: 0.4, budget: 5.0}

Credentials are never written in the file; ``api_key_env`` names the
environment variable that holds them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import SamloopError
from .gateway import ChatCompletionsProvider, Gateway, ModelSpec, ScriptedBackend

CONFIG_ENV = "SAMLOOP_CONFIG"
STORE_ENV = "SAMLOOP_STORE"
DEFAULT_STORE = "~/.samloop"
RUN_DEFAULTS = {
    "work_slice": None,
    "tool_timeout": 600.0,
    "control_rank": None,
    "work_max_turns": 40,
    "review_max_turns": 8,
}
MODEL_KEYS = {
    "name", "provider", "rank", "roles", "budget", "consumed", "enabled", "base_url",
    "api_key_env", "remote_id", "price_in", "price_out", "flat_cost", "timeout",
}


class ConfigError(SamloopError):
    pass


@dataclass
class Config:
    path: Path | None = None
    store_root: Path = field(default_factory=lambda: Path(DEFAULT_STORE).expanduser())
    skills_dirs: list[Path] = field(default_factory=list)
    defaults: dict = field(default_factory=dict)
    sandbox: dict = field(default_factory=dict)
    providers: dict = field(default_factory=dict)
    models: list[dict] = field(default_factory=list)

    def run_default(self, key: str):
        return self.defaults.get(key, RUN_DEFAULTS.get(key))

    def build_gateway(self) -> Gateway:
        gateway = Gateway()
        for name, spec in self.providers.items():
            kind = spec.get("type", name)
            if kind == "scripted":
                if "script" in spec:
                    gateway.add_provider(name, ScriptedBackend.from_file(self._resolve(spec["script"])))
                else:
                    gateway.add_provider(name, ScriptedBackend(spec.get("rules") or []))
            elif kind == "chat-completions":
                gateway.add_provider(name, ChatCompletionsProvider())
            else:
                raise ConfigError(f"provider {name!r}: unknown type {kind!r}")
        for entry in self.models:
            unknown = set(entry) - MODEL_KEYS
            if unknown:
                raise ConfigError(f"model {entry.get('name')!r}: unknown keys {sorted(unknown)}")
            try:
                gateway.register_model(ModelSpec(**{**entry, "roles": frozenset(entry.get("roles", ()))}))
            except TypeError as exc:
                raise ConfigError(f"model entry {entry!r}: {exc}") from None
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return gateway

    def _resolve(self, value: str) -> Path:
        p = Path(value).expanduser()
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p


def load_config(path: str | Path | None = None, store_root: str | Path | None = None) -> Config:
    """Load from ``path``, else ``$SAMLOOP_CONFIG``, else an empty config.
    ``store_root`` (or ``$SAMLOOP_STORE``) overrides the file's value."""
    path = path or os.environ.get(CONFIG_ENV)
    data: dict = {}
    if path:
        path = Path(path).expanduser()
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    cfg = Config(path=Path(path) if path else None)
    cfg.defaults = dict(data.get("defaults") or {})
    cfg.sandbox = dict(data.get("sandbox") or {})
    cfg.providers = dict(data.get("providers") or {})
    cfg.models = list(data.get("models") or [])
    cfg.skills_dirs = [cfg._resolve(p) for p in data.get("skills_dirs") or []]
    override = store_root or os.environ.get(STORE_ENV)
    if override:
        cfg.store_root = Path(override).expanduser().resolve()
    else:
        cfg.store_root = cfg._resolve(str(data.get("store_root") or DEFAULT_STORE))
    return cfg
