import pytest

from samloop.config import ConfigError, load_config
from samloop.gateway import CompletionRequest


class Sink:
    def record_call(self, **record):
        return 1


def write(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    return path


def test_paths_resolve_next_to_the_file(tmp_path, monkeypatch):
    monkeypatch.delenv("SAMLOOP_STORE", raising=False)
    (tmp_path / "rules.yaml").write_text("rules: []\n")
    cfg = load_config(write(tmp_path, """
store_root: state
skills_dirs: [mine]
providers:
  s: {type: scripted, script: rules.yaml}
  remote: {type: chat-completions}
models:
  - {name: a, provider: s, rank: 2, roles: [work], budget: 1.5}
"""))
    assert cfg.store_root == tmp_path / "state"
    assert cfg.skills_dirs == [tmp_path / "mine"]
    gw = cfg.build_gateway()
    assert gw.complete(CompletionRequest("work", "work", [{"role": "user", "content": "hi"}]), 2, Sink()).content == "no rule matched"
    assert (gw.model("a").rank, gw.model("a").roles, gw.model("a").budget) == (2, frozenset({"work"}), 1.5)


def test_store_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMLOOP_STORE", str(tmp_path / "env"))
    assert load_config(write(tmp_path, "store_root: x\n")).store_root == tmp_path / "env"
    assert load_config(write(tmp_path, "{}\n"), tmp_path / "arg").store_root == tmp_path / "arg"


def test_empty_config(monkeypatch):
    monkeypatch.delenv("SAMLOOP_CONFIG", raising=False)
    cfg = load_config()
    assert cfg.path is None and cfg.models == []
    assert cfg.run_default("review_max_turns") == 8


@pytest.mark.parametrize("text", [
    "providers: {p: {type: carrier-pigeon}}\n",
    "models: [{name: a, provider: p, rank: 1, colour: red}]\n",
    "models: [{name: a, provider: p, rank: 0}]\n",
    "models: [{provider: p}]\n",
])
def test_bad_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text)).build_gateway()


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "a: [\n"))
