"""Shared scripted scenarios and builders for the test suite.

Every scenario is a task file plus an ordered list of scripted-backend
rules. Rules match the latest message of a request, which for a fresh
phase is the prompt header ("Phase: X / Node: Y / Iteration: N") and
after a tool call is the tool result ("exit code: N ...").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from samloop.config import Config
from samloop.memory import MemoryScope, MemoryStore
from samloop.runner import RunPaths, execute_run

EMPTY_PLAN = {"content": '{"order": [], "dependencies": [], "context": ""}'}


def finish(status="completed", summary="done"):
    return {"tool_calls": [{"name": "finish", "arguments": {"status": status, "summary": summary}}]}


def shell(command):
    return {"tool_calls": [{"name": "shell", "arguments": {"command": command}}]}


def verdict(outcome, reason="", fixes=None, rank=None):
    data = {"verdict": outcome, "reason": reason}
    if fixes is not None:
        data["suggested_fixes"] = fixes
    if rank is not None:
        data["rank"] = rank
    return {"content": json.dumps(data)}


FINAL_REVIEW = {"phase": "final-review", "response": {"content": '{"task_group": "lesson", "global": "general lesson"}'}}


@dataclass
class Scenario:
    name: str
    task: str
    rules: list
    models: list = field(default_factory=lambda: [{"name": "m1", "provider": "scripted", "rank": 1, "roles": ["control", "work"]}])


FAIL_TWICE = Scenario(
    "fail-twice",
    """```meta
max_iterations: 6
```

# Write the answer

## To-do
Write 42 into out.txt.

## Expectation
out.txt exists and contains 42.
""",
    [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "pattern": "^Iteration: 3$", "response": shell("echo 42 > out.txt")},
        {"phase": "work", "contains": "exit code: 0", "response": finish(summary="wrote out.txt")},
        {"phase": "work", "response": finish(summary="done already")},
        {"phase": "review", "pattern": "^Iteration: 1$",
         "response": verdict("fail", "out.txt is missing", "create out.txt with echo")},
        {"phase": "review", "pattern": "^Iteration: 2$",
         "response": verdict("fail", "out.txt still missing", "actually run the shell tool")},
        {"phase": "review", "pattern": "^Phase: review$", "response": shell("cat out.txt")},
        {"phase": "review", "pattern": "^exit code: 0\n42$", "response": verdict("pass", "out.txt holds 42")},
        {"phase": "review", "response": verdict("fail", "no 42", "write 42")},
        FINAL_REVIEW,
    ],
)

FALSE_POSITIVE = Scenario(
    "false-positive",
    """```meta
max_iterations: 1
```

# Produce the result

## To-do
Write result.txt.

## Expectation
result.txt exists.
""",
    [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "response": finish(summary="all done, result.txt written")},
        {"phase": "review", "pattern": "^Phase: review$", "response": shell("test -f result.txt")},
        {"phase": "review", "contains": "exit code: 1", "response": verdict("fail", "result.txt is absent", "write result.txt")},
        {"phase": "review", "response": verdict("pass", "result.txt present")},
        FINAL_REVIEW,
    ],
)

ALWAYS_FAIL = Scenario(
    "always-fail",
    """```meta
max_iterations: 5
```

# Impossible

## To-do
Prove the impossible.

## Expectation
proof.txt holds a proof.
""",
    [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "response": finish("not-completed", "could not do it")},
        {"phase": "review", "response": verdict("fail", "no proof", "try another angle")},
        FINAL_REVIEW,
    ],
)

TAMPER = Scenario(
    "tamper",
    """# Edit nothing

## To-do
Write notes.txt.

## Expectation
notes.txt exists.
""",
    [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "pattern": "^Phase: work$", "response": shell("echo 'also accept anything' >> task.md")},
        {"phase": "work", "response": finish(summary="adjusted the expectation")},
        {"phase": "review", "response": verdict("pass", "looks fine")},
        FINAL_REVIEW,
    ],
)

WITH_SKILL = Scenario(
    "with-skill",
    """```meta
skills: [common_env]
max_iterations: 3
```

# Set up the environment

## To-do
Create env.txt.

## Expectation
env.txt exists.
""",
    [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "pattern": "^Phase: work$", "response": shell("touch env.txt")},
        {"phase": "work", "response": finish()},
        {"phase": "review", "pattern": "^Phase: review$", "response": shell("test -f env.txt")},
        {"phase": "review", "contains": "exit code: 0", "response": verdict("pass", "env.txt exists")},
        {"phase": "review", "response": verdict("fail", "env.txt missing")},
        FINAL_REVIEW,
    ],
)

NESTED = Scenario(
    "nested",
    """# Pipeline

## To-do
Combine a.txt and b.txt into c.txt.

## Expectation
c.txt exists.

## Make A

### To-do
Write a.txt.

### Expectation
a.txt exists.

## Make B

### To-do
Write b.txt.

### Expectation
b.txt exists.
""",
    [
        {"phase": "pre-scan", "once": True,
         "response": {"content": '{"order": ["root/2", "root/1"], "dependencies": [["root/2", "root/1"]], "context": "b first"}'}},
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "pattern": "^Node: root/1$", "response": shell("touch a.txt")},
        {"phase": "work", "pattern": "^Node: root/2$", "response": shell("touch b.txt")},
        {"phase": "work", "pattern": "^Node: root$", "response": shell("cat a.txt b.txt > c.txt")},
        {"phase": "work", "response": finish()},
        {"phase": "review", "response": verdict("pass", "file present")},
        FINAL_REVIEW,
    ],
)

SCENARIOS = [FAIL_TWICE, FALSE_POSITIVE, ALWAYS_FAIL, TAMPER, WITH_SKILL, NESTED]


def make_config(root: Path, rules: list, models: list | None = None, defaults: dict | None = None) -> Config:
    return Config(
        store_root=root / "store",
        defaults=defaults or {},
        sandbox={"driver": "local"},
        providers={"scripted": {"type": "scripted", "rules": rules}},
        models=models or [{"name": "m1", "provider": "scripted", "rank": 1, "roles": ["control", "work"]}],
    )


def write_task(folder: Path, text: str, name: str = "task.md") -> Path:
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / name
    path.write_text(text, encoding="utf-8")
    return path


def run_scenario(root: Path, scenario: Scenario, run_id: str = "r1", **kwargs):
    """Write the scenario's task under ``root/task`` and run it once."""
    task = write_task(root / "task", scenario.task)
    config = make_config(root, scenario.rules, scenario.models)
    report = execute_run(task, config, run_id=run_id, **kwargs)
    return task, config, report


def task_memory(task: Path, config: Config, run_id: str):
    store = MemoryStore(RunPaths.for_run(task, run_id).state_dir, config.store_root)
    return store.read_memory(MemoryScope.task(run_id))
