import json

from helpers import EMPTY_PLAN, FINAL_REVIEW, NESTED, Scenario, finish, run_scenario, shell, task_memory, verdict
from samloop.audit import load_audit
from samloop.memory import read_history_file
from samloop.runner import RunPaths

ONE_NODE = """```meta
max_iterations: {n}
```

# Job

## To-do
Make done.txt.

## Expectation
- `done.txt` exists
- it is **non-empty**
"""


def events(task, kind, run_id="r1"):
    return [(e.iteration, e.node_id, json.loads(e.payload))
            for e in read_history_file(RunPaths.for_run(task, run_id).history) if e.kind == kind]


def audit(task, run_id="r1"):
    return load_audit(RunPaths.for_run(task, run_id).audit)


def test_work_slice_timeout_becomes_a_timeout_verdict(tmp_path):
    rules = [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "pattern": "^Iteration: 1$", "response": shell("sleep 20")},
        {"phase": "work", "pattern": "^Phase: work$", "response": shell("echo ok > done.txt")},
        {"phase": "work", "response": finish()},
        {"phase": "review", "response": verdict("pass", "done.txt is there")},
        FINAL_REVIEW,
    ]
    task, config, report = run_scenario(tmp_path, Scenario("slow", ONE_NODE.format(n=3), rules),
                                        overrides={"work_slice": 0.5})
    assert report.exit_code == 0
    judgments = [(i, p["outcome"]) for i, _, p in events(task, "judgment")]
    assert judgments == [(1, "timeout"), (2, "pass")]
    # a timed-out attempt is not reviewed by the model
    assert [r["iteration"] for r in audit(task) if r["phase"] == "review"] == [2]
    [pattern] = [e for e in task_memory(task, config, "r1") if e.section == "failure-patterns"]
    assert "0.5 s expired" in pattern.body


def test_plan_order_and_dependencies(tmp_path):
    task, _, report = run_scenario(tmp_path, NESTED)
    assert report.exit_code == 0
    assert [n for _, n, _ in events(task, "iteration-status")] == ["root/2", "root/1", "root"]
    assert (tmp_path / "task" / "c.txt").exists()


def test_unusable_plan_falls_back_to_document_order(tmp_path):
    rules = [{"phase": "pre-scan", "response": {"content": "I think we should start with B"}}, *NESTED.rules[2:]]
    task, _, report = run_scenario(tmp_path, Scenario("fallback", NESTED.task, rules))
    assert report.exit_code == 0
    assert [n for _, n, _ in events(task, "iteration-status")] == ["root/1", "root/2", "root"]
    changes = [p for _, _, p in events(task, "direction-change")]
    assert len(changes) == 3
    assert all(c["change"] == "plan-fallback" and c["order"] == "document" for c in changes)
    # first try plus two repair prompts per iteration
    assert sum(r["phase"] == "pre-scan" for r in audit(task)) == 9


def test_review_can_raise_the_work_rank(tmp_path):
    models = [
        {"name": "ctl", "provider": "scripted", "rank": 1, "roles": ["control"]},
        {"name": "small", "provider": "scripted", "rank": 1, "roles": ["work"]},
        {"name": "large", "provider": "scripted", "rank": 2, "roles": ["work"]},
    ]
    rules = [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "model": "large", "pattern": "^Phase: work$", "response": shell("echo x > done.txt")},
        {"phase": "work", "response": finish()},
        {"phase": "review", "pattern": "^Iteration: 1$", "response": verdict("fail", "too hard for this model", "retry", rank="up")},
        {"phase": "review", "response": verdict("pass", "fine")},
        FINAL_REVIEW,
    ]
    task, _, report = run_scenario(tmp_path, Scenario("rank", ONE_NODE.format(n=4), rules, models))
    assert report.exit_code == 0
    [(iteration, _, change)] = events(task, "direction-change")
    assert iteration == 1
    assert (change["change"], change["from"], change["to"], change["by"]) == ("rank", 1, 2, "review")
    work = [(r["iteration"], r["model"]) for r in audit(task) if r["phase"] == "work"]
    assert {m for i, m in work if i == 1} == {"small"}
    assert {m for i, m in work if i == 2} == {"large"}
    assert [p["rank"] for _, _, p in events(task, "iteration-status")] == [1, 2]


def test_review_sees_the_expectation_verbatim(tmp_path):
    rules = [
        {"phase": "pre-scan", "response": EMPTY_PLAN},
        {"phase": "work", "pattern": "^Phase: work$", "response": shell("echo x > done.txt")},
        {"phase": "work", "response": finish()},
        {"phase": "review", "response": verdict("pass", "fine")},
        FINAL_REVIEW,
    ]
    task, _, report = run_scenario(tmp_path, Scenario("expect", ONE_NODE.format(n=2), rules))
    assert report.exit_code == 0
    [review] = [r for r in audit(task) if r["phase"] == "review"]
    prompt = "\n".join(m["content"] or "" for m in review["request"]["messages"])
    assert "- `done.txt` exists\n- it is **non-empty**" in prompt
    # the work agent's own narrative is there, marked as a claim
    assert "completed" in prompt
