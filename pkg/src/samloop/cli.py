"""``samloop`` command line.

Exit codes:

    0  success (run: root passed; replay: history matched)
    1  internal error
    2  usage error or invalid task file
    3  hard limit reached (iterations or wall time)
    4  task file changed during the run (tamper)
    5  no usable model (budgets exhausted or all providers failed)
    6  sandbox failure
    7  store or audit log unreadable
    8  replay diverged from the recording
    9  replay source missing or has a sequence gap
    10 helper tool could not produce valid output
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import runner, tools
from .audit import AuditLog, export_records, redaction_profile
from .config import load_config
from .errors import EXIT_INTERNAL, EXIT_USAGE, SamloopError
from .memory import MemoryScope, MemoryStore
from .sam import load_sam, validate
from .skills import BUNDLED_SKILLS, load_library, make_skill


def _emit(ctx: click.Context, record: dict, text: str) -> None:
    if ctx.obj["json"]:
        click.echo(json.dumps(record, sort_keys=True))
    else:
        click.echo(text)


def _guard(fn):
    """Map library errors onto exit codes with a one-line diagnostic."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SamloopError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(getattr(exc, "exit_code", EXIT_INTERNAL))
        except (ValueError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)

    return wrapper


def _ui_session(ctx: click.Context):
    config = ctx.obj["config"]
    gateway = config.build_gateway()
    run_id = "ui-" + runner.new_run_id()
    audit = AuditLog(config.store_root / "audit" / f"{run_id}.log", run_id)
    ranks = gateway.ranks("control") or [1]
    return gateway.session(audit), ranks[0], audit


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), envvar="SAMLOOP_CONFIG",
              help="YAML config file (default: $SAMLOOP_CONFIG).")
@click.option("--store", "store_root", type=click.Path(file_okay=False), envvar="SAMLOOP_STORE",
              help="Global store root (default: $SAMLOOP_STORE, else config, else ~/.samloop).")
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output, one JSON object per line.")
@click.pass_context
def main(ctx: click.Context, config_path, store_root, verbose, as_json):
    """Unattended pre-scan / work / review loop for Markdown task files."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(config_path, store_root)
    except SamloopError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    ctx.obj = {"config": config, "json": as_json}


@main.command()
@click.argument("task", type=click.Path(exists=True, dir_okay=False))
@click.option("--run-id", help="Run id to use (default: timestamp plus random suffix).")
@click.option("--resume", "resume_id", metavar="RUN", help="Continue RUN from its last finished iteration.")
@click.option("--max-iterations", type=click.IntRange(min=1), help="Override the iteration limit.")
@click.option("--wall-time", type=click.FloatRange(min=0, min_open=True), help="Override the wall-time limit, seconds.")
@click.option("--slice", "work_slice", type=click.FloatRange(min=0, min_open=True), help="Work-phase time slice, seconds.")
@click.option("--driver", type=click.Choice(["auto", "apptainer", "namespace", "local"]), help="Sandbox driver.")
@click.pass_context
@_guard
def run(ctx, task, run_id, resume_id, max_iterations, wall_time, work_slice, driver):
    """Run TASK until its expectation passes review or a limit fires."""
    report = runner.execute_run(
        task, ctx.obj["config"],
        run_id=resume_id or run_id,
        resume=bool(resume_id),
        driver=driver,
        overrides={"max_iterations": max_iterations, "wall_time_limit": wall_time, "work_slice": work_slice},
    )
    s = report.summary()
    verdicts = ", ".join(f"{n}={o}" for n, o in s["verdicts"].items()) or "none"
    text = "\n".join([
        f"run {s['run_id']}: {s['outcome']}" + (f" ({s['stop']})" if s["stop"] else ""),
        f"iterations: {s['iterations']}  wall time: {s['wall_time']:.1f} s  model calls: {s['audit_records']}",
        f"verdicts: {verdicts}",
        f"history: {s['history']}",
        f"audit: {s['audit']}",
        f"task memory: {s['task_memory']}",
    ] + ([f"error: {s['error']}"] if s["error"] else []))
    _emit(ctx, s, text)
    sys.exit(report.exit_code)


@main.command()
@click.argument("task", type=click.Path(exists=True, dir_okay=False))
@click.argument("run_id")
@click.option("--scratch", type=click.Path(file_okay=False), help="Keep the replayed stores in this directory.")
@click.pass_context
@_guard
def replay(ctx, task, run_id, scratch):
    """Re-execute RUN from its audit log and compare history tapes."""
    report = runner.replay_run(task, run_id, scratch)
    s = report.summary()
    where = "" if report.first_difference is None else f" (first difference at event {report.first_difference})"
    text = "\n".join([
        f"replay {run_id}: history {'matches' if report.match else 'DIFFERS'}{where}",
        f"events recorded/replayed: {report.recorded_events}/{report.replayed_events}",
        f"model calls recorded/replayed: {report.calls_recorded}/{report.calls_replayed}",
        f"outcome: {report.outcome} (recorded: {report.recorded_outcome})",
    ])
    _emit(ctx, s, text)
    sys.exit(report.exit_code)


@main.command("validate")
@click.argument("tasks", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@_guard
def validate_cmd(ctx, tasks):
    """Check task files; list every problem found."""
    bad = 0
    for path in tasks:
        try:
            doc = load_sam(path)
        except SamloopError as exc:
            bad += 1
            _emit(ctx, {"file": path, "valid": False, "error": str(exc)}, f"{path}: {exc}")
            continue
        violations = validate(doc)
        bad += bool(violations)
        _emit(
            ctx,
            {"file": path, "valid": not violations, "nodes": len(doc.nodes()),
             "violations": [{"rule": v.rule, "subject": v.subject, "message": v.message} for v in violations]},
            f"{path}: ok ({len(doc.nodes())} nodes)" if not violations
            else "\n".join([f"{path}: {len(violations)} problem(s)"] + [f"  {v.rule} [{v.subject}]: {v.message}" for v in violations]),
        )
    sys.exit(EXIT_USAGE if bad else 0)


@main.command("task-maker")
@click.argument("text", nargs=-1, required=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Write the task file here instead of stdout.")
@click.option("--force", is_flag=True, help="Overwrite an existing output file.")
@click.pass_context
@_guard
def task_maker_cmd(ctx, text, output, force):
    """Draft a task file from a plain-language description."""
    config = ctx.obj["config"]
    library = load_library([BUNDLED_SKILLS, *config.skills_dirs])
    session, rank, _ = _ui_session(ctx)
    draft = tools.task_maker(" ".join(text), session, library, rank)
    if output:
        out = Path(output)
        if out.exists() and not force:
            raise click.UsageError(f"{out} exists; pass --force to overwrite")
        out.write_text(draft.text, encoding="utf-8")
    record = {"file": output, "skills": draft.suggested_skills, "attempts": draft.attempts}
    if ctx.obj["json"]:
        record["text"] = None if output else draft.text
        _emit(ctx, record, "")
    else:
        if output:
            click.echo(f"wrote {output}")
        else:
            click.echo(draft.text, nl=False)
        if draft.suggested_skills:
            click.echo(f"suggested skills: {', '.join(draft.suggested_skills)}", err=True)


@main.command("skill-maker")
@click.argument("task", type=click.Path(exists=True, dir_okay=False))
@click.option("--run", "run_id", help="Distil from this run (default: the latest run of TASK).")
@click.option("--into", type=click.Path(file_okay=False), help="Skill directory to write (default: first configured skills dir, else <store>/skills).")
@click.pass_context
@_guard
def skill_maker_cmd(ctx, task, run_id, into):
    """Distil a reusable skill from a finished run's memory and history."""
    config = ctx.obj["config"]
    run_id = run_id or runner.latest_run_id(task)
    if run_id is None:
        raise click.UsageError(f"{task} has no recorded runs")
    paths = runner.RunPaths.for_run(task, run_id)
    store = MemoryStore(paths.state_dir, config.store_root)
    memory, history = store.read_memory(MemoryScope.task(run_id)), store.read_history(run_id)
    target = Path(into) if into else (config.skills_dirs[0] if config.skills_dirs else config.store_root / "skills")
    roots = [BUNDLED_SKILLS, *config.skills_dirs]
    if target.is_dir() and target not in roots:
        roots.append(target)
    library = load_library(roots)
    session, rank, _ = _ui_session(ctx)
    skill = make_skill(memory, history, library, session, target, rank)
    _emit(ctx, {"name": skill.name, "description": skill.description, "path": skill.path},
          f"wrote skill {skill.name} to {skill.path}")


@main.command()
@click.argument("question", nargs=-1, required=True)
@click.pass_context
@_guard
def ask(ctx, question):
    """Ask how to use the system; answered from the bundled design notes."""
    text = " ".join(question).strip()
    if not text:
        raise click.UsageError("the question is empty")
    session, rank, _ = _ui_session(ctx)
    answer = tools.ask(text, session, rank)
    _emit(ctx, {"question": text, "answer": answer}, answer)


@main.command("export-audit")
@click.argument("task", type=click.Path(exists=True, dir_okay=False))
@click.argument("run_id")
@click.option("--redact", type=click.Choice(["credentials", "none"]), default="credentials", show_default=True)
@click.option("--redact-env", multiple=True, metavar="NAME", help="Also redact the value of this environment variable.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Write JSON lines here instead of stdout.")
@click.pass_context
@_guard
def export_audit(ctx, task, run_id, redact, redact_env, output):
    """Export a run's model calls as JSON lines for fine-tuning data."""
    paths = runner.RunPaths.for_run(task, run_id)
    profile = redaction_profile(redact, tuple(redact_env))
    lines = (json.dumps(r, ensure_ascii=False, sort_keys=True) for r in export_records(paths.audit, run_id, profile, paths.history))
    if output:
        count = 0
        with open(output, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
                count += 1
        click.echo(f"wrote {count} records to {output}", err=True)
    else:
        for line in lines:
            click.echo(line)


if __name__ == "__main__":  # pragma: no cover
    main()
