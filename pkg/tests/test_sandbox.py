import os
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from samloop.errors import (
    ConflictingGuestPath,
    HandleClosed,
    InvalidMount,
    MountSourceMissing,
    RuntimeUnavailable,
)
from samloop.sam import MountSpec, TaskMetadata, parse_sam
from samloop.sandbox import (
    ApptainerDriver,
    LocalDriver,
    NamespaceDriver,
    SandboxSpec,
    make_driver,
    resolve_resources,
    run_process,
    sandbox_env,
    start,
)

namespaces = pytest.mark.skipif(not NamespaceDriver.available(), reason="user namespaces unavailable")


def meta(*mounts, **flags):
    return TaskMetadata(mounts=tuple(MountSpec(*m) for m in mounts), **flags)


def test_empty_metadata_sees_only_the_task_folder(tmp_path):
    spec = resolve_resources(TaskMetadata(), tmp_path)
    assert spec.mounts == (MountSpec(str(tmp_path), "/task", "rw"),)
    assert spec.masked == ("/task/.scifi",)
    assert (spec.gpu, spec.job_system, spec.network) == (False, False, True)


@given(data=st.data())
def test_mount_set_is_exactly_task_plus_declared(tmp_path_factory, data):
    base = tmp_path_factory.getbasetemp()
    hosts = [base / f"m{i}" for i in range(3)]
    for h in hosts:
        h.mkdir(exist_ok=True)
    guests = data.draw(st.lists(st.sampled_from(["/a", "/b", "/c/d", "/e"]), unique=True, max_size=3))
    declared = [(str(hosts[i]), g, data.draw(st.sampled_from(["ro", "rw"]))) for i, g in enumerate(guests)]
    spec = resolve_resources(meta(*declared), base)
    assert [(m.host_path, m.guest_path, m.mode) for m in spec.mounts] == [(str(base), "/task", "rw"), *declared]


def test_mount_errors(tmp_path):
    with pytest.raises(InvalidMount):
        resolve_resources(meta(("rel", "/x", "ro")), tmp_path)
    with pytest.raises(InvalidMount):
        resolve_resources(meta((str(tmp_path), "/", "ro")), tmp_path)
    with pytest.raises(InvalidMount):
        resolve_resources(meta((str(tmp_path), "/x", "rx")), tmp_path)
    with pytest.raises(MountSourceMissing):
        resolve_resources(meta((str(tmp_path / "gone"), "/x", "ro")), tmp_path)
    with pytest.raises(ConflictingGuestPath):
        resolve_resources(meta((str(tmp_path), "/task/", "ro")), tmp_path)
    with pytest.raises(MountSourceMissing):
        resolve_resources(TaskMetadata(), tmp_path / "nope")


def test_env_is_allowlisted(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMLOOP_SECRET_TOKEN", "x" * 8)
    monkeypatch.setenv("KEEP_ME", "yes")
    spec = resolve_resources(TaskMetadata(job_system=True), tmp_path, env_allowlist=["KEEP_ME", "NOT_SET"])
    env = sandbox_env(spec)
    assert env["KEEP_ME"] == "yes" and env["SAMLOOP_JOB_SYSTEM"] == "1"
    assert "SAMLOOP_SECRET_TOKEN" not in env and "NOT_SET" not in env


def test_timeout_kills_the_process_group(tmp_path):
    started = time.monotonic()
    res = run_process(["/bin/sh", "-c", "sleep 30 & sleep 30"], 0.5, env={"PATH": os.environ["PATH"]})
    assert res.timed_out and res.exit_code == 137
    assert time.monotonic() - started < 10


def test_output_is_capped(tmp_path):
    res = run_process(["/bin/sh", "-c", "head -c 5000 /dev/zero | tr '\\0' a"], 10, env={"PATH": os.environ["PATH"]}, cap=1000)
    assert res.stdout.startswith("a" * 1000)
    assert res.stdout.endswith("[... output truncated, 4000 bytes dropped]")


def test_local_driver_runs_in_task_folder(tmp_path):
    handle = start(resolve_resources(TaskMetadata(), tmp_path), LocalDriver())
    res = handle.exec("pwd; echo oops >&2; exit 3", 10)
    assert res.exit_code == 3
    assert res.stdout.strip() == str(tmp_path)
    assert res.output == f"{tmp_path}\n\n[stderr]\noops\n"
    handle.teardown()
    handle.teardown()
    with pytest.raises(HandleClosed):
        handle.exec("true", 1)


def test_make_driver(monkeypatch):
    assert isinstance(make_driver("local"), LocalDriver)
    with pytest.raises(RuntimeUnavailable):
        make_driver("docker")
    monkeypatch.setattr("samloop.sandbox.shutil.which", lambda name: None)
    monkeypatch.setattr(NamespaceDriver, "available", staticmethod(lambda: False))
    with pytest.raises(RuntimeUnavailable, match="local"):
        make_driver("auto")


def test_apptainer_argv(tmp_path):
    spec = SandboxSpec(
        task_folder=str(tmp_path),
        mounts=(MountSpec(str(tmp_path), "/task", "rw"), MountSpec("/data", "/in", "ro")),
        network=False, gpu=True, image="/img/box.sif", masked=("/task/.scifi",),
    )
    drv = ApptainerDriver()
    argv = drv.start_argv(spec, "inst")
    assert argv[:6] == ["apptainer", "instance", "start", "--containall", "--no-home", "--writable-tmpfs"]
    assert argv[6:10] == ["--net", "--network", "none", "--nv"]
    assert argv[10:14] == ["--bind", f"{tmp_path}:/task:rw", "--bind", "/data:/in:ro"]
    assert argv[14] == "--bind" and argv[15].endswith(":/task/.scifi:ro")
    assert os.listdir(argv[15].split(":")[0]) == []
    assert argv[-2:] == ["/img/box.sif", "inst"]
    ex = drv.exec_argv(spec, "inst", "make all")
    assert ex[:5] == ["apptainer", "exec", "--cleanenv", "--pwd", "/task"]
    assert ex[-4:] == ["instance://inst", "/bin/sh", "-c", "make all"]
    plain = drv.start_argv(SandboxSpec(str(tmp_path), spec.mounts[:1]), "i2")
    assert "--net" not in plain and "--nv" not in plain


def test_apptainer_missing_binary(tmp_path):
    drv = ApptainerDriver(binary="no-such-apptainer-binary")
    with pytest.raises(RuntimeUnavailable):
        drv.start(resolve_resources(TaskMetadata(), tmp_path))


@namespaces
def test_namespace_isolation(tmp_path):
    (tmp_path / "task").mkdir()
    (tmp_path / "ro").mkdir()
    (tmp_path / "ro" / "data.txt").write_text("payload")
    (tmp_path / "secret.txt").write_text("hidden")
    doc = parse_sam(f"```meta\nmounts: {tmp_path / 'ro'}:/in:ro\n```\n\n# T\n\n## To-do\nx\n\n## Expectation\ny\n")
    handle = start(resolve_resources(doc.metadata, tmp_path / "task"), NamespaceDriver())
    try:
        assert handle.exec("pwd", 30).stdout.strip() == "/task"
        assert handle.exec("cat /in/data.txt", 30).stdout == "payload"
        assert handle.exec(f"cat {tmp_path}/secret.txt", 30).exit_code != 0
        assert handle.exec("touch /tmp/scratch && echo ok", 30).stdout.strip() == "ok"
        assert handle.exec("ls /task/.scifi | wc -l", 30).stdout.strip() == "0"
    finally:
        handle.teardown()
