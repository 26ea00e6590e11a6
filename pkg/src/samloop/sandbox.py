"""Isolated execution of agent tool commands.

Resources are resolved from task metadata before the agent loop starts and
follow a default-deny rule: the sandbox sees the task folder (read-write) and
exactly the mounts the task file declares, nothing else.

Three drivers share one contract:

``apptainer``
    Drives the ``apptainer`` binary (instance start / exec / stop). The
    intended production runtime.
``namespace``
    Linux namespaces via ``unshare``: a read-only root assembled from the
    host's system directories, the declared bind mounts, a private ``/tmp``,
    optional network namespace, all capabilities dropped before the command
    runs. No image needed.
``local``
    Plain subprocess in the task folder. NOT ISOLATED; it exists so the
    engine can be exercised where no runtime is available.
"""

from __future__ import annotations

import logging
import os
import posixpath
import resource
import shlex
import shutil
import signal
import subprocess
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .errors import (
    ConflictingGuestPath,
    HandleClosed,
    ImageMissing,
    InvalidMount,
    MountSourceMissing,
    RuntimeUnavailable,
    StartFailed,
)
from .sam import MountSpec, TaskMetadata

log = logging.getLogger(__name__)

TASK_GUEST_PATH = "/task"
STATE_DIR_NAME = ".scifi"
OUTPUT_CAP = 64 * 1024
TIMEOUT_EXIT_CODE = 137  # 128 + SIGKILL
SYSTEM_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"
HOST_IMAGE_DIRS = ("bin", "sbin", "lib", "lib32", "lib64", "libx32", "usr", "etc", "opt")
DEVICE_NODES = ("null", "zero", "full", "random", "urandom", "tty")


@dataclass(frozen=True)
class SandboxSpec:
    task_folder: str
    mounts: tuple[MountSpec, ...]
    network: bool = True
    gpu: bool = False
    job_system: bool = False
    image: str = "host"
    workdir: str = TASK_GUEST_PATH
    cpu_seconds: int | None = None
    memory_bytes: int | None = None
    env_allowlist: tuple[str, ...] = ()
    # guest paths hidden behind an empty read-only directory (run state)
    masked: tuple[str, ...] = ()


@dataclass
class ExecResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    timed_out: bool = False

    @property
    def output(self) -> str:
        if self.stderr and self.stdout:
            return f"{self.stdout}\n[stderr]\n{self.stderr}"
        return self.stdout or self.stderr


def resolve_resources(
    metadata: TaskMetadata,
    task_folder: str | Path,
    *,
    image: str = "host",
    cpu_seconds: int | None = None,
    memory_bytes: int | None = None,
    env_allowlist: Sequence[str] = (),
) -> SandboxSpec:
    """Turn task metadata into a sandbox spec. Pure apart from existence checks."""
    folder = Path(task_folder).resolve()
    if not folder.is_dir():
        raise MountSourceMissing(folder)
    mounts = [MountSpec(str(folder), TASK_GUEST_PATH, "rw")]
    guests = {TASK_GUEST_PATH}
    for mount in metadata.mounts:
        if not mount.host_path.startswith("/") or not mount.guest_path.startswith("/"):
            raise InvalidMount(f"mount {mount} must use absolute paths")
        if mount.mode not in ("ro", "rw"):
            raise InvalidMount(f"mount {mount} has mode {mount.mode!r}")
        host = posixpath.normpath(mount.host_path)
        guest = posixpath.normpath(mount.guest_path)
        if guest == "/":
            raise InvalidMount("cannot mount over the sandbox root")
        if not Path(host).exists():
            raise MountSourceMissing(host)
        if guest in guests:
            raise ConflictingGuestPath(guest)
        guests.add(guest)
        mounts.append(MountSpec(host, guest, mount.mode))
    return SandboxSpec(
        task_folder=str(folder),
        mounts=tuple(mounts),
        network=metadata.network,
        gpu=metadata.gpu,
        job_system=metadata.job_system,
        image=image,
        cpu_seconds=cpu_seconds,
        memory_bytes=memory_bytes,
        env_allowlist=tuple(env_allowlist),
        masked=(posixpath.join(TASK_GUEST_PATH, STATE_DIR_NAME),),
    )


def sandbox_env(spec: SandboxSpec) -> dict[str, str]:
    env = {
        "PATH": SYSTEM_PATH,
        "HOME": spec.workdir,
        "LANG": "C.UTF-8",
        "SAMLOOP_SANDBOX": "1",
        "SAMLOOP_JOB_SYSTEM": "1" if spec.job_system else "0",
    }
    for name in spec.env_allowlist:
        if name in os.environ:
            env[name] = os.environ[name]
    return env


# -- process plumbing -------------------------------------------------------


def _drain(stream, sink: list, cap: int) -> None:
    kept = 0
    dropped = 0
    while True:
        chunk = stream.read(8192)
        if not chunk:
            break
        room = cap - kept
        if room > 0:
            sink.append(chunk[:room])
            kept += min(room, len(chunk))
        dropped += max(0, len(chunk) - max(room, 0))
    sink.append(dropped)


def _finish(parts: list) -> str:
    dropped = parts.pop() if parts and isinstance(parts[-1], int) else 0
    text = b"".join(parts).decode("utf-8", errors="replace")
    if dropped:
        text += f"\n[... output truncated, {dropped} bytes dropped]"
    return text


def _limits(spec: SandboxSpec):
    def apply() -> None:
        if spec.cpu_seconds:
            resource.setrlimit(resource.RLIMIT_CPU, (spec.cpu_seconds, spec.cpu_seconds))
        if spec.memory_bytes:
            resource.setrlimit(resource.RLIMIT_AS, (spec.memory_bytes, spec.memory_bytes))

    return apply


def run_process(
    argv: list[str],
    timeout: float,
    *,
    env: dict[str, str],
    cwd: str | None = None,
    spec: SandboxSpec | None = None,
    cap: int = OUTPUT_CAP,
) -> ExecResult:
    start = time.monotonic()
    proc = subprocess.Popen(
        argv,
        stdin=subprocess.DEVNULL,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        env=env,
        cwd=cwd,
        start_new_session=True,
        preexec_fn=_limits(spec) if spec is not None else None,
    )
    out: list = []
    err: list = []
    readers = [
        threading.Thread(target=_drain, args=(proc.stdout, out, cap), daemon=True),
        threading.Thread(target=_drain, args=(proc.stderr, err, cap), daemon=True),
    ]
    for r in readers:
        r.start()
    timed_out = False
    try:
        proc.wait(timeout=max(timeout, 0.001))
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()
    for r in readers:
        r.join(timeout=5)
    code = TIMEOUT_EXIT_CODE if timed_out else proc.returncode
    if code is not None and code < 0:
        code = 128 - code
    return ExecResult(code, _finish(out), _finish(err), time.monotonic() - start, timed_out)


def _gpu_devices() -> list[str]:
    return sorted(str(p) for p in Path("/dev").glob("nvidia*"))


# -- drivers ----------------------------------------------------------------


class Driver(Protocol):
    name: str
    secure: bool

    def start(self, spec: SandboxSpec) -> dict: ...

    def exec(self, spec: SandboxSpec, state: dict, command: str, timeout: float) -> ExecResult: ...

    def stop(self, spec: SandboxSpec, state: dict) -> None: ...


class LocalDriver:
    """Runs commands directly on the host in the task folder. Not a sandbox."""

    name = "local"
    secure = False

    def start(self, spec: SandboxSpec) -> dict:
        log.warning("local sandbox driver in use: commands are NOT isolated from the host")
        return {}

    def exec(self, spec: SandboxSpec, state: dict, command: str, timeout: float) -> ExecResult:
        env = sandbox_env(spec)
        env["HOME"] = spec.task_folder
        return run_process(["/bin/sh", "-c", command], timeout, env=env, cwd=spec.task_folder, spec=spec)

    def stop(self, spec: SandboxSpec, state: dict) -> None:
        pass


def _which(name: str) -> str | None:
    return shutil.which(name) or shutil.which(name, path="/usr/sbin:/sbin:/usr/bin:/bin")


class NamespaceDriver:
    """Linux-namespace isolation assembled with ``unshare``.

    Every exec builds a fresh mount namespace: a read-only tmpfs root holding
    read-only binds of the host system directories, the declared bind mounts, a
    private tmpfs ``/tmp`` and a minimal ``/dev``. The command runs inside a
    new user, PID and (when network is off) network namespace with every
    capability dropped, so it cannot remount or leave the root.
    """

    name = "namespace"
    secure = True

    def __init__(self, image_dirs: Sequence[str] = HOST_IMAGE_DIRS):
        self.image_dirs = tuple(image_dirs)

    @staticmethod
    def available() -> bool:
        if not all(_which(b) for b in ("unshare", "chroot", "setpriv")):
            return False
        try:
            probe = subprocess.run(
                [_which("unshare"), "--user", "--map-root-user", "--mount", "true"],
                capture_output=True, timeout=10,
            )
        except (OSError, subprocess.TimeoutExpired):
            return False
        return probe.returncode == 0

    def start(self, spec: SandboxSpec) -> dict:
        if not self.available():
            raise RuntimeUnavailable(
                "the namespace driver needs unshare, chroot and setpriv plus user namespaces; "
                "install apptainer or enable unprivileged user namespaces"
            )
        if spec.image != "host":
            raise ImageMissing(f"the namespace driver only runs the 'host' image, not {spec.image!r}")
        devices = []
        if spec.gpu:
            devices = _gpu_devices()
            if not devices:
                raise StartFailed("gpu requested but no /dev/nvidia* device exists on this host")
        root = tempfile.mkdtemp(prefix="samloop-ns-")
        return {"root": root, "devices": devices}

    def _script(self, spec: SandboxSpec, state: dict) -> str:
        q = shlex.quote
        root = state["root"]
        lines = [
            "set -e",
            "mount --make-rprivate /",
            f"R={q(root)}",
            'mount -t tmpfs -o mode=755 none "$R"',
        ]
        for d in self.image_dirs:
            src = "/" + d
            if not os.path.lexists(src):
                continue
            if os.path.islink(src):
                lines.append(f'ln -s {q(os.readlink(src))} "$R/{d}"')
            else:
                lines += [f'mkdir "$R/{d}"', f'mount --rbind {q(src)} "$R/{d}"', f'mount -o remount,bind,ro "$R/{d}"']
        for m in spec.mounts:
            target = '"$R"' + q(m.guest_path)
            if os.path.isdir(m.host_path):
                lines.append(f"mkdir -p {target}")
            else:
                lines += [f'mkdir -p "$R"{q(posixpath.dirname(m.guest_path))}', f"touch {target}"]
            lines.append(f"mount --bind {q(m.host_path)} {target}")
            if m.mode == "ro":
                lines.append(f"mount -o remount,bind,ro {target}")
        for path in spec.masked:
            target = '"$R"' + q(path)
            lines += [f"mkdir -p {target}", f"mount -t tmpfs -o ro,mode=555,size=4k none {target}"]
        lines += ['mkdir -p "$R/dev" "$R/proc" "$R/tmp"']
        for dev in DEVICE_NODES:
            if os.path.exists(f"/dev/{dev}"):
                lines += [f'touch "$R/dev/{dev}"', f'mount --bind /dev/{dev} "$R/dev/{dev}"']
        for dev in state.get("devices", []):
            lines += [f'touch "$R{dev}"', f'mount --bind {q(dev)} "$R{dev}"']
        inner = f'cd {q(spec.workdir)} && exec /bin/sh -c "$1"'
        lines += [
            'mount -t tmpfs -o mode=1777 none "$R/tmp"',
            'mount -t proc proc "$R/proc"',
            'mount -o remount,ro,bind "$R"',
            'cd "$R"',
            f'exec {q(_which("chroot"))} "$R" {q(_which("setpriv"))} --no-new-privs --inh-caps=-all --bounding-set=-all '
            f'/bin/sh -c {q(inner)} sh "$1"',
        ]
        return "\n".join(lines)

    def exec(self, spec: SandboxSpec, state: dict, command: str, timeout: float) -> ExecResult:
        argv = [_which("unshare"), "--user", "--map-root-user", "--mount", "--pid", "--fork", "--kill-child"]
        if not spec.network:
            argv.append("--net")
        argv += ["/bin/sh", "-c", self._script(spec, state), "sandbox", command]
        return run_process(argv, timeout, env=sandbox_env(spec), spec=spec)

    def stop(self, spec: SandboxSpec, state: dict) -> None:
        shutil.rmtree(state.get("root", ""), ignore_errors=True)


class ApptainerDriver:
    """Drives ``apptainer`` through its instance commands.

    start:  apptainer instance start --containall --no-home --writable-tmpfs
              [--net --network none] [--nv] --bind HOST:GUEST:MODE... IMAGE NAME
    exec:   apptainer exec --cleanenv --pwd WORKDIR --env K=V... instance://NAME /bin/sh -c CMD
    stop:   apptainer instance stop NAME
    """

    name = "apptainer"
    secure = True

    def __init__(self, binary: str = "apptainer"):
        self.binary = binary
        self._empty: str | None = None

    def _bin(self) -> str:
        path = shutil.which(self.binary)
        if path is None:
            raise RuntimeUnavailable(
                f"container runtime {self.binary!r} not found on PATH; install Apptainer "
                "or choose the 'namespace' sandbox driver"
            )
        return path

    def start_argv(self, spec: SandboxSpec, instance: str) -> list[str]:
        argv = [self.binary, "instance", "start", "--containall", "--no-home", "--writable-tmpfs"]
        if not spec.network:
            argv += ["--net", "--network", "none"]
        if spec.gpu:
            argv.append("--nv")
        for m in spec.mounts:
            argv += ["--bind", str(m)]
        for path in spec.masked:
            argv += ["--bind", f"{self._empty_dir()}:{path}:ro"]
        return argv + [spec.image, instance]

    def _empty_dir(self) -> str:
        if self._empty is None:
            self._empty = tempfile.mkdtemp(prefix="samloop-mask-")
        return self._empty

    def exec_argv(self, spec: SandboxSpec, instance: str, command: str) -> list[str]:
        argv = [self.binary, "exec", "--cleanenv", "--pwd", spec.workdir]
        for key, value in sorted(sandbox_env(spec).items()):
            if key != "PATH":
                argv += ["--env", f"{key}={value}"]
        return argv + [f"instance://{instance}", "/bin/sh", "-c", command]

    def start(self, spec: SandboxSpec) -> dict:
        binary = self._bin()
        if "://" not in spec.image and not Path(spec.image).exists():
            raise ImageMissing(f"container image {spec.image} not found")
        if spec.gpu and not _gpu_devices():
            raise StartFailed("gpu requested but no /dev/nvidia* device exists on this host")
        instance = f"samloop-{uuid.uuid4().hex[:12]}"
        argv = self.start_argv(spec, instance)
        argv[0] = binary
        res = run_process(argv, 120, env=dict(os.environ))
        if res.exit_code != 0:
            raise StartFailed(f"apptainer instance start failed ({res.exit_code}): {res.output.strip()}")
        return {"instance": instance, "binary": binary}

    def exec(self, spec: SandboxSpec, state: dict, command: str, timeout: float) -> ExecResult:
        argv = self.exec_argv(spec, state["instance"], command)
        argv[0] = state["binary"]
        return run_process(argv, timeout, env={"PATH": os.environ.get("PATH", SYSTEM_PATH)}, spec=spec)

    def stop(self, spec: SandboxSpec, state: dict) -> None:
        res = run_process([state["binary"], "instance", "stop", state["instance"]], 60, env=dict(os.environ))
        if res.exit_code != 0:
            log.warning("apptainer instance stop %s failed: %s", state["instance"], res.output.strip())


DRIVERS = {"apptainer": ApptainerDriver, "namespace": NamespaceDriver, "local": LocalDriver}


def make_driver(name: str = "auto", **options) -> Driver:
    """Build a driver; ``auto`` prefers apptainer, then namespaces, never local."""
    if name == "auto":
        if shutil.which(options.get("binary", "apptainer")):
            return ApptainerDriver(**options)
        if NamespaceDriver.available():
            return NamespaceDriver()
        raise RuntimeUnavailable(
            "no container runtime found (apptainer, or unshare with user namespaces); "
            "install one, or set sandbox.driver to 'local' to run without isolation"
        )
    try:
        return DRIVERS[name](**options)
    except KeyError:
        raise RuntimeUnavailable(f"unknown sandbox driver {name!r}") from None


@dataclass
class SandboxHandle:
    spec: SandboxSpec
    driver: Driver
    state: dict
    started_at: float
    closed: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def exec(self, command: str, timeout: float) -> ExecResult:
        with self._lock:
            if self.closed:
                raise HandleClosed("sandbox already torn down")
            return self.driver.exec(self.spec, self.state, command, timeout)

    def teardown(self) -> None:
        with self._lock:
            if self.closed:
                return
            self.closed = True
            try:
                self.driver.stop(self.spec, self.state)
            except Exception:  # best effort
                log.exception("sandbox teardown failed")


def start(spec: SandboxSpec, driver: Driver | None = None) -> SandboxHandle:
    driver = driver or make_driver()
    state = driver.start(spec)
    return SandboxHandle(spec, driver, state, time.time())
