"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto the
documented exit-status table without a lookup table of its own.
"""

from __future__ import annotations

# Exit-status table (also in README.md).
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_LIMIT = 3
EXIT_TAMPER = 4
EXIT_GATEWAY = 5
EXIT_SANDBOX = 6
EXIT_STORE = 7
EXIT_REPLAY_DIVERGED = 8
EXIT_REPLAY_SOURCE = 9
EXIT_TOOL_OUTPUT = 10


class SamloopError(Exception):
    exit_code = EXIT_INTERNAL


# -- task files -------------------------------------------------------------


class SamParseError(SamloopError):
    exit_code = EXIT_USAGE


class EmptyDocument(SamParseError):
    def __init__(self) -> None:
        super().__init__("task file contains no SAM heading")


class MissingTodo(SamParseError):
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(f"node {node_id!r} has no To-do section")


class MissingExpectation(SamParseError):
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(f"node {node_id!r} has no Expectation section")


class MalformedMetadata(SamParseError):
    def __init__(self, line: int, reason: str) -> None:
        self.line = line
        self.reason = reason
        super().__init__(f"metadata line {line}: {reason}")


class MultipleRoots(SamParseError):
    def __init__(self, line: int) -> None:
        self.line = line
        super().__init__(f"line {line}: a task file holds exactly one top-level SAM")


class DuplicateSection(SamParseError):
    def __init__(self, node_id: str, section: str) -> None:
        self.node_id = node_id
        self.section = section
        super().__init__(f"node {node_id!r} repeats the {section} section")


class UnknownNode(SamloopError, KeyError):
    exit_code = EXIT_USAGE

    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(node_id)

    def __str__(self) -> str:
        return f"no node with id {self.node_id!r}"


class TamperDetected(SamloopError):
    exit_code = EXIT_TAMPER

    def __init__(self, expected: str, actual: str) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(f"task file modified during run (digest {expected[:12]} -> {actual[:12]})")


class FileMissing(SamloopError):
    exit_code = EXIT_TAMPER

    def __init__(self, path) -> None:
        self.path = path
        super().__init__(f"task file {path} no longer exists")


# -- gateway ----------------------------------------------------------------


class GatewayError(SamloopError):
    exit_code = EXIT_GATEWAY


class DuplicateName(GatewayError):
    pass


class UnknownModel(GatewayError):
    pass


class NoUsableModel(GatewayError):
    def __init__(self, role: str) -> None:
        self.role = role
        super().__init__(f"no enabled model with role {role!r} at any usable rank")


class AllProvidersFailed(GatewayError):
    def __init__(self, attempts: list[dict]) -> None:
        self.attempts = attempts
        tried = ", ".join(f"{a['model']} ({a['error']})" for a in attempts)
        super().__init__(f"all providers failed: {tried}")


class ForbiddenCaller(GatewayError):
    pass


class ProviderError(SamloopError):
    """Raised by a provider adapter; the gateway turns it into a retry."""

    kind = "transport"


class ProviderTimeout(ProviderError):
    kind = "timeout"


class RateLimited(ProviderError):
    kind = "rate-limit"


# -- stores -----------------------------------------------------------------


class StoreCorrupt(SamloopError):
    exit_code = EXIT_STORE

    def __init__(self, file, reason: str) -> None:
        self.file = file
        self.reason = reason
        super().__init__(f"{file}: {reason}")


class ForbiddenWriter(SamloopError):
    def __init__(self, phase: str, scope: str) -> None:
        self.phase = phase
        self.scope = scope
        super().__init__(f"phase {phase!r} may not write {scope} memory")


class AuditError(StoreCorrupt):
    pass


class AuditMissing(SamloopError):
    exit_code = EXIT_REPLAY_SOURCE

    def __init__(self, run_id: str) -> None:
        self.run_id = run_id
        super().__init__(f"no audit log for run {run_id!r}")


class SequenceGap(SamloopError):
    exit_code = EXIT_REPLAY_SOURCE

    def __init__(self, expected: int, found: int | None) -> None:
        self.expected = expected
        self.found = found
        super().__init__(f"audit sequence gap: expected {expected}, found {found}")


class RequestMismatch(SamloopError):
    exit_code = EXIT_REPLAY_DIVERGED

    def __init__(self, sequence: int, diff: str) -> None:
        self.sequence = sequence
        self.diff = diff
        super().__init__(f"replayed request {sequence} differs from the recording:\n{diff}")


class ReplayDiverged(SamloopError):
    exit_code = EXIT_REPLAY_DIVERGED


# -- engine -----------------------------------------------------------------


class RunStopped(SamloopError):
    """Base for terminal run outcomes; ``result`` holds the partial TaskRunResult."""

    result = None


class LimitExceeded(RunStopped):
    exit_code = EXIT_LIMIT

    def __init__(self, kind: str) -> None:
        self.kind = kind
        super().__init__(f"hard limit reached: {kind}")


class GatewayExhausted(RunStopped):
    exit_code = EXIT_GATEWAY


class SandboxFailure(RunStopped):
    exit_code = EXIT_SANDBOX


class MalformedPlan(SamloopError):
    pass


class ToolProtocolError(SamloopError):
    pass


# -- sandbox ----------------------------------------------------------------


class SandboxError(SamloopError):
    exit_code = EXIT_SANDBOX


class MountSourceMissing(SandboxError):
    def __init__(self, path) -> None:
        self.path = path
        super().__init__(f"mount source {path} does not exist")


class InvalidMount(SandboxError):
    pass


class ConflictingGuestPath(SandboxError):
    def __init__(self, guest_path: str) -> None:
        self.guest_path = guest_path
        super().__init__(f"more than one mount targets {guest_path}")


class RuntimeUnavailable(SandboxError):
    pass


class ImageMissing(SandboxError):
    pass


class StartFailed(SandboxError):
    pass


class HandleClosed(SandboxError):
    pass


# -- skills -----------------------------------------------------------------


class SkillError(SamloopError):
    exit_code = EXIT_USAGE


class DuplicateSkill(SkillError):
    pass


class MalformedSkill(SkillError):
    pass


class UnknownSkill(SkillError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown skill {name!r}")


class ValidationFailed(SkillError):
    exit_code = EXIT_TOOL_OUTPUT


class UnrepairableOutput(SamloopError):
    exit_code = EXIT_TOOL_OUTPUT
