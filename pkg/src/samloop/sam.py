"""Self-assessed task files: parsing, linting, rendering and tamper checks.

A task file is plain Markdown. The top-level heading is the root SAM; its
``Context`` / ``To-do`` / ``Expectation`` subsections sit one level deeper,
and any other heading at that depth opens a sub-SAM with the same layout one
level further down. An optional fenced ``meta`` block at the very top carries
``key: value`` resource metadata. See ``data/docs/format.md`` for the grammar.

Everything here is deterministic and model-free.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping

from .errors import (
    DuplicateSection,
    EmptyDocument,
    FileMissing,
    MalformedMetadata,
    MissingExpectation,
    MissingTodo,
    MultipleRoots,
    SamParseError,
    TamperDetected,
    UnknownNode,
)

STATUSES = ("pending", "in-progress", "done")

# heading text (case-insensitive) -> section slot
SECTION_NAMES = {
    "context": "context",
    "to-do": "todo",
    "todo": "todo",
    "to do": "todo",
    "expectation": "expectation",
    "expectations": "expectation",
    "expect": "expectation",
}
SECTION_TITLES = {"context": "Context", "todo": "To-do", "expectation": "Expectation"}

DEFAULT_WALL_TIME = 3600
DEFAULT_MAX_ITERATIONS = 200

KNOWN_KEYS = (
    "wall_time_limit",
    "max_iterations",
    "gpu",
    "network",
    "job_system",
    "mounts",
    "skills",
    "difficulty",
    "model",
)

_HEADING_RE = re.compile(r"^ {0,3}(#{1,6})(?:[ \t]+(.*?))?[ \t]*$")
_FENCE_RE = re.compile(r"^ {0,3}(`{3,}|~{3,})(.*)$")
_META_OPEN_RE = re.compile(r"^(`{3,}|~{3,})[ \t]*meta[ \t]*$")
_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_-]*)[ \t]*:(.*)$")


@dataclass(frozen=True)
class MountSpec:
    host_path: str
    guest_path: str
    mode: str = "ro"

    def __str__(self) -> str:
        return f"{self.host_path}:{self.guest_path}:{self.mode}"


@dataclass(frozen=True)
class TaskMetadata:
    wall_time_limit: int = DEFAULT_WALL_TIME
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    gpu: bool = False
    network: bool = True
    job_system: bool = False
    mounts: tuple[MountSpec, ...] = ()
    skills: tuple[str, ...] = ()
    difficulty_hint: int | None = None
    model_preference: str | None = None
    # keys as written in the file, in file order (known and unknown)
    explicit_keys: tuple[str, ...] = ()
    extra: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class SamNode:
    id: str
    title: str
    todo: str
    expectation: str
    context: str | None = None
    children: tuple["SamNode", ...] = ()
    status: str = "pending"
    preamble: str = ""

    def walk(self) -> Iterator["SamNode"]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class SamDocument:
    root: SamNode
    metadata: TaskMetadata
    source_digest: str
    source_path: str
    heading_level: int = 1
    preamble: str = ""

    @cached_property
    def _index(self) -> dict[str, SamNode]:
        return {n.id: n for n in self.root.walk()}

    def nodes(self) -> list[SamNode]:
        """All nodes, depth-first in document order."""
        return list(self.root.walk())

    def node(self, node_id: str) -> SamNode:
        try:
            return self._index[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def parent_of(self, node_id: str) -> SamNode | None:
        if node_id == self.root.id:
            return None
        return self.node(node_id.rsplit("/", 1)[0])

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    message: str


def digest_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


# -- metadata ---------------------------------------------------------------


def split_list(value: str) -> list[str]:
    value = value.strip()
    if value.startswith("[") and value.endswith("]"):
        value = value[1:-1]
    return [item.strip() for item in value.split(",") if item.strip()]


def _parse_bool(value: str, lineno: int, key: str) -> bool:
    if value == "true":
        return True
    if value == "false":
        return False
    raise MalformedMetadata(lineno, f"{key} must be true or false, got {value!r}")


def _parse_positive_int(value: str, lineno: int, key: str) -> int:
    if not value.isdigit() or int(value) < 1:
        raise MalformedMetadata(lineno, f"{key} must be a positive integer, got {value!r}")
    return int(value)


def _parse_mount(item: str, lineno: int) -> MountSpec:
    parts = item.rsplit(":", 2)
    if len(parts) != 3 or not parts[0] or not parts[1]:
        raise MalformedMetadata(lineno, f"mount {item!r} is not host:guest:ro|rw")
    host, guest, mode = parts
    if mode not in ("ro", "rw"):
        raise MalformedMetadata(lineno, f"mount mode must be ro or rw, got {mode!r}")
    return MountSpec(host, guest, mode)


def parse_key_values(lines: list[str], first_lineno: int = 1) -> list[tuple[int, str, str]]:
    """Split ``key: value`` lines; blank lines and ``#`` comments are skipped."""
    pairs: list[tuple[int, str, str]] = []
    seen: set[str] = set()
    for offset, line in enumerate(lines):
        lineno = first_lineno + offset
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _KEY_RE.match(stripped)
        if not m:
            raise MalformedMetadata(lineno, f"expected 'key: value', got {stripped!r}")
        key, value = m.group(1), m.group(2).strip()
        if key in seen:
            raise MalformedMetadata(lineno, f"duplicate key {key!r}")
        seen.add(key)
        pairs.append((lineno, key, value))
    return pairs


def parse_metadata(lines: list[str], first_lineno: int = 1) -> TaskMetadata:
    values: dict = {}
    explicit: list[str] = []
    extra: list[tuple[str, str]] = []
    for lineno, key, value in parse_key_values(lines, first_lineno):
        explicit.append(key)
        if key in ("wall_time_limit", "max_iterations"):
            values[key] = _parse_positive_int(value, lineno, key)
        elif key in ("gpu", "network", "job_system"):
            values[key] = _parse_bool(value, lineno, key)
        elif key == "mounts":
            values["mounts"] = tuple(_parse_mount(i, lineno) for i in split_list(value))
        elif key == "skills":
            values["skills"] = tuple(split_list(value))
        elif key == "difficulty":
            values["difficulty_hint"] = _parse_positive_int(value, lineno, key)
        elif key == "model":
            if not value:
                raise MalformedMetadata(lineno, "model needs a value")
            values["model_preference"] = value
        else:
            extra.append((key, value))
    return TaskMetadata(**values, explicit_keys=tuple(explicit), extra=tuple(extra))


def dump_metadata(meta: TaskMetadata) -> list[str]:
    extra = dict(meta.extra)
    out = []
    for key in meta.explicit_keys:
        if key in ("wall_time_limit", "max_iterations"):
            value = str(getattr(meta, key))
        elif key in ("gpu", "network", "job_system"):
            value = "true" if getattr(meta, key) else "false"
        elif key == "mounts":
            value = ", ".join(str(m) for m in meta.mounts)
        elif key == "skills":
            value = "[" + ", ".join(meta.skills) + "]"
        elif key == "difficulty":
            value = str(meta.difficulty_hint)
        elif key == "model":
            value = meta.model_preference or ""
        else:
            value = extra[key]
        out.append(f"{key}: {value}".rstrip())
    return out


# -- document ---------------------------------------------------------------


@dataclass
class _Line:
    number: int  # 1-based
    start: int
    end: int  # offset after the line terminator
    text: str  # without terminator


@dataclass
class _Heading:
    index: int  # position in the line list
    level: int
    title: str


@dataclass
class _Span:
    start: int
    end: int


def _split_lines(text: str) -> list[_Line]:
    lines = []
    pos = 0
    for number, chunk in enumerate(text.splitlines(keepends=True), start=1):
        body = chunk.rstrip("\r\n")
        lines.append(_Line(number, pos, pos + len(chunk), body))
        pos += len(chunk)
    return lines


def _find_headings(lines: list[_Line], first: int) -> list[_Heading]:
    headings = []
    fence: str | None = None
    for i in range(first, len(lines)):
        text = lines[i].text
        fm = _FENCE_RE.match(text)
        if fence is None:
            if fm:
                fence = fm.group(1)
                continue
        else:
            if fm and fm.group(1)[0] == fence[0] and len(fm.group(1)) >= len(fence) and not fm.group(2).strip():
                fence = None
            continue
        hm = _HEADING_RE.match(text)
        if hm:
            title = (hm.group(2) or "").rstrip("#").strip()
            headings.append(_Heading(i, len(hm.group(1)), title))
    return headings


class _Builder:
    def __init__(self, text: str, lines: list[_Line], headings: list[_Heading]):
        self.text = text
        self.lines = lines
        self.headings = headings

    def _region(self, start: int, end: int) -> str:
        return self.text[start:end].strip()

    def _heading_end(self, h: _Heading) -> int:
        return self.lines[h.index].end

    def _heading_start(self, pos: int) -> int:
        if pos >= len(self.headings):
            return len(self.text)
        return self.lines[self.headings[pos].index].start

    def _next_at_or_above(self, pos: int, level: int) -> int:
        for j in range(pos + 1, len(self.headings)):
            if self.headings[j].level <= level:
                return j
        return len(self.headings)

    def build(self, pos: int, node_id: str) -> SamNode:
        h = self.headings[pos]
        end = self._next_at_or_above(pos, h.level)
        sections: dict[str, str] = {}
        children: list[SamNode] = []
        body_start = self._heading_end(h)
        first_sub = None
        j = pos + 1
        while j < end:
            sub = self.headings[j]
            if sub.level != h.level + 1:
                j += 1
                continue
            if first_sub is None:
                first_sub = j
            sub_end = self._next_at_or_above(j, sub.level)
            slot = SECTION_NAMES.get(sub.title.lower())
            if slot is not None:
                if slot in sections:
                    raise DuplicateSection(node_id, SECTION_TITLES[slot])
                sections[slot] = self._region(self._heading_end(sub), self._heading_start(sub_end))
            else:
                children.append(self.build(j, f"{node_id}/{len(children) + 1}"))
            j = sub_end
        preamble_end = self._heading_start(first_sub) if first_sub is not None else self._heading_start(end)
        todo = sections.get("todo", "")
        expectation = sections.get("expectation", "")
        if not todo:
            raise MissingTodo(node_id)
        if not expectation:
            raise MissingExpectation(node_id)
        return SamNode(
            id=node_id,
            title=h.title,
            todo=todo,
            expectation=expectation,
            context=sections.get("context") or None,
            children=tuple(children),
            preamble=self._region(body_start, preamble_end),
        )


def parse_sam(raw_text: str, source_path: str | Path = "<memory>") -> SamDocument:
    """Parse task-file text into a document. Pure: same text, same document."""
    digest = digest_bytes(raw_text.encode("utf-8"))
    text = raw_text[1:] if raw_text.startswith("﻿") else raw_text
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    lines = _split_lines(text)

    first = 0
    while first < len(lines) and not lines[first].text.strip():
        first += 1
    metadata = TaskMetadata()
    if first < len(lines) and (m := _META_OPEN_RE.match(lines[first].text.strip())):
        fence = m.group(1)
        close = None
        for k in range(first + 1, len(lines)):
            if lines[k].text.strip() == fence:
                close = k
                break
        if close is None:
            raise MalformedMetadata(lines[first].number, "unterminated meta block")
        metadata = parse_metadata([ln.text for ln in lines[first + 1 : close]], lines[first + 1].number if close > first + 1 else 0)
        first = close + 1

    headings = _find_headings(lines, first)
    if not headings:
        raise EmptyDocument()
    root_level = headings[0].level
    for h in headings[1:]:
        if h.level <= root_level:
            raise MultipleRoots(lines[h.index].number)

    preamble_start = lines[first].start if first < len(lines) else len(text)
    builder = _Builder(text, lines, headings)
    root = builder.build(0, "root")
    return SamDocument(
        root=root,
        metadata=metadata,
        source_digest=digest,
        source_path=str(source_path),
        heading_level=root_level,
        preamble=text[preamble_start : lines[headings[0].index].start].strip(),
    )


def load_sam(path: str | Path) -> SamDocument:
    path = Path(path)
    data = path.read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SamParseError(f"{path}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from None
    return parse_sam(text, path)


def dump_sam(doc: SamDocument) -> str:
    """Canonical Markdown for a document; ``parse_sam(dump_sam(d))`` mirrors ``d``."""
    out: list[str] = []
    meta_lines = dump_metadata(doc.metadata)
    if meta_lines:
        out += ["```meta", *meta_lines, "```", ""]
    if doc.preamble:
        out += [doc.preamble, ""]

    def emit(node: SamNode, level: int) -> None:
        out.append("#" * level + " " + node.title)
        out.append("")
        if node.preamble:
            out.extend([node.preamble, ""])
        for slot in ("context", "todo", "expectation"):
            body = getattr(node, slot)
            if body:
                out.extend(["#" * (level + 1) + " " + SECTION_TITLES[slot], "", body, ""])
        for child in node.children:
            emit(child, level + 1)

    emit(doc.root, doc.heading_level)
    return "\n".join(out).rstrip("\n") + "\n"


# -- queries ----------------------------------------------------------------


def validate(doc: SamDocument) -> list[Violation]:
    """Lint a parsed document. An empty list means the document is valid."""
    found: list[Violation] = []
    seen: set[str] = set()
    for node in doc.nodes():
        if node.id in seen:
            found.append(Violation("DuplicateId", node.id, f"node id {node.id} appears twice"))
        seen.add(node.id)
        if not node.todo.strip():
            found.append(Violation("EmptyTodo", node.id, "To-do is empty"))
        if not node.expectation.strip():
            found.append(Violation("EmptyExpectation", node.id, "Expectation is empty"))
        if node.preamble:
            found.append(Violation("StrayText", node.id, "text outside Context/To-do/Expectation is ignored"))
        if node.status not in STATUSES:
            found.append(Violation("BadStatus", node.id, f"status {node.status!r}"))
    if doc.preamble:
        found.append(Violation("StrayText", "document", "text before the first heading is ignored"))
    for key, _ in doc.metadata.extra:
        found.append(Violation("UnknownKey", key, f"unknown metadata key {key!r}"))
    for mount in doc.metadata.mounts:
        for path in (mount.host_path, mount.guest_path):
            if not path.startswith("/"):
                found.append(Violation("RelativeMountPath", str(mount), f"mount path {path!r} is not absolute"))
                break
        if mount.mode not in ("ro", "rw"):
            found.append(Violation("BadMountMode", str(mount), f"mode {mount.mode!r}"))
    return found


def extract_expectation(doc: SamDocument, node_id: str) -> str:
    """The verbatim stop criterion of a node, taken from the parsed file only."""
    return doc.node(node_id).expectation


def assert_unmodified(doc: SamDocument) -> str:
    """Re-hash the task file on disk; return the digest or raise TamperDetected."""
    path = Path(doc.source_path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileMissing(path) from None
    actual = digest_bytes(data)
    if actual != doc.source_digest:
        raise TamperDetected(doc.source_digest, actual)
    return actual


def render_for_agent(
    doc: SamDocument,
    node_id: str,
    include_children: bool = False,
    statuses: Mapping[str, str] | None = None,
) -> str:
    node = doc.node(node_id)
    statuses = statuses or {}
    parts = [f"# {node.title} [{node.id}]"]
    if node.context:
        parts.append(f"## Context\n{node.context}")
    parts.append(f"## To-do\n{node.todo}")
    parts.append(f"## Expectation\n{node.expectation}")
    if include_children and node.children:
        rows = [f"- {c.id} {c.title} [{statuses.get(c.id, c.status)}]" for c in node.children]
        parts.append("## Sub-tasks\n" + "\n".join(rows))
    return "\n\n".join(parts) + "\n"
