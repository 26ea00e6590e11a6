"""Skill library: reusable blocks of context injected into the work agent.

A skill is one Markdown file with a fenced ``meta`` header using the same
``key: value`` grammar as task files::

    ```meta
    name: slurm
    description: Submit and watch batch jobs on a SLURM cluster
    triggers: slurm, sbatch, squeue
    permissions: job_system
    ```

    Body text, injected verbatim.

Skills are only ever injected when a task's metadata names them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from . import prompts
from ._files import atomic_write, lock_for
from .errors import (
    AllProvidersFailed,
    DuplicateSkill,
    GatewayExhausted,
    MalformedMetadata,
    MalformedSkill,
    NoUsableModel,
    UnknownSkill,
    ValidationFailed,
)
from .memory import render_entries, render_history
from .sam import TaskMetadata, split_list, parse_key_values

BUNDLED_SKILLS = Path(__file__).parent / "data" / "skills"
PERMISSIONS = ("gpu", "network", "job_system")
SKILL_KEYS = ("name", "description", "triggers", "permissions")
_NAME_RE = re.compile(r"^[a-z0-9][a-z0-9_-]*$")
_META_OPEN = re.compile(r"^(`{3,}|~{3,})[ \t]*meta[ \t]*$")


@dataclass(frozen=True)
class Skill:
    name: str
    description: str
    body: str
    triggers: tuple[str, ...] = ()
    permissions: tuple[str, ...] = ()
    path: str | None = None

    def render(self) -> str:
        lines = [
            "```meta",
            f"name: {self.name}",
            f"description: {self.description}",
        ]
        if self.triggers:
            lines.append("triggers: " + ", ".join(self.triggers))
        if self.permissions:
            lines.append("permissions: " + ", ".join(self.permissions))
        return "\n".join(lines + ["```", "", self.body.strip(), ""])


def parse_skill(text: str, source: str = "<memory>") -> Skill:
    lines = text.split("\n")
    i = 0
    while i < len(lines) and not lines[i].strip():
        i += 1
    m = _META_OPEN.match(lines[i].strip()) if i < len(lines) else None
    if not m:
        raise MalformedSkill(f"{source}: a skill file starts with a ```meta block")
    fence = m.group(1)
    try:
        end = next(j for j in range(i + 1, len(lines)) if lines[j].strip() == fence)
    except StopIteration:
        raise MalformedSkill(f"{source}: meta block is never closed") from None
    try:
        pairs = parse_key_values(lines[i + 1 : end], i + 2)
    except MalformedMetadata as exc:
        raise MalformedSkill(f"{source}: {exc}") from None
    meta = {}
    for lineno, key, value in pairs:
        if key not in SKILL_KEYS:
            raise MalformedSkill(f"{source}: line {lineno}: unknown key {key!r}")
        meta[key] = value
    name = meta.get("name", "")
    if not _NAME_RE.match(name):
        raise MalformedSkill(f"{source}: name {name!r} is not a lowercase slug")
    if not meta.get("description"):
        raise MalformedSkill(f"{source}: description is required")
    permissions = split_list(meta.get("permissions", ""))
    bad = [p for p in permissions if p not in PERMISSIONS]
    if bad:
        raise MalformedSkill(f"{source}: unknown permissions {bad}")
    body = "\n".join(lines[end + 1 :]).strip()
    if not body:
        raise MalformedSkill(f"{source}: body is empty")
    return Skill(name, meta["description"], body, tuple(split_list(meta.get("triggers", ""))), tuple(permissions), source)


class SkillLibrary:
    def __init__(self, skills: dict[str, Skill] | None = None):
        self.skills = dict(skills or {})

    def __len__(self) -> int:
        return len(self.skills)

    def __contains__(self, name: str) -> bool:
        return name in self.skills

    def names(self) -> list[str]:
        return sorted(self.skills)

    def get(self, name: str) -> Skill:
        try:
            return self.skills[name]
        except KeyError:
            raise UnknownSkill(name) from None

    def add(self, skill: Skill) -> None:
        if skill.name in self.skills:
            raise DuplicateSkill(f"skill {skill.name!r} defined in {self.skills[skill.name].path} and {skill.path}")
        self.skills[skill.name] = skill

    def suggest(self, text: str) -> list[str]:
        """Skills whose trigger words occur in ``text`` (case-insensitive)."""
        out = []
        for name in self.names():
            for trigger in self.skills[name].triggers:
                if re.search(r"(?<!\w)" + re.escape(trigger) + r"(?!\w)", text, re.IGNORECASE):
                    out.append(name)
                    break
        return out


def load_library(roots) -> SkillLibrary:
    if isinstance(roots, (str, Path)):
        roots = [roots]
    library = SkillLibrary()
    for root in roots:
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"skill directory {root} does not exist")
        for path in sorted(root.glob("*.md")):
            library.add(parse_skill(path.read_text(encoding="utf-8"), str(path)))
    return library


def select_skills(metadata: TaskMetadata, library: SkillLibrary) -> list[str]:
    """Bodies of the skills the task names, in metadata order."""
    return [library.get(name).body for name in metadata.skills]


DISTILL_SYSTEM = """You turn the memory and history of a finished run into one reusable skill.
Reply with the skill file only: a ```meta block with name (lowercase slug),
description, triggers and optional permissions (gpu, network, job_system),
then the body describing the verified solution path."""


def make_skill(task_memory: list, history: list, library: SkillLibrary, session, target_dir: str | Path, rank: int = 1) -> Skill:
    """Distil a new skill from one run and write it into ``target_dir``."""
    if not task_memory and not history:
        raise ValidationFailed("nothing to distill")
    body = [
        prompts.header("ui-tool", "skill-maker", 0),
        "## Existing skills\n" + (", ".join(library.names()) or "(none)"),
        "## Task memory\n" + render_entries(task_memory),
        "## History\n" + render_history(history, limit=60),
    ]
    request = prompts.request("ui-tool", [
        {"role": "system", "content": DISTILL_SYSTEM},
        {"role": "user", "content": "\n".join(body)},
    ])
    try:
        reply = session.complete(request, rank)
    except (NoUsableModel, AllProvidersFailed) as exc:
        raise GatewayExhausted(f"skill distillation: {exc}") from exc
    text = reply.content.strip()
    fenced = re.match(r"^```(?:markdown|md)\n(.*)\n```$", text, re.DOTALL)
    if fenced:
        text = fenced.group(1)
    try:
        skill = parse_skill(text, "<model reply>")
    except MalformedSkill as exc:
        raise ValidationFailed(f"proposed skill is malformed: {exc}") from None
    if skill.name in library:
        raise ValidationFailed(f"proposed skill name {skill.name!r} collides with an existing skill")
    path = Path(target_dir) / f"{skill.name}.md"
    with lock_for(path):
        if path.exists():
            raise ValidationFailed(f"proposed skill name {skill.name!r} collides with {path}")
        skill = Skill(skill.name, skill.description, skill.body, skill.triggers, skill.permissions, str(path))
        atomic_write(path, skill.render())
    return skill
