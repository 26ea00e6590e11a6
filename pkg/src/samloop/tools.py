"""Model-backed helper tools: task-maker and ask.

Both run as phase ``ui-tool`` through an audited gateway session.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

from . import prompts
from .errors import (
    AllProvidersFailed,
    GatewayExhausted,
    NoUsableModel,
    SamParseError,
    UnrepairableOutput,
)
from .sam import SamDocument, dump_sam, parse_sam, validate
from .skills import SkillLibrary

DOCS_DIR = Path(__file__).parent / "data" / "docs"
DEGRADED_NOTE = "[design notes not found; this answer is not grounded in the documentation]"

TASK_MAKER_SYSTEM = """You write task files for an unattended agent loop.
Reply with the task file only, following this format description exactly.

{format}"""

ASK_SYSTEM = """You answer questions about the samloop agent system, acting as its
user manual. Ground every answer in the notes below and name the exact
metadata keys, config keys or commands the user needs.

{notes}"""


def _call(session, request, rank: int):
    try:
        return session.complete(request, rank)
    except (NoUsableModel, AllProvidersFailed) as exc:
        raise GatewayExhausted(f"{request.phase}: {exc}") from exc


def _unfence(text: str) -> str:
    text = text.strip()
    m = re.match(r"^```(?:markdown|md)[ \t]*\n(.*)\n```$", text, re.DOTALL)
    return m.group(1) if m else text


def _problems(text: str, library: SkillLibrary) -> tuple[SamDocument | None, list[str]]:
    try:
        doc = parse_sam(text)
    except SamParseError as exc:
        return None, [str(exc)]
    found = [f"{v.rule} [{v.subject}]: {v.message}" for v in validate(doc)]
    found += [f"UnknownSkill [{s}]: no such skill" for s in doc.metadata.skills if s not in library]
    return doc, found


@dataclass
class TaskDraft:
    text: str
    doc: SamDocument
    suggested_skills: list[str]
    attempts: int


def _finish_draft(doc: SamDocument, request_text: str, suggested: list[str]) -> str:
    """Keep the user's words in the root context and add suggested skills."""
    root = doc.root
    context = root.context or ""
    if request_text not in context:
        context = f"User request:\n{request_text}" + (f"\n\n{context}" if context else "")
    meta = doc.metadata
    skills = tuple(dict.fromkeys((*meta.skills, *suggested)))
    keys = meta.explicit_keys
    if skills and "skills" not in keys:
        keys = (*keys, "skills")
    doc = replace(doc, root=replace(root, context=context), metadata=replace(meta, skills=skills, explicit_keys=keys))
    return dump_sam(doc)


def task_maker(text: str, session, library: SkillLibrary, rank: int = 1, max_repairs: int = 1, docs_dir: Path = DOCS_DIR) -> TaskDraft:
    """Natural-language request -> valid task file, via a bounded
    generate / validate / repair loop."""
    text = text.strip()
    if not text:
        raise ValueError("task-maker needs a description of the task")
    fmt = (docs_dir / "format.md").read_text(encoding="utf-8") if (docs_dir / "format.md").exists() else ""
    suggested = library.suggest(text)
    user = [
        prompts.header("ui-tool", "task-maker", 0),
        "## Request\n" + text,
        "## Available skills\n" + (", ".join(library.names()) or "(none)"),
    ]
    if suggested:
        user.append("## Suggested skills\n" + ", ".join(suggested))
    messages = [
        {"role": "system", "content": TASK_MAKER_SYSTEM.format(format=fmt)},
        {"role": "user", "content": "\n".join(user)},
    ]
    problems: list[str] = []
    for attempt in range(1, max_repairs + 2):
        reply = _call(session, prompts.request("ui-tool", messages), rank)
        draft = _unfence(reply.content)
        doc, problems = _problems(draft, library)
        if not problems:
            final = _finish_draft(doc, text, suggested)
            return TaskDraft(final, parse_sam(final), suggested, attempt)
        messages = messages + [
            {"role": "assistant", "content": reply.content},
            {"role": "user", "content": "The task file is invalid:\n- " + "\n- ".join(problems)
             + "\nReply with the corrected task file only."},
        ]
    raise UnrepairableOutput(f"no valid task file after {max_repairs + 1} attempts: " + "; ".join(problems))


def load_notes(docs_dir: Path = DOCS_DIR) -> str:
    if not docs_dir.is_dir():
        return ""
    return "\n\n".join(p.read_text(encoding="utf-8") for p in sorted(docs_dir.glob("*.md")))


def ask(question: str, session, rank: int = 1, docs_dir: Path = DOCS_DIR) -> str:
    question = question.strip()
    if not question:
        raise ValueError("ask needs a question")
    notes = load_notes(docs_dir)
    system = ASK_SYSTEM.format(notes=notes or "(no notes available)")
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": prompts.header("ui-tool", "ask", 0) + "\n" + question},
    ]
    answer = _call(session, prompts.request("ui-tool", messages), rank).content.strip()
    return answer if notes else f"{DEGRADED_NOTE}\n{answer}"
