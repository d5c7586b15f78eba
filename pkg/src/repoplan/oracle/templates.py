"""Prompt templates, loaded from the data files next to this module."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from repoplan.oracle.parsing import PAYLOAD_JSON, SCHEMAS

SLOT = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TemplateError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str
    role: str = ""
    schema: str = "think_action"
    payload: str = PAYLOAD_JSON
    joiners: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.schema not in SCHEMAS:
            raise ValueError(f"template {self.id}: unknown schema {self.schema!r}")

    @property
    def slots(self) -> list[str]:
        return sorted(set(SLOT.findall(self.text)))


def _format_value(value: Any, joiner: str) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return joiner.join(_format_value(v, joiner) for v in value)
    if isinstance(value, (dict, int, float, bool)) or value is None:
        return json.dumps(value, indent=2, ensure_ascii=False)
    return str(value)


def render_prompt(template: PromptTemplate, bindings: Mapping[str, Any]) -> str:
    """Substitute every ``{slot}``; unbound slots raise :class:`TemplateError`.

    Substitution is single-pass, so bound text containing braces is never
    re-expanded.
    """
    missing = [s for s in template.slots if s not in bindings]
    if missing:
        raise TemplateError(f"template {template.id!r}: unbound slot(s) {', '.join(missing)}")

    def sub(m: re.Match[str]) -> str:
        name = m.group(1)
        return _format_value(bindings[name], template.joiners.get(name, "\n"))

    return SLOT.sub(sub, template.text)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    if directory is None:
        return dict(_builtin_templates())
    root = Path(directory)
    index = json.loads((root / "index.json").read_text(encoding="utf-8"))
    return {tid: _make(tid, spec, (root / spec["file"]).read_text(encoding="utf-8")) for tid, spec in index.items()}


def _make(tid: str, spec: Mapping[str, Any], text: str) -> PromptTemplate:
    return PromptTemplate(
        id=tid,
        text=text,
        role=spec.get("role", ""),
        schema=spec.get("schema", "think_action"),
        payload=spec.get("payload", PAYLOAD_JSON),
        joiners=dict(spec.get("joiners", {})),
    )


@lru_cache(maxsize=1)
def _builtin_templates() -> tuple[tuple[str, PromptTemplate], ...]:
    root = resources.files("repoplan.oracle") / "templates"
    index = json.loads((root / "index.json").read_text(encoding="utf-8"))
    return tuple(
        (tid, _make(tid, spec, (root / spec["file"]).read_text(encoding="utf-8"))) for tid, spec in sorted(index.items())
    )
