"""Response-block parsing for oracle replies.

Replies carry an optional ``<think>`` block plus exactly one payload block
(``<action>`` or ``<solution>``, depending on the template), or, for code
templates, fenced code blocks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any

THINK_ACTION = "think_action"
THINK_SOLUTION = "think_solution"
CODE_BLOCKS = "code_blocks"
SCHEMAS = (THINK_ACTION, THINK_SOLUTION, CODE_BLOCKS)

PAYLOAD_JSON = "json"
PAYLOAD_TEXT = "text"
PAYLOAD_SECTIONS = "sections"
PAYLOAD_CODE = "code"

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.S)


class ProtocolError(ValueError):
    """A reply that does not follow its template's response schema.

    ``offset`` is a byte offset into the UTF-8 encoded raw response.
    """

    def __init__(self, message: str, raw: str = "", offset: int | None = None, template_id: str | None = None):
        self.reason = message
        self.raw = raw
        self.offset = offset
        self.template_id = template_id
        where = f" at byte {offset}" if offset is not None else ""
        tid = f"[{template_id}] " if template_id else ""
        super().__init__(f"{tid}{message}{where}")


@dataclass(frozen=True)
class Section:
    subtree: str
    path: str
    code: str


@dataclass(frozen=True)
class ParsedBlocks:
    think: str
    payload: Any
    payload_text: str


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _find_block(raw: str, tag: str, required: bool) -> tuple[str, int] | None:
    pattern = re.compile(rf"<{tag}>(.*?)</{tag}>", re.S)
    matches = list(pattern.finditer(raw))
    if len(matches) > 1:
        raise ProtocolError(f"duplicated <{tag}> block", raw, _byte_offset(raw, matches[1].start()))
    if not matches:
        opener = raw.find(f"<{tag}>")
        if opener >= 0:
            raise ProtocolError(f"unterminated <{tag}> block", raw, _byte_offset(raw, opener))
        if required:
            raise ProtocolError(f"missing <{tag}> block", raw, len(raw.encode("utf-8")))
        return None
    m = matches[0]
    return m.group(1), m.start(1)


def strip_fence(text: str) -> str:
    """Drop one surrounding fenced-code wrapper, if present."""
    m = re.fullmatch(r"\s*```[A-Za-z0-9_+-]*[ \t]*\n(.*?)```\s*", text, re.S)
    return m.group(1) if m else text


def code_blocks(text: str, lang: str | None = None) -> list[str]:
    return [m.group(2) for m in _FENCE.finditer(text) if lang is None or m.group(1) in ("", lang)]


def split_sections(text: str) -> list[Section]:
    """Split ``## Subtree`` / ``### path`` headed code into sections.

    Code may be fenced or bare; bare code runs until the next header.
    """
    sections: list[Section] = []
    subtree, path = "", None
    buf: list[str] = []
    in_fence = False

    def flush() -> None:
        nonlocal buf
        code = "\n".join(buf).strip("\n")
        if path is not None and code.strip():
            sections.append(Section(subtree, path, strip_fence(code + "\n").rstrip("\n") + "\n"))
        buf = []

    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("```"):
            in_fence = not in_fence
            buf.append(line)
            continue
        if not in_fence and stripped.startswith("### "):
            flush()
            path = stripped[4:].strip()
            continue
        if not in_fence and stripped.startswith("## "):
            flush()
            subtree, path = stripped[3:].strip(), None
            continue
        if path is not None:
            buf.append(line)
    flush()
    return sections


def parse_json_payload(text: str, raw: str = "", base: int = 0) -> Any:
    body = strip_fence(text)
    shift = text.find(body) if body != text else 0
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed JSON payload: {exc.msg}", raw or text, base + _byte_offset(text, shift + exc.pos)) from None


def parse_blocks(raw: str, schema: str, payload: str = PAYLOAD_JSON) -> ParsedBlocks:
    """Extract the think text and the parsed payload from ``raw``."""
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}")
    think_block = _find_block(raw, "think", required=False)
    think = think_block[0].strip() if think_block else ""

    if schema == CODE_BLOCKS:
        blocks = code_blocks(raw, "python")
        if not blocks:
            raise ProtocolError("no fenced python code block", raw, len(raw.encode("utf-8")))
        if payload == PAYLOAD_SECTIONS:
            secs = split_sections(raw)
            if not secs:
                raise ProtocolError("no '## subtree / ### path' sections", raw, 0)
            return ParsedBlocks(think, secs, raw)
        return ParsedBlocks(think, blocks[0], blocks[0])

    tag = "action" if schema == THINK_ACTION else "solution"
    other = "solution" if tag == "action" else "action"
    found = _find_block(raw, tag, required=False)
    if found is None:
        stray = _find_block(raw, other, required=False)
        if stray is not None:
            raise ProtocolError(f"expected <{tag}> block, got <{other}>", raw, _byte_offset(raw, stray[1]))
        _find_block(raw, tag, required=True)
    body, start = found  # type: ignore[misc]
    base = _byte_offset(raw, start)
    if payload == PAYLOAD_JSON:
        return ParsedBlocks(think, parse_json_payload(body, raw, base), body)
    if payload == PAYLOAD_SECTIONS:
        secs = split_sections(body)
        if not secs:
            raise ProtocolError("no '## subtree / ### path' sections", raw, base)
        return ParsedBlocks(think, secs, body)
    if payload == PAYLOAD_CODE:
        blocks = code_blocks(body, "python")
        if not blocks:
            raise ProtocolError("no fenced python code block", raw, base)
        return ParsedBlocks(think, blocks[0], body)
    return ParsedBlocks(think, body.strip("\n"), body)


def format_blocks(think: str, payload: Any, schema: str = THINK_ACTION) -> str:
    """Inverse of :func:`parse_blocks` for JSON payloads (used by stubs and tests).

    A ``str`` payload is written verbatim as the block body, not JSON-encoded.
    """
    tag = "action" if schema == THINK_ACTION else "solution"
    body = payload if isinstance(payload, str) else json.dumps(payload, indent=2, ensure_ascii=False)
    return f"<think>\n{think}\n</think>\n<{tag}>\n{body}\n</{tag}>\n"
