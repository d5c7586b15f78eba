"""Structural edit tools: replace or merge top-level functions, classes,
methods and import/assignment headers, producing verifiable patches."""

from __future__ import annotations

import ast
import difflib
import logging
import re
from dataclasses import dataclass
from typing import Iterable

from repoplan import pysource as ps
from repoplan.workspace import Workspace

log = logging.getLogger(__name__)

WHOLE_CLASS = "whole_class"
METHOD_OF_CLASS = "method_of_class"
FUNCTION = "function"
IMPORTS = "imports_and_assignments"
TERMINATE = "terminate"
EDIT_KINDS = (WHOLE_CLASS, METHOD_OF_CLASS, FUNCTION, IMPORTS, TERMINATE)

TOOL_KINDS = {
    "edit_whole_class_in_file": WHOLE_CLASS,
    "edit_method_of_class_in_file": METHOD_OF_CLASS,
    "edit_function_in_file": FUNCTION,
    "edit_imports_and_assignments_in_file": IMPORTS,
    "Terminate": TERMINATE,
}
_ARITY = {WHOLE_CLASS: 2, METHOD_OF_CLASS: 3, FUNCTION: 2, IMPORTS: 1, TERMINATE: 0}


class EditError(ValueError):
    """An edit that cannot be applied; its message is fed back to the oracle."""


class PatchError(ValueError):
    """A diff that does not apply to the given text."""


@dataclass(frozen=True)
class EditCommand:
    kind: str
    file: str = ""
    class_name: str | None = None
    method_name: str | None = None
    function_name: str | None = None
    body: str = ""

    def __post_init__(self) -> None:
        if self.kind not in EDIT_KINDS:
            raise EditError(f"unknown edit kind {self.kind!r}")

    def describe(self) -> str:
        target = self.function_name or ".".join(x for x in (self.class_name, self.method_name) if x)
        return f"{self.kind} {self.file}{':' + target if target else ''}"


@dataclass(frozen=True)
class Patch:
    file: str
    before_digest: str
    after_digest: str
    diff: str
    leaf: str = ""

    def apply_to(self, text: str) -> str:
        if ps.text_digest(text) != self.before_digest:
            raise PatchError(f"{self.file}: content does not match the patch's base digest")
        out = apply_unified_diff(text, self.diff)
        if ps.text_digest(out) != self.after_digest:
            raise PatchError(f"{self.file}: patched content does not match the recorded digest")
        return out

    def to_dict(self) -> dict[str, str]:
        return dict(self.__dict__)


def make_patch(file: str, before: str, after: str, leaf: str = "") -> Patch:
    diff = "".join(
        difflib.unified_diff(
            before.splitlines(keepends=True), after.splitlines(keepends=True), f"a/{file}", f"b/{file}"
        )
    )
    return Patch(file, ps.text_digest(before), ps.text_digest(after), diff, leaf)


_HUNK = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


def apply_unified_diff(text: str, diff: str) -> str:
    """Apply a unified diff produced by :func:`make_patch` (newline-terminated lines)."""
    src = text.splitlines(keepends=True)
    out: list[str] = []
    pos = 0
    lines = diff.splitlines(keepends=True)
    i = 0
    while i < len(lines) and not lines[i].startswith("@@"):
        i += 1
    while i < len(lines):
        m = _HUNK.match(lines[i])
        if not m:
            raise PatchError(f"bad hunk header: {lines[i]!r}")
        start = int(m.group(1))
        old_len = int(m.group(2)) if m.group(2) is not None else 1
        begin = start - 1 if old_len else start
        if begin < pos:
            raise PatchError("overlapping hunks")
        out.extend(src[pos:begin])
        pos = begin
        i += 1
        while i < len(lines) and not lines[i].startswith("@@"):
            tag, body = lines[i][:1], lines[i][1:]
            if tag in (" ", "-"):
                if pos >= len(src) or src[pos] != body:
                    raise PatchError(f"context mismatch at line {pos + 1}")
                if tag == " ":
                    out.append(body)
                pos += 1
            elif tag == "+":
                out.append(body)
            elif tag != "\\":
                raise PatchError(f"bad diff line: {lines[i]!r}")
            i += 1
    out.extend(src[pos:])
    return "".join(out)


# -- parsing oracle edit responses ------------------------------------------

_CALL = re.compile(r"^\s*(edit_\w+|Terminate)\s*\((.*)\)\s*$")


def parse_edit_commands(text: str) -> list[EditCommand]:
    """Parse ``tool(args)`` lines, each edit followed by one fenced python block."""
    cmds: list[EditCommand] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        m = _CALL.match(lines[i])
        i += 1
        if not m:
            continue
        name, arg_text = m.group(1), m.group(2)
        kind = TOOL_KINDS.get(name)
        if kind is None:
            raise EditError(f"unknown edit tool {name!r}")
        try:
            args = ast.literal_eval(f"({arg_text},)") if arg_text.strip() else ()
        except (ValueError, SyntaxError):
            raise EditError(f"cannot parse arguments of {name}: {arg_text!r}") from None
        if len(args) != _ARITY[kind] or not all(isinstance(a, str) for a in args):
            raise EditError(f"{name} expects {_ARITY[kind]} string argument(s)")
        if kind == TERMINATE:
            cmds.append(EditCommand(TERMINATE))
            continue
        while i < len(lines) and not lines[i].strip():
            i += 1
        if i >= len(lines) or not lines[i].strip().startswith("```"):
            raise EditError(f"{name} must be followed by a fenced python code block")
        i += 1
        body: list[str] = []
        while i < len(lines) and not lines[i].strip().startswith("```"):
            body.append(lines[i])
            i += 1
        if i >= len(lines):
            raise EditError(f"unterminated code block after {name}")
        i += 1
        code = "\n".join(body) + "\n"
        file = args[0]
        if kind == WHOLE_CLASS:
            cmds.append(EditCommand(kind, file, class_name=args[1], body=code))
        elif kind == METHOD_OF_CLASS:
            cmds.append(EditCommand(kind, file, class_name=args[1], method_name=args[2], body=code))
        elif kind == FUNCTION:
            cmds.append(EditCommand(kind, file, function_name=args[1], body=code))
        else:
            cmds.append(EditCommand(kind, file, body=code))
    return cmds


# -- structural editing -----------------------------------------------------


def _splice(source: str, span: ps.Span, new: str) -> str:
    lines = ps.lines_of(source)
    return "".join(lines[: span.start - 1]) + new + "".join(lines[span.end :])


def _ensure_nl(text: str) -> str:
    return text if not text or text.endswith("\n") else text + "\n"


def _append_block(source: str, block: str) -> str:
    source = _ensure_nl(source)
    if not source.strip():
        return block
    return source.rstrip("\n") + "\n\n\n" + block


def _parse_body(cmd: EditCommand) -> tuple[ast.Module, str]:
    body = ps.dedent_block(cmd.body)
    try:
        return ast.parse(body), body
    except SyntaxError as exc:
        raise EditError(f"edit body for {cmd.describe()} is not valid Python: {exc.msg} (line {exc.lineno})") from None


def _split_leading_imports(tree: ast.Module) -> tuple[list[ast.stmt], list[ast.stmt]]:
    imports = []
    rest = list(tree.body)
    while rest and isinstance(rest[0], (ast.Import, ast.ImportFrom)):
        imports.append(rest.pop(0))
    return imports, rest


def _header_text(body: str, nodes: list[ast.stmt]) -> str:
    return "".join(ps.segment(body, ps.node_span(n)) for n in nodes)


def _replace_top(source: str, name: str, kinds: tuple[type, ...], block: str, must_exist: bool) -> str:
    tree = ast.parse(source)
    node = ps.find_top(tree, name, kinds)
    if node is None:
        if must_exist:
            raise EditError(f"no top-level {name!r} to replace")
        return _append_block(source, block)
    return _splice(source, ps.node_span(node), block)


def _edit_definition(source: str, cmd: EditCommand, local_roots: set[str]) -> str:
    tree, body = _parse_body(cmd)
    imports, rest = _split_leading_imports(tree)
    if cmd.kind == FUNCTION:
        want, kinds, label = cmd.function_name, ps.FunctionNode, "function"
    else:
        want, kinds, label = cmd.class_name, (ast.ClassDef,), "class"
    if len(rest) != 1 or not isinstance(rest[0], kinds) or rest[0].name != want:
        raise EditError(f"{cmd.kind} edit must contain exactly one {label} named {want!r} (optionally preceded by imports)")
    block = _ensure_nl(ps.segment(body, ps.node_span(rest[0])))
    out = _replace_top(source, want, kinds, block, must_exist=False)
    if imports:
        out = merge_header(out, _header_text(body, imports), local_roots)
    return out


def _edit_method(source: str, cmd: EditCommand, local_roots: set[str]) -> str:
    tree, body = _parse_body(cmd)
    imports, rest = _split_leading_imports(tree)
    contract = (
        f"method_of_class edit must be a class block `class {cmd.class_name}:` containing only "
        f"the method {cmd.method_name!r}; do not output the method alone"
    )
    if len(rest) != 1 or not isinstance(rest[0], ast.ClassDef) or rest[0].name != cmd.class_name:
        raise EditError(contract)
    members = rest[0].body
    if len(members) != 1 or not isinstance(members[0], ps.FunctionNode) or members[0].name != cmd.method_name:
        raise EditError(contract)
    method_text = ps.dedent_block(ps.segment(body, ps.node_span(members[0])))

    target = ps.find_class(ast.parse(source), cmd.class_name or "")
    if target is None:
        raise EditError(f"class {cmd.class_name!r} not found in {cmd.file}")
    indent = ps.leading_indent(ps.lines_of(source)[target.body[0].lineno - 1]) if target.body else "    "
    if not indent:
        indent = "    "
    new_block = _ensure_nl(ps.indent_block(method_text, indent))
    existing = ps.find_method(target, cmd.method_name or "")
    if existing is not None:
        out = _splice(source, ps.node_span(existing), new_block)
    else:
        end = ps.node_span(target).end
        lines = ps.lines_of(_ensure_nl(source))
        out = "".join(lines[:end]) + "\n" + new_block + "".join(lines[end:])
    if imports:
        out = merge_header(out, _header_text(body, imports), local_roots)
    return out


def _import_key(node: ast.stmt) -> str:
    return ast.dump(node, annotate_fields=False, include_attributes=False)


def _assign_names(node: ast.stmt) -> set[str]:
    targets = node.targets if isinstance(node, ast.Assign) else [node.target]  # type: ignore[attr-defined]
    names = set()
    for t in targets:
        for sub in ast.walk(t):
            if isinstance(sub, ast.Name):
                names.add(sub.id)
    return names


def _insert_after(source: str, line: int, text: str) -> str:
    lines = ps.lines_of(_ensure_nl(source))
    return "".join(lines[:line]) + text + "".join(lines[line:])


def _header_anchor(tree: ast.Module, category: int | None, local_roots: set[str]) -> int:
    """Line after which a new import (of ``category``) or assignment (None) goes."""
    anchor = 0
    if tree.body and ps.is_docstring(tree.body[0]):
        anchor = tree.body[0].end_lineno or 0
    for node in tree.body:
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            is_future = isinstance(node, ast.ImportFrom) and node.module == "__future__"
            if category is None or is_future or ps.import_category(node, local_roots) <= category:
                anchor = node.end_lineno or anchor
        elif isinstance(node, (ast.Assign, ast.AnnAssign)) and category is None:
            anchor = node.end_lineno or anchor
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            break
    return anchor


def _merge_one_import(source: str, new: ast.Import | ast.ImportFrom, local_roots: set[str]) -> str:
    tree = ast.parse(source)
    existing = [n for n in tree.body if isinstance(n, (ast.Import, ast.ImportFrom))]
    if any(_import_key(n) == _import_key(new) for n in existing):
        return source
    if isinstance(new, ast.ImportFrom):
        for node in existing:
            if isinstance(node, ast.ImportFrom) and node.module == new.module and node.level == new.level:
                have = {(a.name, a.asname) for a in node.names}
                merged = list(node.names) + [a for a in new.names if (a.name, a.asname) not in have]
                if len(merged) == len(node.names):
                    return source
                node.names = merged
                return _splice(source, ps.node_span(node), ast.unparse(node) + "\n")
    # a name re-bound from a different module: the new form is the correction
    new_names = set(ps.bound_names(new))
    for node in existing:
        clash = new_names & set(ps.bound_names(node))
        if not clash:
            continue
        keep = [a for a in node.names if (a.asname or (a.name.split(".")[0] if isinstance(node, ast.Import) else a.name)) not in clash]
        if keep:
            node.names = keep
            source = _splice(source, ps.node_span(node), ast.unparse(node) + "\n")
        else:
            source = _splice(source, ps.node_span(node), "")
        return _merge_one_import(source, new, local_roots)
    anchor = _header_anchor(tree, ps.import_category(new, local_roots), local_roots)
    return _insert_after(source, anchor, ast.unparse(new) + "\n")


def _merge_one_assignment(source: str, new: ast.stmt, text: str) -> str:
    tree = ast.parse(source)
    names = _assign_names(new)
    for node in tree.body:
        if isinstance(node, (ast.Assign, ast.AnnAssign)) and _assign_names(node) & names:
            return _splice(source, ps.node_span(node), _ensure_nl(text))
    anchor = _header_anchor(tree, None, set())
    return _insert_after(source, anchor, _ensure_nl(text))


def merge_header(source: str, header: str, local_roots: set[str]) -> str:
    """Merge imports and top-level assignments from ``header`` into ``source``.

    Existing imports are kept unless a name they bind is re-imported from a
    different place, in which case only that name is replaced.
    """
    header = ps.dedent_block(header)
    tree = ast.parse(header)
    out = _ensure_nl(source)
    for node in tree.body:
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            out = _merge_one_import(out, node, local_roots)
        else:
            out = _merge_one_assignment(out, node, ps.segment(header, ps.node_span(node)))
    return out


def check_header_body(body: str, local_roots: set[str]) -> None:
    try:
        tree = ast.parse(ps.dedent_block(body))
    except SyntaxError as exc:
        raise EditError(f"imports edit is not valid Python: {exc.msg}") from None
    last = -1
    for node in tree.body:
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            if isinstance(node, ast.ImportFrom) and node.module == "__future__":
                cat = -1
            else:
                cat = ps.import_category(node, local_roots)
            if cat < last:
                raise EditError(
                    "imports must be ordered standard library, then third-party, then local: "
                    f"{ast.unparse(node)!r} is out of order"
                )
            last = max(last, cat)
        elif not isinstance(node, (ast.Assign, ast.AnnAssign)):
            raise EditError(f"imports edit may only contain imports and assignments, found {type(node).__name__}")


def edit_source(source: str, cmd: EditCommand, local_roots: Iterable[str] = ()) -> str:
    """Return ``source`` with ``cmd`` applied (pure; no file access)."""
    roots = set(local_roots)
    if cmd.kind == TERMINATE:
        return source
    if cmd.kind == IMPORTS:
        check_header_body(cmd.body, roots)
    try:
        ast.parse(source)
    except SyntaxError:
        log.warning("%s does not parse; replacing the whole file", cmd.file)
        return _ensure_nl(ps.dedent_block(cmd.body))
    if cmd.kind in (FUNCTION, WHOLE_CLASS):
        return _edit_definition(source, cmd, roots)
    if cmd.kind == METHOD_OF_CLASS:
        return _edit_method(source, cmd, roots)
    return merge_header(source, cmd.body, roots)


def apply_edit(workspace: Workspace, cmd: EditCommand, leaf: str = "") -> Patch:
    """Apply ``cmd`` to its file in ``workspace`` and return the resulting patch."""
    if cmd.kind == TERMINATE:
        raise EditError("Terminate carries no edit")
    if not cmd.file.endswith(".py"):
        raise EditError(f"edits target .py files, got {cmd.file!r}")
    try:
        present = workspace.exists(cmd.file)
    except ValueError as exc:
        raise EditError(str(exc)) from None
    if not present and cmd.kind == METHOD_OF_CLASS:
        raise EditError(f"file {cmd.file!r} does not exist")
    before = workspace.read(cmd.file) if present else ""
    after = _ensure_nl(edit_source(before, cmd, workspace.local_roots()))
    workspace.write(cmd.file, after)
    return make_patch(cmd.file, before, after, leaf)
