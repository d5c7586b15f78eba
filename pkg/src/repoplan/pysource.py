"""Line-range view of a Python module's top-level structure.

Edits splice text by line ranges instead of round-tripping through
``ast.unparse`` so untouched code keeps its exact bytes and comments.
"""

from __future__ import annotations

import ast
import hashlib
import sys
from dataclasses import dataclass
from typing import Iterator

FunctionNode = (ast.FunctionDef, ast.AsyncFunctionDef)


@dataclass(frozen=True)
class Span:
    """1-based inclusive line range, decorators included."""

    start: int
    end: int


def node_span(node: ast.AST) -> Span:
    start = node.lineno
    for dec in getattr(node, "decorator_list", ()):
        start = min(start, dec.lineno)
    return Span(start, node.end_lineno or node.lineno)


def lines_of(source: str) -> list[str]:
    return source.splitlines(keepends=True)


def segment(source: str, span: Span) -> str:
    return "".join(lines_of(source)[span.start - 1 : span.end])


def find_top(tree: ast.Module, name: str, kinds: tuple[type, ...]) -> ast.AST | None:
    for node in tree.body:
        if isinstance(node, kinds) and getattr(node, "name", None) == name:
            return node
    return None


def find_function(tree: ast.Module, name: str) -> ast.AST | None:
    return find_top(tree, name, FunctionNode)


def find_class(tree: ast.Module, name: str) -> ast.ClassDef | None:
    node = find_top(tree, name, (ast.ClassDef,))
    return node if isinstance(node, ast.ClassDef) else None


def find_method(cls: ast.ClassDef, name: str) -> ast.AST | None:
    for node in cls.body:
        if isinstance(node, FunctionNode) and node.name == name:
            return node
    return None


def resolve(tree: ast.Module, qualname: str) -> ast.AST | None:
    """Find ``name`` or ``Class.method`` at top level."""
    if "." in qualname:
        cls_name, meth = qualname.split(".", 1)
        cls = find_class(tree, cls_name)
        return find_method(cls, meth) if cls else None
    return find_top(tree, qualname, (ast.ClassDef, *FunctionNode))


def is_docstring(stmt: ast.stmt) -> bool:
    return isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Constant) and isinstance(stmt.value.value, str)


def signature_text(node: ast.AST) -> str:
    """Header line of a def/class without body, e.g. ``def f(x: int) -> int``."""
    if isinstance(node, ast.ClassDef):
        bases = [ast.unparse(b) for b in node.bases] + [ast.unparse(k) for k in node.keywords]
        return f"class {node.name}({', '.join(bases)})" if bases else f"class {node.name}"
    assert isinstance(node, FunctionNode)
    prefix = "async def" if isinstance(node, ast.AsyncFunctionDef) else "def"
    ret = f" -> {ast.unparse(node.returns)}" if node.returns is not None else ""
    return f"{prefix} {node.name}({ast.unparse(node.args)}){ret}"


def _strip_docstrings(node: ast.AST) -> ast.AST:
    node = ast.parse(ast.unparse(node)).body[0]
    for sub in ast.walk(node):
        body = getattr(sub, "body", None)
        if isinstance(sub, (ast.ClassDef, *FunctionNode)) and body and is_docstring(body[0]):
            sub.body = body[1:] or [ast.Pass()]
    return node


def logic_digest(node: ast.AST) -> str:
    """Digest of a definition with comments, docstrings and formatting removed."""
    text = ast.unparse(_strip_docstrings(node))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class InterfaceInfo:
    qualname: str
    kind: str  # function | class | method
    signature: str
    docstring: str
    span: Span


def interfaces(source: str) -> Iterator[InterfaceInfo]:
    """Top-level functions, classes and their methods, in file order."""
    tree = ast.parse(source)
    for node in tree.body:
        if isinstance(node, FunctionNode):
            yield InterfaceInfo(node.name, "function", signature_text(node), ast.get_docstring(node) or "", node_span(node))
        elif isinstance(node, ast.ClassDef):
            yield InterfaceInfo(node.name, "class", signature_text(node), ast.get_docstring(node) or "", node_span(node))
            for sub in node.body:
                if isinstance(sub, FunctionNode):
                    yield InterfaceInfo(
                        f"{node.name}.{sub.name}",
                        "method",
                        signature_text(sub),
                        ast.get_docstring(sub) or "",
                        node_span(sub),
                    )


def import_lines(source: str) -> list[str]:
    tree = ast.parse(source)
    return [segment(source, node_span(n)).rstrip("\n") for n in tree.body if isinstance(n, (ast.Import, ast.ImportFrom))]


def top_level_module(node: ast.Import | ast.ImportFrom) -> list[str]:
    if isinstance(node, ast.ImportFrom):
        if node.level:
            return ["."]
        return [(node.module or "").split(".")[0]]
    return [a.name.split(".")[0] for a in node.names]


def import_category(node: ast.Import | ast.ImportFrom, local_roots: set[str]) -> int:
    """0 = __future__/standard library, 1 = third-party, 2 = local."""
    mods = top_level_module(node)
    if any(m == "." or m in local_roots for m in mods):
        return 2
    if all(m in sys.stdlib_module_names or m == "__future__" for m in mods):
        return 0
    return 1


def bound_names(node: ast.Import | ast.ImportFrom) -> list[str]:
    out = []
    for alias in node.names:
        if alias.asname:
            out.append(alias.asname)
        elif isinstance(node, ast.Import):
            out.append(alias.name.split(".")[0])
        else:
            out.append(alias.name)
    return out


def dedent_block(text: str) -> str:
    import textwrap

    return textwrap.dedent(text)


def indent_block(text: str, prefix: str) -> str:
    return "".join(prefix + line if line.strip() else line for line in lines_of(text))


def leading_indent(line: str) -> str:
    return line[: len(line) - len(line.lstrip(" \t"))]
