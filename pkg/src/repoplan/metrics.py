"""Functionality coverage / novelty against a reference taxonomy, and
code-level statistics (files, normalized LOC, tokens)."""

from __future__ import annotations

import ast
import io
import json
import logging
import math
import os
import re
import tokenize
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from repoplan.oracle import Oracle, ProtocolError

log = logging.getLogger(__name__)

OOD = "OOD"
DEFAULT_EXCLUSIONS = ("tests", "test", "examples", "example", "benchmarks", "benchmark", "docs")


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Leaf categories (slash-joined paths) act as centroids; internal nodes roll up."""

    categories: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("taxonomy must not be empty")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("category names must be unique")

    @classmethod
    def from_document(cls, doc: Any) -> CategoryTaxonomy:
        out: list[str] = []

        def walk(node: Any, prefix: tuple[str, ...]) -> None:
            if isinstance(node, dict):
                for name, child in node.items():
                    if child in (None, {}, []):
                        out.append("/".join(prefix + (str(name),)))
                    else:
                        walk(child, prefix + (str(name),))
            elif isinstance(node, list):
                for item in node:
                    walk(item, prefix)
            elif isinstance(node, str):
                out.append("/".join(prefix + (node,)))
            else:
                raise ValueError(f"unexpected {type(node).__name__} in taxonomy at {'/'.join(prefix) or '<root>'}")

        walk(doc, ())
        return cls(tuple(out))

    @classmethod
    def load(cls, path: str | Path) -> CategoryTaxonomy:
        return cls.from_document(json.loads(Path(path).read_text(encoding="utf-8")))

    @staticmethod
    def name_of(category: str) -> str:
        return category.rsplit("/", 1)[-1]

    def rollups(self) -> dict[str, list[str]]:
        """Internal category -> leaf categories beneath it."""
        out: dict[str, list[str]] = {}
        for c in self.categories:
            parts = c.split("/")
            for i in range(1, len(parts)):
                out.setdefault("/".join(parts[:i]), []).append(c)
        return out


@dataclass(frozen=True)
class Assignment:
    """(functionality, category-or-OOD) pairs, one per generated functionality."""

    pairs: tuple[tuple[str, str], ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)

    def categories_hit(self) -> set[str]:
        return {c for _, c in self.pairs if c != OOD}

    def with_pair(self, g: str, c: str) -> Assignment:
        return Assignment(self.pairs + ((g, c),))

    def to_dict(self) -> list[dict[str, str]]:
        return [{"functionality": g, "category": c} for g, c in self.pairs]


Embedder = Callable[[str], Sequence[float]]


def cosine_distance(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - dot / (na * nb)


def nearest_category(
    vec: Sequence[float], centroids: Mapping[str, Sequence[float]], radius: float
) -> tuple[str, float]:
    """Closest centroid (ties by name), or OOD when every centroid is beyond ``radius``."""
    best, best_d = OOD, math.inf
    for name in sorted(centroids):
        d = cosine_distance(vec, centroids[name])
        if d < best_d - 1e-12:
            best, best_d = name, d
    if best_d > radius:
        return OOD, best_d
    return best, best_d


def assign_categories(
    functionalities: Iterable[str],
    taxonomy: CategoryTaxonomy,
    embedder: Embedder,
    oracle: Oracle | None = None,
    radius: float = 0.6,
) -> Assignment:
    """Nearest fixed-centroid assignment with an OOD radius, then an optional judge pass."""
    items = list(functionalities)
    try:
        centroids = {c: embedder(CategoryTaxonomy.name_of(c)) for c in taxonomy.categories}
        pairs = [(g, nearest_category(embedder(g), centroids, radius)[0]) for g in items]
    except Exception as exc:
        raise RuntimeError(f"embedding failed during category assignment: {exc}") from exc
    assignment = Assignment(tuple(pairs))
    if oracle is not None and items:
        assignment = refine_with_judge(assignment, taxonomy, oracle)
    return assignment


def refine_with_judge(assignment: Assignment, taxonomy: CategoryTaxonomy, oracle: Oracle) -> Assignment:
    ex = oracle.ask(
        "category_judge",
        categories="\n".join(taxonomy.categories),
        assignments="\n".join(f"{g} -> {c}" for g, c in assignment.pairs),
    )
    payload = ex.payload
    if not isinstance(payload, dict) or not isinstance(payload.get("reassign", {}), dict):
        raise ProtocolError("judge payload must contain an object 'reassign'", ex.raw)
    valid = set(taxonomy.categories) | {OOD}
    changes = {}
    for g, c in payload.get("reassign", {}).items():
        if c in valid:
            changes[g] = c
        else:
            log.warning("judge proposed unknown category %r for %r; ignored", c, g)
    return Assignment(tuple((g, changes.get(g, c)) for g, c in assignment.pairs))


def coverage(assignment: Assignment, taxonomy: CategoryTaxonomy) -> float:
    if not taxonomy.categories:
        raise ValueError("taxonomy must not be empty")
    hits = assignment.categories_hit() & set(taxonomy.categories)
    return len(hits) / len(taxonomy.categories)


def novelty(assignment: Assignment) -> tuple[float, int, int]:
    """(ratio, novel count, total count)."""
    total = len(assignment)
    novel = sum(1 for _, c in assignment.pairs if c == OOD)
    return (novel / total if total else 0.0), novel, total


# -- code statistics ---------------------------------------------------------

_WORD = re.compile(r"\w+|[^\w\s]")
_SKIP_TOKENS = {
    tokenize.COMMENT, tokenize.NL, tokenize.NEWLINE, tokenize.INDENT, tokenize.DEDENT,
    tokenize.ENCODING, tokenize.ENDMARKER,
}


def _docstring_lines(tree: ast.AST) -> set[int]:
    lines: set[int] = set()
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            body = node.body
            if body and isinstance(body[0], ast.Expr) and isinstance(body[0].value, ast.Constant) \
                    and isinstance(body[0].value.value, str):
                lines.update(range(body[0].lineno, (body[0].end_lineno or body[0].lineno) + 1))
    return lines


def normalized_code(source: str) -> tuple[int, int]:
    """(normalized LOC, token count) after dropping comments, docstrings and blanks."""
    tree = ast.parse(source)
    doc = _docstring_lines(tree)
    code_lines: set[int] = set()
    tokens = 0
    for tok in tokenize.generate_tokens(io.StringIO(source).readline):
        if tok.type in _SKIP_TOKENS:
            continue
        if tok.type == tokenize.STRING and tok.start[0] in doc:
            continue
        code_lines.update(range(tok.start[0], tok.end[0] + 1))
        tokens += len(_WORD.findall(tok.string))
    return len(code_lines), tokens


@dataclass
class CodeStats:
    files: int = 0
    loc: int = 0
    tokens: int = 0
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"files": self.files, "loc": self.loc, "tokens": self.tokens, "skipped": self.skipped}


def code_stats(root: str | Path, exclusions: Iterable[str] = DEFAULT_EXCLUSIONS) -> CodeStats:
    """Count .py files, normalized LOC and tokens outside the excluded directories."""
    root = Path(root)
    excluded = set(exclusions)
    stats = CodeStats()
    if not root.exists():
        return stats
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in excluded and d != "__pycache__" and not d.startswith("."))
        for name in sorted(filenames):
            if not name.endswith(".py"):
                continue
            path = Path(dirpath, name)
            rel = path.relative_to(root).as_posix()
            try:
                loc, toks = normalized_code(path.read_text(encoding="utf-8"))
            except (UnicodeDecodeError, SyntaxError, tokenize.TokenError, OSError) as exc:
                log.warning("skipping %s: %s", rel, exc)
                stats.skipped.append(rel)
                continue
            stats.files += 1
            stats.loc += loc
            stats.tokens += toks
    return stats


def metrics_report(assignment: Assignment, taxonomy: CategoryTaxonomy, stats: CodeStats, radius: float) -> dict[str, Any]:
    ratio, novel, total = novelty(assignment)
    return {
        "coverage": coverage(assignment, taxonomy),
        "novelty": ratio,
        "novel": novel,
        "total": total,
        "files": stats.files,
        "loc": stats.loc,
        "tokens": stats.tokens,
        "ood_radius": radius,
        "assignment": assignment.to_dict(),
    }
