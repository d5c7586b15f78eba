"""Feature ontology: the hierarchical capability catalog used as a planning prior.

Holds the tree with its frequency library, the diversity-aware sampler used
for exploration, and the embedding index used for goal-aligned retrieval.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

NodeKey = tuple[str, ...]
ROOT: NodeKey = ()

Embedder = Callable[[str], Sequence[float]]


class OntologyParseError(ValueError):
    pass


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class FeaturePath:
    """A feature identified by its chain of segment names."""

    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("feature path must have at least one segment")
        for seg in self.segments:
            if not seg or "/" in seg:
                raise ValueError(f"invalid feature path segment {seg!r}")

    @classmethod
    def parse(cls, text: str) -> FeaturePath:
        return cls(tuple(s.strip() for s in text.strip().strip("/").split("/")))

    @property
    def text(self) -> str:
        return "/".join(self.segments)

    def __str__(self) -> str:
        return self.text


def as_key(path: FeaturePath | str | Iterable[str]) -> NodeKey:
    if isinstance(path, FeaturePath):
        return path.segments
    if isinstance(path, str):
        return FeaturePath.parse(path).segments
    return tuple(path)


def path_text(key: NodeKey) -> str:
    return "/".join(key)


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    sample_size: int = 10
    overlap_threshold: float = 0.5
    max_retries: int = 5

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.sample_size < 1 or self.max_retries < 1:
            raise ValueError("sample_size and max_retries must be positive")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class FeatureTree:
    """Feature hierarchy under a virtual root ``()``.

    Children are kept sorted by name, which makes trees built from the same
    path set identical regardless of insertion order.
    """

    children: Mapping[NodeKey, tuple[NodeKey, ...]] = field(default_factory=lambda: {ROOT: ()})
    frequency: Mapping[NodeKey, float] = field(default_factory=dict)

    @classmethod
    def from_paths(cls, paths: Iterable[FeaturePath | str], weights: Mapping[str, float] | None = None) -> FeatureTree:
        return insert_paths(cls(), paths, weights)

    def __contains__(self, path: object) -> bool:
        try:
            return as_key(path) in self.children  # type: ignore[arg-type]
        except ValueError:
            return False

    def get_children(self, node: NodeKey) -> tuple[NodeKey, ...]:
        return self.children.get(node, ())

    def weight(self, node: NodeKey) -> float:
        return self.frequency.get(node, 1.0)

    @property
    def roots(self) -> tuple[NodeKey, ...]:
        return self.get_children(ROOT)

    def nodes(self) -> list[NodeKey]:
        return sorted(k for k in self.children if k != ROOT)

    def is_leaf(self, node: NodeKey) -> bool:
        return node != ROOT and not self.get_children(node)

    def leaves(self) -> list[NodeKey]:
        return [k for k in self.nodes() if not self.children[k]]

    def leaf_paths(self) -> list[str]:
        return [path_text(k) for k in self.leaves()]

    def __len__(self) -> int:
        return len(self.children) - 1

    def level_counts(self) -> dict[int, int]:
        """Number of nodes at each depth (level 1 = children of the virtual root)."""
        return dict(sorted(Counter(len(k) for k in self.nodes()).items()))

    def canonical(self) -> str:
        """Canonical ``path<TAB>weight`` listing, one node per line."""
        return "".join(f"{path_text(k)}\t{_fmt_weight(self.weight(k))}\n" for k in self.nodes())

    def render(self, indent: str = "  ") -> str:
        lines = [f"{indent * (len(k) - 1)}{k[-1]}" for k in self.nodes()]
        return "\n".join(lines)


def _fmt_weight(w: float) -> str:
    return str(int(w)) if float(w).is_integer() else repr(float(w))


def insert_paths(
    tree: FeatureTree, paths: Iterable[FeaturePath | str], weights: Mapping[str, float] | None = None
) -> FeatureTree:
    """Return ``tree`` extended with ``paths``; existing nodes are untouched."""
    kids: dict[NodeKey, set[NodeKey]] = {k: set(v) for k, v in tree.children.items()}
    kids.setdefault(ROOT, set())
    freq = dict(tree.frequency)
    for p in paths:
        key = as_key(p)
        for i in range(1, len(key) + 1):
            node = key[:i]
            kids[node[:-1]].add(node)
            kids.setdefault(node, set())
    if weights:
        for text, w in weights.items():
            freq[as_key(text)] = float(w)
    children = {k: tuple(sorted(v)) for k, v in kids.items()}
    return FeatureTree(children, freq)


def subtree_paths(tree: FeatureTree) -> set[str]:
    return {path_text(k) for k in tree.nodes()}


# -- loading ----------------------------------------------------------------


def parse_tree_lines(text: str, source: str = "<ontology>") -> FeatureTree:
    """Parse the line format: ``path[<TAB>frequency]`` per line.

    Repeated paths are merged and their frequencies summed.
    """
    totals: dict[NodeKey, float] = {}
    paths: list[NodeKey] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise OntologyParseError(f"{source}:{lineno}: expected 'path<TAB>frequency', got {len(parts)} fields")
        try:
            key = FeaturePath.parse(parts[0]).segments
        except ValueError as exc:
            raise OntologyParseError(f"{source}:{lineno}: bad path {parts[0]!r}: {exc}") from None
        if len(parts) == 2:
            if not re.fullmatch(r"\s*\d+\s*", parts[1]):
                raise OntologyParseError(
                    f"{source}:{lineno}: frequency for {parts[0]!r} must be a nonnegative integer, got {parts[1]!r}"
                )
            totals[key] = totals.get(key, 0.0) + int(parts[1])
        paths.append(key)
    return insert_paths(FeatureTree(), paths, {path_text(k): w for k, w in totals.items()})


def parse_tree_json(doc: object, source: str = "<ontology>") -> FeatureTree:
    """Parse the structured format: a list of ``{"name", "frequency"?, "children"?}`` objects."""
    totals: dict[NodeKey, float] = {}
    paths: list[NodeKey] = []

    def walk(items: object, prefix: NodeKey, where: str) -> None:
        if not isinstance(items, list):
            raise OntologyParseError(f"{source}:{where}: expected a list of nodes")
        for i, item in enumerate(items):
            here = f"{where}[{i}]"
            if isinstance(item, str):
                item = {"name": item}
            if not isinstance(item, dict) or not isinstance(item.get("name"), str):
                raise OntologyParseError(f"{source}:{here}: node needs a string 'name'")
            name = item["name"].strip()
            if not name or "/" in name:
                raise OntologyParseError(f"{source}:{here}: invalid node name {item['name']!r}")
            key = prefix + (name,)
            paths.append(key)
            if "frequency" in item:
                f = item["frequency"]
                if not isinstance(f, int) or isinstance(f, bool) or f < 0:
                    raise OntologyParseError(f"{source}:{here}: frequency must be a nonnegative integer")
                totals[key] = totals.get(key, 0.0) + f
            walk(item.get("children", []), key, here + ".children")

    walk(doc, ROOT, "$")
    return insert_paths(FeatureTree(), paths, {path_text(k): w for k, w in totals.items()})


def load_tree(source: str | Path) -> FeatureTree:
    path = Path(source)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise OntologyParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        tree = parse_tree_json(doc, str(path))
    else:
        tree = parse_tree_lines(text, str(path))
    log.info("loaded %s: %d nodes, per-level %s", path, len(tree), tree.level_counts())
    return tree


# -- sampling ---------------------------------------------------------------


def temp_transform(p: Sequence[float], t: float) -> list[float]:
    """Temperature-reshape a distribution: ``q_i ∝ p_i ** (1/t)``."""
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    if any(x < 0 for x in p):
        raise ValueError("probabilities must be nonnegative")
    if abs(math.fsum(p) - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1, got {math.fsum(p)}")
    # work in log space so tiny temperatures don't underflow
    logs = [math.log(x) / t if x > 0 else -math.inf for x in p]
    top = max(logs)
    w = [math.exp(v - top) if v != -math.inf else 0.0 for v in logs]
    total = math.fsum(w)
    return [x / total for x in w]


def base_sample(root: NodeKey, tree: FeatureTree, cfg: SamplerConfig, rng: random.Random) -> frozenset[NodeKey]:
    """Walk down from ``root`` for up to ``cfg.sample_size`` steps.

    Each step draws one child with frequency weights reshaped by the
    temperature; the walk stops early at a leaf.
    """
    selected: set[NodeKey] = set()
    cur = root
    for _ in range(cfg.sample_size):
        kids = tree.get_children(cur)
        if not kids:
            break
        f = [tree.weight(k) for k in kids]
        total = math.fsum(f)
        p = [x / total for x in f] if total > 0 else [1.0 / len(kids)] * len(kids)
        q = temp_transform(p, cfg.temperature)
        cur = rng.choices(kids, weights=q)[0]
        selected.add(cur)
    return frozenset(selected)


def overlap(candidate: Iterable[NodeKey], seen: Iterable[NodeKey]) -> float:
    cand = set(candidate)
    if not cand:
        return 0.0
    return len(cand & set(seen)) / len(cand)


def reject_sample(
    root: NodeKey,
    tree: FeatureTree,
    cfg: SamplerConfig,
    seen: Iterable[NodeKey],
    rng: random.Random,
) -> frozenset[NodeKey]:
    """Draw up to ``cfg.max_retries`` candidates, keeping the first whose
    overlap with ``seen`` is at most the threshold, else the least-overlapping one."""
    seen_set = set(seen)
    best: frozenset[NodeKey] = frozenset()
    best_ovl = math.inf
    for _ in range(cfg.max_retries):
        cand = base_sample(root, tree, cfg, rng)
        ovl = overlap(cand, seen_set)
        if ovl < best_ovl:
            best_ovl, best = ovl, cand
        if ovl <= cfg.overlap_threshold:
            return cand
    return best


# -- embedding retrieval ----------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize_words(text: str) -> list[str]:
    # split camelCase before lowercasing
    text = re.sub(r"([a-z0-9])([A-Z])", r"\1 \2", text)
    return _TOKEN.findall(text.lower())


class HashingEmbedder:
    """Deterministic feature-hashing embedder (words + character trigrams).

    Uses blake2b rather than ``hash`` so vectors are stable across processes.
    """

    def __init__(self, dim: int = 256, trigram_weight: float = 0.5):
        self.dim = dim
        self.trigram_weight = trigram_weight

    def _slot(self, feature: str) -> tuple[int, float]:
        h = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
        n = int.from_bytes(h, "little")
        return n % self.dim, 1.0 if (n >> 63) & 1 else -1.0

    def __call__(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for word in tokenize_words(text):
            i, s = self._slot("w:" + word)
            vec[i] += s
            padded = f"#{word}#"
            for j in range(len(padded) - 2):
                i, s = self._slot("t:" + padded[j : j + 3])
                vec[i] += s * self.trigram_weight
        norm = math.sqrt(sum(x * x for x in vec))
        return [x / norm for x in vec] if norm else vec


@dataclass(frozen=True)
class EmbeddingIndex:
    """Exact-scan vector index keyed by canonical feature path."""

    paths: tuple[str, ...]
    vectors: np.ndarray
    metadata: tuple[dict, ...] = ()

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.paths):
            raise ValueError("vectors must be an (n_paths, dim) matrix")

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @classmethod
    def from_vectors(cls, items: Mapping[str, Sequence[float]]) -> EmbeddingIndex:
        paths = tuple(sorted(items))
        dims = {len(items[p]) for p in paths}
        if len(dims) > 1:
            raise ValueError(f"vectors have mixed dimensions {sorted(dims)}")
        mat = np.array([items[p] for p in paths], dtype=float).reshape(len(paths), dims.pop() if dims else 0)
        return cls(paths, mat, tuple({"path": p} for p in paths))

    @classmethod
    def build(cls, tree: FeatureTree, embedder: Embedder, leaves_only: bool = True) -> EmbeddingIndex:
        keys = tree.leaves() if leaves_only else tree.nodes()
        return cls.from_vectors({path_text(k): embedder(path_text(k).replace("/", " / ")) for k in keys})

    def check_tree(self, tree: FeatureTree) -> list[str]:
        """Indexed paths that are missing from ``tree``."""
        return [p for p in self.paths if p not in tree]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, p in enumerate(self.paths):
                meta = self.metadata[i] if self.metadata else {"path": p}
                fh.write(json.dumps({"path": p, "vector": self.vectors[i].tolist(), "metadata": meta}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingIndex:
        items: dict[str, list[float]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    items[rec["path"]] = rec["vector"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise OntologyParseError(f"{path}:{lineno}: bad index record ({exc})") from None
        return cls.from_vectors(items)

    def similarities(self, vector: Sequence[float]) -> np.ndarray:
        q = np.asarray(vector, dtype=float)
        if q.shape != (self.dim,):
            raise ValueError(f"query has dimension {q.shape}, index has {self.dim}")
        norms = np.linalg.norm(self.vectors, axis=1) * np.linalg.norm(q)
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where(norms > 0, self.vectors @ q / np.where(norms > 0, norms, 1.0), 0.0)
        return sims


def retrieve_top_k(index: EmbeddingIndex, query: str, k: int, embedder: Embedder) -> list[str]:
    """Top-``k`` paths by cosine similarity to the query; ties by path text."""
    if not len(index):
        raise ValueError("cannot retrieve from an empty index")
    if k < 1:
        raise ValueError("k must be positive")
    try:
        vec = embedder(query)
    except Exception as exc:
        raise EmbeddingError(f"embedder failed for query {query!r}: {exc}") from exc
    sims = index.similarities(vec)
    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.paths[i]))
    return [index.paths[i] for i in order[:k]]
