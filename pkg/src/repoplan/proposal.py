"""Proposal-level planning: pick a repository-aligned feature subtree and
refactor it into a modular functionality graph."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from repoplan.ontology import (
    ROOT,
    EmbeddingIndex,
    Embedder,
    FeaturePath,
    FeatureTree,
    HashingEmbedder,
    SamplerConfig,
    as_key,
    insert_paths,
    path_text,
    reject_sample,
    retrieve_top_k,
)
from repoplan.oracle import Oracle, ProtocolError
from repoplan.rpg import COMPONENT, HIERARCHY, LEAF, SUBGRAPH_ROOT, Rpg, RpgEdge, RpgNode

log = logging.getLogger(__name__)

PROPOSED_ROOT = "proposed"


@dataclass(frozen=True)
class RepoSpec:
    name: str
    description: str
    category: str = ""
    purpose: str = ""
    scope: str = ""

    def __post_init__(self) -> None:
        if not self.name.strip() or not self.description.strip():
            raise ValueError("repository name and description must be nonempty")

    def overview(self) -> str:
        lines = [f"Name: {self.name}", f"Description: {self.description}"]
        for label, value in (("Category", self.category), ("Purpose", self.purpose), ("Scope", self.scope)):
            if value:
                lines.append(f"{label}: {value}")
        return "\n".join(lines)


@dataclass(frozen=True)
class SelectionConfig:
    iterations: int = 30
    top_k: int = 20
    threshold: float | None = None
    batch_size: int = 20
    explore_samples: int = 1
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.top_k < 1 or self.batch_size < 1 or self.explore_samples < 0:
            raise ValueError("iterations, top_k and batch_size must be positive")


@dataclass
class IterationRecord:
    iteration: int
    exploit_candidates: list[str]
    explore_candidates: list[str]
    selected: list[str]
    missing: list[str]
    batches: list[dict[str, list[str]]] = field(default_factory=list)
    leaf_count: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class SubtreeState:
    """Mutable selection state; a single writer owns it."""

    subtree: FeatureTree = field(default_factory=FeatureTree)
    visited: set[str] = field(default_factory=set)
    missing: set[str] = field(default_factory=set)
    history: list[IterationRecord] = field(default_factory=list)

    def leaf_paths(self) -> list[str]:
        return self.subtree.leaf_paths()

    def contains(self, path: str) -> bool:
        return path in self.subtree


def _render_paths(paths: Iterable[str]) -> str:
    paths = sorted(set(paths))
    if not paths:
        return "(empty)"
    return FeatureTree.from_paths(paths).render()


def _selected_paths(payload: Any, key: str) -> list[str]:
    if not isinstance(payload, dict) or not isinstance(payload.get(key), list):
        raise ProtocolError(f"payload must be an object with a list {key!r}", json.dumps(payload))
    out = []
    for item in payload[key]:
        if not isinstance(item, str):
            raise ProtocolError(f"{key} entries must be strings", json.dumps(payload))
        try:
            out.append(FeaturePath.parse(item).text)
        except ValueError as exc:
            raise ProtocolError(f"bad feature path {item!r}: {exc}", json.dumps(payload)) from None
    return out


def select_candidates(
    oracle: Oracle, template_id: str, candidates: list[str], state: SubtreeState, spec: RepoSpec
) -> list[str]:
    """Ask the oracle to filter ``candidates``; answers outside the set are dropped."""
    if not candidates:
        return []
    slot = "exploit_tree" if template_id == "select_exploit" else "explore_tree"
    ex = oracle.ask(
        template_id,
        repo_overview=spec.overview(),
        current_tree=_render_paths(state.leaf_paths()),
        **{slot: _render_paths(candidates)},
    )
    allowed = set(candidates)
    chosen = _selected_paths(ex.payload, "all_selected_feature_paths")
    dropped = [p for p in chosen if p not in allowed]
    if dropped:
        log.warning("%s: ignoring %d path(s) outside the candidate set", template_id, len(dropped))
    return list(dict.fromkeys(p for p in chosen if p in allowed))


def _flatten_missing(node: Any, prefix: tuple[str, ...], out: list[str], raw: str) -> None:
    if isinstance(node, dict):
        for name, child in node.items():
            _flatten_missing(child, prefix + (str(name),), out, raw)
    elif isinstance(node, list):
        for item in node:
            if isinstance(item, str):
                _flatten_missing(item, prefix, out, raw)
            elif isinstance(item, dict):
                _flatten_missing(item, prefix, out, raw)
            else:
                raise ProtocolError(f"unexpected {type(item).__name__} in missing_features", raw)
    elif isinstance(node, str):
        try:
            out.append(FeaturePath(prefix + tuple(s.strip() for s in node.split("/"))).text)
        except ValueError as exc:
            raise ProtocolError(f"bad missing feature {node!r}: {exc}", raw) from None
    else:
        raise ProtocolError(f"unexpected {type(node).__name__} in missing_features", raw)


def propose_missing(state: SubtreeState, spec: RepoSpec, oracle: Oracle) -> set[str]:
    """Feature paths the oracle says are missing, minus those already in the subtree."""
    ex = oracle.ask("propose_missing", repo_overview=spec.overview(), current_tree=_render_paths(state.leaf_paths()))
    payload = ex.payload
    if not isinstance(payload, dict) or "missing_features" not in payload:
        raise ProtocolError("payload must contain 'missing_features'", ex.raw)
    found: list[str] = []
    _flatten_missing(payload["missing_features"], (), found, ex.raw)
    return {
        p for p in found if not state.contains(p) and not state.contains(f"{PROPOSED_ROOT}/{p}")
    }


def self_check_batch(state: SubtreeState, batch: list[str], oracle: Oracle, spec: RepoSpec | None = None,
                     batch_size: int | None = None) -> list[str]:
    """Oracle self-check of one batch. Every batch member becomes visited."""
    if batch_size is not None and len(batch) > batch_size:
        raise ValueError(f"batch of {len(batch)} exceeds batch size {batch_size}; split it first")
    ex = oracle.ask(
        "self_check",
        repo_overview=spec.overview() if spec else "",
        current_tree=_render_paths(state.leaf_paths()),
        batch="\n".join(batch),
    )
    state.visited.update(batch)
    allowed = set(batch)
    accepted = _selected_paths(ex.payload, "accepted_feature_paths")
    return [p for p in batch if p in set(accepted) & allowed]


def sample_unvisited(
    tree: FeatureTree, visited: Iterable[str], cfg: SelectionConfig, rng: random.Random
) -> list[str]:
    """Explore candidates: diversity-aware samples steered away from visited nodes."""
    seen: set[tuple[str, ...]] = set()
    for p in visited:
        key = as_key(p)
        seen.update(key[:i] for i in range(1, len(key) + 1))
    out: list[str] = []
    for _ in range(cfg.explore_samples):
        chain = reject_sample(ROOT, tree, cfg.sampler, seen, rng)
        if not chain:
            continue
        deepest = max(chain, key=len)
        seen.update(chain)
        if path_text(deepest) not in out:
            out.append(path_text(deepest))
    return out


def select_subtree(
    global_tree: FeatureTree,
    index: EmbeddingIndex,
    spec: RepoSpec,
    cfg: SelectionConfig,
    oracle: Oracle,
    rng: random.Random,
    embedder: Embedder | None = None,
    snapshot_dir: str | Path | None = None,
) -> SubtreeState:
    """Iterative explore/exploit selection of the repository-specific subtree."""
    embedder = embedder or HashingEmbedder()
    state = SubtreeState()
    query = spec.overview()
    for it in range(1, cfg.iterations + 1):
        exploit = retrieve_top_k(index, query, cfg.top_k, embedder)
        explore = sample_unvisited(global_tree, state.visited, cfg, rng)
        c_exploit = select_candidates(oracle, "select_exploit", exploit, state, spec)
        c_explore = select_candidates(oracle, "select_explore", explore, state, spec)
        new_missing = propose_missing(state, spec, oracle)
        state.missing |= {f"{PROPOSED_ROOT}/{p}" for p in new_missing}

        raw = list(dict.fromkeys([*c_exploit, *c_explore, *sorted(state.missing)]))
        raw = [p for p in raw if p not in state.visited and not state.contains(p)]
        record = IterationRecord(it, exploit, explore, c_exploit + c_explore, sorted(new_missing))
        accepted_total = 0
        for start in range(0, len(raw), cfg.batch_size):
            batch = raw[start : start + cfg.batch_size]
            accepted = self_check_batch(state, batch, oracle, spec, cfg.batch_size)
            state.subtree = insert_paths(state.subtree, accepted)
            accepted_total += len(accepted)
            record.batches.append({"batch": batch, "accepted": accepted})
        record.leaf_count = len(state.subtree.leaves())
        state.history.append(record)
        if snapshot_dir is not None:
            _write_snapshot(Path(snapshot_dir), record, state)
        log.info("selection iteration %d: +%d accepted, %d leaves", it, accepted_total, record.leaf_count)
        if cfg.threshold is not None and accepted_total < cfg.threshold * cfg.top_k:
            log.info("early stop: %d accepted < %.2f * %d", accepted_total, cfg.threshold, cfg.top_k)
            break
    return state


def _write_snapshot(directory: Path, record: IterationRecord, state: SubtreeState) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    accepted = sorted({p for b in record.batches for p in b["accepted"]})
    rejected = sorted({p for b in record.batches for p in b["batch"]} - set(accepted))
    doc = {**record.to_dict(), "accepted": accepted, "rejected": rejected, "subtree": state.subtree.canonical()}
    (directory / f"iteration_{record.iteration:03d}.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# -- refactoring into the functionality graph -------------------------------


@dataclass
class _Group:
    label: str
    children: dict[str, _Group] = field(default_factory=dict)
    features: list[str] = field(default_factory=list)

    def all_features(self) -> list[str]:
        out = list(self.features)
        for c in self.children.values():
            out.extend(c.all_features())
        return out

    def prune(self) -> None:
        for name in list(self.children):
            self.children[name].prune()
            if not self.children[name].all_features():
                del self.children[name]


def _clean_label(name: Any) -> str:
    text = str(name).strip().replace("/", "|")
    return text or "Unnamed"


class _Modules:
    """Working state for the extract / reorganize / refine stages."""

    def __init__(self, leaves: list[str]):
        self.leaves = set(leaves)
        self.order = list(leaves)
        self.modules: dict[str, _Group] = {}

    def assigned(self) -> set[str]:
        return {f for m in self.modules.values() for f in m.all_features()}

    def unassigned(self) -> list[str]:
        done = self.assigned()
        return [f for f in self.order if f not in done]

    def check_known(self, features: Iterable[str], raw: str) -> None:
        unknown = sorted(set(features) - self.leaves)
        if unknown:
            raise ProtocolError(f"unknown feature(s): {', '.join(unknown)}", raw)

    def _place(self, group: _Group, value: Any, raw: str, taken: set[str]) -> None:
        if isinstance(value, dict):
            for name, sub in value.items():
                label = _clean_label(name)
                child = group.children.setdefault(label, _Group(label))
                self._place(child, sub, raw, taken)
        elif isinstance(value, list):
            feats = [v for v in value if isinstance(v, str)]
            if len(feats) != len(value):
                raise ProtocolError("feature lists must hold strings", raw)
            feats = [FeaturePath.parse(f).text for f in feats]
            self.check_known(feats, raw)
            for f in feats:
                if f not in taken:
                    group.features.append(f)
                    taken.add(f)
        else:
            raise ProtocolError(f"unexpected {type(value).__name__} in subgraph payload", raw)

    def absorb(self, payload: Any, raw: str) -> None:
        if not isinstance(payload, dict) or not isinstance(payload.get("subgraphs"), dict):
            raise ProtocolError("payload must contain an object 'subgraphs'", raw)
        taken = self.assigned()
        for name, value in payload["subgraphs"].items():
            label = _clean_label(name)
            module = self.modules.setdefault(label, _Group(label))
            if isinstance(value, list):
                # features straight under a module get a same-named component
                module = module.children.setdefault(label, _Group(label))
            self._place(module, value, raw, taken)

    def locate(self, address: str, create: bool = False) -> _Group | None:
        parts = [p for p in address.split("/") if p.strip()]
        if not parts:
            return None
        group = self.modules.get(parts[0])
        if group is None:
            if not create:
                return None
            group = self.modules.setdefault(parts[0], _Group(parts[0]))
        for part in parts[1:]:
            nxt = group.children.get(part)
            if nxt is None:
                if not create:
                    return None
                nxt = group.children.setdefault(part, _Group(part))
            group = nxt
        return group

    def detach_feature(self, feature: str) -> None:
        def walk(g: _Group) -> None:
            if feature in g.features:
                g.features.remove(feature)
            for c in g.children.values():
                walk(c)

        for m in self.modules.values():
            walk(m)

    def apply_operations(self, payload: Any, raw: str) -> None:
        if not isinstance(payload, dict) or not isinstance(payload.get("operations"), list):
            raise ProtocolError("payload must contain a list 'operations'", raw)
        ops = payload["operations"]
        unknown = [op.get("feature") for op in ops if isinstance(op, dict) and op.get("op") == "move"
                   and op.get("feature") not in self.leaves]
        if unknown:
            raise ProtocolError(f"unknown feature(s): {', '.join(map(str, unknown))}", raw)
        for op in ops:
            if not isinstance(op, dict):
                raise ProtocolError("operations must be objects", raw)
            kind = op.get("op")
            if kind == "move":
                target = str(op.get("to", ""))
                if "/" not in target:
                    target = f"{target}/{target}"
                self.detach_feature(op["feature"])
                dest = self.locate(target, create=True)
                assert dest is not None
                dest.features.append(op["feature"])
            elif kind == "move_component":
                parts = str(op.get("component", "")).split("/")
                parent = self.locate("/".join(parts[:-1])) if len(parts) > 1 else None
                if parent is None or parts[-1] not in parent.children:
                    raise ProtocolError(f"unknown component {op.get('component')!r}", raw)
                comp = parent.children.pop(parts[-1])
                dest = self.locate(str(op.get("to", "")), create=True)
                if dest is None:
                    raise ProtocolError("move_component needs a target", raw)
                _merge_into(dest.children.setdefault(comp.label, _Group(comp.label)), comp)
            elif kind == "merge":
                src, dst = str(op.get("source", "")), str(op.get("target", ""))
                if src not in self.modules:
                    raise ProtocolError(f"unknown module {src!r}", raw)
                if src == dst:
                    continue
                module = self.modules.pop(src)
                _merge_into(self.modules.setdefault(dst, _Group(dst)), module)
            else:
                raise ProtocolError(f"unknown operation {kind!r}", raw)
        self.prune()

    def apply_renames(self, payload: Any, raw: str) -> None:
        if not isinstance(payload, dict) or not isinstance(payload.get("renames"), list):
            raise ProtocolError("payload must contain a list 'renames'", raw)
        for item in payload["renames"]:
            if not isinstance(item, dict) or not isinstance(item.get("node"), str) or not item.get("label"):
                raise ProtocolError("renames need 'node' and 'label'", raw)
            parts = item["node"].split("/")
            new = _clean_label(item["label"])
            if len(parts) == 1:
                if parts[0] not in self.modules:
                    raise ProtocolError(f"unknown module {parts[0]!r}", raw)
                if new == parts[0]:
                    continue
                group = self.modules.pop(parts[0])
                group.label = new
                _merge_into(self.modules.setdefault(new, _Group(new)), group)
            else:
                parent = self.locate("/".join(parts[:-1]))
                if parent is None or parts[-1] not in parent.children:
                    raise ProtocolError(f"unknown component {item['node']!r}", raw)
                if new == parts[-1]:
                    continue
                group = parent.children.pop(parts[-1])
                group.label = new
                _merge_into(parent.children.setdefault(new, _Group(new)), group)

    def prune(self) -> None:
        for name in list(self.modules):
            self.modules[name].prune()
            if not self.modules[name].all_features():
                del self.modules[name]

    def place_leftovers(self) -> None:
        """Fallback for features the oracle never placed: module = first path segment."""
        for f in self.unassigned():
            segs = FeaturePath.parse(f).segments
            head = segs[1] if segs[0] == PROPOSED_ROOT and len(segs) > 2 else segs[0]
            comp = segs[-2] if len(segs) > 1 else head
            module = self.modules.setdefault(_clean_label(head), _Group(_clean_label(head)))
            module.children.setdefault(_clean_label(comp), _Group(_clean_label(comp))).features.append(f)

    def summary(self) -> str:
        lines: list[str] = []

        def walk(g: _Group, depth: int) -> None:
            lines.append("  " * depth + g.label)
            for f in g.features:
                lines.append("  " * (depth + 1) + "- " + f)
            for c in g.children.values():
                walk(c, depth + 1)

        for m in self.modules.values():
            walk(m, 0)
        return "\n".join(lines) or "(empty)"


def _merge_into(dest: _Group, src: _Group) -> None:
    for f in src.features:
        if f not in dest.features:
            dest.features.append(f)
    for name, child in src.children.items():
        _merge_into(dest.children.setdefault(name, _Group(name)), child)


def _unique(base: str, used: set[str]) -> str:
    cand, n = base, 2
    while cand in used:
        cand = f"{base}~{n}"
        n += 1
    used.add(cand)
    return cand


def _to_graph(modules: dict[str, _Group]) -> Rpg:
    nodes: list[RpgNode] = []
    edges: list[RpgEdge] = []
    used: set[str] = set()

    def add_group(g: _Group, parent: str | None) -> None:
        nid = _unique(g.label if parent is None else f"{parent}/{g.label}", used)
        kind = SUBGRAPH_ROOT if parent is None else COMPONENT
        nodes.append(RpgNode(nid, g.label, kind))
        if parent is not None:
            edges.append(RpgEdge(HIERARCHY, parent, nid))
        if parent is None and g.features:
            # leaves never hang directly off a root
            g = _Group(g.label, {g.label: _Group(g.label, features=g.features), **g.children})
            for child in g.children.values():
                add_group(child, nid)
            return
        for f in sorted(g.features):
            label = FeaturePath.parse(f).segments[-1]
            lid = _unique(f"{nid}/{label}", used)
            nodes.append(RpgNode(lid, label, LEAF, frozenset({f})))
            edges.append(RpgEdge(HIERARCHY, nid, lid))
        for child in sorted(g.children.values(), key=lambda c: c.label):
            add_group(child, nid)

    for name in sorted(modules):
        add_group(modules[name], None)
    return Rpg.build(nodes, edges)


def refactor_to_graph(state: SubtreeState, spec: RepoSpec, oracle: Oracle, max_rounds: int = 10) -> Rpg:
    """Partition the subtree's leaves into modules: extract, reorganize, refine."""
    leaves = state.leaf_paths()
    if not leaves:
        raise ValueError("cannot refactor an empty subtree")
    work = _Modules(leaves)
    overview = spec.overview()
    for rnd in range(1, max_rounds + 1):
        pending = work.unassigned()
        if not pending:
            break
        ex = oracle.ask(
            "refactor_extract",
            repo_overview=overview,
            round=str(rnd),
            unassigned_features="\n".join(pending),
            current_groups=work.summary(),
        )
        work.absorb(ex.payload, ex.raw)
    if work.unassigned():
        log.warning("%d feature(s) unplaced after %d rounds; grouping by ontology prefix",
                    len(work.unassigned()), max_rounds)
        work.place_leftovers()

    ex = oracle.ask("refactor_reorganize", repo_overview=overview, graph_summary=work.summary())
    work.apply_operations(ex.payload, ex.raw)
    ex = oracle.ask("refactor_refine", repo_overview=overview, graph_summary=work.summary())
    work.apply_renames(ex.payload, ex.raw)
    work.prune()
    return _to_graph(work.modules)


def graph_leaf_features(graph: Rpg) -> list[str]:
    """Multiset of feature paths carried by leaves, sorted."""
    return sorted(p for nid in graph.leaves() for p in graph.nodes[nid].feature_paths)
