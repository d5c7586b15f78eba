"""Repository Planning Graph: node/edge model, validation, ordering, persistence.

A graph value is an immutable snapshot. Builders (``with_nodes``,
``with_edges``, ...) return new graphs, so a graph can be shared between
workers without locking.
"""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Mapping

SUBGRAPH_ROOT = "subgraph-root"
COMPONENT = "component"
LEAF = "leaf"
NODE_KINDS = (SUBGRAPH_ROOT, COMPONENT, LEAF)

HIERARCHY = "hierarchy"
DATAFLOW = "dataflow"
ORDER = "order"
EDGE_KINDS = (HIERARCHY, DATAFLOW, ORDER)

PHASE_PROPOSAL = "proposal"
PHASE_IMPLEMENTATION = "implementation"
PHASES = (PHASE_PROPOSAL, PHASE_IMPLEMENTATION)

INTERFACE_KINDS = ("function", "class", "method")


class InvalidGraphError(ValueError):
    """Raised when an operation needs a valid graph and gets one with violations."""

    def __init__(self, report: list[Violation]):
        self.report = report
        lines = "; ".join(str(v) for v in report[:5])
        more = f" (+{len(report) - 5} more)" if len(report) > 5 else ""
        super().__init__(f"graph has {len(report)} violation(s): {lines}{more}")


class GraphParseError(ValueError):
    """Malformed graph document. ``position`` is ``line:col`` or a JSON pointer."""

    def __init__(self, message: str, position: str):
        self.position = position
        super().__init__(f"{position}: {message}")


@dataclass(frozen=True, order=True)
class InterfaceRef:
    """A planned interface: (file, qualified name, kind)."""

    file: str
    name: str
    kind: str

    def descriptor(self) -> str:
        return f"{self.kind}: {self.name}"


@dataclass(frozen=True)
class Binding:
    """Structural side of a node: a directory, files, and/or interfaces."""

    directory: str | None = None
    files: frozenset[str] = frozenset()
    interfaces: frozenset[InterfaceRef] = frozenset()

    def all_files(self) -> list[str]:
        return sorted(self.files | {ref.file for ref in self.interfaces})

    def is_empty(self) -> bool:
        return self.directory is None and not self.files and not self.interfaces


@dataclass(frozen=True)
class RpgNode:
    id: str
    label: str
    kind: str
    feature_paths: frozenset[str] = frozenset()
    structure: Binding | None = None

    def __post_init__(self) -> None:
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")

    @property
    def binding(self) -> Binding:
        return self.structure or Binding()


@dataclass(frozen=True, order=True)
class RpgEdge:
    kind: str
    src: str
    dst: str
    data_id: str | None = None
    data_type: str | None = None
    transformation: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")


@dataclass(frozen=True)
class Violation:
    rule: str
    ids: tuple[str, ...]
    message: str = ""

    def __str__(self) -> str:
        return f"[{self.rule}] {', '.join(self.ids)}{': ' + self.message if self.message else ''}"


@dataclass(frozen=True)
class Rpg:
    nodes: Mapping[str, RpgNode] = field(default_factory=dict)
    edges: frozenset[RpgEdge] = frozenset()
    phase: str = PHASE_PROPOSAL

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, nodes: Iterable[RpgNode], edges: Iterable[RpgEdge] = (), phase: str = PHASE_PROPOSAL) -> Rpg:
        table: dict[str, RpgNode] = {}
        for node in nodes:
            if node.id in table:
                raise ValueError(f"duplicate node id {node.id!r}")
            table[node.id] = node
        return cls(nodes=table, edges=frozenset(edges), phase=phase)

    def with_nodes(self, *nodes: RpgNode) -> Rpg:
        """Insert or replace nodes by id."""
        table = dict(self.nodes)
        for node in nodes:
            table[node.id] = node
        return replace(self, nodes=table)

    def with_edges(self, *edges: RpgEdge) -> Rpg:
        return replace(self, edges=self.edges | frozenset(edges))

    def without_edges(self, kind: str) -> Rpg:
        return replace(self, edges=frozenset(e for e in self.edges if e.kind != kind))

    def with_phase(self, phase: str) -> Rpg:
        return replace(self, phase=phase)

    def bind(self, node_id: str, **changes: Any) -> Rpg:
        """Return a graph whose node ``node_id`` has its binding fields replaced."""
        node = self.nodes[node_id]
        return self.with_nodes(replace(node, structure=replace(node.binding, **changes)))

    # -- structure queries --------------------------------------------------

    @cached_property
    def _children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for e in self.edges:
            if e.kind == HIERARCHY:
                out[e.src].append(e.dst)
        for kids in out.values():
            kids.sort(key=lambda i: (self.nodes[i].label if i in self.nodes else "", i))
        return dict(out)

    @cached_property
    def _parents(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for e in self.edges:
            if e.kind == HIERARCHY:
                out[e.dst].append(e.src)
        return dict(out)

    def children(self, node_id: str) -> list[str]:
        return list(self._children.get(node_id, ()))

    def parent(self, node_id: str) -> str | None:
        parents = self._parents.get(node_id, ())
        return parents[0] if parents else None

    def roots(self) -> list[str]:
        return sorted((n.id for n in self.nodes.values() if n.kind == SUBGRAPH_ROOT), key=self._label_key)

    def leaves(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.kind == LEAF)

    def descendants(self, node_id: str) -> list[str]:
        out, stack, seen = [], [node_id], {node_id}
        while stack:
            for child in self.children(stack.pop()):
                if child not in seen:
                    seen.add(child)
                    out.append(child)
                    stack.append(child)
        return out

    def leaves_under(self, node_id: str) -> list[str]:
        if self.nodes[node_id].kind == LEAF:
            return [node_id]
        return sorted(d for d in self.descendants(node_id) if self.nodes[d].kind == LEAF)

    def ancestors(self, node_id: str) -> list[str]:
        out, seen, cur = [], {node_id}, self.parent(node_id)
        while cur is not None and cur not in seen:
            out.append(cur)
            seen.add(cur)
            cur = self.parent(cur)
        return out

    def root_of(self, node_id: str) -> str:
        chain = [node_id, *self.ancestors(node_id)]
        return chain[-1]

    def depth(self, node_id: str) -> int:
        return len(self.ancestors(node_id))

    def find_by_label(self, label: str, kind: str | None = None) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.label == label and (kind is None or n.kind == kind))

    def leaf_for_feature(self, feature_path: str) -> str | None:
        for node in self.nodes.values():
            if node.kind == LEAF and feature_path in node.feature_paths:
                return node.id
        return None

    def edges_of(self, kind: str) -> list[RpgEdge]:
        return sorted(e for e in self.edges if e.kind == kind)

    def leaf_file(self, node_id: str) -> str:
        """Primary file of a leaf (smallest bound path), or ``""`` when unbound."""
        files = self.nodes[node_id].binding.all_files()
        return files[0] if files else ""

    def _label_key(self, node_id: str) -> tuple[str, str]:
        return (self.nodes[node_id].label, node_id)


# -- validation -------------------------------------------------------------


def _cyclic_components(vertices: Iterable[str], edges: Iterable[tuple[str, str]]) -> list[tuple[str, ...]]:
    """Strongly connected components that contain a cycle (Tarjan, iterative)."""
    adj: dict[str, list[str]] = defaultdict(list)
    self_loops = set()
    for u, v in edges:
        adj[u].append(v)
        if u == v:
            self_loops.add(u)
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    result: list[tuple[str, ...]] = []
    counter = 0
    for start in sorted(set(vertices)):
        if start in index:
            continue
        work = [(start, iter(sorted(adj[start])))]
        index[start] = low[start] = counter
        counter += 1
        stack.append(start)
        on_stack.add(start)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(adj[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                if len(comp) > 1 or v in self_loops:
                    result.append(tuple(sorted(comp)))
    return sorted(result)


def validate(graph: Rpg, *, planning_complete: bool = False) -> list[Violation]:
    """Check every graph invariant and return the violations found.

    The full-connectivity rule for data flows applies once the graph has
    reached the implementation phase. Leaf interface bindings are only
    required when ``planning_complete`` is set, i.e. after interface design.
    """
    report: list[Violation] = []
    nodes = graph.nodes

    for e in sorted(graph.edges):
        missing = [i for i in (e.src, e.dst) if i not in nodes]
        if missing:
            report.append(Violation("edge-endpoint", tuple(missing), f"{e.kind} edge references unknown node"))
    edges = [e for e in graph.edges if e.src in nodes and e.dst in nodes]

    # hierarchy: rooted forest with kind discipline
    parents: dict[str, list[str]] = defaultdict(list)
    hier = [(e.src, e.dst) for e in edges if e.kind == HIERARCHY]
    for u, v in hier:
        parents[v].append(u)
    for nid in sorted(nodes):
        count = len(parents.get(nid, ()))
        kind = nodes[nid].kind
        if count > 1:
            report.append(Violation("hierarchy-parent", (nid, *sorted(parents[nid])), "node has more than one parent"))
        if kind == SUBGRAPH_ROOT and count:
            report.append(Violation("hierarchy-kind", (nid,), "subgraph-root has a parent"))
        if kind != SUBGRAPH_ROOT and count == 0:
            report.append(Violation("hierarchy-kind", (nid,), f"{kind} has no parent"))
    for u, _ in hier:
        if nodes[u].kind == LEAF:
            report.append(Violation("hierarchy-kind", (u,), "leaf has children"))
    for comp in _cyclic_components(nodes, hier):
        report.append(Violation("hierarchy-cycle", comp))

    # dataflow: DAG over subgraph roots
    flow = [(e.src, e.dst) for e in edges if e.kind == DATAFLOW]
    for e in sorted(e for e in edges if e.kind == DATAFLOW):
        bad = [i for i in (e.src, e.dst) if nodes[i].kind != SUBGRAPH_ROOT]
        if bad:
            report.append(Violation("dataflow-endpoint", tuple(bad), "dataflow edge must connect subgraph-roots"))
    for comp in _cyclic_components(nodes, flow):
        report.append(Violation("dataflow-cycle", comp))
    roots = sorted(n.id for n in nodes.values() if n.kind == SUBGRAPH_ROOT)
    if graph.phase == PHASE_IMPLEMENTATION and len(roots) > 1:
        touched = {i for pair in flow for i in pair}
        for r in roots:
            if r not in touched:
                report.append(Violation("dataflow-disconnected", (r,), "subgraph-root appears in no dataflow edge"))

    # order: file-bearing components of one subgraph, acyclic
    hier_ok = not any(v.rule.startswith("hierarchy") for v in report)
    order = [(e.src, e.dst) for e in edges if e.kind == ORDER]
    for u, v in sorted(order):
        bad = [i for i in (u, v) if nodes[i].kind != COMPONENT or not nodes[i].binding.files]
        if bad:
            report.append(Violation("order-endpoint", tuple(bad), "order edge must connect file-bearing components"))
            continue
        if hier_ok:
            if graph.root_of(u) != graph.root_of(v):
                report.append(Violation("order-endpoint", (u, v), "order edge crosses subgraphs"))
            elif u in graph.ancestors(v) or v in graph.ancestors(u):
                report.append(Violation("order-endpoint", (u, v), "order edge between nested components"))
    for comp in _cyclic_components(nodes, order):
        report.append(Violation("order-cycle", comp))

    # bindings: every file under a root lives below the root's directory
    if hier_ok:
        for r in roots:
            directory = nodes[r].binding.directory
            if not directory:
                continue
            prefix = directory.rstrip("/") + "/"
            for d in graph.descendants(r):
                for f in nodes[d].binding.all_files():
                    if not f.startswith(prefix):
                        report.append(Violation("binding-prefix", (r, d), f"{f} is outside {directory}"))

    if planning_complete:
        for nid in sorted(nodes):
            node = nodes[nid]
            if node.kind != LEAF:
                continue
            if not node.feature_paths:
                report.append(Violation("leaf-features", (nid,), "leaf has no feature path"))
            if not node.binding.interfaces:
                report.append(Violation("leaf-interfaces", (nid,), "leaf has no interface reference"))
    return report


# -- ordering ---------------------------------------------------------------


def topological_order(graph: Rpg) -> list[str]:
    """Order all leaves so every dataflow and order constraint holds.

    A constraint edge ``u -> v`` means every leaf under ``u`` precedes every
    leaf under ``v``. Each group gets an entry and an exit marker so the
    constraint costs O(|leaves|) edges instead of a full bipartite product.
    Among ready leaves the smallest ``(file, label, id)`` goes first.
    """
    report = validate(graph)
    if report:
        raise InvalidGraphError(report)

    succ: dict[Any, list[Any]] = defaultdict(list)
    indeg: dict[Any, int] = defaultdict(int)
    vertices: set[Any] = set(graph.leaves())

    def link(a: Any, b: Any) -> None:
        succ[a].append(b)
        indeg[b] += 1
        vertices.update((a, b))

    constraints = [e for e in graph.edges if e.kind in (DATAFLOW, ORDER)]
    groups = sorted({e.src for e in constraints} | {e.dst for e in constraints})
    for g in groups:
        for leaf in graph.leaves_under(g):
            link(("in", g), leaf)
            link(leaf, ("out", g))
    for e in sorted(constraints):
        link(("out", e.src), ("in", e.dst))

    def key(v: Any) -> tuple:
        if isinstance(v, tuple):
            return (0, "", "", repr(v))
        return (1, graph.leaf_file(v), graph.nodes[v].label, v)

    heap = [key(v) + (v,) for v in vertices if indeg[v] == 0]
    heapq.heapify(heap)
    out: list[str] = []
    while heap:
        *_, v = heapq.heappop(heap)
        if not isinstance(v, tuple):
            out.append(v)
        for w in succ.get(v, ()):
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, key(w) + (w,))
    return out


# -- persistence ------------------------------------------------------------


def to_document(graph: Rpg) -> dict[str, Any]:
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        structure = None
        if n.structure is not None:
            structure = {
                "directory": n.structure.directory,
                "files": sorted(n.structure.files),
                "interfaces": [
                    {"file": r.file, "kind": r.kind, "name": r.name} for r in sorted(n.structure.interfaces)
                ],
            }
        nodes.append(
            {
                "feature_paths": sorted(n.feature_paths),
                "id": n.id,
                "kind": n.kind,
                "label": n.label,
                "structure": structure,
            }
        )
    edges = []
    for e in sorted(graph.edges):
        doc: dict[str, Any] = {"from": e.src, "kind": e.kind, "to": e.dst}
        if e.kind == DATAFLOW:
            doc.update(data_id=e.data_id, data_type=e.data_type, transformation=e.transformation)
        edges.append(doc)
    return {"edges": edges, "nodes": nodes, "phase": graph.phase}


def serialize(graph: Rpg) -> str:
    report = validate(graph)
    if report:
        raise InvalidGraphError(report)
    return json.dumps(to_document(graph), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _require(obj: Any, key: str, kind: type | tuple[type, ...], where: str, nullable: bool = False) -> Any:
    if not isinstance(obj, dict):
        raise GraphParseError("expected an object", where)
    if key not in obj:
        raise GraphParseError(f"missing field {key!r}", f"{where}/{key}")
    value = obj[key]
    if value is None and nullable:
        return None
    if not isinstance(value, kind):
        raise GraphParseError(f"field {key!r} has wrong type {type(value).__name__}", f"{where}/{key}")
    return value


def from_document(doc: Any) -> Rpg:
    if not isinstance(doc, dict):
        raise GraphParseError("top level must be an object", "/")
    raw_nodes = _require(doc, "nodes", list, "")
    raw_edges = _require(doc, "edges", list, "")
    phase = _require(doc, "phase", str, "")
    if phase not in PHASES:
        raise GraphParseError(f"unknown phase {phase!r}", "/phase")

    nodes: list[RpgNode] = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_nodes):
        where = f"/nodes/{i}"
        nid = _require(raw, "id", str, where)
        if nid in seen:
            raise GraphParseError(f"duplicate node id {nid!r}", f"{where}/id")
        seen.add(nid)
        kind = _require(raw, "kind", str, where)
        if kind not in NODE_KINDS:
            raise GraphParseError(f"unknown node kind {kind!r}", f"{where}/kind")
        paths = _require(raw, "feature_paths", list, where)
        if not all(isinstance(p, str) for p in paths):
            raise GraphParseError("feature paths must be strings", f"{where}/feature_paths")
        structure = None
        raw_struct = _require(raw, "structure", dict, where, nullable=True)
        if raw_struct is not None:
            swhere = f"{where}/structure"
            directory = _require(raw_struct, "directory", str, swhere, nullable=True)
            files = _require(raw_struct, "files", list, swhere)
            refs = []
            for j, r in enumerate(_require(raw_struct, "interfaces", list, swhere)):
                rwhere = f"{swhere}/interfaces/{j}"
                ref_kind = _require(r, "kind", str, rwhere)
                if ref_kind not in INTERFACE_KINDS:
                    raise GraphParseError(f"unknown interface kind {ref_kind!r}", f"{rwhere}/kind")
                refs.append(InterfaceRef(_require(r, "file", str, rwhere), _require(r, "name", str, rwhere), ref_kind))
            structure = Binding(directory, frozenset(files), frozenset(refs))
        nodes.append(RpgNode(nid, _require(raw, "label", str, where), kind, frozenset(paths), structure))

    edges: list[RpgEdge] = []
    for i, raw in enumerate(raw_edges):
        where = f"/edges/{i}"
        kind = _require(raw, "kind", str, where)
        if kind not in EDGE_KINDS:
            raise GraphParseError(f"unknown edge kind {kind!r}", f"{where}/kind")
        payload = {}
        if kind == DATAFLOW:
            payload = {k: _require(raw, k, str, where) for k in ("data_id", "data_type", "transformation")}
        edges.append(RpgEdge(kind, _require(raw, "from", str, where), _require(raw, "to", str, where), **payload))
    return Rpg.build(nodes, edges, phase)


def deserialize(text: str) -> Rpg:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(exc.msg, f"{exc.lineno}:{exc.colno}") from exc
    return from_document(doc)


# -- rendering --------------------------------------------------------------


def _annotation(node: RpgNode) -> str:
    b = node.binding
    parts = []
    if b.directory:
        parts.append(f"dir: {b.directory}")
    parts.extend(f"file: {f}" for f in b.all_files())
    return f" [-> {', '.join(parts)}]" if parts else ""


def render_graph_summary(graph: Rpg, indent: str = "    ") -> str:
    """Indented text tree of the hierarchy, one line per node."""
    lines: list[str] = []

    def walk(nid: str, depth: int) -> None:
        node = graph.nodes[nid]
        lines.append(f"{indent * depth}{node.label}{_annotation(node)}")
        for child in graph.children(nid):
            walk(child, depth + 1)

    tops = sorted((nid for nid in graph.nodes if graph.parent(nid) is None), key=graph._label_key)
    for nid in tops:
        walk(nid, 0)
    return "\n".join(lines) + ("\n" if lines else "")
