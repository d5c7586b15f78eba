"""Implementation-level planning: bind the functionality graph to folders,
files, data flows, shared abstractions and interface designs, then emit a
stub skeleton."""

from __future__ import annotations

import ast
import json
import logging
import re
import shutil
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from repoplan import pysource as ps
from repoplan.oracle import Oracle, ProtocolError, Section
from repoplan.rpg import (
    COMPONENT,
    DATAFLOW,
    ORDER,
    PHASE_IMPLEMENTATION,
    PHASE_PROPOSAL,
    InterfaceRef,
    InvalidGraphError,
    Rpg,
    RpgEdge,
    render_graph_summary,
    topological_order,
    validate,
)
from repoplan.workspace import Workspace

log = logging.getLogger(__name__)

MANIFEST_NAME = "skeleton_manifest.json"
DATA_STRUCTURE = "data_structure"
FUNCTIONAL_BASE = "functional_base"


class FolderConflictError(ValueError):
    def __init__(self, folder: str, roots: Iterable[str]):
        self.folder = folder
        self.roots = tuple(roots)
        super().__init__(f"folder {folder!r} assigned to several subtrees: {', '.join(self.roots)}")


class PlanningIncompleteError(RuntimeError):
    def __init__(self, leaves: Iterable[str]):
        self.leaves = tuple(leaves)
        super().__init__(f"leaves without a file after the round cap: {', '.join(self.leaves)}")


class DataFlowRejected(RuntimeError):
    def __init__(self, report: list):
        self.report = report
        super().__init__("data-flow proposals kept failing validation:\n" + "\n".join(map(str, report)))


class DesignError(ValueError):
    """An interface design that does not map each feature to exactly one interface."""


class SkeletonError(ValueError):
    pass


# -- folders -----------------------------------------------------------------


def snake_case(name: str) -> str:
    text = re.sub(r"([a-z])([A-Z])", r"\1_\2", name.strip())
    text = re.sub(r"([0-9])([A-Z][a-z])", r"\1_\2", text)
    text = re.sub(r"[^0-9a-zA-Z]+", "_", text).strip("_").lower()
    if not text:
        return "module"
    return f"m_{text}" if text[0].isdigit() else text


def _flatten_folders(node: Any, prefix: tuple[str, ...], out: list[tuple[tuple[str, ...], list[str]]], raw: str) -> None:
    if isinstance(node, dict):
        for key, value in node.items():
            segs = tuple(s for s in str(key).split("/") if s.strip())
            _flatten_folders(value, prefix + segs, out, raw)
    elif isinstance(node, list):
        names = [n for n in node if isinstance(n, str)]
        if len(names) != len(node):
            raise ProtocolError("folder mapping values must be lists of subtree names", raw)
        out.append((prefix, names))
    elif isinstance(node, str):
        out.append((prefix, [node]))
    else:
        raise ProtocolError("folder mapping must be a nested object", raw)


def encode_folders(graph: Rpg, oracle: Oracle, overview: str = "", base: str = "src") -> Rpg:
    """Bind every subgraph root to its own snake_case directory."""
    if graph.phase != PHASE_PROPOSAL:
        raise ValueError("folder encoding starts from a proposal-phase graph")
    report = validate(graph)
    if report:
        raise InvalidGraphError(report)
    roots = graph.roots()
    if not roots:
        return graph
    by_label = {graph.nodes[r].label: r for r in roots}
    ex = oracle.ask("skeleton_folders", repo_overview=overview, trees_names=[graph.nodes[r].label for r in roots])
    entries: list[tuple[tuple[str, ...], list[str]]] = []
    _flatten_folders(ex.payload, (), entries, ex.raw)

    assigned: dict[str, str] = {}
    used: set[str] = set()
    for segs, names in entries:
        known = [by_label[n] if n in by_label else n for n in names if n in by_label or n in graph.nodes]
        unknown = [n for n in names if n not in by_label and n not in graph.nodes]
        if unknown:
            log.warning("folder mapping names unknown subtrees: %s", ", ".join(unknown))
        if len(set(known)) > 1:
            raise FolderConflictError("/".join(segs), sorted(set(known)))
        if not known:
            continue
        root = known[0]
        if root in assigned:
            log.warning("subtree %s mapped twice; keeping %s", root, assigned[root])
            continue
        norm = [snake_case(s) for s in segs] or [snake_case(graph.nodes[root].label)]
        if len(norm) == 1 and base:
            norm = [base, *norm]
        assigned[root] = _claim("/".join(norm), used)
    for r in roots:
        if r not in assigned:
            assigned[r] = _claim(f"{base}/{snake_case(graph.nodes[r].label)}" if base else snake_case(graph.nodes[r].label), used)
    for r in roots:
        graph = graph.bind(r, directory=assigned[r])
    return graph


def _claim(path: str, used: set[str]) -> str:
    cand, n = path, 2
    while cand in used or any(cand.startswith(u + "/") or u.startswith(cand + "/") for u in used):
        cand = f"{path}_{n}"
        n += 1
    used.add(cand)
    return cand


def folder_mapping(graph: Rpg) -> dict[str, str]:
    """Directory -> original subtree name."""
    return {graph.nodes[r].binding.directory: graph.nodes[r].label for r in graph.roots() if graph.nodes[r].binding.directory}


# -- files -------------------------------------------------------------------


def _clean_file(path: str) -> str | None:
    path = path.strip()
    if path.startswith("./"):
        path = path[2:]
    segs = path.split("/")
    if not path.endswith(".py") or any(s in ("", ".", "..") for s in segs):
        return None
    return path


def _skeleton_listing(graph: Rpg, root: str) -> str:
    files: dict[str, list[str]] = defaultdict(list)
    for leaf in graph.leaves_under(root):
        for f in graph.nodes[leaf].binding.files:
            files[f].extend(sorted(graph.nodes[leaf].feature_paths))
    if not files:
        return "(no files yet)"
    return "\n".join(f"{f}: {', '.join(files[f])}" for f in sorted(files))


def encode_files(graph: Rpg, oracle: Oracle, overview: str = "", max_rounds: int = 5) -> Rpg:
    """Group each root's leaves into .py files under the root's directory."""
    stuck: list[str] = []
    for root in graph.roots():
        directory = graph.nodes[root].binding.directory
        if not directory:
            raise ValueError(f"root {root} has no directory; encode folders first")
        prefix = directory.rstrip("/") + "/"
        feature_leaf = {p: leaf for leaf in graph.leaves_under(root) for p in graph.nodes[leaf].feature_paths}
        for _ in range(max_rounds):
            pending = [l for l in graph.leaves_under(root) if not graph.nodes[l].binding.files]
            if not pending:
                break
            features = [p for l in pending for p in sorted(graph.nodes[l].feature_paths)]
            ex = oracle.ask(
                "skeleton_files",
                repo_overview=overview,
                subtree_name=graph.nodes[root].label,
                folder=directory,
                skeleton=_skeleton_listing(graph, root),
                unassigned_features=features,
            )
            if not isinstance(ex.payload, dict):
                raise ProtocolError("file mapping must be an object {path: [features]}", ex.raw)
            for raw_path, feats in ex.payload.items():
                path = _clean_file(str(raw_path))
                if path is None or not path.startswith(prefix):
                    log.warning("dropping file %r: not a .py path under %s", raw_path, directory)
                    continue
                if not isinstance(feats, list):
                    raise ProtocolError(f"features for {raw_path!r} must be a list", ex.raw)
                for feat in feats:
                    leaf = feature_leaf.get(feat)
                    if leaf is None:
                        log.warning("ignoring feature %r: not a leaf of %s", feat, root)
                        continue
                    if graph.nodes[leaf].binding.files:
                        continue
                    graph = graph.bind(leaf, files=frozenset({path}))
                    parent = graph.parent(leaf)
                    if parent is not None and graph.nodes[parent].kind == COMPONENT:
                        graph = graph.bind(parent, files=graph.nodes[parent].binding.files | {path})
        stuck.extend(l for l in graph.leaves_under(root) if not graph.nodes[l].binding.files)
    if stuck:
        raise PlanningIncompleteError(sorted(stuck))
    return graph


# -- data flows --------------------------------------------------------------


def _resolve_root(graph: Rpg, name: Any) -> str | None:
    if not isinstance(name, str):
        return None
    if name in graph.nodes and name in graph.roots():
        return name
    hits = [r for r in graph.roots() if graph.nodes[r].label == name]
    return hits[0] if len(hits) == 1 else None


def _parse_flow_edges(graph: Rpg, payload: Any) -> tuple[list[RpgEdge], list[str]]:
    if isinstance(payload, dict) and isinstance(payload.get("edges"), list):
        payload = payload["edges"]
    if not isinstance(payload, list):
        return [], ["the edge list must be a JSON array"]
    edges, problems = [], []
    for i, item in enumerate(payload):
        if not isinstance(item, dict):
            problems.append(f"edge {i} is not an object")
            continue
        missing = [k for k in ("from", "to", "data_id", "data_type") if not item.get(k)]
        if missing:
            problems.append(f"edge {i} lacks {', '.join(missing)}")
            continue
        src, dst = _resolve_root(graph, item["from"]), _resolve_root(graph, item["to"])
        if src is None or dst is None:
            problems.append(f"edge {i} names an unknown subtree: {item['from']!r} -> {item['to']!r}")
            continue
        edges.append(
            RpgEdge(DATAFLOW, src, dst, str(item["data_id"]), str(item["data_type"]), str(item.get("transformation") or "none"))
        )
    ids = [e.data_id for e in edges]
    dupes = sorted({d for d in ids if ids.count(d) > 1})
    if dupes:
        problems.append(f"data_id values must be unique: {', '.join(dupes)}")
    return edges, problems


def flow_listing(graph: Rpg) -> str:
    rows = []
    for e in graph.edges_of(DATAFLOW):
        rows.append(
            f"{graph.nodes[e.src].label} -> {graph.nodes[e.dst].label}: {e.data_id} ({e.data_type}); {e.transformation}"
        )
    return "\n".join(rows) or "(none)"


def encode_data_flows(graph: Rpg, oracle: Oracle, overview: str = "", max_retries: int = 3) -> Rpg:
    """Add inter-root data-flow edges (validated DAG, every root connected) and
    intra-root file order edges. The graph moves to the implementation phase."""
    roots = graph.roots()
    base = graph.without_edges(DATAFLOW).with_phase(PHASE_IMPLEMENTATION)
    if len(roots) > 1:
        feedback = ""
        for attempt in range(max_retries + 1):
            ex = oracle.ask(
                "data_flow",
                repo_overview=overview,
                trees_names=[graph.nodes[r].label for r in roots],
                graph_summary=render_graph_summary(graph),
                feedback=feedback,
            )
            edges, problems = _parse_flow_edges(graph, ex.payload)
            candidate = base.with_edges(*edges)
            report = [v for v in validate(candidate) if v.rule.startswith("dataflow")]
            if not report and not problems:
                base = candidate
                break
            lines = problems + [str(v) for v in report]
            log.info("data-flow proposal %d rejected: %s", attempt + 1, "; ".join(lines))
            feedback = "Your previous edge list was rejected:\n" + "\n".join(f"- {l}" for l in lines)
        else:
            raise DataFlowRejected(report or problems)
    return _add_file_order(base, oracle, overview)


def _primary_component(graph: Rpg, root: str, file: str) -> str | None:
    comps = sorted(
        d for d in graph.descendants(root) if graph.nodes[d].kind == COMPONENT and file in graph.nodes[d].binding.files
    )
    return comps[0] if comps else None


def _add_file_order(graph: Rpg, oracle: Oracle, overview: str) -> Rpg:
    per_root: dict[str, list[str]] = {}
    for r in graph.roots():
        files = sorted({f for d in graph.descendants(r) if graph.nodes[d].kind == COMPONENT for f in graph.nodes[d].binding.files})
        if len(files) > 1:
            per_root[r] = files
    if not per_root:
        return graph
    listing = "\n".join(f"{graph.nodes[r].label}: {', '.join(fs)}" for r, fs in per_root.items())
    ex = oracle.ask("file_order", repo_overview=overview, subtree_files=listing)
    if not isinstance(ex.payload, dict):
        raise ProtocolError("file order must be an object {subtree: [files]}", ex.raw)
    for name, files in sorted(ex.payload.items()):
        root = _resolve_root(graph, name)
        if root is None or not isinstance(files, list):
            log.warning("ignoring file order for %r", name)
            continue
        comps = [_primary_component(graph, root, f) for f in files if isinstance(f, str)]
        comps = [c for c in comps if c is not None]
        for a, b in zip(comps, comps[1:]):
            if a == b:
                continue
            candidate = graph.with_edges(RpgEdge(ORDER, a, b))
            if any(v.rule.startswith("order") for v in validate(candidate)):
                log.info("skipping order edge %s -> %s (would break order rules)", a, b)
                continue
            graph = candidate
    return graph


def root_degrees(graph: Rpg) -> dict[str, tuple[int, int]]:
    """(in-degree, out-degree) per root over data-flow edges."""
    deg = {r: [0, 0] for r in graph.roots()}
    for e in graph.edges_of(DATAFLOW):
        deg[e.dst][0] += 1
        deg[e.src][1] += 1
    return {r: (i, o) for r, (i, o) in deg.items()}


# -- shared abstractions -----------------------------------------------------


@dataclass(frozen=True)
class BaseAbstraction:
    kind: str
    name: str
    file: str
    rationale: str
    member_contract: str
    source: str = ""
    imports: tuple[str, ...] = ()
    subtree: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def _member_contract(cls: ast.ClassDef) -> str:
    rows = []
    for sub in cls.body:
        if isinstance(sub, ps.FunctionNode):
            doc = (ast.get_docstring(sub) or "").strip().splitlines()
            rows.append(f"{ps.signature_text(sub)}: {doc[0] if doc else ''}".rstrip(": "))
        elif isinstance(sub, ast.AnnAssign):
            rows.append(ast.unparse(sub))
    return "\n".join(rows)


def _abstraction_kind(cls: ast.ClassDef) -> str:
    is_dataclass = any("dataclass" in ast.unparse(d) for d in cls.decorator_list)
    methods = [s for s in cls.body if isinstance(s, ps.FunctionNode) and s.name != "__init__"]
    return DATA_STRUCTURE if is_dataclass or not methods else FUNCTIONAL_BASE


def parse_abstractions(sections: list[Section], raw: str = "") -> list[BaseAbstraction]:
    out = []
    for sec in sections:
        path = _clean_file(sec.path)
        if path is None:
            raise ProtocolError(f"section path {sec.path!r} is not a .py file", raw)
        try:
            tree = ast.parse(sec.code)
        except SyntaxError as exc:
            raise ProtocolError(f"{sec.path}: {exc.msg} (line {exc.lineno})", raw) from None
        imports = tuple(ps.import_lines(sec.code))
        for node in tree.body:
            if isinstance(node, ast.ClassDef):
                out.append(
                    BaseAbstraction(
                        _abstraction_kind(node),
                        node.name,
                        path,
                        (ast.get_docstring(node) or "").strip(),
                        _member_contract(node),
                        ps.segment(sec.code, ps.node_span(node)),
                        imports,
                        sec.subtree,
                    )
                )
    return out


def abstract_base_classes(graph: Rpg, oracle: Oracle, overview: str = "", cap: int = 3) -> list[BaseAbstraction]:
    """Ask for shared data structures / base classes, given per-root degrees."""
    degrees = root_degrees(graph)
    deg_text = "\n".join(f"{graph.nodes[r].label}: in={i} out={o}" for r, (i, o) in degrees.items())
    ex = oracle.ask(
        "base_classes",
        repo_overview=overview,
        graph_summary=render_graph_summary(graph),
        data_flow=flow_listing(graph),
        degrees=deg_text,
        cap=str(cap),
    )
    found = parse_abstractions(ex.payload, ex.raw)
    names = [a.name for a in found]
    if len(set(names)) != len(names):
        raise ProtocolError("abstraction names must be unique", ex.raw)
    if len(found) > cap:
        ranked = sorted(found, key=lambda a: (-len(a.rationale), a.name))
        kept = {a.name for a in ranked[:cap]}
        dropped = [a.name for a in ranked[cap:]]
        log.warning("keeping %d of %d abstractions; dropped %s", cap, len(found), ", ".join(dropped))
        found = [a for a in found if a.name in kept]
    return found


# -- interfaces --------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    name: str
    signature: str
    doc: str


@dataclass(frozen=True)
class InterfaceSpec:
    kind: str
    name: str
    signature: str
    doc: str
    feature_paths: frozenset[str]
    file: str
    base_link: str | None = None
    methods: tuple[MethodSpec, ...] = ()
    feature_methods: tuple[tuple[str, str], ...] = ()
    imports: tuple[str, ...] = ()
    code: str = ""

    def ref_for(self, feature: str) -> InterfaceRef:
        method = dict(self.feature_methods).get(feature)
        if method:
            return InterfaceRef(self.file, f"{self.name}.{method}", "method")
        return InterfaceRef(self.file, self.name, self.kind)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "name": self.name,
            "signature": self.signature,
            "doc": self.doc,
            "feature_paths": sorted(self.feature_paths),
            "file": self.file,
            "base_link": self.base_link,
            "methods": [m.__dict__ for m in self.methods],
            "feature_methods": [list(p) for p in self.feature_methods],
            "imports": list(self.imports),
            "code": self.code,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> InterfaceSpec:
        return cls(
            d["kind"],
            d["name"],
            d["signature"],
            d["doc"],
            frozenset(d["feature_paths"]),
            d["file"],
            d.get("base_link"),
            tuple(MethodSpec(**m) for m in d.get("methods", [])),
            tuple(tuple(p) for p in d.get("feature_methods", [])),  # type: ignore[misc]
            tuple(d.get("imports", [])),
            d.get("code", ""),
        )


@dataclass
class DesignContext:
    overview: str = ""
    data_flow: str = ""
    bases: list[BaseAbstraction] = field(default_factory=list)
    upstream: list[InterfaceSpec] = field(default_factory=list)


_DOC_PARTS = (("args", ("args:", "arguments:", "parameters:")), ("returns", ("returns:", "yields:")), ("raises", ("raises:",)))


def contract_gaps(doc: str, has_params: bool) -> list[str]:
    low = doc.lower()
    gaps = [] if doc.strip() else ["purpose"]
    for part, markers in _DOC_PARTS:
        if part == "args" and not has_params:
            continue
        if not any(m in low for m in markers):
            gaps.append(part)
    return gaps


def _stub_definition(node: ast.AST) -> ast.AST:
    """Keep signatures and docstrings; replace function bodies with ``pass``."""
    node = ast.parse(ast.unparse(node)).body[0]
    for sub in ast.walk(node):
        if isinstance(sub, ps.FunctionNode):
            doc = sub.body[:1] if sub.body and ps.is_docstring(sub.body[0]) else []
            sub.body = [*doc, ast.Pass()]
    return node


_DESIGN_CALL = re.compile(r"design_itfs_for_feature\s*\(\s*features\s*=\s*(\[.*?\])\s*\)\s*:?", re.S)


def parse_designs(text: str, file: str, bases: Iterable[str] = (), raw: str = "") -> list[InterfaceSpec]:
    """Parse ``design_itfs_for_feature(features=[...]):`` blocks, each followed by a python fence."""
    base_names = set(bases)
    specs = []
    for m in _DESIGN_CALL.finditer(text):
        try:
            feats = ast.literal_eval(m.group(1))
        except (ValueError, SyntaxError):
            raise ProtocolError(f"cannot parse feature list {m.group(1)!r}", raw or text) from None
        if not isinstance(feats, list) or not feats or not all(isinstance(f, str) for f in feats):
            raise ProtocolError("features must be a nonempty list of strings", raw or text)
        fence = re.compile(r"```[ \t]*(?:python|py)?[ \t]*\n(.*?)```", re.S).search(text, m.end())
        nxt = _DESIGN_CALL.search(text, m.end())
        if fence is None or (nxt is not None and fence.start() > nxt.start()):
            raise ProtocolError(f"no python block for features {feats}", raw or text)
        code = fence.group(1)
        try:
            tree = ast.parse(code)
        except SyntaxError as exc:
            raise ProtocolError(f"design for {feats} is not valid Python: {exc.msg}", raw or text) from None
        defs = [n for n in tree.body if isinstance(n, (ast.ClassDef, *ps.FunctionNode))]
        if len(defs) != 1:
            raise ProtocolError(f"design for {feats} must define exactly one function or class", raw or text)
        node = defs[0]
        imports = tuple(ps.import_lines(code))
        stub = _stub_definition(node)
        if isinstance(node, ast.ClassDef):
            methods = tuple(
                MethodSpec(s.name, ps.signature_text(s), ast.get_docstring(s) or "")
                for s in node.body
                if isinstance(s, ps.FunctionNode)
            )
            method_names = {mt.name for mt in methods}
            fm = tuple(
                (f, snake_case(f.split("/")[-1])) for f in feats if snake_case(f.split("/")[-1]) in method_names
            )
            base_link = next((ast.unparse(b) for b in node.bases if ast.unparse(b).split(".")[-1] in base_names), None)
            spec = InterfaceSpec("class", node.name, ps.signature_text(node), ast.get_docstring(node) or "",
                                 frozenset(feats), file, base_link, methods, fm, imports, ast.unparse(stub) + "\n")
        else:
            spec = InterfaceSpec("function", node.name, ps.signature_text(node), ast.get_docstring(node) or "",
                                 frozenset(feats), file, None, (), (), imports, ast.unparse(stub) + "\n")
        specs.append(spec)
    return specs


def _upstream_listing(specs: Iterable[InterfaceSpec]) -> str:
    rows = [f"{s.file}: {s.signature}" for s in specs]
    return "\n".join(rows) or "(none)"


def _bases_listing(bases: Iterable[BaseAbstraction]) -> str:
    rows = []
    for b in bases:
        module = b.file[:-3].replace("/", ".")
        rows.append(f"from {module} import {b.name}  # {b.kind}: {b.rationale.splitlines()[0] if b.rationale else ''}")
        rows.extend(f"    {line}" for line in b.member_contract.splitlines())
    return "\n".join(rows) or "(none)"


def file_features(graph: Rpg, file: str) -> list[str]:
    return sorted(p for l in graph.leaves() if file in graph.nodes[l].binding.files for p in graph.nodes[l].feature_paths)


def design_interfaces(graph: Rpg, file: str, context: DesignContext, oracle: Oracle) -> list[InterfaceSpec]:
    """Design one interface per feature bound to ``file``."""
    features = file_features(graph, file)
    if not features:
        return []
    leaf = graph.leaf_for_feature(features[0])
    root = graph.root_of(leaf) if leaf else ""
    ex = oracle.ask(
        "design_interfaces",
        repo_overview=context.overview,
        subtree_name=graph.nodes[root].label if root else "",
        file=file,
        features=features,
        data_flow=context.data_flow or flow_listing(graph),
        base_classes=_bases_listing(context.bases),
        upstream_interfaces=_upstream_listing(context.upstream),
    )
    specs = parse_designs(ex.payload, file, (b.name for b in context.bases), ex.raw)
    check_designs(specs, features, file)
    for s in specs:
        params = "(self)" not in s.signature and not s.signature.endswith("()") and s.kind == "function"
        gaps = contract_gaps(s.doc, params)
        if gaps:
            log.warning("%s:%s doc contract lacks %s", file, s.name, ", ".join(gaps))
    return specs


def check_designs(specs: list[InterfaceSpec], features: list[str], file: str) -> None:
    names = [s.name for s in specs]
    dup_names = sorted({n for n in names if names.count(n) > 1})
    if dup_names:
        raise DesignError(f"{file}: interface name(s) defined twice: {', '.join(dup_names)}")
    seen: dict[str, str] = {}
    for s in specs:
        for f in sorted(s.feature_paths):
            if f in seen:
                raise DesignError(f"feature {f!r} mapped to both {seen[f]} and {s.name}")
            seen[f] = s.name
    unknown = sorted(set(seen) - set(features))
    if unknown:
        raise DesignError(f"{file}: design names features not bound to this file: {', '.join(unknown)}")
    unmapped = sorted(set(features) - set(seen))
    if unmapped:
        raise DesignError(f"{file}: feature(s) left without an interface: {', '.join(unmapped)}")


def bind_interfaces(graph: Rpg, specs: Iterable[InterfaceSpec]) -> Rpg:
    refs: dict[str, set[InterfaceRef]] = defaultdict(set)
    for s in specs:
        for f in s.feature_paths:
            leaf = graph.leaf_for_feature(f)
            if leaf is None:
                raise DesignError(f"feature {f!r} has no leaf in the graph")
            refs[leaf].add(s.ref_for(f))
    for leaf in sorted(refs):
        graph = graph.bind(leaf, interfaces=frozenset(refs[leaf]))
    return graph


def file_order(graph: Rpg) -> list[str]:
    """Bound files in the order their first leaf appears topologically."""
    out: list[str] = []
    for leaf in topological_order(graph):
        for f in graph.nodes[leaf].binding.all_files():
            if f not in out:
                out.append(f)
    return out


@dataclass
class ImplementationPlan:
    graph: Rpg
    bases: list[BaseAbstraction]
    specs: list[InterfaceSpec]

    def to_document(self) -> dict[str, Any]:
        return {"bases": [b.to_dict() for b in self.bases], "interfaces": [s.to_dict() for s in self.specs]}

    @staticmethod
    def specs_from_document(doc: Mapping[str, Any]) -> tuple[list[BaseAbstraction], list[InterfaceSpec]]:
        bases = [
            BaseAbstraction(**{k: tuple(v) if isinstance(v, list) else v for k, v in b.items()}) for b in doc.get("bases", [])
        ]
        return bases, [InterfaceSpec.from_dict(s) for s in doc.get("interfaces", [])]


def plan_implementation(
    graph: Rpg,
    oracle: Oracle,
    overview: str = "",
    *,
    file_rounds: int = 5,
    flow_retries: int = 3,
    base_cap: int = 3,
) -> ImplementationPlan:
    graph = encode_folders(graph, oracle, overview)
    graph = encode_files(graph, oracle, overview, file_rounds)
    graph = encode_data_flows(graph, oracle, overview, flow_retries)
    bases = abstract_base_classes(graph, oracle, overview, base_cap)
    ctx = DesignContext(overview, flow_listing(graph), bases, [])
    specs: list[InterfaceSpec] = []
    for f in file_order(graph):
        designed = design_interfaces(graph, f, ctx, oracle)
        specs.extend(designed)
        ctx.upstream.extend(designed)
    graph = bind_interfaces(graph, specs)
    report = validate(graph, planning_complete=True)
    if report:
        raise InvalidGraphError(report)
    return ImplementationPlan(graph, bases, specs)


# -- skeleton ----------------------------------------------------------------


def _merge_imports(lines: Iterable[str]) -> list[str]:
    seen, out = set(), []
    for line in lines:
        if line not in seen:
            seen.add(line)
            out.append(line)
    future = [l for l in out if l.startswith("from __future__")]
    return future + [l for l in out if not l.startswith("from __future__")]


def _file_text(imports: Iterable[str], blocks: Iterable[str]) -> str:
    imps = _merge_imports(imports)
    parts = ["\n".join(imps) + "\n"] if imps else []
    parts.extend(b.rstrip("\n") + "\n" for b in blocks)
    return "\n\n".join(parts) if parts else ""


def skeleton_files(graph: Rpg, specs: Iterable[InterfaceSpec], bases: Iterable[BaseAbstraction] = ()) -> dict[str, str]:
    """Relative path -> file text for every bound file, base file and package marker."""
    specs = list(specs)
    bases = list(bases)
    bound = sorted({f for n in graph.nodes.values() for f in n.binding.all_files()})
    base_files = sorted({b.file for b in bases})
    clash = sorted(set(bound) & set(base_files))
    if clash:
        raise SkeletonError(f"abstraction file(s) collide with planned files: {', '.join(clash)}")
    files: dict[str, str] = {}
    for f in bound:
        mine = [s for s in specs if s.file == f]
        files[f] = _file_text((l for s in mine for l in s.imports), (s.code for s in mine))
    for f in base_files:
        mine = [b for b in bases if b.file == f]
        files[f] = _file_text((l for b in mine for l in b.imports), (b.source for b in mine))
    dirs = {str(Path(f).parent.as_posix()) for f in files}
    for d in list(dirs):
        parts = d.split("/")
        dirs.update("/".join(parts[:i]) for i in range(1, len(parts)))
    for d in sorted(dirs):
        if d in ("", "."):
            continue
        if d in files or f"{d}.py" in files:
            raise SkeletonError(f"path {d!r} is both a file and a directory")
        files.setdefault(f"{d}/__init__.py", "")
    return files


def manifest(graph: Rpg, specs: Iterable[InterfaceSpec], bases: Iterable[BaseAbstraction] = ()) -> dict[str, Any]:
    rows: dict[str, dict[str, set[str]]] = defaultdict(lambda: {"features": set(), "interfaces": set()})
    for leaf in graph.leaves():
        node = graph.nodes[leaf]
        for ref in node.binding.interfaces:
            rows[ref.file]["features"].update(node.feature_paths)
            rows[ref.file]["interfaces"].add(ref.descriptor())
        for f in node.binding.files:
            rows[f]["features"].update(node.feature_paths)
    for s in specs:
        rows[s.file]["interfaces"].add(f"{s.kind}: {s.name}")
    for b in bases:
        rows[b.file]["interfaces"].add(f"class: {b.name}")
    return {
        "files": [
            {"file": f, "features": sorted(v["features"]), "interfaces": sorted(v["interfaces"])}
            for f, v in sorted(rows.items())
        ]
    }


def emit_skeleton(
    graph: Rpg,
    specs: Iterable[InterfaceSpec],
    root: str | Path,
    bases: Iterable[BaseAbstraction] = (),
    overwrite: bool = False,
) -> Workspace:
    """Write stub files, package markers and the manifest under ``root``."""
    specs, bases = list(specs), list(bases)
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise SkeletonError(f"{root} is not empty")
        shutil.rmtree(root)
    files = skeleton_files(graph, specs, bases)
    ws = Workspace(root)
    root.mkdir(parents=True, exist_ok=True)
    for rel in sorted(files):
        ws.write(rel, files[rel])
    for r in graph.roots():
        d = graph.nodes[r].binding.directory
        if d:
            (root / d).mkdir(parents=True, exist_ok=True)
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest(graph, specs, bases), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return ws
