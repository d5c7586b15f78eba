"""Graph-guided localization: read-only tools over the workspace and graph,
and the bounded tool-calling loop that ends in a ranked interface list."""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from repoplan import pysource as ps
from repoplan.ontology import tokenize_words
from repoplan.oracle import Oracle, ProtocolError, strip_fence
from repoplan.rpg import INTERFACE_KINDS, LEAF, Rpg, render_graph_summary
from repoplan.workspace import Workspace

MAX_RESULTS = 5
TERMINATE = "Terminate"


class ToolError(ValueError):
    """A tool failure; reported to the oracle as the step's observation."""


@dataclass(frozen=True)
class LocEntry:
    file_path: str
    interface: str

    @property
    def kind(self) -> str:
        return self.interface.split(":", 1)[0].strip()

    @property
    def name(self) -> str:
        return self.interface.split(":", 1)[1].strip()

    def to_dict(self) -> dict[str, str]:
        return {"file_path": self.file_path, "interface": self.interface}


@dataclass(frozen=True)
class LocStep:
    step: int
    calls: tuple[str, ...]
    observation: str

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "calls": list(self.calls), "observation": self.observation}


@dataclass
class LocalizationResult:
    entries: list[LocEntry] = field(default_factory=list)
    steps: int = 0
    terminated: bool = False
    trajectory: list[LocStep] = field(default_factory=list)

    @property
    def unterminated(self) -> bool:
        return not self.terminated

    def tool_order(self) -> list[str]:
        return [c.split("(", 1)[0] for s in self.trajectory for c in s.calls]

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "steps": self.steps,
            "terminated": self.terminated,
            "trajectory": [s.to_dict() for s in self.trajectory],
        }


# -- interface facts ---------------------------------------------------------


def interface_features(graph: Rpg | None, file: str) -> dict[str, set[str]]:
    """Qualified interface name -> feature paths, from leaf bindings."""
    out: dict[str, set[str]] = {}
    if graph is None:
        return out
    for node in graph.nodes.values():
        if node.kind != LEAF:
            continue
        for ref in node.binding.interfaces:
            if ref.file == file:
                out.setdefault(ref.name, set()).update(node.feature_paths)
    return out


def _features_of(tags: dict[str, set[str]], qualname: str) -> list[str]:
    feats = set(tags.get(qualname, ()))
    if "." not in qualname:
        for name, fs in tags.items():
            if name.startswith(qualname + "."):
                feats |= fs
    return sorted(feats)


def _def_header(source: str, node: ast.AST, indent: str = "") -> str:
    """Decorators and signature line(s) of a def/class, with body elided."""
    first_body = node.body[0]  # type: ignore[attr-defined]
    start = ps.node_span(node).start
    end = first_body.lineno - 1
    if end < node.lineno:  # body on the same line as the header
        return f"{indent}{ps.signature_text(node)}:\n"
    return ps.segment(source, ps.Span(start, end))


def view_file_interface_feature_map(workspace: Workspace, file: str, graph: Rpg | None = None) -> str:
    """Imports, interfaces and feature tags of one file, bodies elided."""
    if not workspace.exists(file):
        raise ToolError(f"file not found: {file}")
    source = workspace.read(file)
    try:
        tree = ast.parse(source)
    except SyntaxError as exc:
        raise ToolError(f"{file} does not parse: {exc.msg} (line {exc.lineno})") from None
    tags = interface_features(graph, file)
    out = [f"## {file}"]
    out.extend(ps.import_lines(source))
    for node in tree.body:
        if not isinstance(node, (ast.ClassDef, *ps.FunctionNode)):
            continue
        feats = _features_of(tags, node.name)
        if feats:
            out.append(f"### Features: {', '.join(feats)}")
        out.append(_def_header(source, node).rstrip("\n"))
        if isinstance(node, ast.ClassDef):
            for sub in node.body:
                if isinstance(sub, ps.FunctionNode):
                    out.append("")
                    out.append(_def_header(source, sub).rstrip("\n"))
                    out.append(ps.leading_indent(ps.lines_of(source)[sub.lineno - 1]) + "    ...")
        else:
            out.append("    ...")
    return "\n".join(out) + "\n" if len(out) > 1 or tree.body else ""


def get_interface_content(workspace: Workspace, targets: Iterable[str]) -> dict[str, str]:
    """``file:Name`` / ``file:Class.method`` -> current source; misses get a marker."""
    out: dict[str, str] = {}
    for target in targets:
        if ":" not in target:
            out[target] = f"[not found] {target}: expected 'file.py:Name'"
            continue
        file, name = target.rsplit(":", 1)
        if not workspace.exists(file):
            out[target] = f"[not found] {target}: no such file"
            continue
        source = workspace.read(file)
        try:
            tree = ast.parse(source)
        except SyntaxError:
            out[target] = f"[not found] {target}: file does not parse"
            continue
        node = ps.resolve(tree, name.strip())
        if node is None:
            out[target] = f"[not found] {target}"
            continue
        text = ps.segment(source, ps.node_span(node))
        if "." in name:
            text = f"class {name.split('.', 1)[0]}:\n" + text
        out[target] = text
    return out


def expand_leaf_node_info(graph: Rpg, feature_path: str) -> list[tuple[str, str]]:
    """(file, descriptor) pairs bound to the leaf (or all leaves under a node)
    addressed by a feature path or by a label path through the graph."""
    leaf = graph.leaf_for_feature(feature_path)
    targets: list[str] = []
    if leaf is not None:
        targets = [leaf]
    else:
        node = _node_by_label_path(graph, feature_path)
        if node is None:
            raise ToolError(f"unknown feature path: {feature_path}")
        targets = graph.leaves_under(node)
    refs = sorted({r for t in targets for r in graph.nodes[t].binding.interfaces})
    return [(r.file, r.descriptor()) for r in refs]


def _node_by_label_path(graph: Rpg, path: str) -> str | None:
    parts = [p.strip() for p in path.split("/") if p.strip()]
    if not parts:
        return None
    current = [r for r in graph.roots() if graph.nodes[r].label == parts[0]]
    for part in parts[1:]:
        current = [c for n in current for c in graph.children(n) if graph.nodes[c].label == part]
    return current[0] if current else None


# -- keyword search ----------------------------------------------------------


@dataclass(frozen=True)
class IndexedInterface:
    file: str
    qualname: str
    kind: str
    doc: str
    features: tuple[str, ...]

    @property
    def descriptor(self) -> str:
        return f"{self.kind}: {self.qualname}"


def build_interface_index(workspace: Workspace, graph: Rpg | None = None) -> list[IndexedInterface]:
    items = []
    for file in workspace.files(".py"):
        try:
            infos = list(ps.interfaces(workspace.read(file)))
        except (SyntaxError, UnicodeDecodeError):
            continue
        tags = interface_features(graph, file)
        for info in infos:
            items.append(IndexedInterface(file, info.qualname, info.kind, info.docstring, tuple(_features_of(tags, info.qualname))))
    return items


def _norm(text: str) -> str:
    return re.sub(r"[^a-z0-9]", "", text.lower())


def _is_subsequence(needle: str, hay: str) -> bool:
    it = iter(hay)
    return all(ch in it for ch in needle)


def keyword_score(item: IndexedInterface, keywords: Iterable[str]) -> float:
    """Token overlap over name, doc and features, plus name-match bonuses."""
    bag = set(tokenize_words(" ".join([item.qualname, item.doc, *item.features])))
    short = _norm(item.qualname.split(".")[-1])
    score = 0.0
    for kw in keywords:
        toks = set(tokenize_words(kw))
        if not toks:
            continue
        hit = len(toks & bag) / len(toks)
        nk = _norm(kw)
        if nk and nk == short:
            score += hit + 2.0
        elif hit > 0:
            score += hit
            if len(nk) >= 3 and _is_subsequence(nk, short):
                score += 0.5
    return score


Scorer = Callable[[IndexedInterface, list[str]], float]


def search_interface_by_functionality(
    index: list[IndexedInterface], keywords: list[str], scorer: Scorer = keyword_score
) -> list[IndexedInterface]:
    """Top-5 interfaces by score; ties by (file, name)."""
    keywords = [k for k in keywords if isinstance(k, str) and k.strip()]
    if not keywords:
        raise ToolError("search needs at least one keyword")
    scored = [(scorer(item, keywords), item) for item in index]
    scored = [(s, i) for s, i in scored if s > 0]
    scored.sort(key=lambda p: (-p[0], p[1].file, p[1].qualname))
    return [i for _, i in scored[:MAX_RESULTS]]


# -- the loop ----------------------------------------------------------------


def parse_tool_calls(text: str) -> list[tuple[str, list[Any], dict[str, Any]]]:
    """Parse ``name(args...)`` statements; arguments must be literals."""
    body = "\n".join(l for l in strip_fence(text.strip()).splitlines() if not l.strip().startswith("```"))
    try:
        tree = ast.parse(body)
    except SyntaxError as exc:
        raise ToolError(f"malformed tool call: {exc.msg} (line {exc.lineno})") from None
    calls = []
    for stmt in tree.body:
        if not (isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Call) and isinstance(stmt.value.func, ast.Name)):
            raise ToolError(f"not a tool call: {ast.unparse(stmt)}")
        call = stmt.value
        try:
            args = [ast.literal_eval(a) for a in call.args]
            kwargs = {k.arg: ast.literal_eval(k.value) for k in call.keywords if k.arg}
        except ValueError:
            raise ToolError(f"tool arguments must be literals: {ast.unparse(call)}") from None
        calls.append((call.func.id, args, kwargs))
    if not calls:
        raise ToolError("no tool call found")
    return calls


def _interface_exists(workspace: Workspace, entry: LocEntry) -> bool:
    if entry.kind not in INTERFACE_KINDS or not workspace.exists(entry.file_path):
        return False
    try:
        tree = ast.parse(workspace.read(entry.file_path))
    except SyntaxError:
        return False
    node = ps.resolve(tree, entry.name)
    if node is None:
        return False
    if entry.kind == "class":
        return isinstance(node, ast.ClassDef)
    if entry.kind == "method":
        return "." in entry.name
    return "." not in entry.name and isinstance(node, ps.FunctionNode)


def parse_terminate(workspace: Workspace, args: list[Any], kwargs: dict[str, Any]) -> list[LocEntry]:
    result = kwargs.get("result", args[0] if args else [])
    if not isinstance(result, list):
        raise ToolError("Terminate(result=...) expects a list of {file_path, interface}")
    entries, bad = [], []
    for item in result:
        if not isinstance(item, dict) or not isinstance(item.get("file_path"), str) or not isinstance(item.get("interface"), str) or ":" not in item["interface"]:
            bad.append(json.dumps(item) if isinstance(item, (dict, list, str)) else repr(item))
            continue
        entry = LocEntry(item["file_path"], f"{item['interface'].split(':', 1)[0].strip()}: {item['interface'].split(':', 1)[1].strip()}")
        if not _interface_exists(workspace, entry):
            bad.append(f"{entry.file_path} {entry.interface}")
            continue
        if entry not in entries:
            entries.append(entry)
    if bad:
        raise ToolError("Terminate lists unknown or malformed interfaces: " + "; ".join(bad))
    return entries[:MAX_RESULTS]


def _render_search(hits: list[IndexedInterface], keywords: list[str]) -> str:
    if not hits:
        return f"No interfaces matched {keywords}."
    rows = [f"Keywords {keywords} matched:"]
    rows.extend(f"- {h.file}: {h.descriptor}" + (f"  [features: {', '.join(h.features)}]" if h.features else "") for h in hits)
    return "\n".join(rows)


class ToolBox:
    """Dispatches localization tools; never mutates workspace or graph."""

    def __init__(self, workspace: Workspace, graph: Rpg | None, scorer: Scorer = keyword_score):
        self.workspace = workspace
        self.graph = graph
        self.scorer = scorer
        self._index: list[IndexedInterface] | None = None

    @property
    def index(self) -> list[IndexedInterface]:
        if self._index is None:
            self._index = build_interface_index(self.workspace, self.graph)
        return self._index

    def run(self, name: str, args: list[Any], kwargs: dict[str, Any]) -> str:
        try:
            if name == "view_file_interface_feature_map":
                return view_file_interface_feature_map(self.workspace, _one_str(name, args, kwargs, "file_path"), self.graph) or "(empty file)"
            if name == "get_interface_content":
                targets = kwargs.get("target_specs", args[0] if args else None)
                if isinstance(targets, str):
                    targets = [targets]
                if not isinstance(targets, list):
                    raise ToolError("get_interface_content expects a list of 'file:Name'")
                found = get_interface_content(self.workspace, targets)
                return "\n".join(f"## {t}\n{src}" for t, src in found.items())
            if name == "expand_leaf_node_info":
                if self.graph is None:
                    raise ToolError("no graph loaded")
                refs = expand_leaf_node_info(self.graph, _one_str(name, args, kwargs, "feature_path"))
                return "\n".join(f"{f}: {d}" for f, d in refs) or "(no interfaces bound)"
            if name == "search_interface_by_functionality":
                kws = kwargs.get("keywords", args[0] if args else None)
                if isinstance(kws, str):
                    kws = [kws]
                if not isinstance(kws, list):
                    raise ToolError("search expects a list of keywords")
                return _render_search(search_interface_by_functionality(self.index, kws, self.scorer), kws)
            raise ToolError(f"unknown tool {name!r}")
        except ToolError as exc:
            return f"Error: {exc}"


def _one_str(name: str, args: list[Any], kwargs: dict[str, Any], key: str) -> str:
    value = kwargs.get(key, args[0] if args else None)
    if not isinstance(value, str):
        raise ToolError(f"{name} expects one string argument")
    return value


def _history_text(steps: list[LocStep], limit: int = 2000) -> str:
    parts = []
    for s in steps:
        obs = s.observation if len(s.observation) <= limit else s.observation[:limit] + "\n...(truncated)"
        parts.append(f"[step {s.step}] " + "; ".join(s.calls) + f"\n{obs}")
    return "\n\n".join(parts) or "(none)"


def run_localization(
    task: str,
    workspace: Workspace,
    graph: Rpg | None,
    oracle: Oracle,
    max_steps: int = 20,
    scorer: Scorer = keyword_score,
) -> LocalizationResult:
    """Iterate oracle tool calls until Terminate or ``max_steps``."""
    if max_steps < 1:
        raise ValueError("max_steps must be positive")
    tools = ToolBox(workspace, graph, scorer)
    summary = render_graph_summary(graph) if graph is not None else "(no graph)"
    result = LocalizationResult()
    for step in range(1, max_steps + 1):
        result.steps = step
        try:
            ex = oracle.ask(
                "localize", task=task, graph_summary=summary, step=str(step), max_steps=str(max_steps),
                history=_history_text(result.trajectory),
            )
            calls = parse_tool_calls(ex.payload)
        except (ProtocolError, ToolError) as exc:
            result.trajectory.append(LocStep(step, (), f"Error: {getattr(exc, 'reason', exc)}"))
            continue
        shown = tuple(f"{n}({', '.join([*map(repr, a), *(f'{k}={v!r}' for k, v in kw.items())])})" for n, a, kw in calls)
        observations = []
        for name, args, kwargs in calls:
            if name == TERMINATE:
                try:
                    result.entries = parse_terminate(workspace, args, kwargs)
                except ToolError as exc:
                    observations.append(f"Error: {exc}")
                    break
                result.terminated = True
                observations.append(f"Terminated with {len(result.entries)} interface(s).")
                break
            observations.append(tools.run(name, args, kwargs))
        result.trajectory.append(LocStep(step, shown, "\n\n".join(observations)))
        if result.terminated:
            break
    return result
