"""Shared builders and independent reference checkers for the test suite."""

from __future__ import annotations

import itertools
import json
import random
from pathlib import Path
from typing import Iterable

from repoplan.oracle import Oracle, ScriptedBackend, format_blocks
from repoplan.rpg import (
    COMPONENT,
    DATAFLOW,
    HIERARCHY,
    LEAF,
    ORDER,
    PHASE_IMPLEMENTATION,
    PHASE_PROPOSAL,
    SUBGRAPH_ROOT,
    Binding,
    InterfaceRef,
    Rpg,
    RpgEdge,
    RpgNode,
)

TOY = Path(__file__).resolve().parents[1] / "src" / "repoplan" / "data" / "toy"


def scripted(script: dict) -> Oracle:
    return Oracle(ScriptedBackend(script), backoff=0.0)


def act(payload) -> str:
    return format_blocks("reasoning", payload)


def sol(payload) -> str:
    return format_blocks("reasoning", payload, "think_solution")


def snake(text: str) -> str:
    return "_".join(text.lower().split())


def tree_graph(
    spec: dict[str, dict[str, list[str]]],
    flows: Iterable[tuple[str, str]] = (),
    orders: Iterable[tuple[str, str]] = (),
    phase: str = PHASE_PROPOSAL,
    bound: bool = True,
    interfaces: bool = False,
) -> Rpg:
    """Build ``{root: {component: [leaf labels]}}`` with one file per component.

    Ids are label paths; a leaf's feature path is its id.
    """
    nodes, edges = [], []
    for root, comps in spec.items():
        rdir = f"src/{snake(root)}"
        nodes.append(RpgNode(root, root, SUBGRAPH_ROOT, structure=Binding(directory=rdir) if bound else None))
        for comp, leaves in comps.items():
            cid = f"{root}/{comp}"
            file = f"{rdir}/{snake(comp)}.py"
            nodes.append(RpgNode(cid, comp, COMPONENT, structure=Binding(files=frozenset({file})) if bound else None))
            edges.append(RpgEdge(HIERARCHY, root, cid))
            for leaf in leaves:
                lid = f"{cid}/{leaf}"
                refs = frozenset({InterfaceRef(file, snake(leaf), "function")}) if interfaces else frozenset()
                b = Binding(files=frozenset({file}), interfaces=refs) if bound else None
                nodes.append(RpgNode(lid, leaf, LEAF, frozenset({lid}), b))
                edges.append(RpgEdge(HIERARCHY, cid, lid))
    for i, (a, b) in enumerate(flows):
        edges.append(RpgEdge(DATAFLOW, a, b, f"d{i}", "list", "none"))
    for a, b in orders:
        edges.append(RpgEdge(ORDER, a, b))
    return Rpg.build(nodes, edges, phase)


def random_valid_graph(rng: random.Random, max_nodes: int = 50, connected: bool = True) -> Rpg:
    """A random graph satisfying every invariant (implementation phase when ``connected``)."""
    n_roots = rng.randint(1, 4)
    spec: dict[str, dict[str, list[str]]] = {}
    budget = max_nodes - n_roots
    for r in range(n_roots):
        comps: dict[str, list[str]] = {}
        for c in range(rng.randint(1, 3)):
            if budget < 2:
                break
            k = rng.randint(1, min(4, budget - 1))
            comps[f"c{c}"] = [f"l{i}" for i in range(k)]
            budget -= k + 1
        spec[f"R{r}"] = comps or {}
    roots = list(spec)
    perm = roots[:]
    rng.shuffle(perm)
    flows = set()
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if rng.random() < 0.4:
                flows.add((perm[i], perm[j]))
    if connected and len(perm) > 1:
        for i in range(len(perm) - 1):
            if not any(perm[i] in f for f in flows) or rng.random() < 0.3:
                flows.add((perm[i], perm[i + 1]))
        if not any(perm[-1] in f for f in flows):
            flows.add((perm[-2], perm[-1]))
    orders = set()
    for root, comps in spec.items():
        ids = [f"{root}/{c}" for c in comps]
        rng.shuffle(ids)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                if rng.random() < 0.4:
                    orders.add((ids[i], ids[j]))
    g = tree_graph(spec, sorted(flows), sorted(orders), PHASE_IMPLEMENTATION if connected else PHASE_PROPOSAL)
    return g


def random_any_graph(rng: random.Random, max_nodes: int = 10) -> Rpg:
    """A small random graph that may violate any invariant."""
    n = rng.randint(0, max_nodes)
    kinds = [rng.choice((SUBGRAPH_ROOT, COMPONENT, LEAF)) for _ in range(n)]
    ids = [f"n{i}" for i in range(n)]
    files = ["src/a/x.py", "src/a/y.py", "src/b/z.py"]
    nodes = []
    for nid, kind in zip(ids, kinds):
        if kind == SUBGRAPH_ROOT:
            b = Binding(directory=rng.choice([None, "src/a", "src/b"]))
        elif kind == COMPONENT:
            b = Binding(files=frozenset(rng.sample(files, rng.randint(0, 2))))
        else:
            fs = frozenset(rng.sample(files, rng.randint(0, 1)))
            b = Binding(files=fs, interfaces=frozenset(InterfaceRef(f, "f", "function") for f in fs if rng.random() < 0.5))
        nodes.append(RpgNode(nid, nid, kind, frozenset({nid}) if rng.random() < 0.8 else frozenset(), b))
    edges = set()
    if n:
        for _ in range(rng.randint(0, 2 * n)):
            kind = rng.choice((HIERARCHY, HIERARCHY, DATAFLOW, ORDER))
            a, b = rng.choice(ids), rng.choice(ids)
            if kind == DATAFLOW:
                edges.add(RpgEdge(kind, a, b, f"d{a}{b}", "t", "none"))
            else:
                edges.add(RpgEdge(kind, a, b))
    return Rpg.build(nodes, edges, rng.choice((PHASE_PROPOSAL, PHASE_IMPLEMENTATION)))


def mutated_valid_graph(rng: random.Random, max_nodes: int = 10) -> Rpg:
    """A small valid graph with at most one random structural change."""
    g = random_valid_graph(rng, max_nodes, connected=rng.random() < 0.5)
    ids = sorted(g.nodes)
    choice = rng.randint(0, 5)
    a, b = rng.choice(ids), rng.choice(ids)
    if choice == 0:
        return g.with_edges(RpgEdge(HIERARCHY, a, b))
    if choice == 1:
        return g.with_edges(RpgEdge(DATAFLOW, a, b, "x", "t", "none"))
    if choice == 2:
        return g.with_edges(RpgEdge(ORDER, a, b))
    if choice == 3:
        return g.bind(a, files=frozenset({rng.choice(["src/r0/c0.py", "src/r1/c0.py", "other/x.py"])}))
    if choice == 4:
        return g.with_phase(PHASE_IMPLEMENTATION)
    return g


# -- brute-force reference checker --------------------------------------------------


def _has_cycle(vertices: list[str], pairs: set[tuple[str, str]]) -> bool:
    """Exhaustive reachability: a cycle exists iff some vertex reaches itself."""
    reach = {(a, b) for a, b in pairs}
    changed = True
    while changed:
        changed = False
        for (a, b), (c, d) in itertools.product(list(reach), list(reach)):
            if b == c and (a, d) not in reach:
                reach.add((a, d))
                changed = True
    return any((v, v) in reach for v in vertices)


def brute_force_valid(g: Rpg, planning_complete: bool = False) -> bool:
    nodes = g.nodes
    ids = list(nodes)
    edges = [e for e in g.edges]
    if any(e.src not in nodes or e.dst not in nodes for e in edges):
        return False
    hier = {(e.src, e.dst) for e in edges if e.kind == HIERARCHY}
    parent_count = {i: sum(1 for (_, d) in hier if d == i) for i in ids}
    for i in ids:
        if parent_count[i] > 1:
            return False
        if nodes[i].kind == SUBGRAPH_ROOT and parent_count[i] != 0:
            return False
        if nodes[i].kind != SUBGRAPH_ROOT and parent_count[i] == 0:
            return False
    if any(nodes[s].kind == LEAF for s, _ in hier):
        return False
    if _has_cycle(ids, hier):
        return False
    flow = {(e.src, e.dst) for e in edges if e.kind == DATAFLOW}
    if any(nodes[a].kind != SUBGRAPH_ROOT or nodes[b].kind != SUBGRAPH_ROOT for a, b in flow):
        return False
    if _has_cycle(ids, flow):
        return False
    roots = [i for i in ids if nodes[i].kind == SUBGRAPH_ROOT]
    if g.phase == PHASE_IMPLEMENTATION and len(roots) > 1:
        if any(not any(r in p for p in flow) for r in roots):
            return False

    def parent(i):
        ps = [s for s, d in hier if d == i]
        return ps[0] if ps else None

    def chain(i):
        out = [i]
        while parent(out[-1]) is not None:
            out.append(parent(out[-1]))
        return out

    order = {(e.src, e.dst) for e in edges if e.kind == ORDER}
    for a, b in order:
        for x in (a, b):
            if nodes[x].kind != COMPONENT or not nodes[x].binding.files:
                return False
        if chain(a)[-1] != chain(b)[-1] or a in chain(b) or b in chain(a):
            return False
    if _has_cycle(ids, order):
        return False
    for r in roots:
        d = nodes[r].binding.directory
        if not d:
            continue
        for i in ids:
            if i != r and r in chain(i):
                if any(not f.startswith(d.rstrip("/") + "/") for f in nodes[i].binding.all_files()):
                    return False
    if planning_complete:
        for i in ids:
            if nodes[i].kind == LEAF and (not nodes[i].feature_paths or not nodes[i].binding.interfaces):
                return False
    return True


def order_respects_constraints(g: Rpg, order: list[str]) -> bool:
    """Direct scan: every leaf under u precedes every leaf under v for each constraint u -> v."""
    pos = {leaf: i for i, leaf in enumerate(order)}
    if sorted(order) != sorted(g.leaves()):
        return False
    for e in g.edges:
        if e.kind not in (DATAFLOW, ORDER):
            continue
        before, after = g.leaves_under(e.src), g.leaves_under(e.dst)
        if before and after and max(pos[x] for x in before) > min(pos[y] for y in after):
            return False
    return True


def load_script(path: Path = TOY / "script.json") -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def fixture_tree(seed: int = 0, n_nodes: int = 100):
    """A random weighted feature tree with exactly ``n_nodes`` nodes."""
    from repoplan.ontology import FeatureTree

    rng = random.Random(seed)
    keys: list[tuple[str, ...]] = []
    while len(keys) < n_nodes:
        parent = rng.choice([()] + keys) if keys else ()
        if len(parent) >= 5:
            continue
        key = parent + (f"n{len(keys)}",)
        keys.append(key)
    weights = {"/".join(k): rng.randint(1, 20) for k in keys}
    return FeatureTree.from_paths(["/".join(k) for k in keys], weights)


def replay_reject_sample(root, tree, cfg, seen, seed: int):
    """Reference rejection sampler: replays the seeded draws and picks by rule.

    Returns ``(result, draws)``.
    """
    from repoplan.ontology import base_sample

    rng = random.Random(seed)
    draws = []
    for _ in range(cfg.max_retries):
        cand = base_sample(root, tree, cfg, rng)
        draws.append(cand)
        ovl = len(cand & set(seen)) / len(cand) if cand else 0.0
        if ovl <= cfg.overlap_threshold:
            return cand, draws
    scores = [len(c & set(seen)) / len(c) if c else 0.0 for c in draws]
    best = min(range(len(draws)), key=lambda i: (scores[i], i))
    return draws[best], draws


# -- metrics fixture ---------------------------------------------------------------

CATEGORY_VECTORS = {
    "readers": [1.0, 0.0, 0.0],
    "writers": [0.0, 1.0, 0.0],
    "moments": [0.0, 0.0, 1.0],
    "plots": [1.0, 1.0, 1.0],
}
TAXONOMY_DOC = {"io": ["readers", "writers"], "stats": ["moments"], "viz": {"plots": []}}
FEATURE_VECTORS = {
    "load csv": [1.0, 0.1, 0.0],
    "load json": [0.9, 0.0, 0.1],
    "load parquet": [1.0, 0.2, 0.1],
    "save csv": [0.1, 1.0, 0.0],
    "save json": [0.0, 1.0, 0.2],
    "save html": [0.2, 0.9, 0.0],
    "column mean": [0.1, 0.0, 1.0],
    "column skew": [0.05, 0.0, 0.9],
    "reverse bytes": [-1.0, 0.0, 0.0],
    "negate all": [0.0, -1.0, -1.0],
}
# by hand: three readers, three writers, two moments, two beyond every centroid
EXPECTED_ASSIGNMENT = {
    "load csv": "io/readers", "load json": "io/readers", "load parquet": "io/readers",
    "save csv": "io/writers", "save json": "io/writers", "save html": "io/writers",
    "column mean": "stats/moments", "column skew": "stats/moments",
    "reverse bytes": "OOD", "negate all": "OOD",
}


def table_embedder(*tables: dict):
    merged = {k: v for t in tables for k, v in t.items()}
    return lambda text: merged[text]


def reference_line_counts(source: str) -> tuple[int, int]:
    """Line-scanning LOC/token counter for the fixture dialect.

    Understands full-line and trailing ``#`` comments (no ``#`` inside
    strings), blank lines, and triple-quoted docstrings opening a line
    directly after a ``def``/``class`` header or at the top of the file.
    """
    import re

    loc = tokens = 0
    in_doc = False
    expect_doc = True
    for raw in source.splitlines():
        line = raw.strip()
        if in_doc:
            if '"""' in line:
                in_doc = False
            continue
        if not line or line.startswith("#"):
            continue
        if expect_doc and line.startswith('"""'):
            expect_doc = False
            if line.count('"""') == 1:
                in_doc = True
            continue
        code = line.split("#", 1)[0].rstrip()
        loc += 1
        tokens += len(re.findall(r"\w+|[^\w\s]", code))
        expect_doc = code.endswith(":") and (code.startswith("def ") or code.startswith("class "))
    return loc, tokens


def brute_nearest(vec, centroids, radius):
    """Cosine distance to every centroid, then the minimum by name order."""
    import numpy as np

    from repoplan.metrics import OOD

    names = sorted(centroids)
    v = np.asarray(vec, float)
    dists = []
    for n in names:
        c = np.asarray(centroids[n], float)
        denom = np.linalg.norm(v) * np.linalg.norm(c)
        dists.append(1.0 if denom == 0 else 1.0 - float(v @ c) / denom)
    i = int(np.argmin(dists))
    return (names[i] if dists[i] <= radius else OOD), dists[i]


FIXTURE_FILES = {
    "pkg/__init__.py": '"""Package."""\n',
    "pkg/io.py": '"""Readers."""\n\nimport csv\n\n\ndef read(path):\n    """Read rows."""\n    with open(path) as fh:  # text mode\n        return list(csv.reader(fh))\n',
    "pkg/stats.py": "def mean(xs):\n    # guard\n    if not xs:\n        return 0.0\n    return sum(xs) / len(xs)\n",
    "pkg/var.py": 'def var(xs):\n    """Population variance.\n\n    Uses the two-pass formula.\n    """\n    m = sum(xs) / len(xs)\n    return sum((x - m) ** 2 for x in xs) / len(xs)\n',
    "pkg/table.py": "class Table:\n    \"\"\"Rows.\"\"\"\n\n    def __init__(self, rows):\n        self.rows = rows\n\n    def width(self):\n        return max(len(r) for r in self.rows)\n",
    "pkg/sub/__init__.py": "",
    "pkg/sub/fmt.py": "def fmt(x):\n    return f'{x:.2f}'\n",
    "pkg/sub/deep/util.py": "# only comments\n# here\n\nVALUE = [1, 2,\n         3]\n",
    "pkg/README.txt": "not python\n",
    "tests/test_io.py": "def test_x():\n    assert 1\n",
    "tests/helpers.py": "X = 1\n",
    "docs/conf.py": "project = 'x'\n",
}


def write_fixture(root: Path) -> None:
    for rel, text in FIXTURE_FILES.items():
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)


# -- programmable stub backends ----------------------------------------------------------


class PolicyBackend:
    """Backend whose reply payload is computed from the request by ``policy``.

    ``policy(template_id, bindings)`` returns a JSON-able payload (or a
    string body), wrapped in the block the template expects.
    """

    def __init__(self, policy):
        self.policy = policy
        self.requests = []

    def __call__(self, request):
        from repoplan.oracle import format_blocks

        self.requests.append(request)
        return format_blocks("stub", self.policy(request.template_id, dict(request.bindings)), request.schema)


def policy_oracle(policy):
    return Oracle(PolicyBackend(policy), backoff=0.0)


def rendered_paths(text: str) -> list[str]:
    """Invert ``FeatureTree.render`` (two-space indent) back to node paths."""
    out, stack = [], []
    for line in text.splitlines():
        if not line.strip() or line.strip() == "(empty)":
            continue
        depth = (len(line) - len(line.lstrip(" "))) // 2
        stack = stack[:depth] + [line.strip()]
        out.append("/".join(stack))
    return out


def summary_structure(summary: str) -> tuple[list[str], list[str]]:
    """(module labels, "Module/Component" addresses) from a refactor summary."""
    modules, comps = [], []
    current = None
    for line in summary.splitlines():
        if line == "(empty)" or not line.strip():
            continue
        depth = (len(line) - len(line.lstrip(" "))) // 2
        body = line.strip()
        if body.startswith("- "):
            continue
        if depth == 0:
            current = body
            modules.append(body)
        elif depth == 1 and current is not None:
            comps.append(f"{current}/{body}")
    return modules, comps


def random_refactor_policy(rng: random.Random):
    """A stub refactoring oracle that makes arbitrary, legal-but-messy choices.

    Extraction places random subsets (some features twice, some never),
    reorganization moves features and components and merges modules, and
    refinement renames nodes, sometimes onto existing names.
    """
    names = ["Core", "IO", "Stats", "Eval/Metrics", "Plot", "Utils"]

    def policy(tid, b):
        if tid == "refactor_extract":
            pending = [p for p in b["unassigned_features"].split("\n") if p]
            subgraphs: dict = {}
            for f in pending:
                if rng.random() < 0.2:
                    continue
                mod = rng.choice(names)
                if rng.random() < 0.3:
                    subgraphs.setdefault(mod, [])
                    if isinstance(subgraphs[mod], list):
                        subgraphs[mod].append(f)
                        continue
                entry = subgraphs.setdefault(mod, {})
                if isinstance(entry, list):
                    entry.append(f)
                    continue
                if rng.random() < 0.2:
                    entry.setdefault("nest", {}).setdefault("deep", []).append(f)
                else:
                    slot = entry.setdefault(rng.choice(["a", "b", "c"]), [])
                    if isinstance(slot, list):
                        slot.append(f)
                if rng.random() < 0.1:
                    other = subgraphs.setdefault(rng.choice(names), {})
                    if isinstance(other, dict):
                        other.setdefault("dup", []).append(f)
            return {"subgraphs": subgraphs}
        modules, comps = summary_structure(b["graph_summary"])
        features = [ln.strip()[2:] for ln in b["graph_summary"].splitlines() if ln.strip().startswith("- ")]
        if tid == "refactor_reorganize":
            ops = []
            for _ in range(rng.randint(0, 4)):
                kind = rng.choice(["move", "move_component", "merge"])
                if kind == "move" and features:
                    ops.append({"op": "move", "feature": rng.choice(features),
                                "to": rng.choice(modules + comps + ["Fresh", "Fresh/Part"])})
                elif kind == "move_component" and comps:
                    c = comps.pop(rng.randrange(len(comps)))
                    ops.append({"op": "move_component", "component": c, "to": rng.choice(modules + ["Moved"])})
                elif kind == "merge" and len(modules) > 1:
                    src = modules.pop(rng.randrange(len(modules)))
                    comps = [c for c in comps if not c.startswith(src + "/")]
                    ops.append({"op": "merge", "source": src, "target": rng.choice(modules + ["Merged"])})
            return {"operations": ops}
        if tid == "refactor_refine":
            renames = []
            for m in modules:
                if rng.random() < 0.3:
                    renames.append({"node": m, "label": rng.choice(names + ["Renamed"])})
                    break
            return {"renames": renames}
        raise AssertionError(f"unexpected template {tid}")

    return policy


def random_feature_paths(rng: random.Random, n: int) -> list[str]:
    """``n`` distinct leaf paths, with repeated last segments across branches."""
    out: set[str] = set()
    while len(out) < n:
        depth = rng.randint(1, 4)
        segs = [rng.choice(["data", "model", "eval", "viz", "proposed"])]
        segs += [rng.choice(["io", "fit", "score", "mean", "plot", "x"]) for _ in range(depth - 1)]
        segs.append(f"feat{rng.randint(0, 9)}")
        out.add("/".join(segs))
    # keep only leaves: drop paths that are prefixes of others
    paths = sorted(out)
    return [p for p in paths if not any(q.startswith(p + "/") for q in paths)]


# -- localization fixture ------------------------------------------------------

PLANTED_SOURCES = {
    "src/stats/moments.py": (
        "def mean(xs):\n    \"\"\"Arithmetic mean.\"\"\"\n    return sum(xs) / len(xs)\n\n\n"
        "def variance(xs):\n    \"\"\"Population variance.\"\"\"\n    m = mean(xs)\n    return sum((x - m) ** 2 for x in xs) / len(xs)\n\n\n"
        "def weighted_variance(xs, ws):\n    \"\"\"Variance with per-sample weights.\"\"\"\n"
        "    m = sum(x * w for x, w in zip(xs, ws)) / sum(ws)\n"
        "    return sum(w * (x - m) ** 2 for x, w in zip(xs, ws)) / len(ws)\n"
    ),
    "src/stats/summary.py": (
        "class Summary:\n    \"\"\"Descriptive summary of a sample.\"\"\"\n\n"
        "    def describe(self, xs):\n        return {'n': len(xs)}\n\n"
        "    def spread(self, xs):\n        \"\"\"Range of the sample.\"\"\"\n        return max(xs) - min(xs)\n"
    ),
    "src/io/readers.py": (
        "def read_csv(path):\n    \"\"\"Read rows from a CSV file.\"\"\"\n    return []\n\n\n"
        "def read_json(path):\n    \"\"\"Read records from a JSON file.\"\"\"\n    return []\n"
    ),
    "src/viz/plots.py": (
        "def plot_histogram(xs):\n    \"\"\"Histogram of values.\"\"\"\n\n\n"
        "def plot_line(xs, ys):\n    \"\"\"Line chart.\"\"\"\n"
    ),
}
PLANTED = ("src/stats/moments.py", "function: weighted_variance")
PLANTED_TASK = "weighted_variance divides by the sample count instead of the weight total"
PLANTED_KEYWORDS = ["weighted variance", "weight total"]


def planted_workspace(root: Path):
    """Workspace with ten interfaces and a graph binding the leaves to them."""
    from repoplan.workspace import Workspace

    ws = Workspace(root)
    for path, text in PLANTED_SOURCES.items():
        ws.write(path, text)
    graph = tree_graph(
        {
            "Stats": {"moments": ["mean", "variance", "weighted_variance"]},
            "IO": {"readers": ["read_csv", "read_json"]},
            "Viz": {"plots": ["plot_histogram", "plot_line"]},
        },
        interfaces=True,
    )
    return ws, graph


def _hits(history: str) -> list[tuple[str, str]]:
    out = []
    for line in history.splitlines():
        if line.startswith("- ") and ": " in line:
            file, rest = line[2:].split(": ", 1)
            out.append((file, rest.split("  [features")[0]))
    return out


def localization_policy(keywords: list[str], terminate: bool = True):
    """Search, read the best hit, then terminate with the ranked hits."""

    def policy(tid, b):
        assert tid == "localize"
        history = b["history"]
        hits = _hits(history)
        if not hits or not terminate:
            return f"search_interface_by_functionality({keywords!r})"
        file, desc = hits[0]
        if "get_interface_content" not in history:
            return f"get_interface_content([{file + ':' + desc.split(': ', 1)[1]!r}])"
        result = [{"file_path": f, "interface": d} for f, d in hits[:3]]
        return f"Terminate(result={result!r})"

    return policy
