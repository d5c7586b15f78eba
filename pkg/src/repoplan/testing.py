"""Test generation, sandboxed execution, failure attribution and
patch-oriented unit / regression / integration testing."""

from __future__ import annotations

import ast
import hashlib
import logging
import os
import re
import resource
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from repoplan import pysource as ps
from repoplan.edits import Patch
from repoplan.oracle import Oracle, ProtocolError
from repoplan.rpg import DATAFLOW, Rpg
from repoplan.workspace import Workspace, module_name

log = logging.getLogger(__name__)

UNIT = "unit"
INTEGRATION = "integration"
IMPLEMENTATION = "implementation"
TEST_CODE = "test_code"
ENVIRONMENT = "environment"
ERROR_TYPES = (IMPLEMENTATION, TEST_CODE, ENVIRONMENT)

PASSED = "passed"
FAILED = "failed"
UNRESOLVED = "unresolved"

_NO_NETWORK = '''\
import socket as _socket

_orig_connect = _socket.socket.connect


def _blocked(self, address, *args, **kwargs):
    if self.family == getattr(_socket, "AF_UNIX", None):
        return _orig_connect(self, address, *args, **kwargs)
    raise OSError("network access is disabled in the test sandbox")


_socket.socket.connect = _blocked
_socket.socket.connect_ex = _blocked
_socket.create_connection = lambda *a, **k: _blocked(_socket.socket(), a[0] if a else None)
'''


# -- execution ---------------------------------------------------------------


@dataclass(frozen=True)
class SandboxLimits:
    wall_seconds: float = 60.0
    memory_bytes: int = 2 * 1024**3
    network: bool = False


@dataclass(frozen=True)
class ExecutionResult:
    status: int
    stdout: str
    stderr: str
    wall_time: float = 0.0
    timed_out: bool = False
    memory_exceeded: bool = False
    sandbox_error: bool = False

    @property
    def passed(self) -> bool:
        # pytest exit code 5 means "no tests collected"
        return self.status in (0, 5) and not (self.timed_out or self.memory_exceeded or self.sandbox_error)

    @property
    def output(self) -> str:
        return self.stdout + self.stderr

    def record(self) -> dict[str, Any]:
        """Timing-free summary suitable for reproducible artifacts."""
        return {
            "status": self.status,
            "passed": self.passed,
            "timed_out": self.timed_out,
            "memory_exceeded": self.memory_exceeded,
            "output_digest": hashlib.sha256(normalize_output(self.output).encode()).hexdigest(),
        }


_TIMING = re.compile(r"\bin \d+(?:\.\d+)?s\b")
_SANDBOX_DIR = re.compile(r"/[^\s'\"]*repoplan-sandbox-[^/\s'\"]+/ws")


def normalize_output(text: str) -> str:
    """Mask run-specific details (durations, temp paths) in test output."""
    return _SANDBOX_DIR.sub("<sandbox>", _TIMING.sub("in <t>s", text))


def _limit_memory(limit: int) -> Any:
    def apply() -> None:
        try:
            resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
        except (ValueError, OSError):
            pass

    return apply


class Sandbox:
    """Runs pytest on a throwaway copy of the workspace in a child process.

    The copy makes the real workspace effectively read-only; the child gets
    a wall-clock limit, an address-space limit, and (by default) a socket
    shim that refuses outbound connections.
    """

    def __init__(self, limits: SandboxLimits | None = None, python: str | None = None):
        self.limits = limits or SandboxLimits()
        self.python = python or sys.executable

    def run(self, workspace: Workspace, test_file: str, extra_files: dict[str, str] | None = None) -> ExecutionResult:
        tmp = Path(tempfile.mkdtemp(prefix="repoplan-sandbox-"))
        try:
            ws = tmp / "ws"
            shutil.copytree(workspace.root, ws, ignore=shutil.ignore_patterns("__pycache__", ".pytest_cache"))
            for rel, text in (extra_files or {}).items():
                target = ws / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_text(text, encoding="utf-8")
            paths = [str(ws)]
            if not self.limits.network:
                shim = tmp / "shim"
                shim.mkdir()
                (shim / "sitecustomize.py").write_text(_NO_NETWORK, encoding="utf-8")
                paths.insert(0, str(shim))
            env = {k: v for k, v in os.environ.items() if not k.startswith("PYTEST_")}
            # Generated tests use core pytest only; third-party plugin autoload
            # dominates start-up time and leaks host configuration into the run.
            env.update(PYTHONPATH=os.pathsep.join(paths), PYTHONDONTWRITEBYTECODE="1", PYTHONHASHSEED="0",
                       PYTEST_DISABLE_PLUGIN_AUTOLOAD="1")
            cmd = [self.python, "-m", "pytest", "-q", "-p", "no:cacheprovider", "--import-mode=importlib",
                   "--rootdir", str(ws), test_file]
            return self._spawn(cmd, ws, env)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)

    def _spawn(self, cmd: list[str], cwd: Path, env: dict[str, str]) -> ExecutionResult:
        start = time.monotonic()
        try:
            proc = subprocess.Popen(
                cmd, cwd=cwd, env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
                start_new_session=True, preexec_fn=_limit_memory(self.limits.memory_bytes),
            )
        except OSError as exc:
            return ExecutionResult(-1, "", f"sandbox unavailable: {exc}", 0.0, sandbox_error=True)
        try:
            out, err = proc.communicate(timeout=self.limits.wall_seconds)
            timed_out = False
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out, err = proc.communicate()
            timed_out = True
        wall = time.monotonic() - start
        status = proc.returncode if not timed_out else -signal.SIGKILL
        oom = "MemoryError" in (out + err)
        if timed_out:
            err += f"\n[sandbox] wall-time limit of {self.limits.wall_seconds}s exceeded\n"
        return ExecutionResult(status, out, err, wall, timed_out, oom)


# -- nodes -------------------------------------------------------------------


@dataclass(frozen=True)
class UnitDigest:
    signature: str
    logic: str


@dataclass(frozen=True)
class Verdict:
    error_type: str
    votes: tuple[str | None, ...]
    reviews: str

    def to_dict(self) -> dict[str, Any]:
        return {"error_type": self.error_type, "votes": list(self.votes), "reviews": self.reviews}


@dataclass
class TestNode:
    __test__ = False  # not a pytest class

    kind: str
    units: tuple[str, ...]
    digests: tuple[UnitDigest, ...]
    test_file: str
    test_code: str
    branches: list[str] = field(default_factory=list)
    last_result: ExecutionResult | None = None
    executions: int = 0
    remediations: int = 0
    status: str = FAILED
    verdict: Verdict | None = None
    judge_rounds: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind == UNIT and len(self.units) != 1:
            raise ValueError("a unit test node covers exactly one interface")
        if self.kind == INTEGRATION and len(self.units) < 2:
            raise ValueError("an integration test node covers at least two interfaces")

    @property
    def passed(self) -> bool:
        return self.status == PASSED

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "units": list(self.units),
            "digests": [d.__dict__ for d in self.digests],
            "test_file": self.test_file,
            "test_code_digest": ps.text_digest(self.test_code),
            "branches": self.branches,
            "executions": self.executions,
            "remediations": self.remediations,
            "status": self.status,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "judge_rounds": self.judge_rounds,
            "last_result": self.last_result.record() if self.last_result else None,
        }


@dataclass
class TaskContext:
    task: str
    dependency_code: str = ""

    def __post_init__(self) -> None:
        if not self.task.strip():
            raise ValueError("task description must be nonempty")


@dataclass(frozen=True)
class HarnessConfig:
    judge_rounds: int = 5
    remediation_cap: int = 20
    max_branches: int = 5

    def __post_init__(self) -> None:
        if self.judge_rounds < 1 or self.judge_rounds % 2 == 0:
            raise ValueError("judge rounds must be a positive odd number")
        if self.remediation_cap < 0 or self.max_branches < 1:
            raise ValueError("caps must be positive")


def split_unit(unit: str) -> tuple[str, str]:
    file, _, name = unit.rpartition(":")
    return file, name


def unit_source(workspace: Workspace, unit: str) -> str | None:
    file, name = split_unit(unit)
    if not workspace.exists(file):
        return None
    source = workspace.read(file)
    try:
        node = ps.resolve(ast.parse(source), name)
    except SyntaxError:
        return None
    return ps.segment(source, ps.node_span(node)) if node is not None else None


def unit_digest(workspace: Workspace, unit: str) -> UnitDigest | None:
    file, name = split_unit(unit)
    if not workspace.exists(file):
        return None
    try:
        node = ps.resolve(ast.parse(workspace.read(file)), name)
    except SyntaxError:
        return None
    if node is None:
        return None
    return UnitDigest(ps.signature_text(node), ps.logic_digest(node))


def import_hint(unit: str) -> str:
    file, name = split_unit(unit)
    return f"from {module_name(file)} import {name.split('.')[0]}"


def unit_test_file(unit: str) -> str:
    file, name = split_unit(unit)
    path = Path(file)
    slug = re.sub(r"[^0-9A-Za-z_]", "_", name)
    return (Path("tests") / path.parent / f"test_{path.stem}__{slug}.py").as_posix()


def integration_test_file(key: tuple[str, ...]) -> str:
    slug = re.sub(r"[^0-9A-Za-z]+", "_", "_".join(key)).strip("_").lower()
    return f"tests/integration/test_{slug}.py"


# -- judging -----------------------------------------------------------------


def aggregate_votes(votes: Iterable[str | None], rounds: int) -> str:
    """Strict majority over ``rounds``; abstentions or a split default to implementation."""
    counts = Counter(v for v in votes if v in ERROR_TYPES)
    for kind, n in counts.items():
        if n > rounds // 2:
            return kind
    return IMPLEMENTATION


def judge_failure(
    code: str, test_code: str, output: str, context: str, oracle: Oracle, rounds: int = 5
) -> Verdict:
    if rounds < 1 or rounds % 2 == 0:
        raise ValueError("rounds must be odd")
    votes: list[str | None] = []
    reviews: list[str] = []
    for _ in range(rounds):
        try:
            ex = oracle.ask("judge_failure", code=code, test_code=test_code, output=output, branches=context)
            payload = ex.payload
            vote = payload.get("error_type") if isinstance(payload, dict) else None
            if vote not in ERROR_TYPES:
                vote = None
            else:
                reviews.append(str(payload.get("review", "")).strip())
        except ProtocolError:
            vote = None
        votes.append(vote)
    return Verdict(aggregate_votes(votes, rounds), tuple(votes), "\n".join(r for r in reviews if r))


def generate_fix_query(verdict: Verdict, branches: list[str], output: str, limit: int = 4000) -> str:
    tail = output[-limit:]
    what = "the test code" if verdict.error_type == TEST_CODE else "the test's environment assumptions"
    return (
        f"The failure was attributed to {what}. Rewrite the test so it checks the planned behaviour "
        f"without that problem.\nReviews:\n{verdict.reviews or '(none)'}\n"
        f"Planned branches:\n" + "\n".join(f"- {b}" for b in branches) + f"\nLast output (tail):\n{tail}"
    )


# -- pipeline ----------------------------------------------------------------


def _plan_branches(oracle: Oracle, unit_text: str, code: str, prior: TestNode | None, cap: int) -> list[str]:
    ex = oracle.ask("test_plan", unit=unit_text, code=code, prior_test=prior.test_code if prior else "", max_branches=str(cap))
    payload = ex.payload
    if not isinstance(payload, dict) or not isinstance(payload.get("branches"), list):
        raise ProtocolError("test plan must contain a list 'branches'", ex.raw)
    return [str(b) for b in payload["branches"]][:cap]


def run_testing_pipeline(
    workspace: Workspace,
    units: tuple[str, ...],
    code: str,
    prior: TestNode | None,
    sandbox: Sandbox,
    oracle: Oracle,
    cfg: HarnessConfig | None = None,
    task: str = "",
    test_file: str | None = None,
) -> TestNode:
    """Plan, generate, execute, judge and (for test/environment faults) repair a test."""
    cfg = cfg or HarnessConfig()
    kind = UNIT if len(units) == 1 else INTEGRATION
    unit_text = "\n".join(units)
    branches = _plan_branches(oracle, unit_text, code, prior, cfg.max_branches)
    hint = "\n".join(dict.fromkeys(import_hint(u) for u in units))
    if test_file is None:
        test_file = unit_test_file(units[0]) if kind == UNIT else integration_test_file(units)
    if kind == UNIT:
        ex = oracle.ask("test_generate", unit=unit_text, import_hint=hint, test_file=test_file, code=code,
                        branches="\n".join(f"- {b}" for b in branches), prior_test=prior.test_code if prior else "")
    else:
        ex = oracle.ask("integration_test_generate", units=unit_text, import_hint=hint, test_file=test_file, code=code,
                        task=task or "(none)")
    digests = tuple(unit_digest(workspace, u) or UnitDigest("", "") for u in units)
    node = TestNode(kind, tuple(units), digests, test_file, ex.payload, branches)
    while True:
        result = execute_in_sandbox(node, workspace, sandbox)
        node.last_result = result
        node.executions += 1
        if result.passed:
            node.status, node.verdict = PASSED, None
            return node
        if result.sandbox_error:
            node.status = UNRESOLVED
            node.verdict = Verdict(ENVIRONMENT, (), result.stderr)
            return node
        verdict = judge_failure(code, node.test_code, normalize_output(result.output),
                                "\n".join(branches), oracle, cfg.judge_rounds)
        node.verdict = verdict
        node.judge_rounds.append(len(verdict.votes))
        if verdict.error_type == IMPLEMENTATION:
            node.status = FAILED
            return node
        if node.remediations >= cfg.remediation_cap:
            node.status = UNRESOLVED
            return node
        query = generate_fix_query(verdict, branches, normalize_output(result.output))
        fix = oracle.ask("test_fix", query=query, code=code, test_code=node.test_code, output=normalize_output(result.output))
        node.test_code = fix.payload
        node.remediations += 1


def execute_in_sandbox(node: TestNode, workspace: Workspace, sandbox: Sandbox) -> ExecutionResult:
    """Run ``node``'s test file against a copy of ``workspace``."""
    return sandbox.run(workspace, node.test_file, {node.test_file: node.test_code})


# -- patch-oriented testing ----------------------------------------------------


@dataclass
class TestRegistry:
    """Known test nodes; the single writer is the build loop."""

    __test__ = False

    units: dict[str, TestNode] = field(default_factory=dict)
    integrations: dict[tuple[str, ...], TestNode] = field(default_factory=dict)
    patches: dict[str, Patch] = field(default_factory=dict)  # last committed patch per file

    def to_dict(self) -> dict[str, Any]:
        return {
            "units": {k: v.to_dict() for k, v in sorted(self.units.items())},
            "integrations": {"|".join(k): v.to_dict() for k, v in sorted(self.integrations.items())},
        }


@dataclass
class TestingOutcome:
    __test__ = False

    unit_results: list[TestNode] = field(default_factory=list)
    integration_results: list[TestNode] = field(default_factory=list)
    patch_units: dict[int, str] = field(default_factory=dict)
    trajectories: dict[str, dict[str, Any]] = field(default_factory=lambda: {"unit": {}, "inte": {}})
    dependency_files: list[str] = field(default_factory=list)

    @property
    def nodes(self) -> list[TestNode]:
        return self.unit_results + self.integration_results

    @property
    def passed(self) -> bool:
        return all(n.passed for n in self.nodes)

    def failures(self) -> list[TestNode]:
        return [n for n in self.nodes if not n.passed]


def _changed_lines(patch: Patch) -> set[int]:
    lines, cur = set(), 0
    for row in patch.diff.splitlines():
        m = re.match(r"^@@ -\d+(?:,\d+)? \+(\d+)(?:,\d+)? @@", row)
        if m:
            cur = int(m.group(1))
            continue
        if row.startswith(("+++", "---")):
            continue
        if row.startswith("+"):
            lines.add(cur)
            cur += 1
        elif row.startswith(" "):
            cur += 1
    return lines


def patch_unit(workspace: Workspace, patch: Patch, preferred: Iterable[str] = ()) -> str | None:
    """The top-level interface a patch exercises: a preferred unit in the
    file, else the first definition the diff touches, else the first one."""
    for u in preferred:
        if split_unit(u)[0] == patch.file:
            return u
    if not workspace.exists(patch.file):
        return None
    try:
        tree = ast.parse(workspace.read(patch.file))
    except SyntaxError:
        return None
    defs = [n for n in tree.body if isinstance(n, (ast.ClassDef, *ps.FunctionNode))]
    if not defs:
        return None
    changed = _changed_lines(patch)
    for d in defs:
        span = ps.node_span(d)
        if any(span.start <= l <= span.end for l in changed):
            return f"{patch.file}:{d.name}"
    return f"{patch.file}:{defs[0].name}"


def local_imports(workspace: Workspace, file: str) -> set[str]:
    """Workspace files imported by ``file``."""
    if not workspace.exists(file):
        return set()
    try:
        tree = ast.parse(workspace.read(file))
    except SyntaxError:
        return set()
    out = set()
    for node in ast.walk(tree):
        mods = []
        if isinstance(node, ast.ImportFrom) and node.module and not node.level:
            mods = [node.module] + [f"{node.module}.{a.name}" for a in node.names]
        elif isinstance(node, ast.Import):
            mods = [a.name for a in node.names]
        for m in mods:
            rel = m.replace(".", "/") + ".py"
            if workspace.exists(rel) and rel != file:
                out.add(rel)
    return out


def find_dependency_patches(workspace: Workspace, patches: list[Patch], registry: TestRegistry) -> list[Patch]:
    """Committed patches of files the patched files import, or that import them."""
    files = {p.file for p in patches}
    deps: set[str] = set()
    for f in files:
        deps |= local_imports(workspace, f)
    for f in registry.patches:
        if f not in files and local_imports(workspace, f) & files:
            deps.add(f)
    return [registry.patches[f] for f in sorted(deps - files) if f in registry.patches]


def _root_for_file(graph: Rpg | None, file: str) -> str | None:
    if graph is None:
        return None
    for r in graph.roots():
        d = graph.nodes[r].binding.directory
        if d and file.startswith(d.rstrip("/") + "/"):
            return r
    return None


def integration_clusters(
    graph: Rpg | None, units: dict[str, str], new_files: set[str]
) -> dict[tuple[str, ...], list[str]]:
    """Group units (keyed by file) into integration clusters.

    One cluster per subgraph root and one per data-flow edge whose two ends
    both carry units; a cluster needs units from at least two files and at
    least one newly patched file.
    """
    by_root: dict[str, set[str]] = {}
    for file, unit in units.items():
        r = _root_for_file(graph, file)
        if r is not None:
            by_root.setdefault(r, set()).add(file)
    clusters: dict[tuple[str, ...], list[str]] = {}
    for r, files in sorted(by_root.items()):
        if len(files) >= 2 and files & new_files:
            clusters[("root", r)] = sorted(units[f] for f in files)
    if graph is not None:
        for e in graph.edges_of(DATAFLOW):
            files = by_root.get(e.src, set()) | by_root.get(e.dst, set())
            if e.src in by_root and e.dst in by_root and files & new_files:
                clusters[("flow", e.src, e.dst)] = sorted(units[f] for f in files)
    return clusters


def test_patches(
    patches: list[Patch],
    workspace: Workspace,
    ctx: TaskContext,
    registry: TestRegistry,
    oracle: Oracle,
    sandbox: Sandbox,
    graph: Rpg | None = None,
    cfg: HarnessConfig | None = None,
    targets: Iterable[str] = (),
) -> TestingOutcome:
    """Unit, regression and integration testing for a patch set.

    ``targets`` are units that must be tested even without a patch (the
    leaf's own interfaces). Registry nodes are updated in place.
    """
    cfg = cfg or HarnessConfig()
    targets = list(targets)
    outcome = TestingOutcome()
    deps = find_dependency_patches(workspace, patches, registry)
    outcome.dependency_files = [p.file for p in deps]
    extended = list(patches) + deps

    units_by_file: dict[str, str] = {}
    ordered_units: list[str] = []
    for i, p in enumerate(extended):
        u = patch_unit(workspace, p, targets)
        if u is None:
            log.warning("patch on %s exercises no interface; skipped", p.file)
            continue
        if i < len(patches):
            outcome.patch_units[i] = u
        units_by_file.setdefault(p.file, u)
        if u not in ordered_units:
            ordered_units.append(u)
    for t in targets:
        if t not in ordered_units:
            ordered_units.append(t)
            units_by_file.setdefault(split_unit(t)[0], t)

    for u in ordered_units:
        old = registry.units.get(u)
        current = unit_digest(workspace, u)
        if old is not None and current is not None and old.digests == (current,) and old.passed:
            node = old  # regression: unchanged signature and logic
        else:
            code = unit_source(workspace, u) or ""
            node = run_testing_pipeline(workspace, (u,), code, old, sandbox, oracle, cfg, ctx.task)
            outcome.trajectories["unit"][u] = {"executions": node.executions, "remediations": node.remediations}
            registry.units[u] = node
            outcome.unit_results.append(node)
            continue
        result = execute_in_sandbox(node, workspace, sandbox)
        node.last_result = result
        node.executions += 1
        node.status = PASSED if result.passed else FAILED
        outcome.unit_results.append(node)

    new_files = {p.file for p in patches} | {split_unit(t)[0] for t in targets}
    for key, units in integration_clusters(graph, units_by_file, new_files).items():
        old = registry.integrations.get(key)
        current = tuple(unit_digest(workspace, u) or UnitDigest("", "") for u in units)
        if old is not None and old.units == tuple(units) and old.digests == current and old.passed:
            node = old
            result = execute_in_sandbox(node, workspace, sandbox)
            node.last_result = result
            node.executions += 1
            node.status = PASSED if result.passed else FAILED
        else:
            code = "\n\n".join(f"# {u}\n{unit_source(workspace, u) or ''}" for u in units)
            node = run_testing_pipeline(
                workspace, tuple(units), code, old, sandbox, oracle, cfg,
                task=ctx.task + ("\n\nDependency code:\n" + ctx.dependency_code if ctx.dependency_code else ""),
                test_file=integration_test_file(key),
            )
            outcome.trajectories["inte"]["|".join(key)] = {"executions": node.executions, "remediations": node.remediations}
            registry.integrations[key] = node
        outcome.integration_results.append(node)
    return outcome


def write_test_files(workspace: Workspace, nodes: Iterable[TestNode]) -> list[str]:
    written = []
    for n in nodes:
        workspace.write(n.test_file, n.test_code if n.test_code.endswith("\n") else n.test_code + "\n")
        written.append(n.test_file)
    return written


def failure_report(outcome: TestingOutcome, limit: int = 3000) -> str:
    parts = []
    for n in outcome.failures():
        out = normalize_output(n.last_result.output) if n.last_result else ""
        verdict = n.verdict.error_type if n.verdict else "unknown"
        parts.append(f"{n.kind} test {n.test_file} for {', '.join(n.units)} failed ({verdict}):\n{out[-limit:]}")
    return "\n\n".join(parts) or "(no failures)"


test_patches.__test__ = False  # type: ignore[attr-defined]
