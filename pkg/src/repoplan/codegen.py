"""Graph-guided code generation: walk leaves in topological order and run a
localize -> edit -> test loop per leaf, committing only validated patches."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from repoplan import pysource as ps
from repoplan.edits import TERMINATE, EditError, Patch, apply_edit, parse_edit_commands
from repoplan.implementation import InterfaceSpec
from repoplan.localization import get_interface_content, run_localization
from repoplan.oracle import Oracle, ProtocolError
from repoplan.rpg import Rpg, topological_order
from repoplan.testing import (
    HarnessConfig,
    Sandbox,
    TaskContext,
    TestRegistry,
    failure_report,
    local_imports,
    normalize_output,
    test_patches,
    write_test_files,
)
from repoplan.workspace import Workspace

log = logging.getLogger(__name__)

COMMITTED = "committed"
FAILED = "failed"


@dataclass(frozen=True)
class BuildBudget:
    debug_iterations: int = 8
    localization_steps: int = 20
    edit_turns: int = 5

    def __post_init__(self) -> None:
        if min(self.debug_iterations, self.localization_steps, self.edit_turns) < 1:
            raise ValueError("budgets must be positive")


@dataclass
class Harness:
    sandbox: Sandbox = field(default_factory=Sandbox)
    config: HarnessConfig = field(default_factory=HarnessConfig)
    registry: TestRegistry = field(default_factory=TestRegistry)


class TrajectoryLog:
    """Append-only stream of (leaf, iteration, stage, call, result digest) records."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def append(self, leaf: str, iteration: int, stage: str, call: Any, result: str = "", **extra: Any) -> None:
        rec = {
            "leaf": leaf,
            "iteration": iteration,
            "stage": stage,
            "call": call,
            "result_digest": ps.text_digest(normalize_output(result)),
            **extra,
        }
        with self._lock:
            self.records.append(rec)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict[str, Any]]:
        return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


@dataclass
class LeafOutcome:
    leaf: str
    label: str
    status: str
    iterations: int
    patches: list[Patch] = field(default_factory=list)
    built_on_stub: bool = False
    localization_steps: list[int] = field(default_factory=list)
    edit_errors: list[str] = field(default_factory=list)
    tests: list[dict[str, Any]] = field(default_factory=list)

    @property
    def committed(self) -> bool:
        return self.status == COMMITTED

    def to_dict(self) -> dict[str, Any]:
        return {
            "leaf": self.leaf,
            "label": self.label,
            "status": self.status,
            "iterations": self.iterations,
            "patches": [{"file": p.file, "before": p.before_digest, "after": p.after_digest} for p in self.patches],
            "built_on_stub": self.built_on_stub,
            "localization_steps": self.localization_steps,
            "edit_errors": self.edit_errors,
            "tests": self.tests,
        }


@dataclass
class BuildReport:
    order: list[str]
    leaves: list[LeafOutcome]
    registry: TestRegistry

    @property
    def committed(self) -> list[str]:
        return [o.leaf for o in self.leaves if o.committed]

    @property
    def failed(self) -> list[str]:
        return [o.leaf for o in self.leaves if not o.committed]

    def to_dict(self) -> dict[str, Any]:
        return {
            "order": self.order,
            "leaves": [o.to_dict() for o in self.leaves],
            "summary": {
                "committed": len(self.committed),
                "failed": len(self.failed),
                "built_on_stub": sum(o.built_on_stub for o in self.leaves),
            },
            "tests": self.registry.to_dict(),
        }


def leaf_units(graph: Rpg, leaf: str) -> list[str]:
    """Top-level interfaces (``file:Name``) a leaf is bound to."""
    out = []
    for ref in sorted(graph.nodes[leaf].binding.interfaces):
        unit = f"{ref.file}:{ref.name.split('.')[0]}"
        if unit not in out:
            out.append(unit)
    return out


def leaf_task(graph: Rpg, leaf: str, workspace: Workspace, specs: Iterable[InterfaceSpec] = ()) -> tuple[str, str]:
    """(task description, interface text) for a leaf."""
    node = graph.nodes[leaf]
    refs = sorted(node.binding.interfaces)
    targets = "\n".join(f"- {r.file}: {r.descriptor()}" for r in refs)
    stubs = get_interface_content(workspace, [f"{r.file}:{r.name}" for r in refs])
    interface = "\n\n".join(f"# {t}\n{src}" for t, src in stubs.items())
    spec_docs = [s for s in specs if any(r.file == s.file and r.name.split(".")[0] == s.name for r in refs)]
    contract = "\n".join(f"{s.signature}: {s.doc.splitlines()[0] if s.doc else ''}" for s in spec_docs)
    task = (
        f"Implement the feature(s) {', '.join(sorted(node.feature_paths))} of '{node.label}'.\n"
        f"Target interface(s):\n{targets}\n" + (f"Contract:\n{contract}\n" if contract else "")
    )
    return task, interface


def implement_leaf(
    leaf: str,
    graph: Rpg,
    workspace: Workspace,
    oracle: Oracle,
    harness: Harness,
    budget: BuildBudget,
    specs: Iterable[InterfaceSpec] = (),
    trajectory: TrajectoryLog | None = None,
    failed_files: set[str] | None = None,
) -> LeafOutcome:
    """Run the debug loop for one leaf; the workspace changes only on success."""
    trajectory = trajectory or TrajectoryLog()
    specs = list(specs)
    node = graph.nodes[leaf]
    targets = leaf_units(graph, leaf)
    outcome = LeafOutcome(leaf, node.label, FAILED, 0)
    failure = "(none)"
    stub_hits: set[str] = set()
    for iteration in range(1, budget.debug_iterations + 1):
        outcome.iterations = iteration
        with workspace.shadow() as sh:
            task, interface = leaf_task(graph, leaf, sh, specs)
            loc = run_localization(task, sh, graph, oracle, budget.localization_steps)
            outcome.localization_steps.append(loc.steps)
            for step in loc.trajectory:
                trajectory.append(leaf, iteration, "localize", list(step.calls), step.observation, step=step.step)
            located = [f"{e.file_path}:{e.name}" for e in loc.entries]
            stub_hits |= {e.file_path for e in loc.entries}
            deps = get_interface_content(sh, located)
            context = "\n\n".join(f"# {k}\n{v}" for k, v in deps.items()) or "(none)"

            patches: list[Patch] = []
            history: list[str] = []
            for turn in range(1, budget.edit_turns + 1):
                try:
                    ex = oracle.ask("code_edit", task=task, interface=interface, context=context,
                                    failure_report=failure, history="\n".join(history) or "(none)")
                    cmds = parse_edit_commands(ex.payload)
                except (ProtocolError, EditError) as exc:
                    msg = getattr(exc, "reason", str(exc))
                    outcome.edit_errors.append(msg)
                    history.append(f"turn {turn}: {msg}")
                    trajectory.append(leaf, iteration, "edit", [], msg, turn=turn)
                    continue
                done = not cmds
                for cmd in cmds:
                    if cmd.kind == TERMINATE:
                        done = True
                        break
                    try:
                        p = apply_edit(sh, cmd, leaf)
                    except EditError as exc:
                        outcome.edit_errors.append(str(exc))
                        history.append(f"turn {turn}: rejected {cmd.describe()}: {exc}")
                        trajectory.append(leaf, iteration, "edit", cmd.describe(), str(exc), turn=turn, ok=False)
                        continue
                    patches.append(p)
                    history.append(f"turn {turn}: applied {cmd.describe()}")
                    trajectory.append(leaf, iteration, "edit", cmd.describe(), p.after_digest, turn=turn, ok=True)
                if done:
                    break

            ctx = TaskContext(task, context)
            result = test_patches(patches, sh, ctx, harness.registry, oracle, harness.sandbox, graph,
                                  harness.config, targets)
            tests = [
                {
                    "kind": n.kind, "units": list(n.units), "status": n.status, "executions": n.executions,
                    "remediations": n.remediations, "judge_rounds": list(n.judge_rounds),
                }
                for n in result.nodes
            ]
            trajectory.append(leaf, iteration, "test", tests, json.dumps(tests, sort_keys=True), passed=result.passed)
            if result.passed:
                written = write_test_files(sh, result.nodes)
                workspace.commit(sh, {p.file for p in patches} | set(written))
                for p in patches:
                    harness.registry.patches[p.file] = p
                outcome.status = COMMITTED
                outcome.patches = patches
                outcome.tests = tests
                break
            failure = failure_report(result)
            outcome.tests = tests
    if failed_files:
        own = {u.split(":")[0] for u in targets}
        imported = set().union(*(local_imports(workspace, f) for f in own)) if own else set()
        outcome.built_on_stub = bool((imported | stub_hits) & failed_files)
    log.info("leaf %s: %s after %d iteration(s)", leaf, outcome.status, outcome.iterations)
    return outcome


def generate_repository(
    graph: Rpg,
    specs: Iterable[InterfaceSpec],
    workspace: Workspace,
    oracle: Oracle,
    harness: Harness,
    budget: BuildBudget | None = None,
    trajectory: TrajectoryLog | None = None,
) -> BuildReport:
    """Implement every leaf in topological order; failures become report entries."""
    budget = budget or BuildBudget()
    specs = list(specs)
    order = topological_order(graph)
    failed_files: set[str] = set()
    outcomes = []
    for leaf in order:
        out = implement_leaf(leaf, graph, workspace, oracle, harness, budget, specs, trajectory, failed_files)
        if not out.committed:
            failed_files.update(u.split(":")[0] for u in leaf_units(graph, leaf))
        outcomes.append(out)
    return BuildReport(order, outcomes, harness.registry)
