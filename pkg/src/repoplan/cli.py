"""Command-line entry points: plan, build, localize, eval, stats.

Every artifact of a run lives under one run directory::

    rpg.json  skeleton/  workspace/  trajectories/  tests/  reports/
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import random
import shutil
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from repoplan.codegen import BuildBudget, Harness, TrajectoryLog, generate_repository
from repoplan.implementation import ImplementationPlan, emit_skeleton, plan_implementation
from repoplan.localization import run_localization
from repoplan.metrics import CategoryTaxonomy, assign_categories, code_stats, metrics_report
from repoplan.ontology import EmbeddingIndex, HashingEmbedder, SamplerConfig, load_tree
from repoplan.oracle import ExchangeLog, Oracle, make_backend
from repoplan.proposal import RepoSpec, SelectionConfig, refactor_to_graph, select_subtree
from repoplan.rpg import deserialize, serialize
from repoplan.testing import HarnessConfig, Sandbox, SandboxLimits
from repoplan.workspace import Workspace

log = logging.getLogger("repoplan")

RPG_FILE = "rpg.json"
PLAN_FILE = "reports/interfaces.json"
LOCK_FILE = ".lock"
DEFAULT_BUDGETS = {
    "selection_iterations": 30,
    "debug_iterations": 8,
    "localization_steps": 20,
    "judge_rounds": 5,
    "remediations": 20,
}


class ConfigError(ValueError):
    """The configuration is malformed or references missing files."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


class RunLockedError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Parsed run configuration; relative paths resolve against ``base_dir``."""

    repo: RepoSpec
    ontology: Path
    backend: dict[str, Any]
    base_dir: Path
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    budget: BuildBudget = field(default_factory=BuildBudget)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    sandbox: SandboxLimits = field(default_factory=SandboxLimits)
    taxonomy: Path | None = None
    ood_radius: float = 0.6
    judge_categories: bool = False
    embedding_dim: int = 256
    seed: int = 0
    source: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_document(cls, doc: Mapping[str, Any], base_dir: Path) -> RunConfig:
        if not isinstance(doc, Mapping):
            raise ConfigError("configuration must be a JSON object")
        try:
            repo = RepoSpec(**doc["repo"])
        except KeyError as exc:
            raise ConfigError(f"missing configuration key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad 'repo' section: {exc}") from None
        if "ontology" not in doc:
            raise ConfigError("missing configuration key 'ontology'")
        budgets = {**DEFAULT_BUDGETS, **doc.get("budgets", {})}
        unknown = set(budgets) - set(DEFAULT_BUDGETS) - {"edit_turns"}
        if unknown:
            raise ConfigError(f"unknown budget key(s): {', '.join(sorted(unknown))}")
        for k, v in budgets.items():
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"budget {k!r} must be a positive integer, got {v!r}")
        try:
            sampler = SamplerConfig(**doc.get("sampler", {}))
            selection = SelectionConfig(
                iterations=budgets["selection_iterations"], sampler=sampler, **doc.get("selection", {})
            )
            budget = BuildBudget(budgets["debug_iterations"], budgets["localization_steps"], budgets.get("edit_turns", 5))
            harness = HarnessConfig(budgets["judge_rounds"], budgets["remediations"], **doc.get("testing", {}))
            sandbox = SandboxLimits(**doc.get("sandbox", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        metrics = doc.get("metrics", {})
        resolve = lambda p: (base_dir / p) if not Path(p).is_absolute() else Path(p)  # noqa: E731
        return cls(
            repo=repo,
            ontology=resolve(doc["ontology"]),
            backend=dict(doc.get("backend", {"kind": "script", "script": "script.json"})),
            base_dir=base_dir,
            selection=selection,
            budget=budget,
            harness=harness,
            sandbox=sandbox,
            taxonomy=resolve(metrics["taxonomy"]) if metrics.get("taxonomy") else None,
            ood_radius=float(metrics.get("ood_radius", 0.6)),
            judge_categories=bool(metrics.get("judge", False)),
            embedding_dim=int(doc.get("embedding_dim", 256)),
            seed=int(doc.get("seed", 0)),
            source=dict(doc),
        )

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_document(doc, path.parent.resolve())

    def check_paths(self, need_taxonomy: bool = False) -> None:
        if not self.ontology.is_file():
            raise ConfigError(f"ontology file not found: {self.ontology}")
        if self.backend.get("kind", "script") == "script":
            script = Path(self.backend.get("script", "script.json"))
            script = script if script.is_absolute() else self.base_dir / script
            if not script.exists():
                raise ConfigError(f"oracle script not found: {script}")
        if need_taxonomy and (self.taxonomy is None or not self.taxonomy.is_file()):
            raise ConfigError(f"taxonomy file not found: {self.taxonomy}")

    def input_digest(self) -> str:
        """Digest of everything a plan depends on."""
        h = hashlib.sha256(json.dumps(self.source, sort_keys=True).encode())
        h.update(str(self.seed).encode())
        h.update(str(self.selection.iterations).encode())
        h.update(self.ontology.read_bytes())
        if self.backend.get("kind", "script") == "script":
            script = Path(self.backend.get("script", "script.json"))
            script = script if script.is_absolute() else self.base_dir / script
            if script.is_file():
                h.update(script.read_bytes())
        h.update(json.dumps(self.backend, sort_keys=True).encode())
        return h.hexdigest()


# -- run directory -----------------------------------------------------------


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def __truediv__(self, rel: str) -> Path:
        return self.root / rel

    def ensure(self) -> None:
        for d in ("skeleton", "workspace", "trajectories", "tests", "reports"):
            (self.root / d).mkdir(parents=True, exist_ok=True)

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / LOCK_FILE
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"run directory {self.root} is locked by another command ({path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            path.unlink(missing_ok=True)

    def write_json(self, rel: str, doc: Any) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def read_json(self, rel: str) -> Any:
        return json.loads((self.root / rel).read_text(encoding="utf-8"))

    def fresh(self, rel: str) -> Path:
        """Path for an append-only log, truncated at the start of a command."""
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.unlink(missing_ok=True)
        return path


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else ""


def _digest_tree(root: Path) -> str:
    h = hashlib.sha256()
    if root.is_dir():
        for p in sorted(root.rglob("*")):
            if p.is_file() and "__pycache__" not in p.parts:
                h.update(p.relative_to(root).as_posix().encode())
                h.update(p.read_bytes())
    return h.hexdigest()


@contextlib.contextmanager
def _stage(run: RunDir, name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        run.write_json("reports/stage_failed.json", {"stage": name, "error": f"{type(exc).__name__}: {exc}"})
        raise StageError(name, exc) from exc


def _oracle(cfg: RunConfig, log_path: Path) -> Oracle:
    return Oracle(make_backend(cfg.backend, cfg.base_dir), log=ExchangeLog(log_path))


# -- commands ----------------------------------------------------------------


def cmd_plan(cfg: RunConfig, run_dir: str | Path) -> dict[str, Any]:
    """Select features, refactor them into a graph, enrich it, emit the skeleton."""
    cfg.check_paths()
    run = RunDir(run_dir)
    with run.lock():
        run.ensure()
        digest = cfg.input_digest()
        done = run / "reports/plan.json"
        if done.is_file():
            prev = run.read_json("reports/plan.json")
            if (
                prev.get("inputs") == digest
                and prev.get("rpg") == _digest_file(run / RPG_FILE)
                and prev.get("skeleton") == _digest_tree(run / "skeleton")
            ):
                log.info("plan is up to date; nothing to do")
                return {**prev, "skipped": True}
        (run / "reports/stage_failed.json").unlink(missing_ok=True)
        oracle = _oracle(cfg, run.fresh("trajectories/oracle_plan.jsonl"))
        snapshots = run / "trajectories/selection"
        if snapshots.exists():
            shutil.rmtree(snapshots)
        with _stage(run, "load_ontology"):
            tree = load_tree(cfg.ontology)
            embedder = HashingEmbedder(cfg.embedding_dim)
            index = EmbeddingIndex.build(tree, embedder)
        with _stage(run, "select_subtree"):
            state = select_subtree(tree, index, cfg.repo, cfg.selection, oracle, random.Random(cfg.seed), embedder,
                                   snapshots)
            run.write_json("reports/subtree.json", {"leaves": state.leaf_paths()})
        with _stage(run, "refactor_to_graph"):
            graph = refactor_to_graph(state, cfg.repo, oracle)
            (run / "reports/functionality_graph.json").write_text(serialize(graph), encoding="utf-8")
        with _stage(run, "implementation_planning"):
            plan = plan_implementation(graph, oracle, cfg.repo.overview())
        with _stage(run, "emit_skeleton"):
            (run / RPG_FILE).write_text(serialize(plan.graph), encoding="utf-8")
            run.write_json(PLAN_FILE, plan.to_document())
            emit_skeleton(plan.graph, plan.specs, run / "skeleton", plan.bases, overwrite=True)
        summary = {
            "inputs": digest,
            "rpg": _digest_file(run / RPG_FILE),
            "skeleton": _digest_tree(run / "skeleton"),
            "leaves": len(plan.graph.leaves()),
            "subgraphs": len(plan.graph.roots()),
            "interfaces": len(plan.specs),
            "oracle_calls": oracle.log.count(),
        }
        run.write_json("reports/plan.json", summary)
        return summary


def _load_plan(run: RunDir) -> tuple[Any, Any, Any]:
    if not (run / RPG_FILE).is_file() or not (run / PLAN_FILE).is_file():
        raise ConfigError(f"no plan found in {run.root}; run `repoplan plan` first")
    graph = deserialize((run / RPG_FILE).read_text(encoding="utf-8"))
    bases, specs = ImplementationPlan.specs_from_document(run.read_json(PLAN_FILE))
    return graph, bases, specs


def cmd_build(cfg: RunConfig, run_dir: str | Path) -> dict[str, Any]:
    """Emit the skeleton into workspace/ and generate code leaf by leaf."""
    run = RunDir(run_dir)
    graph, bases, specs = _load_plan(run)
    cfg.check_paths()
    with run.lock():
        run.ensure()
        (run / "reports/stage_failed.json").unlink(missing_ok=True)
        oracle = _oracle(cfg, run.fresh("trajectories/oracle_build.jsonl"))
        trajectory = TrajectoryLog(run.fresh("trajectories/build.jsonl"))
        with _stage(run, "emit_skeleton"):
            ws = emit_skeleton(graph, specs, run / "workspace", bases, overwrite=True)
        with _stage(run, "generate_repository"):
            harness = Harness(Sandbox(cfg.sandbox), cfg.harness)
            report = generate_repository(graph, specs, ws, oracle, harness, cfg.budget, trajectory)
        with _stage(run, "persist_tests"):
            tests = run / "tests"
            if tests.exists():
                shutil.rmtree(tests)
            tests.mkdir()
            for rel in ws.files(".py"):
                if rel.startswith("tests/"):
                    dest = tests / rel[len("tests/"):]
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(ws.path(rel), dest)
            doc = report.to_dict()
            run.write_json("reports/build_report.json", doc)
        return doc["summary"]


def cmd_localize(cfg: RunConfig, run_dir: str | Path, task: str) -> dict[str, Any]:
    run = RunDir(run_dir)
    graph = deserialize((run / RPG_FILE).read_text(encoding="utf-8")) if (run / RPG_FILE).is_file() else None
    ws_root = run / "workspace"
    if not ws_root.is_dir():
        raise ConfigError(f"no workspace in {run.root}; run `repoplan build` first")
    with run.lock():
        oracle = _oracle(cfg, run.fresh("trajectories/oracle_localize.jsonl"))
        result = run_localization(task, Workspace(ws_root), graph, oracle, cfg.budget.localization_steps)
        doc = {"task": task, **result.to_dict()}
        run.write_json("reports/localization.json", doc)
        return doc


def functionalities(graph: Any) -> list[str]:
    """Generated functionality texts: the last segment of every bound feature path."""
    return [f.rsplit("/", 1)[-1] for leaf in graph.leaves() for f in sorted(graph.nodes[leaf].feature_paths)]


def cmd_eval(cfg: RunConfig, run_dir: str | Path, workspace: str | Path | None = None) -> dict[str, Any]:
    run = RunDir(run_dir)
    if not (run / RPG_FILE).is_file():
        raise ConfigError(f"no plan found in {run.root}; run `repoplan plan` first")
    cfg.check_paths(need_taxonomy=True)
    graph = deserialize((run / RPG_FILE).read_text(encoding="utf-8"))
    taxonomy = CategoryTaxonomy.load(cfg.taxonomy)
    with run.lock():
        oracle = _oracle(cfg, run.fresh("trajectories/oracle_eval.jsonl")) if cfg.judge_categories else None
        assignment = assign_categories(functionalities(graph), taxonomy, HashingEmbedder(cfg.embedding_dim),
                                       oracle, cfg.ood_radius)
        stats = code_stats(workspace or run / "workspace")
        doc = metrics_report(assignment, taxonomy, stats, cfg.ood_radius)
        run.write_json("reports/metrics.json", doc)
        return doc


def cmd_stats(workspace: str | Path, run_dir: str | Path | None = None) -> dict[str, Any]:
    workspace = Path(workspace)
    if not workspace.is_dir():
        raise ConfigError(f"workspace not found: {workspace}")
    doc = code_stats(workspace).to_dict()
    if run_dir is not None:
        RunDir(run_dir).write_json("reports/stats.json", doc)
    return doc


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repoplan", description="Plan and generate a repository from a feature ontology.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--run-dir", default="run", help="directory holding every artifact of the run")
    common.add_argument("--seed", type=int, help="override the configured random seed")
    common.add_argument("--backend", help="override the oracle: 'echo' or a path to a script JSON")
    common.add_argument("--max-iterations", type=int, help="override the number of selection iterations")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", parents=[common], help="build the planning graph and skeleton")
    sub.add_parser("build", parents=[common], help="generate code for every leaf")
    p = sub.add_parser("localize", parents=[common], help="locate interfaces relevant to a task")
    p.add_argument("task", help="task description")
    p = sub.add_parser("eval", parents=[common], help="coverage, novelty and code statistics")
    p.add_argument("--workspace", help="workspace to measure (default: <run-dir>/workspace)")
    p = sub.add_parser("stats", parents=[common], help="file, LOC and token counts")
    p.add_argument("workspace", nargs="?", help="directory to measure (default: <run-dir>/workspace)")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.max_iterations is not None:
        if args.max_iterations < 1:
            raise ConfigError("--max-iterations must be positive")
        cfg = replace(cfg, selection=replace(cfg.selection, iterations=args.max_iterations))
    if args.backend:
        backend = {"kind": "echo"} if args.backend == "echo" else {"kind": "script", "script": str(Path(args.backend).resolve())}
        cfg = replace(cfg, backend=backend)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "stats":
            doc = cmd_stats(args.workspace or Path(args.run_dir) / "workspace", args.run_dir if args.workspace is None else None)
        else:
            cfg = config_from_args(args)
            if args.command == "plan":
                doc = cmd_plan(cfg, args.run_dir)
            elif args.command == "build":
                doc = cmd_build(cfg, args.run_dir)
            elif args.command == "localize":
                doc = cmd_localize(cfg, args.run_dir, args.task)
            else:
                doc = cmd_eval(cfg, args.run_dir, args.workspace)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, RunLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
