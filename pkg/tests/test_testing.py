import itertools
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import policy_oracle, tree_graph
from repoplan.edits import make_patch
from repoplan.rpg import PHASE_IMPLEMENTATION
from repoplan.testing import (
    ENVIRONMENT,
    ERROR_TYPES,
    FAILED,
    IMPLEMENTATION,
    INTEGRATION,
    PASSED,
    TEST_CODE,
    UNIT,
    UNRESOLVED,
    HarnessConfig,
    Sandbox,
    SandboxLimits,
    TaskContext,
    TestNode,
    TestRegistry,
    aggregate_votes,
    find_dependency_patches,
    integration_clusters,
    judge_failure,
    normalize_output,
    patch_unit,
    run_testing_pipeline,
    test_patches as run_patch_tests,
    unit_digest,
)
from repoplan.workspace import Workspace

ADD = "def add(a, b):\n    return a + b\n"
GOOD = "from src.calc.ops import add\n\n\ndef test_add():\n    assert add(1, 1) == 2\n"
BAD = "from src.calc.ops import add\n\n\ndef test_add():\n    assert add(1, 1) == 3\n"


def fenced(code):
    return f"```python\n{code}```"


@pytest.fixture
def ws(tmp_path):
    w = Workspace(tmp_path)
    w.write("src/calc/ops.py", ADD)
    return w


@pytest.fixture(scope="module")
def sandbox():
    return Sandbox(SandboxLimits(wall_seconds=30))


# -- sandbox -------------------------------------------------------------------


def test_sandbox_pass(ws, sandbox):
    res = sandbox.run(ws, "tests/test_ops.py", {"tests/test_ops.py": GOOD})
    assert res.passed and res.status == 0
    assert not ws.exists("tests/test_ops.py")


def test_sandbox_fail_reports_assertion(ws, sandbox):
    res = sandbox.run(ws, "tests/test_ops.py", {"tests/test_ops.py": BAD})
    assert not res.passed and res.status == 1
    assert "assert 2 == 3" in res.output


def test_sandbox_timeout(ws):
    slow = "import time\n\n\ndef test_slow():\n    time.sleep(30)\n"
    res = Sandbox(SandboxLimits(wall_seconds=1.5)).run(ws, "tests/test_slow.py", {"tests/test_slow.py": slow})
    assert res.timed_out and not res.passed
    assert "wall-time limit" in res.stderr


def test_sandbox_blocks_network(ws, sandbox):
    net = ("import socket\nimport pytest\n\n\ndef test_net():\n    with pytest.raises(OSError, match='disabled'):\n"
           "        socket.create_connection(('127.0.0.1', 9))\n")
    assert sandbox.run(ws, "tests/test_net.py", {"tests/test_net.py": net}).passed


def test_sandbox_leaves_workspace_untouched(ws, sandbox):
    before = ws.digests()
    writer = "from pathlib import Path\n\n\ndef test_w():\n    Path('src/calc/ops.py').write_text('x')\n"
    sandbox.run(ws, "tests/test_w.py", {"tests/test_w.py": writer})
    assert ws.digests() == before


def test_normalize_output_masks_timing_and_paths():
    text = "1 passed in 0.42s at /tmp/repoplan-sandbox-abc123/ws/tests/t.py"
    assert normalize_output(text) == "1 passed in <t>s at <sandbox>/tests/t.py"


# -- judging -------------------------------------------------------------------


def test_aggregate_votes_examples():
    assert aggregate_votes([TEST_CODE, TEST_CODE, TEST_CODE, IMPLEMENTATION, None], 5) == TEST_CODE
    assert aggregate_votes([TEST_CODE, TEST_CODE, ENVIRONMENT, IMPLEMENTATION, None], 5) == IMPLEMENTATION
    assert aggregate_votes([None] * 5, 5) == IMPLEMENTATION


@settings(max_examples=300, derandomize=True)
@given(st.lists(st.sampled_from([*ERROR_TYPES, None, "bogus"]), min_size=5, max_size=5))
def test_aggregate_votes_matches_count(votes):
    counts = Counter(votes)
    strict = [k for k in ERROR_TYPES if counts[k] >= 3]
    assert aggregate_votes(votes, 5) == (strict[0] if strict else IMPLEMENTATION)


def test_judge_counts_malformed_as_abstention():
    replies = itertools.cycle([{"error_type": "test_code", "review": "typo"}, {"nope": 1}, {"error_type": "weird"}])
    v = judge_failure("c", "t", "o", "b", policy_oracle(lambda tid, b: next(replies)), rounds=5)
    assert v.votes == ("test_code", None, None, "test_code", None)
    assert v.error_type == IMPLEMENTATION
    with pytest.raises(ValueError):
        judge_failure("c", "t", "o", "b", policy_oracle(lambda tid, b: {}), rounds=4)


def test_harness_config_validation():
    with pytest.raises(ValueError):
        HarnessConfig(judge_rounds=2)
    with pytest.raises(ValueError):
        TaskContext("  ")


def test_node_arity():
    with pytest.raises(ValueError):
        TestNode(UNIT, ("a:f", "b:g"), (), "t.py", "")
    with pytest.raises(ValueError):
        TestNode(INTEGRATION, ("a:f",), (), "t.py", "")


# -- pipeline ------------------------------------------------------------------


def harness_policy(first=GOOD, fixed=GOOD, vote=TEST_CODE):
    def policy(tid, b):
        if tid == "test_plan":
            return {"branches": ["adds two ints", "adds negatives"]}
        if tid in ("test_generate", "integration_test_generate"):
            return fenced(first)
        if tid == "judge_failure":
            return {"error_type": vote, "review": "expected value is wrong"}
        if tid == "test_fix":
            return fenced(fixed)
        raise AssertionError(tid)

    return policy


def test_pipeline_passes_first_try(ws, sandbox):
    node = run_testing_pipeline(ws, ("src/calc/ops.py:add",), ADD, None, sandbox, policy_oracle(harness_policy()))
    assert node.status == PASSED and node.executions == 1 and node.remediations == 0
    assert node.test_file == "tests/src/calc/test_ops__add.py"
    assert node.branches == ["adds two ints", "adds negatives"]


def test_repair_succeeds_on_second_attempt(ws, sandbox):
    oracle = policy_oracle(harness_policy(first=BAD))
    node = run_testing_pipeline(ws, ("src/calc/ops.py:add",), ADD, None, sandbox, oracle)
    assert node.status == PASSED
    assert node.executions == 2 and node.remediations == 1 and node.judge_rounds == [5]
    tids = [r.template_id for r in oracle.backend.requests]
    assert tids == ["test_plan", "test_generate"] + ["judge_failure"] * 5 + ["test_fix"]


def test_implementation_verdict_stops_without_repair(ws, sandbox):
    node = run_testing_pipeline(ws, ("src/calc/ops.py:add",), ADD, None, sandbox,
                                policy_oracle(harness_policy(first=BAD, vote=IMPLEMENTATION)))
    assert node.status == FAILED and node.verdict.error_type == IMPLEMENTATION and node.executions == 1


def test_remediation_cap(ws, sandbox):
    cfg = HarnessConfig(judge_rounds=1, remediation_cap=2)
    node = run_testing_pipeline(ws, ("src/calc/ops.py:add",), ADD, None, sandbox,
                                policy_oracle(harness_policy(first=BAD, fixed=BAD)), cfg)
    assert node.status == UNRESOLVED and node.remediations == 2 and node.executions == 3


# -- patch-oriented testing ----------------------------------------------------


def test_patch_unit_prefers_touched_definition(ws):
    ws.write("src/calc/ops.py", ADD + "\n\ndef sub(a, b):\n    return a - b\n")
    p = make_patch("src/calc/ops.py", ADD, ws.read("src/calc/ops.py"))
    assert patch_unit(ws, p) == "src/calc/ops.py:sub"
    assert patch_unit(ws, p, ["src/calc/ops.py:add"]) == "src/calc/ops.py:add"


def test_unit_digest_ignores_comments(ws):
    d1 = unit_digest(ws, "src/calc/ops.py:add")
    ws.write("src/calc/ops.py", "def add(a, b):\n    # sum\n    return a + b\n")
    assert unit_digest(ws, "src/calc/ops.py:add") == d1
    ws.write("src/calc/ops.py", "def add(a, b):\n    return b + a\n")
    assert unit_digest(ws, "src/calc/ops.py:add") != d1


def test_dependency_patches_both_directions(ws):
    ws.write("src/calc/use.py", "from src.calc.ops import add\n\n\ndef twice(x):\n    return add(x, x)\n")
    ws.write("src/calc/other.py", "X = 1\n")
    reg = TestRegistry()
    reg.patches = {f: make_patch(f, "", ws.read(f)) for f in ("src/calc/ops.py", "src/calc/use.py", "src/calc/other.py")}
    fwd = find_dependency_patches(ws, [reg.patches["src/calc/use.py"]], reg)
    back = find_dependency_patches(ws, [reg.patches["src/calc/ops.py"]], reg)
    assert [p.file for p in fwd] == ["src/calc/ops.py"]
    assert [p.file for p in back] == ["src/calc/use.py"]


def flow_graph():
    return tree_graph({"Calc": {"ops": ["add"], "use": ["twice"]}, "Report": {"fmt": ["show"]}},
                      [("Calc", "Report")], phase=PHASE_IMPLEMENTATION)


def test_integration_clusters():
    g = flow_graph()
    units = {"src/calc/ops.py": "src/calc/ops.py:add", "src/calc/use.py": "src/calc/use.py:twice"}
    assert integration_clusters(g, units, {"src/calc/use.py"}) == {
        ("root", "Calc"): ["src/calc/ops.py:add", "src/calc/use.py:twice"]}
    assert integration_clusters(g, units, set()) == {}
    units["src/report/fmt.py"] = "src/report/fmt.py:show"
    clusters = integration_clusters(g, units, {"src/report/fmt.py"})
    assert list(clusters) == [("flow", "Calc", "Report")]
    assert len(clusters[("flow", "Calc", "Report")]) == 3


def test_two_units_and_one_integration(ws, sandbox):
    use = "from src.calc.ops import add\n\n\ndef twice(x):\n    return add(x, x)\n"
    ws.write("src/calc/use.py", use)
    patches = [make_patch("src/calc/ops.py", "", ADD), make_patch("src/calc/use.py", "", use)]
    integ = "from src.calc.use import twice\n\n\ndef test_twice():\n    assert twice(2) == 4\n"

    def policy(tid, b):
        if tid == "integration_test_generate":
            return fenced(integ)
        if tid == "test_generate" and "twice" in b["unit"]:
            return fenced("from src.calc.use import twice\n\n\ndef test_t():\n    assert twice(1) == 2\n")
        return harness_policy()(tid, b)

    reg = TestRegistry()
    oracle = policy_oracle(policy)
    out = run_patch_tests(patches, ws, TaskContext("calc"), reg, oracle, sandbox, flow_graph())
    assert [n.kind for n in out.unit_results] == [UNIT, UNIT]
    assert [n.kind for n in out.integration_results] == [INTEGRATION]
    assert out.passed and len(reg.units) == 2 and len(reg.integrations) == 1

    calls = len(oracle.backend.requests)
    again = run_patch_tests([patches[1]], ws, TaskContext("calc"), reg, oracle, sandbox, flow_graph())
    assert again.passed and len(oracle.backend.requests) == calls
    assert reg.units["src/calc/use.py:twice"].executions == 2
