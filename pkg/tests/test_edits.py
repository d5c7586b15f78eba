import ast
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edit_cases import CASES, IMPORT_CASES, LOCAL, METHOD_CASES, import_violations, method_violations
from repoplan.edits import (
    FUNCTION,
    IMPORTS,
    METHOD_OF_CLASS,
    TERMINATE,
    WHOLE_CLASS,
    EditCommand,
    EditError,
    PatchError,
    apply_edit,
    edit_source,
    make_patch,
    parse_edit_commands,
)
from repoplan.workspace import Workspace


@pytest.mark.parametrize("case", METHOD_CASES, ids=lambda c: c.name)
def test_method_edit_keeps_siblings(case):
    after = edit_source(case.source, case.cmd, LOCAL)
    ast.parse(after)
    assert method_violations(case.source, after, case.cmd) == []
    for text in case.must_contain:
        assert text in after


@pytest.mark.parametrize("case", IMPORT_CASES, ids=lambda c: c.name)
def test_imports_edit_keeps_existing_imports(case):
    after = edit_source(case.source, case.cmd, LOCAL)
    ast.parse(after)
    assert import_violations(case.source, after, case.cmd.body) == []
    for text in case.must_contain:
        assert text in after


def test_twenty_cases():
    assert len(CASES) == 20
    assert len({c.name for c in CASES}) == 20


def test_import_order_on_insert():
    src = "import os\n\nfrom src.core import base\n"
    after = edit_source(src, EditCommand(IMPORTS, "src/m.py", body="import numpy as np\n"), LOCAL)
    assert after.splitlines()[:3] == ["import os", "import numpy as np", ""]


def test_future_import_stays_first():
    src = '"""Mod."""\nfrom __future__ import annotations\n\nimport os\n'
    after = edit_source(src, EditCommand(IMPORTS, "src/m.py", body="import re\n"), LOCAL)
    assert after.splitlines()[:2] == ['"""Mod."""', "from __future__ import annotations"]


def test_two_methods_stay_two():
    src = METHOD_CASES[0].source
    after = edit_source(src, METHOD_CASES[0].cmd, LOCAL)
    cls = ast.parse(after).body[0]
    assert [m.name for m in cls.body] == ["a", "b"]


def test_function_edit_on_absent_name_appends_at_end():
    src = "import os\n\n\ndef first():\n    return 1\n"
    body = "def second():\n    return 2\n"
    after = edit_source(src, EditCommand(FUNCTION, "src/m.py", function_name="second", body=body), LOCAL)
    assert after == src + "\n\n" + body
    names = [n.name for n in ast.parse(after).body if isinstance(n, ast.FunctionDef)]
    assert names == ["first", "second"]


def test_function_edit_replaces_in_place():
    src = "def a():\n    return 1\n\n\ndef b():\n    return 2\n"
    after = edit_source(src, EditCommand(FUNCTION, "src/m.py", function_name="a", body="def a():\n    return 9\n"))
    assert after == "def a():\n    return 9\n\n\ndef b():\n    return 2\n"


def test_function_edit_with_leading_imports_merges_them():
    src = "import os\n\n\ndef a():\n    return 1\n"
    body = "import json\n\n\ndef a():\n    return json.dumps(os.sep)\n"
    after = edit_source(src, EditCommand(FUNCTION, "src/m.py", function_name="a", body=body))
    assert after.startswith("import os\nimport json\n")
    assert after.count("def a") == 1


def test_whole_class_replace_and_append():
    src = "class A:\n    x = 1\n\n\nclass B:\n    y = 2\n"
    after = edit_source(src, EditCommand(WHOLE_CLASS, "src/m.py", class_name="A", body="class A:\n    x = 5\n"))
    assert after == "class A:\n    x = 5\n\n\nclass B:\n    y = 2\n"
    after = edit_source(src, EditCommand(WHOLE_CLASS, "src/m.py", class_name="Z", body="class Z:\n    pass\n"))
    assert after.endswith("class B:\n    y = 2\n\n\nclass Z:\n    pass\n")


@pytest.mark.parametrize(
    "body",
    [
        "def a(self):\n    return 1\n",
        "class C:\n    def a(self):\n        return 1\n\n    def b(self):\n        return 2\n",
        "class D:\n    def a(self):\n        return 1\n",
    ],
)
def test_method_edit_contract_violations(body):
    src = "class C:\n    def a(self):\n        return 0\n"
    with pytest.raises(EditError, match="class block"):
        edit_source(src, EditCommand(METHOD_OF_CLASS, "src/m.py", class_name="C", method_name="a", body=body))


def test_method_edit_on_missing_class():
    with pytest.raises(EditError, match="not found"):
        edit_source("x = 1\n", EditCommand(METHOD_OF_CLASS, "src/m.py", class_name="C", method_name="a",
                                           body="class C:\n    def a(self):\n        pass\n"))


def test_imports_edit_rejects_code_and_disorder():
    with pytest.raises(EditError, match="only contain"):
        edit_source("", EditCommand(IMPORTS, "src/m.py", body="def f():\n    pass\n"), LOCAL)
    with pytest.raises(EditError, match="ordered"):
        edit_source("", EditCommand(IMPORTS, "src/m.py", body="from src.a import b\nimport os\n"), LOCAL)


def test_unparsable_target_replaced_whole():
    after = edit_source("def broken(:\n", EditCommand(FUNCTION, "src/m.py", function_name="f", body="def f():\n    pass\n"))
    assert after == "def f():\n    pass\n"


def test_terminate_is_noop():
    assert edit_source("x = 1\n", EditCommand(TERMINATE)) == "x = 1\n"


@settings(max_examples=100, derandomize=True)
@given(st.sampled_from(["f", "g", "run"]), st.integers(0, 99), st.booleans())
def test_definition_edits_are_idempotent(name, value, as_class):
    src = "import os\n\n\ndef f():\n    return 0\n\n\nclass Run:\n    pass\n"
    if as_class:
        cmd = EditCommand(WHOLE_CLASS, "src/m.py", class_name=name.title(), body=f"class {name.title()}:\n    v = {value}\n")
    else:
        cmd = EditCommand(FUNCTION, "src/m.py", function_name=name, body=f"def {name}():\n    return {value}\n")
    once = edit_source(src, cmd)
    assert edit_source(once, cmd) == once


# -- patches ---------------------------------------------------------------------


@settings(max_examples=150, derandomize=True)
@given(st.lists(st.sampled_from(["a\n", "b\n", "c\n", "\n", "x = 1\n"]), max_size=12),
       st.lists(st.sampled_from(["a\n", "b\n", "d\n", "\n", "y = 2\n"]), max_size=12))
def test_patch_reproduces_after_text(before, after):
    b, a = "".join(before), "".join(after)
    p = make_patch("src/m.py", b, a)
    assert p.apply_to(b) == a


def test_patch_rejects_wrong_base():
    p = make_patch("f.py", "a\n", "b\n")
    with pytest.raises(PatchError):
        p.apply_to("c\n")


def test_apply_edit_writes_file_and_patch(tmp_path):
    ws = Workspace(tmp_path)
    ws.write("src/m.py", "def f():\n    return 0\n")
    p = apply_edit(ws, EditCommand(FUNCTION, "src/m.py", function_name="f", body="def f():\n    return 1\n"), "leaf")
    assert ws.read("src/m.py") == "def f():\n    return 1\n"
    assert p.leaf == "leaf" and p.apply_to("def f():\n    return 0\n") == ws.read("src/m.py")


def test_apply_edit_creates_missing_file(tmp_path):
    ws = Workspace(tmp_path)
    apply_edit(ws, EditCommand(FUNCTION, "src/new.py", function_name="f", body="def f():\n    pass\n"))
    assert ws.read("src/new.py") == "def f():\n    pass\n"


def test_apply_edit_refuses_escape_and_non_python(tmp_path):
    ws = Workspace(tmp_path)
    with pytest.raises(EditError):
        apply_edit(ws, EditCommand(FUNCTION, "../evil.py", function_name="f", body="def f():\n    pass\n"))
    with pytest.raises(EditError):
        apply_edit(ws, EditCommand(FUNCTION, "notes.txt", function_name="f", body="def f():\n    pass\n"))


# -- parsing oracle replies ------------------------------------------------------


def test_parse_two_edits_and_terminate():
    text = (
        "edit_function_in_file('src/a.py', 'f')\n```python\ndef f():\n    return 1\n```\n"
        "edit_imports_and_assignments_in_file(\"src/a.py\")\n```python\nimport os\n```\n"
        "Terminate()\n"
    )
    cmds = parse_edit_commands(text)
    assert [c.kind for c in cmds] == [FUNCTION, IMPORTS, TERMINATE]
    assert cmds[0].body == "def f():\n    return 1\n"


@pytest.mark.parametrize(
    "text, match",
    [
        ("edit_function_in_file('a.py')\n```python\npass\n```\n", "expects 2"),
        ("edit_everything('a.py')\n", "unknown edit tool"),
        ("edit_function_in_file('a.py', 'f')\nno fence\n", "fenced"),
        ("edit_function_in_file('a.py', 'f')\n```python\ndef f(): pass\n", "unterminated"),
    ],
)
def test_parse_errors(text, match):
    with pytest.raises(EditError, match=match):
        parse_edit_commands(text)


def test_random_session_patches_replay(tmp_path):
    rng = random.Random(3)
    ws = Workspace(tmp_path)
    ws.write("src/m.py", "import os\n\n\nclass C:\n    def a(self):\n        return 0\n")
    history = []
    for i in range(10):
        kind = rng.choice([FUNCTION, METHOD_OF_CLASS, IMPORTS])
        if kind == FUNCTION:
            cmd = EditCommand(kind, "src/m.py", function_name=f"f{i % 3}", body=f"def f{i % 3}():\n    return {i}\n")
        elif kind == METHOD_OF_CLASS:
            cmd = EditCommand(kind, "src/m.py", class_name="C", method_name=rng.choice("ab"),
                              body=f"class C:\n    def {rng.choice('ab')}(self):\n        return {i}\n")
            cmd = EditCommand(kind, "src/m.py", class_name="C", method_name=cmd.body.split("def ")[1][0], body=cmd.body)
        else:
            cmd = EditCommand(kind, "src/m.py", body=rng.choice(["import json\n", "import sys\n", "LIMIT = 3\n"]))
        before = ws.read("src/m.py")
        history.append((before, apply_edit(ws, cmd)))
    for before, patch in history:
        assert patch.apply_to(before)
