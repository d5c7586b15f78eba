import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import act, scripted
from repoplan.oracle import (
    CODE_BLOCKS,
    THINK_ACTION,
    THINK_SOLUTION,
    EchoBackend,
    ExchangeLog,
    Oracle,
    OracleRequest,
    PromptTemplate,
    ProtocolError,
    ScriptedBackend,
    ScriptUnderrunError,
    TemplateError,
    TransportError,
    complete,
    format_blocks,
    load_templates,
    make_backend,
    parse_blocks,
    render_prompt,
    split_sections,
)
from repoplan.oracle.parsing import PAYLOAD_SECTIONS

# -- templates -------------------------------------------------------------------


def test_zero_slot_template_renders_verbatim():
    t = PromptTemplate("plain", "No slots here.\n")
    assert render_prompt(t, {}) == "No slots here.\n"


def test_list_slot_uses_template_joiner():
    t = load_templates()["data_flow"]
    text = render_prompt(t, {"repo_overview": "r", "trees_names": ["IO", "Stats"], "graph_summary": "g", "feedback": ""})
    assert "Subtrees: IO, Stats" in text
    assert "{trees_names}" not in text


def test_unbound_slot_is_named():
    with pytest.raises(TemplateError, match="feedback"):
        render_prompt(load_templates()["data_flow"], {"repo_overview": "", "trees_names": [], "graph_summary": ""})


def test_bound_braces_not_reexpanded():
    t = PromptTemplate("t", "{a} {b}")
    assert render_prompt(t, {"a": "{b}", "b": "x"}) == "{b} x"


def test_every_shipped_template_loads():
    templates = load_templates()
    assert len(templates) == 21
    for tid, t in templates.items():
        assert t.id == tid and t.text.strip()


def test_unknown_schema_rejected():
    with pytest.raises(ValueError):
        PromptTemplate("t", "x", schema="freeform")


# -- parsing ---------------------------------------------------------------------


def test_think_action_path_list():
    raw = "<think>pick these</think>\n<action>\n[\"a/b\", \"c/d\"]\n</action>"
    parsed = parse_blocks(raw, THINK_ACTION)
    assert parsed.think == "pick these"
    assert parsed.payload == ["a/b", "c/d"]


def test_fenced_json_payload_accepted():
    raw = '<action>\n```json\n{"k": 1}\n```\n</action>'
    assert parse_blocks(raw, THINK_ACTION).payload == {"k": 1}


def test_missing_action_block():
    raw = "<think>hmm</think>"
    with pytest.raises(ProtocolError) as err:
        parse_blocks(raw, THINK_ACTION)
    assert err.value.offset == len(raw.encode())


def test_duplicate_block_offset_points_at_second():
    raw = "<action>[]</action><action>[]</action>"
    with pytest.raises(ProtocolError) as err:
        parse_blocks(raw, THINK_ACTION)
    assert err.value.offset == raw.index("<action>", 1)


def test_wrong_tag_reported():
    with pytest.raises(ProtocolError, match="expected <solution>"):
        parse_blocks("<action>[]</action>", THINK_SOLUTION)


def test_malformed_json_offset_is_in_bytes():
    raw = "<think>é</think><action>{\"a\": }</action>"
    with pytest.raises(ProtocolError) as err:
        parse_blocks(raw, THINK_ACTION)
    bad = raw.index("}")
    assert err.value.offset == len(raw[:bad].encode("utf-8"))


def test_unterminated_block():
    with pytest.raises(ProtocolError, match="unterminated"):
        parse_blocks("<action>[1, 2]", THINK_ACTION)


BASE_CLASS_REPLY = """<think>two shared bases</think>
<solution>
## General
### src/common/base.py
```python
class BaseComponent:
    def fit(self, data):
        raise NotImplementedError
```
## Models
### src/models/estimator.py
```python
from src.common.base import BaseComponent


class EstimatorComponent(BaseComponent):
    def predict(self, x):
        raise NotImplementedError
```
</solution>
"""


def test_base_class_reply_splits_into_two_sections():
    parsed = parse_blocks(BASE_CLASS_REPLY, THINK_SOLUTION, PAYLOAD_SECTIONS)
    pairs = [(s.subtree, s.path) for s in parsed.payload]
    assert pairs == [("General", "src/common/base.py"), ("Models", "src/models/estimator.py")]
    assert parsed.payload[0].code.startswith("class BaseComponent:")
    assert "```" not in parsed.payload[1].code
    assert parsed.payload[1].code.endswith("raise NotImplementedError\n")


def test_headers_inside_fences_are_code():
    text = "## S\n### a.py\n```python\n### not a header\nx = 1\n```\n"
    secs = split_sections(text)
    assert len(secs) == 1 and "### not a header" in secs[0].code


def test_code_blocks_schema():
    raw = "text\n```python\nx = 1\n```\n"
    assert parse_blocks(raw, CODE_BLOCKS, "code").payload == "x = 1\n"
    with pytest.raises(ProtocolError):
        parse_blocks("no code", CODE_BLOCKS, "code")


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=10),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=12,
)


@settings(max_examples=200, derandomize=True)
@given(json_values.filter(lambda v: not isinstance(v, str)), st.sampled_from([THINK_ACTION, THINK_SOLUTION]), st.text(max_size=30).filter(lambda s: "<" not in s))
def test_format_then_parse_is_lossless(payload, schema, think):
    parsed = parse_blocks(format_blocks(think, payload, schema), schema)
    assert parsed.payload == payload
    assert parsed.think == think.strip()


def test_string_payload_is_raw_body():
    raw = format_blocks("", "line one\nline two", THINK_SOLUTION)
    assert parse_blocks(raw, THINK_SOLUTION, "text").payload == "line one\nline two"


# -- backends and the oracle -----------------------------------------------------


def req(tid, prompt="", i=0):
    return OracleRequest(tid, prompt, call_index=i)


def test_scripted_replays_in_order_then_underruns():
    b = ScriptedBackend({"t": ["one", "two"]})
    assert [b(req("t")), b(req("t"))] == ["one", "two"]
    with pytest.raises(ScriptUnderrunError) as err:
        b(req("t"))
    assert (err.value.template_id, err.value.index) == ("t", 2)


def test_guarded_entries_match_by_prompt():
    b = ScriptedBackend({"t": [{"when": "beta", "response": "B"}, {"when": "alpha", "response": "A"}, "any"]})
    assert b(req("t", "alpha task")) == "A"
    assert b(req("t", "gamma task")) == "any"
    assert b.remaining() == {"t": 1}
    assert b(req("t", "beta")) == "B"
    assert b.remaining() == {}


def test_malformed_script_entry_rejected():
    with pytest.raises(ValueError):
        ScriptedBackend({"t": [42]})


def test_script_directory_layout(tmp_path):
    (tmp_path / "t").mkdir()
    (tmp_path / "t" / "001.txt").write_text("first")
    (tmp_path / "t" / "002.txt").write_text("second")
    b = make_backend({"kind": "script", "script": "."}, tmp_path)
    assert [b(req("t")), b(req("t"))] == ["first", "second"]


def test_echo_backend_embeds_prompt():
    out = EchoBackend()(OracleRequest("x", "hello there", schema=THINK_ACTION))
    assert parse_blocks(out, THINK_ACTION).payload == {"echo": "hello there"}


def test_complete_retries_transport_errors():
    calls, sleeps = [], []

    def flaky(r):
        calls.append(r)
        if len(calls) < 3:
            raise TransportError("blip")
        return "ok"

    assert complete(flaky, req("t"), retries=3, backoff=0.5, sleep=sleeps.append) == "ok"
    assert sleeps == [0.5, 1.0]


def test_complete_gives_up():
    def down(r):
        raise TransportError("down")

    with pytest.raises(TransportError):
        complete(down, req("t"), retries=2, backoff=0.0, sleep=lambda s: None)


def test_every_call_logged_once(tmp_path):
    log = ExchangeLog(tmp_path / "x.jsonl")
    oracle = Oracle(ScriptedBackend({"category_judge": [act({"reassign": {}}), "garbage"]}), log=log, backoff=0)
    ex = oracle.ask("category_judge", categories="a", assignments="b")
    assert ex.ok and ex.payload == {"reassign": {}} and ex.call_index == 0
    with pytest.raises(ProtocolError) as err:
        oracle.ask("category_judge", categories="a", assignments="b")
    assert err.value.template_id == "category_judge"
    lines = [json.loads(x) for x in (tmp_path / "x.jsonl").read_text().splitlines()]
    assert [(r["seq"], r["call_index"], r["violation"] is None) for r in lines] == [(0, 0, True), (1, 1, False)]
    assert log.count("category_judge") == 2


def test_concurrent_calls_logged_exactly_once():
    n = 40
    oracle = scripted({"category_judge": [act({"reassign": {}})] * n})
    threads = [threading.Thread(target=oracle.ask, args=("category_judge",),
                                kwargs={"categories": "", "assignments": ""}) for _ in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(r["seq"] for r in oracle.log.records) == list(range(n))
    assert sorted(r["call_index"] for r in oracle.log.records) == list(range(n))


def test_unknown_backend_kind():
    with pytest.raises(ValueError):
        make_backend({"kind": "carrier-pigeon"})
