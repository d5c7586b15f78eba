"""Regenerate the toy run assets under src/repoplan/data/toy/.

The scripted oracle is keyed by template id; guarded entries
(``{"when": ..., "response": ...}``) pin a reply to the prompt that mentions
a particular leaf, so the script does not depend on fragile call counts.

Designed outcomes:
  * parse csv rows: first unit test is wrong (test_code verdict 4 of 5), repaired once.
  * compute column variance: first implementation is buggy (implementation
    verdict), fixed in debug iteration 2.
  * render markdown report: exercises one integration test with format summary table.
  * the first data-flow proposal is cyclic and is rejected, the retry is accepted.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "repoplan" / "data" / "toy"

F_PARSE = "data processing/io/csv/parse csv rows"
F_COERCE = "data processing/cleaning/coerce numeric columns"
F_MEAN = "statistics/descriptive/compute column mean"
F_VAR = "statistics/descriptive/compute column variance"
F_TABLE = "reporting/tables/format summary table"
F_REPORT = "reporting/documents/render markdown report"
SELECTED = [F_PARSE, F_COERCE, F_MEAN, F_VAR, F_TABLE, F_REPORT]

ONTOLOGY = [
    (F_PARSE, 40), ("data processing/io/csv/write csv rows", 25), ("data processing/io/json/load json records", 30),
    ("data processing/io/json/dump json records", 12), (F_COERCE, 18), ("data processing/cleaning/drop missing values", 22),
    ("data processing/cleaning/deduplicate rows", 9), ("data processing/cleaning/normalize whitespace", 7),
    (F_MEAN, 50), (F_VAR, 35), ("statistics/descriptive/compute median", 28), ("statistics/descriptive/compute quantiles", 14),
    ("statistics/inference/two sample t test", 6), ("statistics/inference/confidence interval", 8),
    ("statistics/correlation/pearson correlation", 11), ("statistics/correlation/spearman correlation", 4),
    (F_TABLE, 16), ("reporting/tables/align columns", 5), (F_REPORT, 13), ("reporting/documents/render html report", 10),
    ("visualization/plots/histogram", 21), ("visualization/plots/scatter plot", 17), ("visualization/themes/dark theme", 3),
    ("web/http/fetch url", 26), ("web/http/retry requests", 8), ("web/auth/oauth token refresh", 5),
    ("machine learning/regression/linear regression", 33), ("machine learning/clustering/k means", 24),
    ("machine learning/evaluation/accuracy score", 19), ("database/sql/query builder", 15),
]

TAXONOMY = {
    "Data IO": {"CSV": ["parse csv rows", "write csv rows"], "Cleaning": ["coerce numeric columns"]},
    "Statistics": {"Descriptive": ["compute column mean", "compute column variance", "compute median"]},
    "Reporting": ["format summary table", "render html report"],
}

CONFIG = {
    "repo": {
        "name": "tabstat",
        "description": "A small library that reads CSV text, computes per-column statistics and renders a markdown report.",
        "category": "data analysis",
        "purpose": "summarize numeric columns of a CSV file",
        "scope": "pure Python, no third-party dependencies",
    },
    "ontology": "ontology.tsv",
    "backend": {"kind": "script", "script": "script.json"},
    "budgets": {
        "selection_iterations": 2,
        "debug_iterations": 8,
        "localization_steps": 20,
        "judge_rounds": 5,
        "remediations": 20,
    },
    "selection": {"top_k": 40, "batch_size": 20},
    "sampler": {"sample_size": 4, "temperature": 1.0, "overlap_threshold": 0.5, "max_retries": 5},
    "sandbox": {"wall_seconds": 60},
    "metrics": {"taxonomy": "taxonomy.json", "ood_radius": 0.6},
    "seed": 7,
}


def action(payload, think: str = "ok") -> str:
    return f"<think>\n{think}\n</think>\n<action>\n{json.dumps(payload, indent=2)}\n</action>\n"


def solution(body, think: str = "ok") -> str:
    text = body if isinstance(body, str) else json.dumps(body, indent=2)
    return f"<think>\n{think}\n</think>\n<solution>\n{text}\n</solution>\n"


def code(src: str) -> str:
    return f"```python\n{src.strip()}\n```\n"


def when(guard: str, response: str) -> dict:
    return {"when": guard, "response": response}


def task_guard(feature: str) -> str:
    return f"Implement the feature(s) {feature} "


# -- planning ------------------------------------------------------------------

EXTRACT = {
    "subgraphs": {
        "Data Loading": {"CSV Reader": [F_PARSE, F_COERCE]},
        "Statistics": {"Descriptive Moments": [F_MEAN, F_VAR]},
        "Reporting": {"Summary Table": [F_TABLE], "Markdown Report": [F_REPORT]},
    }
}

BASES = """## General
### src/common/records.py
```python
from dataclasses import dataclass


@dataclass
class ColumnSummary:
    \"\"\"Per-column statistics passed from Statistics to Reporting; both subtrees share it.\"\"\"

    name: str
    mean: float
    variance: float
```"""

DOC_PARSE = '''"""Parse CSV text with a header row into row dictionaries.

    Args:
        text: CSV content whose first non-blank line names the columns.

    Returns:
        One dict per data row mapping column name to the raw cell string.

    Raises:
        ValueError: if a row has a different number of cells than the header.
    """'''
DOC_COERCE = '''"""Convert the named columns of parsed rows to floats.

    Args:
        rows: Rows as returned by the CSV parser.
        columns: Column names to convert.

    Returns:
        New row dicts with the named columns converted to float.

    Raises:
        ValueError: if a named cell is not numeric.
    """'''
DOC_MEAN = '''"""Arithmetic mean of a column.

    Args:
        values: Numeric column values.

    Returns:
        The mean as a float.

    Raises:
        ValueError: if ``values`` is empty.
    """'''
DOC_VAR = '''"""Population variance of a column.

    Args:
        values: Numeric column values.

    Returns:
        The mean squared deviation from the mean.

    Raises:
        ValueError: if ``values`` is empty.
    """'''
DOC_TABLE = '''"""Render statistics as a two-column markdown table sorted by name.

    Args:
        stats: Statistic name to value.

    Returns:
        Table text; values use three decimals.
    """'''
DOC_REPORT = '''"""Render a markdown report: a level-one title followed by the summary table.

    Args:
        title: Report title.
        stats: Statistic name to value.

    Returns:
        Markdown text ending with a newline.
    """'''


def design(features_and_code: list[tuple[list[str], str]]) -> str:
    parts = []
    for feats, src in features_and_code:
        parts.append(f"design_itfs_for_feature(features={json.dumps(feats)}):\n{code(src)}")
    return solution("\n".join(parts))


DESIGN_READER = design([
    ([F_PARSE], f"def parse_csv_rows(text: str) -> list[dict[str, str]]:\n    {DOC_PARSE}\n    pass"),
    ([F_COERCE], f"def coerce_numeric_columns(rows: list[dict[str, str]], columns: list[str]) -> list[dict]:\n    {DOC_COERCE}\n    pass"),
])
DESIGN_MOMENTS = design([
    ([F_MEAN], f"def compute_column_mean(values: list[float]) -> float:\n    {DOC_MEAN}\n    pass"),
    ([F_VAR], f"def compute_column_variance(values: list[float]) -> float:\n    {DOC_VAR}\n    pass"),
])
DESIGN_TABLE = design([
    ([F_TABLE], f"def format_summary_table(stats: dict[str, float]) -> str:\n    {DOC_TABLE}\n    pass"),
])
DESIGN_MARKDOWN = design([
    ([F_REPORT], "from src.reporting.table import format_summary_table\n\n\n"
                 f"def render_markdown_report(title: str, stats: dict[str, float]) -> str:\n    {DOC_REPORT}\n    pass"),
])


# -- generation ------------------------------------------------------------------

IMPL_PARSE = f'''
def parse_csv_rows(text: str) -> list[dict[str, str]]:
    {DOC_PARSE}
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        return []
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    out = []
    for number, row in enumerate(body, 2):
        if len(row) != len(header):
            raise ValueError(f"row {{number}} has {{len(row)}} cells, expected {{len(header)}}")
        out.append(dict(zip(header, row)))
    return out
'''
IMPL_COERCE = f'''
def coerce_numeric_columns(rows: list[dict[str, str]], columns: list[str]) -> list[dict]:
    {DOC_COERCE}
    out = []
    for row in rows:
        new = dict(row)
        for col in columns:
            try:
                new[col] = float(row[col])
            except ValueError:
                raise ValueError(f"column {{col!r}}: {{row[col]!r}} is not numeric") from None
        out.append(new)
    return out
'''
IMPL_MEAN = f'''
def compute_column_mean(values: list[float]) -> float:
    {DOC_MEAN}
    if not values:
        raise ValueError("mean of an empty column")
    return sum(values) / len(values)
'''
IMPL_VAR_BUGGY = f'''
def compute_column_variance(values: list[float]) -> float:
    {DOC_VAR}
    if not values:
        raise ValueError("variance of an empty column")
    mean = sum(values) / len(values)
    return sum((v - mean) ** 2 for v in values) / (len(values) - 1)
'''
IMPL_VAR = f'''
def compute_column_variance(values: list[float]) -> float:
    {DOC_VAR}
    if not values:
        raise ValueError("variance of an empty column")
    mean = sum(values) / len(values)
    return sum((v - mean) ** 2 for v in values) / len(values)
'''
IMPL_TABLE = f'''
def format_summary_table(stats: dict[str, float]) -> str:
    {DOC_TABLE}
    lines = ["| statistic | value |", "| --- | --- |"]
    for name in sorted(stats):
        lines.append(f"| {{name}} | {{stats[name]:.3f}} |")
    return "\\n".join(lines)
'''
IMPL_REPORT = f'''
def render_markdown_report(title: str, stats: dict[str, float]) -> str:
    {DOC_REPORT}
    return f"# {{title}}\\n\\n{{format_summary_table(stats)}}\\n"
'''


def edit(file: str, func: str, src: str, imports: str | None = None) -> str:
    parts = []
    if imports:
        parts.append(f'edit_imports_and_assignments_in_file("{file}")\n{code(imports)}')
    parts.append(f'edit_function_in_file("{file}", "{func}")\n{code(src)}')
    parts.append("Terminate()")
    return solution("\n".join(parts))


def terminate(entries: list[tuple[str, str]]) -> str:
    items = ", ".join(f'{{"file_path": "{f}", "interface": "{i}"}}' for f, i in entries)
    return solution(f"Terminate(result=[{items}])")


TEST_PARSE_WRONG = '''
from src.loading.reader import parse_csv_rows


def test_parses_header_and_rows():
    assert parse_csv_rows("a,b\\n1,2\\n3,4\\n") == [{"a": 1, "b": 2}, {"a": 3, "b": 4}]


def test_empty_text():
    assert parse_csv_rows("") == []
'''
TEST_PARSE = '''
import pytest

from src.loading.reader import parse_csv_rows


def test_parses_header_and_rows():
    assert parse_csv_rows("a,b\\n1,2\\n3,4\\n") == [{"a": "1", "b": "2"}, {"a": "3", "b": "4"}]


def test_empty_text():
    assert parse_csv_rows("") == []


def test_ragged_row_rejected():
    with pytest.raises(ValueError):
        parse_csv_rows("a,b\\n1\\n")
'''
TEST_COERCE = '''
import pytest

from src.loading.reader import coerce_numeric_columns


def test_converts_named_columns_only():
    rows = [{"a": "1.5", "b": "x"}]
    assert coerce_numeric_columns(rows, ["a"]) == [{"a": 1.5, "b": "x"}]


def test_non_numeric_rejected():
    with pytest.raises(ValueError):
        coerce_numeric_columns([{"a": "x"}], ["a"])
'''
TEST_MEAN = '''
import pytest

from src.stats.moments import compute_column_mean


def test_mean():
    assert compute_column_mean([1.0, 2.0, 3.0, 4.0]) == 2.5


def test_empty_rejected():
    with pytest.raises(ValueError):
        compute_column_mean([])
'''
TEST_VAR = '''
import pytest

from src.stats.moments import compute_column_variance


def test_population_variance():
    assert compute_column_variance([1.0, 2.0, 3.0, 4.0]) == pytest.approx(1.25)


def test_single_value_has_zero_variance():
    assert compute_column_variance([5.0]) == 0.0


def test_empty_rejected():
    with pytest.raises(ValueError):
        compute_column_variance([])
'''
TEST_TABLE = '''
from src.reporting.table import format_summary_table


def test_rows_sorted_with_three_decimals():
    text = format_summary_table({"variance": 1.25, "mean": 2.5})
    assert text.splitlines() == ["| statistic | value |", "| --- | --- |", "| mean | 2.500 |", "| variance | 1.250 |"]
'''
TEST_REPORT = '''
from src.reporting.markdown import render_markdown_report


def test_title_then_table():
    text = render_markdown_report("Scores", {"mean": 1.0})
    assert text.startswith("# Scores\\n\\n| statistic | value |")
    assert text.endswith("\\n")
'''
TEST_INTEGRATION = '''
from src.reporting.markdown import render_markdown_report
from src.reporting.table import format_summary_table


def test_report_embeds_the_table():
    stats = {"mean": 2.5, "variance": 1.25}
    assert format_summary_table(stats) in render_markdown_report("Summary", stats)
'''

U_PARSE = "src/loading/reader.py:parse_csv_rows"
U_COERCE = "src/loading/reader.py:coerce_numeric_columns"
U_MEAN = "src/stats/moments.py:compute_column_mean"
U_VAR = "src/stats/moments.py:compute_column_variance"
U_TABLE = "src/reporting/table.py:format_summary_table"
U_REPORT = "src/reporting/markdown.py:render_markdown_report"
U_INTEGRATION = f"{U_REPORT}\n{U_TABLE}"


def plan(branches: list[str]) -> str:
    return action({"branches": branches})


def judge(kind: str, review: str) -> str:
    return action({"error_type": kind, "review": review})


def build_script() -> dict:
    nothing = action({"all_selected_feature_paths": []})
    script = {
        "select_exploit": [action({"all_selected_feature_paths": SELECTED}, "core CSV statistics features"), nothing],
        "select_explore": [nothing, nothing],
        "propose_missing": [action({"missing_features": {}}), action({"missing_features": {}})],
        "self_check": [action({"accepted_feature_paths": SELECTED})],
        "refactor_extract": [action(EXTRACT)],
        "refactor_reorganize": [action({"operations": []})],
        "refactor_refine": [action({"renames": []})],
        "skeleton_folders": [solution({"src": {"loading": ["Data Loading"], "stats": ["Statistics"], "reporting": ["Reporting"]}})],
        "skeleton_files": [
            when("Subtree: Data Loading", solution({"src/loading/reader.py": [F_PARSE, F_COERCE]})),
            when("Subtree: Statistics", solution({"src/stats/moments.py": [F_MEAN, F_VAR]})),
            when("Subtree: Reporting", solution({"src/reporting/table.py": [F_TABLE], "src/reporting/markdown.py": [F_REPORT]})),
        ],
        "data_flow": [
            solution([
                {"from": "Data Loading", "to": "Statistics", "data_id": "numeric_columns", "data_type": "list[float]", "transformation": "none"},
                {"from": "Statistics", "to": "Data Loading", "data_id": "column_filter", "data_type": "list[str]", "transformation": "none"},
            ], "first attempt (cyclic)"),
            solution([
                {"from": "Data Loading", "to": "Statistics", "data_id": "numeric_columns", "data_type": "list[float]",
                 "transformation": "cells coerced to float"},
                {"from": "Statistics", "to": "Reporting", "data_id": "summary_stats", "data_type": "dict[str, float]",
                 "transformation": "none"},
            ]),
        ],
        "file_order": [solution({"Reporting": ["src/reporting/table.py", "src/reporting/markdown.py"]})],
        "base_classes": [solution(BASES)],
        "design_interfaces": [
            when("Target file: src/loading/reader.py", DESIGN_READER),
            when("Target file: src/stats/moments.py", DESIGN_MOMENTS),
            when("Target file: src/reporting/table.py", DESIGN_TABLE),
            when("Target file: src/reporting/markdown.py", DESIGN_MARKDOWN),
        ],
        "localize": [
            when(task_guard(F_PARSE), solution("view_file_interface_feature_map('src/loading/reader.py')")),
            when(task_guard(F_PARSE), terminate([])),
            when(task_guard(F_COERCE), terminate([("src/loading/reader.py", "function: parse_csv_rows")])),
            when(task_guard(F_MEAN), terminate([])),
            when(task_guard(F_VAR), solution("search_interface_by_functionality(['column mean'])")),
            when(task_guard(F_VAR), terminate([("src/stats/moments.py", "function: compute_column_mean")])),
            when(task_guard(F_VAR), terminate([("src/stats/moments.py", "function: compute_column_mean")])),
            when(task_guard(F_TABLE), terminate([])),
            when(task_guard(F_REPORT), solution("expand_leaf_node_info('reporting/tables/format summary table')")),
            when(task_guard(F_REPORT), terminate([("src/reporting/table.py", "function: format_summary_table")])),
        ],
        "code_edit": [
            when(task_guard(F_PARSE), edit("src/loading/reader.py", "parse_csv_rows", IMPL_PARSE, "import csv")),
            when(task_guard(F_COERCE), edit("src/loading/reader.py", "coerce_numeric_columns", IMPL_COERCE)),
            when(task_guard(F_MEAN), edit("src/stats/moments.py", "compute_column_mean", IMPL_MEAN)),
            when(task_guard(F_VAR), edit("src/stats/moments.py", "compute_column_variance", IMPL_VAR_BUGGY)),
            when(task_guard(F_VAR), edit("src/stats/moments.py", "compute_column_variance", IMPL_VAR)),
            when(task_guard(F_TABLE), edit("src/reporting/table.py", "format_summary_table", IMPL_TABLE)),
            when(task_guard(F_REPORT), edit("src/reporting/markdown.py", "render_markdown_report", IMPL_REPORT)),
        ],
        "test_plan": [
            when(U_PARSE, plan(["header and rows", "empty text", "ragged row"])),
            when(U_COERCE, plan(["named columns converted", "non-numeric cell"])),
            when(U_MEAN, plan(["mean of four values", "empty column"])),
            when(U_VAR, plan(["population variance", "single value", "empty column"])),
            when(U_VAR, plan(["population variance", "single value", "empty column"])),
            when(U_TABLE, plan(["sorted rows, three decimals"])),
            when(U_INTEGRATION, plan(["report embeds the table"])),
            when(U_REPORT, plan(["title then table"])),
        ],
        "test_generate": [
            when(f"Unit under test: {U_PARSE}\n", code(TEST_PARSE_WRONG)),
            when(f"Unit under test: {U_COERCE}\n", code(TEST_COERCE)),
            when(f"Unit under test: {U_MEAN}\n", code(TEST_MEAN)),
            when(f"Unit under test: {U_VAR}\n", code(TEST_VAR)),
            when(f"Unit under test: {U_VAR}\n", code(TEST_VAR)),
            when(f"Unit under test: {U_TABLE}\n", code(TEST_TABLE)),
            when(f"Unit under test: {U_REPORT}\n", code(TEST_REPORT)),
        ],
        "integration_test_generate": [when(U_INTEGRATION, code(TEST_INTEGRATION))],
        "judge_failure": (
            [when("def parse_csv_rows", judge("test_code", "cells are strings; the test expects ints"))] * 4
            + [when("def parse_csv_rows", judge("implementation", "maybe the parser should convert"))]
            + [when("def compute_column_variance", judge("implementation", "divides by n-1; contract says population"))] * 5
        ),
        "test_fix": [when("def parse_csv_rows", code(TEST_PARSE))],
        "category_judge": [action({"reassign": {}})],
    }
    return script


def main(out: Path = OUT) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "ontology.tsv").write_text("".join(f"{p}\t{n}\n" for p, n in ONTOLOGY), encoding="utf-8")
    (out / "taxonomy.json").write_text(json.dumps(TAXONOMY, indent=2) + "\n", encoding="utf-8")
    (out / "config.json").write_text(json.dumps(CONFIG, indent=2) + "\n", encoding="utf-8")
    (out / "script.json").write_text(json.dumps(build_script(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else OUT)
