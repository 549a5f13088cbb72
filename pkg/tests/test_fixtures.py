"""Golden-table replay: residual gates, fault injection, directory plumbing."""

import shutil

import pytest

from moebudget.arch import MoEShape, derive_budget
from moebudget.fixtures import (
    FIXTURES_ENV_VAR,
    FixtureError,
    fixtures_dir,
    load_table,
    table_names,
    validate_fixture_tables,
    validate_table,
)

ALL_TABLES = [
    "dense_baselines",
    "moe_2b_fixed_compute",
    "moe_2b_fixed_data",
    "moe_3b_strict_reuse_114b",
    "moe_3b_strict_reuse_65b",
    "moe_7b_fixed_compute",
    "moe_7b_fixed_data",
    "moe_7b_loose_reuse",
    "moe_7b_strict_reuse",
]


def test_table_inventory():
    assert table_names() == ALL_TABLES


@pytest.mark.parametrize("name", ALL_TABLES)
def test_each_table_validates(name):
    report = validate_table(load_table(name))
    assert report.ok, report.failures


def test_combined_report_shape():
    report = validate_fixture_tables()
    assert report.ok
    assert report.rows_checked == 80
    assert report.max_residual() < 1.0


def test_fault_injection_flags_only_corrupt_row(tmp_path):
    src = fixtures_dir()
    for item in src.iterdir():
        shutil.copy(item, tmp_path / item.name)
    target = tmp_path / "moe_7b_fixed_compute.csv"
    lines = target.read_text().splitlines()
    fields = lines[5].split(",")  # corrupt the best row.s expert width
    fields[9] = str(int(fields[9]) * 2)
    lines[5] = ",".join(fields)
    target.write_text("\n".join(lines) + "\n")

    report = validate_table(load_table("moe_7b_fixed_compute", tmp_path))
    assert not report.ok
    assert {c.row for c in report.failures} == {4}
    clean_rows = {c.row for c in report.checks if c.ok}
    assert clean_rows.issuperset(set(range(8)) - {4})


def test_missing_directory_raises(tmp_path):
    with pytest.raises(FixtureError, match="index not found"):
        load_table("dense_baselines", tmp_path / "nowhere")


def test_unknown_table_raises():
    with pytest.raises(FixtureError, match="unknown fixture table"):
        load_table("no_such_table")


def test_env_var_override(tmp_path, monkeypatch):
    src = fixtures_dir()
    for item in src.iterdir():
        shutil.copy(item, tmp_path / item.name)
    monkeypatch.setenv(FIXTURES_ENV_VAR, str(tmp_path))
    assert fixtures_dir() == tmp_path
    assert validate_fixture_tables().ok


def test_tokens_per_param_row_value():
    table = load_table("moe_2b_fixed_data")
    row = next(r for r in table.rows
               if abs(r["r_a"] - 8.74) < 0.01 and abs(r["D"] - 5.41e11) < 1e9)
    budget = derive_budget(table.row_shape(row), tokens=int(row["D"]))
    assert round(budget.tokens_per_param) == 252


def test_row_shapes_are_valid_moe():
    table = load_table("moe_3b_strict_reuse_65b")
    for row in table.rows:
        shape = table.row_shape(row)
        assert isinstance(shape, MoEShape)
        assert shape.base.layers == 24
        assert shape.moe_layers == 23 and shape.dense_layers == 1


def test_loose_table_consumes_double_the_unique_tokens():
    table = load_table("moe_7b_loose_reuse")
    for row in table.rows:
        assert table.row_tokens(row) == 2 * int(row["D_hat"])
