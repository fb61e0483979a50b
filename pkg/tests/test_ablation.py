import csv

import pytest

from psrp.ablation import COLUMNS, METHODS, method_config, run_ablation
from psrp.layers import count_parameters
from psrp.model import build_model

from conftest import tiny_config


def test_method_configs():
    base = tiny_config()
    assert method_config(base, "A").train.use_sedam is False
    assert [method_config(base, m).sedam.attention for m in ("B", "C", "OURS")] == ["cbam", "cbam_min", "channel_only"]


def test_parameter_count_structure():
    base = tiny_config()
    counts = {m: count_parameters(build_model(method_config(base, m))) for m in METHODS}
    assert counts["A"] < min(counts["B"], counts["C"], counts["OURS"])
    k = base.sedam.spatial_kernel
    # one extra input plane into a k x k single-output conv, in each of the three decoder blocks
    assert counts["C"] - counts["B"] == 3 * k * k


@pytest.fixture(scope="module")
def report(tmp_path_factory, shapes_manifest):
    out = tmp_path_factory.mktemp("ablate")
    return run_ablation(tiny_config(iterations=2), shapes_manifest, out_dir=out), out


def test_report_rows(report):
    rep, out = report
    assert len(rep.rows) == 8
    assert {(r["method"], r["revise"]) for r in rep.rows} == {(m, v) for m in METHODS for v in (True, False)}
    assert rep.row("A", True)["params"] < rep.row("OURS", True)["params"]
    assert set(rep.loss_curves) == set(METHODS) and all(len(v) == 2 for v in rep.loss_curves.values())
    for m in METHODS:
        assert (out / m / "last.psrp").exists()


def test_report_csv(report, tmp_path):
    rep, _ = report
    rep.write_csv(tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == COLUMNS
    assert len(rows) == 8
    rep.write_json(tmp_path / "a.json")
    assert (tmp_path / "a.json").stat().st_size > 0
