import json
import subprocess
import sys

import numpy as np
import pytest

from endoqtl import cli
from endoqtl.genmap import LinkageMap

TRUTH = {"qtl": [{"chrom": "1", "pos": 20, "sigma_m2": 0.3, "sigma_f2": 1.5, "sigma_mf2": 0.1}],
         "sigma_g2": 0.3, "sigma_e2": 1.0, "means": [3, 2, 1], "design": {"families": 12, "offspring": 10}}


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "map.tsv").write_text(LinkageMap.evenly_spaced({"1": 40, "2": 20}, 10).to_tsv())
    (root / "truth.json").write_text(json.dumps(TRUTH))
    null = dict(TRUTH, qtl=[])
    (root / "null.json").write_text(json.dumps(null))
    assert run("simulate", "--map", root / "map.tsv", "--truth", root / "truth.json", "--seed", 3,
               "--out", root / "sim") == 0
    assert run("simulate", "--map", root / "map.tsv", "--truth", root / "null.json", "--seed", 4,
               "--out", root / "null") == 0
    return root


def data_args(root, which="sim"):
    d = root / which
    return ["--map", d / "map.tsv", "--geno", d / "genotypes.tsv", "--pheno", d / "phenotypes.tsv"]


def test_simulate_writes_inputs(simulated):
    files = sorted(p.name for p in (simulated / "sim").iterdir())
    assert files == ["genotypes.tsv", "map.tsv", "phenotypes.tsv"]
    row = (simulated / "sim" / "phenotypes.tsv").read_text().splitlines()[1]
    assert row.split("\t")[2].startswith("trait=")


def test_scan_round_trip(simulated, tmp_path):
    assert run("scan", *data_args(simulated), "--step", 5, "--out", tmp_path) == 0
    prof = (tmp_path / "profile.csv").read_text().splitlines()
    assert prof[0].split(",") == list(cli.PROFILE_COLUMNS)
    assert len(prof) == 1 + 9 + 5
    assert (tmp_path / "calls.csv").read_text().splitlines()[0].split(",") == list(cli.CALL_COLUMNS)
    assert "<svg" in (tmp_path / "profile.svg").read_text()


def test_permute_is_byte_identical_across_runs_and_workers(simulated, tmp_path):
    outs = []
    for k, workers in enumerate((1, 1, 4)):
        d = tmp_path / str(k)
        assert run("permute", *data_args(simulated), "--step", 10, "--n-perm", 20, "--seed", 11,
                   "--workers", workers, "--out", d) == 0
        outs.append((d / "thresholds.tsv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    genome, per = cli.parse_thresholds(outs[0].decode())
    assert set(per) == {"1", "2"} and genome >= max(per.values())


def test_thresholds_drawn_on_svg_and_null_calls_empty(simulated, tmp_path):
    th = tmp_path / "thresholds.tsv"
    th.write_text(cli.thresholds_tsv(50.0, {"1": 40.0, "2": 40.0}, 0.05, 1000, 0))
    assert run("scan", *data_args(simulated, "null"), "--step", 10, "--thresholds", th, "--out", tmp_path) == 0
    svg = (tmp_path / "profile.svg").read_text()
    assert svg.count("threshold-genome") == 1
    assert svg.count("threshold-chromosome") == 2
    assert (tmp_path / "calls.csv").read_text().splitlines() == [",".join(cli.CALL_COLUMNS)]


def test_test_command(simulated, tmp_path):
    assert run("test", *data_args(simulated), "--chrom", 1, "--pos", 20, "--out", tmp_path) == 0
    rows = (tmp_path / "tests.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["qtl", "imprinting", "maternal", "paternal", "maternal_effect"]


def test_invalid_design_names_field(simulated, tmp_path, capsys):
    bad = tmp_path / "designs.json"
    bad.write_text(json.dumps({"truth": TRUTH, "designs": [{"families": 4, "offspring": 10, "total": 50}]}))
    out = tmp_path / "out"
    assert run("power", "--map", simulated / "sim" / "map.tsv", "--designs", bad, "--out", out) == 2
    err = capsys.readouterr().err
    assert "designs.0" in err and "total" in err
    assert not out.exists() or not any(out.iterdir())


def test_invalid_truth_names_field(simulated, tmp_path, capsys):
    bad = tmp_path / "truth.json"
    bad.write_text(json.dumps(dict(TRUTH, sigma_e2=-1)))
    assert run("simulate", "--map", simulated / "sim" / "map.tsv", "--truth", bad, "--out", tmp_path / "o") == 2
    assert "sigma_e2" in capsys.readouterr().err


def test_missing_input_leaves_no_outputs(simulated, tmp_path, capsys):
    out = tmp_path / "out"
    args = data_args(simulated)
    args[3] = tmp_path / "nope.tsv"
    assert run("scan", *args, "--out", out) == 2
    assert "nope.tsv" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_bad_options_exit_2(simulated, tmp_path):
    assert run("scan", *data_args(simulated), "--step", 0, "--out", tmp_path) == 2
    assert run("scan", *data_args(simulated), "--mode", "multi", "--out", tmp_path) == 2
    assert run("frobnicate") == 2
    assert not any(tmp_path.iterdir())


def test_numerical_failure_exit_3(simulated, tmp_path, monkeypatch):
    def boom(self, workers=1):
        raise np.linalg.LinAlgError("matrix is singular")

    monkeypatch.setattr(cli.Scanner, "scan", boom)
    assert run("scan", *data_args(simulated), "--out", tmp_path) == 3
    assert not any(tmp_path.iterdir())


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "endoqtl.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip().endswith(cli.__version__)
