import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pyrofocus import cli
from pyrofocus import diagnostics as dg
from pyrofocus.scheduler import ConfigError


def write_spec(path, **kw):
    spec = {
        "schema_version": 1,
        "name": "demo",
        "seed": 5,
        "stream": {"samples_per_iter": 32},
        "optim": {"iters": 40},
    }
    spec.update(kw)
    path.write_text(json.dumps(spec))
    return path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_is_reproducible(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json")
    for d in ("a", "b"):
        code, out, _ = run(["train", "--spec", spec, "--out", tmp_path / d], capsys)
        assert code == 0 and out.startswith("demo: final_loss=")
    for name in ("trace.csv", "summary.csv"):
        assert (tmp_path / "a/demo" / name).read_bytes() == (tmp_path / "b/demo" / name).read_bytes()


def test_summary_line_fields(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json")
    _, out, _ = run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)
    assert "accuracy=[" in out and "mean_gamma_ad=[" in out
    assert len(out.strip().splitlines()) == 1


@pytest.mark.parametrize(
    "patch,field",
    [
        ({"focus": {"delta": -1.0}}, "focus: delta"),
        ({"focus": {"gama": 2.0}}, "focus.gama"),
        ({"stream": {"hard_fraction": 3}}, "hard_fraction"),
        ({"schema_version": 7}, "schema_version"),
        ({"name": ""}, "name"),
        ({"arms": [{"name": "x", "loss": "bce"}]}, "arms[0]"),
        ({"arms": [{"loss": "fl"}]}, "arms[0].name"),
        ({"optim": {"lr": -1}}, "optim: lr"),
        ({"t": -2}, "t"),
    ],
)
def test_malformed_spec_exits_1_naming_field(tmp_path, capsys, patch, field):
    spec = write_spec(tmp_path / "s.json", **patch)
    code, _, err = run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert field in err


def test_invalid_json_and_missing_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(["train", "--spec", bad], capsys)
    assert code == 1 and "bad.json" in err
    code, _, err = run(["train", "--spec", tmp_path / "none.json"], capsys)
    assert code == 1 and "none.json" in err


def test_divergence_exits_2(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json", stream={"samples_per_iter": 16, "separation": 1e6}, optim={"iters": 20, "lr": 1e300})
    code, _, err = run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "non-finite" in err


def test_degenerate_arms_write_equal_csvs(tmp_path, capsys):
    arms = [{"name": "fl", "loss": "fl"}, {"name": "hpf", "loss": "hpf", "delta": 0.0, "w": 0.5}]
    spec = write_spec(tmp_path / "s.json", arms=arms)
    code, _, _ = run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)
    assert code == 0
    for name in ("trace.csv", "summary.csv"):
        assert (tmp_path / "o/fl" / name).read_bytes() == (tmp_path / "o/hpf" / name).read_bytes()


def test_precedence_flag_over_arm_over_spec_over_default():
    raw = {
        "schema_version": 1,
        "name": "p",
        "focus": {"gamma": 3.0, "delta": 0.4},
        "arms": [{"name": "a", "gamma": 2.5}, {"name": "b"}],
    }
    spec = cli.build_experiment(raw, env={})
    a, b = spec.arms
    assert a.focus.gamma_base == 2.5 and b.focus.gamma_base == 3.0
    assert a.focus.delta == 0.4 and a.focus.w == 0.5
    spec = cli.build_experiment(raw, {"gamma": 1.8, "iters": 7, "lr": 0.2}, env={})
    assert all(arm.focus.gamma_base == 1.8 for arm in spec.arms)
    assert spec.optim.iters == 7 and spec.optim.lr == 0.2


def test_seed_resolution():
    raw = {"schema_version": 1, "name": "s"}
    assert cli.build_experiment(raw, env={}).stream.seed == 0
    assert cli.build_experiment(raw, env={"PYROFOCUS_SEED": "17"}).stream.seed == 17
    assert cli.build_experiment({**raw, "seed": 4}, env={"PYROFOCUS_SEED": "17"}).stream.seed == 4
    assert cli.build_experiment({**raw, "seed": 4}, {"seed": 9}, env={"PYROFOCUS_SEED": "17"}).stream.seed == 9
    with pytest.raises(ConfigError, match="PYROFOCUS_SEED"):
        cli.build_experiment(raw, env={"PYROFOCUS_SEED": "x"})


def test_env_seed_changes_output(tmp_path, capsys, monkeypatch):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"schema_version": 1, "name": "e", "stream": {"samples_per_iter": 16}, "optim": {"iters": 10}}))
    outs = []
    for seed in ("1", "1", "2"):
        monkeypatch.setenv("PYROFOCUS_SEED", seed)
        d = tmp_path / f"o{len(outs)}"
        assert run(["train", "--spec", spec, "--out", d], capsys)[0] == 0
        outs.append((d / "e/trace.csv").read_bytes())
    assert outs[0] == outs[1] != outs[2]


def test_compare_single_arm_matches_train(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json", arms=[{"name": "only", "loss": "pfvfl"}])
    assert run(["compare", "--spec", spec, "--out", tmp_path / "c"], capsys)[0] == 0
    assert run(["train", "--spec", spec, "--out", tmp_path / "t"], capsys)[0] == 0
    rows = read_csv(tmp_path / "c/comparison.csv")
    assert len(rows) == 1 and rows[0]["arm"] == "only" and rows[0]["loss"] == "pfvfl"
    assert list(rows[0]) == list(cli.COMPARISON_COLUMNS)
    assert (tmp_path / "c/only/trace.csv").read_bytes() == (tmp_path / "t/only/trace.csv").read_bytes()


def test_compare_modes_on_identical_levels(tmp_path, capsys):
    spec = write_spec(
        tmp_path / "s.json",
        stream={"samples_per_iter": 64, "positive_rate": [0.1] * 5, "identical_levels": True},
        optim={"iters": 200},
        arms=[{"name": "all", "mode": "all-level"}, {"name": "lw", "mode": "level-wise"}],
    )
    assert run(["compare", "--spec", spec, "--out", tmp_path / "c"], capsys)[0] == 0
    a, b = read_csv(tmp_path / "c/comparison.csv")
    assert abs(float(a["final_loss"]) - float(b["final_loss"])) <= 1e-9


def test_mode_and_loss_flags(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json")
    argv = ["compare", "--spec", spec, "--out", tmp_path / "c", "--mode", "per-sample", "--loss", "pfqfl"]
    assert run(argv, capsys)[0] == 0
    row = read_csv(tmp_path / "c/comparison.csv")[0]
    assert row["mode"] == "per-sample" and row["loss"] == "pfqfl"


def test_diagnose_round_trip(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json")
    assert run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)[0] == 0
    arm = tmp_path / "o/demo"
    inline = (arm / "summary.csv").read_bytes()
    code, out, _ = run(["diagnose", arm / "trace.csv", "--out", tmp_path / "d"], capsys)
    assert code == 0 and "tail_hard_share" in out
    assert (tmp_path / "d/summary.csv").read_bytes() == inline
    # Idempotent.
    run(["diagnose", arm / "trace.csv", "--out", tmp_path / "d"], capsys)
    assert (tmp_path / "d/summary.csv").read_bytes() == inline
    drift = read_csv(tmp_path / "d/drift.csv")
    assert len(drift) == 40 and all(0.0 <= float(r["hard_share"]) <= 1.0 for r in drift)


def test_diagnose_identical_levels_zero_distance(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json", stream={"samples_per_iter": 32, "positive_rate": [0.2] * 5, "identical_levels": True})
    run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)
    run(["diagnose", tmp_path / "o/demo/trace.csv"], capsys)
    rows = dg.read_summary_csv(tmp_path / "o/demo/summary.csv")
    assert all(r.d_was_to_best == 0.0 for r in rows)


def test_diagnose_custom_threshold(tmp_path, capsys):
    spec = write_spec(tmp_path / "s.json")
    run(["train", "--spec", spec, "--out", tmp_path / "o"], capsys)
    code, _, err = run(["diagnose", tmp_path / "o/demo/trace.csv", "--t", "0.01"], capsys)
    assert code == 1 and "--keep-losses" in err
    run(["train", "--spec", spec, "--out", tmp_path / "k", "--keep-losses"], capsys)
    assert run(["diagnose", tmp_path / "k/demo/trace.csv", "--t", "0"], capsys)[0] == 0
    drift = read_csv(tmp_path / "k/demo/drift.csv")
    np.testing.assert_allclose([float(r["hard_share"]) for r in drift], 1.0, atol=1e-12)


def test_diagnose_missing_column_exits_1(tmp_path, capsys):
    bad = tmp_path / "trace.csv"
    bad.write_text("iter,level,n,n_pos\n0,0,1,0\n")
    code, _, err = run(["diagnose", bad], capsys)
    assert code == 1 and "pos_prop" in err


def test_module_entry_point(tmp_path):
    spec = write_spec(tmp_path / "s.json", optim={"iters": 5})
    res = subprocess.run(
        [sys.executable, "-m", "pyrofocus", "train", "--spec", str(spec), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o/demo/trace.csv").exists()


def test_compare_fl_hpf_hard_share_direction(tmp_path, capsys):
    spec = write_spec(
        tmp_path / "s.json",
        seed=0,
        stream={},
        optim={"iters": 1500},
        arms=[{"name": "fl", "loss": "fl"}, {"name": "hpf", "loss": "hpf"}],
    )
    assert run(["compare", "--spec", spec, "--out", tmp_path / "c"], capsys)[0] == 0
    fl, hpf = read_csv(tmp_path / "c/comparison.csv")
    assert float(hpf["tail_hard_share"]) > float(fl["tail_hard_share"])


def test_shipped_spec_is_valid():
    path = Path(__file__).resolve().parents[1] / "specs" / "drift_compare.json"
    spec = cli.load_experiment(path, env={})
    assert [a.name for a in spec.arms][:2] == ["fl", "hpf"]
    assert spec.optim.iters == 5000 and spec.stream.seed == 0
