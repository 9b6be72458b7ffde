import math

import numpy as np
import pandas as pd
import pytest

import harness
from errors import ConfigError
from harness import (ExperimentConfig, SweepAxis, build_cells, load_config, mix_seed, panel_config,
                     read_results, run, summarize)
from objectives import ModelKind, TrainConfig, TrainMethod
from synthdata import make_params

CONFIG_TEXT = """\
# [params]
params.d = 5
params.gamma = ${CRLAB_TEST_GAMMA}
params.p_c = 0.8

# [run]
run.methods = erm, enp
run.n_train = 60
run.n_mc = 2000
run.seeds = 1, 2
run.fraction = 0.5

# [sweep]
sweep.axis = eta
sweep.values = 0.2, 0.4

# [train]
train.max_steps = 300
train.step_size = 0.5
"""


def _quick(**changes):
    config = ExperimentConfig(params=make_params(d=4), methods=[TrainMethod.ERM], n_train=60, n_mc=2000,
                              seeds=[0], train=TrainConfig(max_steps=300))
    for key, value in changes.items():
        setattr(config, key, value)
    return config


def test_mix_seed():
    assert mix_seed(0, 1, 2) == mix_seed(0, 1, 2)
    assert mix_seed(0, 1, 2) != mix_seed(0, 2, 1)
    assert mix_seed(0, 1, 2) != mix_seed(1, 1, 2)
    assert 0 <= mix_seed(7, 3) < 2 ** 64


def test_load_config(tmp_path, monkeypatch):
    monkeypatch.setenv("CRLAB_TEST_GAMMA", "0.2")
    path = tmp_path / "exp.env"
    path.write_text(CONFIG_TEXT)
    config = load_config(path)
    assert config.params.d == 5 and config.params.gamma == 0.2 and config.params.p_c == 0.8
    assert config.methods == [TrainMethod.ERM, TrainMethod.ENP]
    assert config.n_train == 60 and config.n_mc == 2000 and config.seeds == [1, 2]
    assert config.sweep_axis is SweepAxis.ETA and config.sweep_values == [0.2, 0.4]
    assert config.train.max_steps == 300 and config.train.step_size == 0.5


def test_population_keyword(tmp_path):
    path = tmp_path / "exp.env"
    path.write_text("run.n_train = population\nrun.methods = irm\n")
    assert load_config(path).n_train is None


@pytest.mark.parametrize("text", [
    "params.zeta = 1\n",
    "run.methods = lasso\n",
    "sweep.axis = gamma\nsweep.values = -0.1\n",
    "run.seeds = \n",
    "train.backtrack_factor = 2\n",
])
def test_bad_config(tmp_path, text):
    path = tmp_path / "bad.env"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_cells_share_data_across_methods():
    config = _quick(methods=[TrainMethod.ERM, TrainMethod.IRM], sweep_axis=SweepAxis.GAMMA,
                    sweep_values=[0.1, 0.2], seeds=[0, 1])
    cells = build_cells(config)
    assert len(cells) == 8
    erm = {(c.sweep_index, c.seed): c for c in cells if c.method is TrainMethod.ERM}
    irm = {(c.sweep_index, c.seed): c for c in cells if c.method is TrainMethod.IRM}
    for key, cell in erm.items():
        assert cell.data_seed == irm[key].data_seed
        assert cell.train.seed != irm[key].train.seed
    assert {c.params.gamma for c in cells} == {0.1, 0.2}


def test_single_cell_run():
    rows = run(_quick())
    assert len(rows) == 1
    row = rows[0]
    assert row["status"] == "ok"
    assert row["worst"] == min(row["acc_c1"], row["acc_c2"])
    assert row["train_steps"] > 0


def test_row_count_and_order():
    config = _quick(methods=[TrainMethod.IRM, TrainMethod.ERM], sweep_axis=SweepAxis.PC,
                    sweep_values=[0.6, 0.8], seeds=[3, 4])
    rows = run(config)
    assert len(rows) == 2 * 2 * 2
    assert [r["method"] for r in rows] == ["erm"] * 4 + ["irm"] * 4
    assert [r["p_c"] for r in rows[:4]] == [0.6, 0.6, 0.8, 0.8]
    assert [r["seed"] for r in rows[:4]] == [3, 4, 3, 4]


def test_failed_cell_is_recorded():
    config = _quick(methods=[TrainMethod.ERM, TrainMethod.IRM], n_train=None, model_kind=ModelKind.MLP)
    rows = run(config)
    assert len(rows) == 2
    assert all(r["status"].startswith("error:UnsupportedModeError") for r in rows)
    assert all(math.isnan(r["balanced"]) for r in rows)


def test_csv_round_trip_and_reproducibility(tmp_path):
    first_path, second_path = tmp_path / "a.csv", tmp_path / "b.csv"
    config = _quick(methods=[TrainMethod.ERM, TrainMethod.IRM], seeds=[0, 1], output_path=str(first_path))
    rows = run(config)
    config.output_path = str(second_path)
    run(config)
    header = first_path.read_text().splitlines()[0]
    assert header == ",".join(harness.RESULT_COLUMNS)
    first = pd.read_csv(first_path).drop(columns="wall_ms")
    second = pd.read_csv(second_path).drop(columns="wall_ms")
    pd.testing.assert_frame_equal(first, second)
    parsed = read_results(first_path)
    assert len(parsed) == len(rows)
    for original, loaded in zip(rows, parsed):
        for key in harness.RESULT_COLUMNS:
            if isinstance(original[key], float):
                assert loaded[key] == pytest.approx(original[key], rel=1e-8)
            else:
                assert loaded[key] == original[key]


def test_parallel_run_matches_serial():
    config = _quick(methods=[TrainMethod.ERM, TrainMethod.IRM], seeds=[0, 1])
    serial = run(config, jobs=1)
    parallel = run(config, jobs=2)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(serial) == strip(parallel)


def test_population_panel_ordering():
    config = panel_config("a", n_mc=20_000)
    rows = run(config)
    assert len(rows) == 5 * 4
    assert all(r["status"] == "ok" for r in rows)
    summary = summarize(rows, config)
    table = summary.pivot(index="x", columns="method", values="mean_balanced")
    assert np.all(table["enp"] >= table["condro"])
    assert np.all(table["enp"] >= table["erm"])
    # the per-context ICC fit beats masking on c2 as gamma grows
    gap = (table["icc"] - table["enp"]).abs()
    assert np.all(gap[table.index <= 0.2] < 0.03)
    assert gap.max() < 0.05


def test_gen_gap_single_cell(tmp_path):
    config = _quick(methods=[TrainMethod.ICC], params=make_params(), n_train=100, sweep_axis=SweepAxis.PC,
                    sweep_values=[0.75], output_path=str(tmp_path / "gap.csv"))
    rows = harness.gen_gap_cmd(config)
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    frame = pd.read_csv(tmp_path / "gap.csv")
    assert list(frame.columns) == harness.GAP_COLUMNS


def test_gen_gap_needs_pc_or_n_sweep():
    with pytest.raises(ConfigError):
        harness.gen_gap_cmd(_quick(methods=[TrainMethod.ICC]))


def test_cli_gen_train_eval(tmp_path, capsys):
    data, model = tmp_path / "data.csv", tmp_path / "model.txt"
    assert harness.main(["--out", str(data), "--seed", "3", "gen", "--n", "40", "--fraction", "0.5"]) == 0
    assert harness.main(["--out", str(model), "train", "--data", str(data), "--method", "enp"]) == 0
    assert harness.main(["eval", "--model", str(model), "--data", str(data), "--n-mc", "1000"]) == 0
    out = capsys.readouterr().out
    assert "acc_c1,acc_c2,balanced,worst" in out


def test_cli_oracle(capsys):
    assert harness.main(["oracle", "--n", "400"]) == 0
    out = capsys.readouterr().out
    assert "enp_lower_bound" in out and "corollary ratios" in out


@pytest.mark.slow
def test_finite_sample_linear_panel(tmp_path):
    summary = harness.repro_fig2("b", str(tmp_path / "b.csv"), n_mc=20_000)
    means = summary.groupby("method")["mean_balanced"].mean()
    assert means["enp"] > means["icc"]
    assert means["enp"] > means["condro"]
    assert (tmp_path / "b_rows.csv").exists()


@pytest.mark.slow
def test_network_panel(tmp_path):
    summary = harness.repro_fig2("c", str(tmp_path / "c.csv"), n_mc=20_000, jobs=4)
    means = summary.groupby("method")["mean_balanced"].mean()
    assert means["enp"] > means["irm"]


@pytest.mark.slow
def test_annotation_fraction_panel(tmp_path):
    summary = harness.repro_fig2("d", str(tmp_path / "d.csv"), n_mc=20_000)
    summary = summary.sort_values("x")
    means = summary["mean_balanced"].to_numpy()
    stds = summary["std_balanced"].to_numpy()
    for i in range(1, len(means)):
        assert means[i] >= means[i - 1] - stds[i - 1]


@pytest.mark.slow
def test_minority_gap_scales_with_share():
    config = harness.gap_config(sweep_values=[0.75, 0.9375])
    frame = pd.DataFrame(harness.gen_gap_cmd(config, jobs=4))
    assert (frame["status"] == "ok").all()
    means = frame.groupby(["method", "p_c"])["gap"].mean()
    icc_ratio = means[("icc", 0.9375)] / means[("icc", 0.75)]
    assert 1.3 <= icc_ratio <= 3.0
    icc_increase = means[("icc", 0.9375)] - means[("icc", 0.75)]
    enp_change = abs(means[("enp", 0.9375)] - means[("enp", 0.75)])
    assert enp_change < icc_increase


@pytest.mark.slow
def test_minority_gap_grows_with_majority_share():
    config = harness.gap_config(sweep_values=[0.5, 0.75, 0.9])
    frame = pd.DataFrame(harness.gen_gap_cmd(config, jobs=4))
    means = frame.groupby(["method", "p_c"])["gap"].mean()
    icc = [means[("icc", p)] for p in (0.5, 0.75, 0.9)]
    assert icc[0] < icc[1] < icc[2]
    enp = [means[("enp", p)] for p in (0.5, 0.75, 0.9)]
    assert max(enp) - min(enp) < 0.5 * (icc[2] - icc[0])


@pytest.mark.slow
def test_enp_gap_shrinks_with_n():
    config = harness.gap_config(sweep_axis=SweepAxis.N)
    config.methods = [TrainMethod.ENP]
    frame = pd.DataFrame(harness.gen_gap_cmd(config, jobs=4))
    assert (frame["status"] == "ok").all()
    means = frame.groupby("n")["gap"].mean()
    for small, large in ((100, 400), (400, 1600)):
        assert 2.0 / 1.5 <= means[small] / means[large] <= 2.0 * 1.5


def test_gap_config_defaults():
    config = harness.gap_config()
    assert config.methods == [TrainMethod.ICC, TrainMethod.ENP]
    assert config.sweep_axis is SweepAxis.PC and len(config.seeds) == 20
    assert config.params.d == 20 and config.train.step_size == harness.GAP_STEP_SIZE
    assert harness.gap_config(sweep_axis=SweepAxis.N).sweep_values == [100, 400, 1600]
    assert config.validate() is config


def test_unexpected_cell_failure_is_recorded(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("solver blew up")

    monkeypatch.setattr(harness, "fit_method", broken)
    path = tmp_path / "rows.csv"
    rows = run(_quick(methods=[TrainMethod.ERM, TrainMethod.IRM], output_path=str(path)))
    assert [r["status"] for r in rows] == ["error:RuntimeError: solver blew up"] * 2
    assert len(pd.read_csv(path)) == 2


def test_unexpected_gap_failure_is_recorded(monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("solver blew up")

    monkeypatch.setattr(harness, "generalization_gap", broken)
    config = _quick(methods=[TrainMethod.ICC], sweep_axis=SweepAxis.PC, sweep_values=[0.75])
    rows = harness.gen_gap_cmd(config)
    assert len(rows) == 1 and rows[0]["status"].startswith("error:RuntimeError")
    assert math.isnan(rows[0]["gap"])
