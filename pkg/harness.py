"""
Experiment harness: config files, seeded sweeps over (method, sweep value,
seed) cells, CSV output, the simulation-figure panels and the
generalization-gap sweep.

Usage:
    python harness.py [--config PATH] [--seed U64] [--out PATH] [--jobs N] <command> ...

Commands: gen, train, eval, oracle, run, repro-fig2 --panel {a,b,c,d}, gen-gap.
"""
import argparse
import enum
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import typing_extensions
from dotenv import dotenv_values, load_dotenv

from errors import ConfigError, CrlabError, ValidationError
from evaluation import generalization_gap, report
from objectives import ModelKind, TrainConfig, TrainMethod, fit_method
from oracle import corollary1_ratios, generalization_bounds, theorem1_table
from predictors import MaskPolicy, Router, load_model, save_model
from synthdata import (attach_annotations, load_dataset, make_params, p0,
                       sample_dataset, save_dataset)

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_JOBS = int(os.getenv("CRLAB_JOBS", "1"))
DEFAULT_OUT = os.getenv("CRLAB_OUT", "results.csv")
DEFAULT_N_MC = int(os.getenv("CRLAB_N_MC", "100000"))
LOG_LEVEL = os.getenv("CRLAB_LOG_LEVEL", "INFO")

POPULATION = "population"
FLOAT_FORMAT = "%.9g"


class SweepAxis(enum.Enum):
    GAMMA = "gamma"
    ANNOTATION_FRACTION = "fraction"
    PC = "p_c"
    N = "n"
    ETA = "eta"


# ---------------------------------------------------------
#  ROW SCHEMAS
# ---------------------------------------------------------

class ResultRow(typing_extensions.TypedDict):
    method: str
    model_kind: str
    gamma: float
    p_c: float
    eta: float
    sigma: float
    n_train: str  # sample size, or "population"
    fraction: float
    seed: int
    acc_c1: float
    acc_c2: float
    balanced: float
    worst: float
    train_steps: int
    wall_ms: float
    status: str  # "ok" or "error:<Class>: <message>"


class GapRow(typing_extensions.TypedDict):
    method: str
    context: str
    train_loss: float
    test_loss: float
    gap: float
    n: int
    p_c: float
    seed: int
    status: str


RESULT_COLUMNS = list(ResultRow.__annotations__)
GAP_COLUMNS = list(GapRow.__annotations__)


# ---------------------------------------------------------
#  CONFIG
# ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    params: object = field(default_factory=p0)
    methods: list = field(default_factory=lambda: list(TrainMethod))
    model_kind: ModelKind = ModelKind.LINEAR
    n_train: object = 100  # int, or None for POPULATION
    n_mc: int = DEFAULT_N_MC
    seeds: list = field(default_factory=lambda: [0])
    sweep_axis: SweepAxis = None
    sweep_values: list = field(default_factory=list)
    fraction: float = 1.0
    mask_policy: MaskPolicy = MaskPolicy.ZERO_MASK
    output_path: str = None
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if not self.methods:
            raise ConfigError("run.methods must name at least one method")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if self.n_mc < 1:
            raise ConfigError(f"run.n_mc >= 1 required, got {self.n_mc}")
        if self.n_train is not None and int(self.n_train) < 1:
            raise ConfigError(f"run.n_train >= 1 or '{POPULATION}' required")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"run.fraction must lie in [0, 1], got {self.fraction}")
        if self.sweep_axis is not None and not self.sweep_values:
            raise ConfigError("sweep.values is empty")
        if self.sweep_axis is None and self.sweep_values:
            raise ConfigError("sweep.values given without sweep.axis")
        for value in self.sweep_values:
            _check_sweep_value(self.sweep_axis, value)
        try:
            self.params.validate()
            self.train.validate()
        except ValidationError as e:
            raise ConfigError(str(e)) from e
        return self

    def sweep_points(self):
        """
        [(sweep index, value)]; one point with value None without a sweep.
        """
        if self.sweep_axis is None:
            return [(0, None)]
        return list(enumerate(self.sweep_values))


def _check_sweep_value(axis, value):
    ok = {
        SweepAxis.GAMMA: lambda v: v > 0,
        SweepAxis.ETA: lambda v: v > 0,
        SweepAxis.PC: lambda v: 0 <= v <= 1,
        SweepAxis.ANNOTATION_FRACTION: lambda v: 0 <= v <= 1,
        SweepAxis.N: lambda v: v >= 1 and float(v).is_integer(),
    }[axis]
    if not ok(value):
        raise ConfigError(f"sweep value {value} is invalid for axis {axis.value}")


def _split_list(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _train_field_types():
    return {f.name: f.type for f in fields(TrainConfig)}


def parse_config(values):
    """
    Build an ExperimentConfig from dotted `section.key` values.
    """
    params_keys = {"d": 20, "mu_norm": 1.0, "sigma": 1.0, "gamma": 0.1, "eta": 0.3, "p_c": 0.9}
    config = ExperimentConfig()
    train_changes = {}
    train_types = _train_field_types()
    for key, raw in values.items():
        if raw is None:
            raise ConfigError(f"{key} has no value")
        section, _, name = key.partition(".")
        try:
            if section == "params" and name in params_keys:
                params_keys[name] = int(raw) if name == "d" else float(raw)
            elif section == "run" and name == "methods":
                config.methods = [TrainMethod(m.lower()) for m in _split_list(raw)]
            elif section == "run" and name == "model_kind":
                config.model_kind = ModelKind(raw.lower())
            elif section == "run" and name == "n_train":
                config.n_train = None if raw.lower() == POPULATION else int(raw)
            elif section == "run" and name == "n_mc":
                config.n_mc = int(raw)
            elif section == "run" and name == "seeds":
                config.seeds = [int(s) for s in _split_list(raw)]
            elif section == "run" and name == "fraction":
                config.fraction = float(raw)
            elif section == "run" and name == "mask_policy":
                config.mask_policy = MaskPolicy(raw.lower())
            elif section == "run" and name == "output_path":
                config.output_path = raw
            elif section == "run" and name == "base_seed":
                config.base_seed = int(raw)
            elif section == "sweep" and name == "axis":
                config.sweep_axis = SweepAxis(raw.lower())
            elif section == "sweep" and name == "values":
                config.sweep_values = [float(v) for v in _split_list(raw)]
            elif section == "train" and name in train_types and name != "model_kind":
                if name == "icc_router":
                    train_changes[name] = Router(raw.lower())
                else:
                    train_changes[name] = int(raw) if train_types[name] in (int, "int") else float(raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {raw!r}") from e
    config.params = make_params(**params_keys)
    config.train = TrainConfig(**train_changes).replace(model_kind=config.model_kind)
    if config.sweep_axis is SweepAxis.N:
        config.sweep_values = [int(v) for v in config.sweep_values]
    return config.validate()


def load_config(path):
    """
    Read a key = value config file (python-dotenv syntax, `${VAR}` expands
    from the environment). Section headers are comments, e.g. `# [params]`.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    return parse_config(dotenv_values(path))


# ---------------------------------------------------------
#  CELLS
# ---------------------------------------------------------

def mix_seed(base_seed, *keys):
    """
    64-bit seed from SeedSequence(entropy=base_seed, spawn_key=keys).
    """
    state = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(k) for k in keys)).generate_state(
        2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def method_index(method):
    return list(TrainMethod).index(TrainMethod(method))


@dataclass(frozen=True)
class Cell:
    method: TrainMethod
    sweep_index: int
    seed_index: int
    seed: int
    params: object
    n_train: object
    fraction: float
    model_kind: ModelKind
    mask_policy: MaskPolicy
    n_mc: int
    data_seed: int
    train: TrainConfig

    def sort_key(self):
        return method_index(self.method), self.sweep_index, self.seed_index


def build_cells(config):
    """
    One cell per (method, sweep value, seed). All methods of a (sweep value,
    seed) pair share the training sample and the evaluation sample; the
    method enters only the optimizer seed.
    """
    cells = []
    for method in config.methods:
        for sweep_index, value in config.sweep_points():
            params, n_train, fraction = config.params, config.n_train, config.fraction
            if config.sweep_axis is SweepAxis.GAMMA:
                params = params.replace(gamma=value)
            elif config.sweep_axis is SweepAxis.PC:
                params = params.replace(p_c=value)
            elif config.sweep_axis is SweepAxis.ETA:
                params = params.replace(eta=value)
            elif config.sweep_axis is SweepAxis.N:
                n_train = int(value)
            elif config.sweep_axis is SweepAxis.ANNOTATION_FRACTION:
                fraction = value
            for seed_index, seed in enumerate(config.seeds):
                data_seed = mix_seed(config.base_seed, seed, sweep_index)
                train_seed = mix_seed(config.base_seed, seed, sweep_index, method_index(method))
                cells.append(Cell(method=TrainMethod(method), sweep_index=sweep_index, seed_index=seed_index,
                                  seed=seed, params=params, n_train=n_train, fraction=fraction,
                                  model_kind=config.model_kind, mask_policy=config.mask_policy,
                                  n_mc=config.n_mc, data_seed=data_seed,
                                  train=config.train.replace(seed=train_seed, model_kind=config.model_kind)))
    return cells


def _training_source(cell):
    if cell.n_train is None:
        return cell.params
    dataset = sample_dataset(cell.params, cell.n_train, cell.data_seed)
    if cell.method is TrainMethod.ENP:
        dataset = attach_annotations(dataset, cell.fraction)
    return dataset


def run_cell(cell):
    """
    Train and evaluate one cell. Library errors become the row's status.
    """
    row = ResultRow(method=cell.method.value, model_kind=cell.model_kind.value, gamma=cell.params.gamma,
                    p_c=cell.params.p_c, eta=cell.params.eta, sigma=cell.params.sigma,
                    n_train=POPULATION if cell.n_train is None else str(cell.n_train),
                    fraction=cell.fraction if cell.method is TrainMethod.ENP else 0.0, seed=cell.seed,
                    acc_c1=math.nan, acc_c2=math.nan, balanced=math.nan, worst=math.nan,
                    train_steps=0, wall_ms=0.0, status="ok")
    start = time.perf_counter()
    try:
        result = fit_method(cell.method, _training_source(cell), cell.train, cell.mask_policy)
        accuracy = report(result.model, cell.params, cell.n_mc, cell.data_seed)
        row.update(acc_c1=accuracy.acc_c1, acc_c2=accuracy.acc_c2, balanced=accuracy.balanced,
                   worst=accuracy.worst, train_steps=result.steps)
    except Exception as e:
        logger.warning("cell %s/%d/%d failed: %s", cell.method.value, cell.sweep_index, cell.seed, e)
        row["status"] = f"error:{type(e).__name__}: {e}"
    row["wall_ms"] = (time.perf_counter() - start) * 1000.0
    return row


def _map_cells(fn, cells, jobs):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


# ---------------------------------------------------------
#  CSV
# ---------------------------------------------------------

def write_rows(rows, path, columns):
    frame = pd.DataFrame(list(rows), columns=columns)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="nan", lineterminator="\n")
    return path


def read_results(path):
    """
    Parse a results CSV back into ResultRow dicts.
    """
    frame = pd.read_csv(path, dtype={"method": str, "model_kind": str, "n_train": str, "status": str},
                        keep_default_na=False, na_values=["nan", "NaN"])
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"results file lacks columns {missing}")
    rows = []
    for record in frame[RESULT_COLUMNS].to_dict(orient="records"):
        record["seed"] = int(record["seed"])
        record["train_steps"] = int(record["train_steps"])
        rows.append(ResultRow(**record))
    return rows


# ---------------------------------------------------------
#  OPERATIONS
# ---------------------------------------------------------

def run(config, jobs=1):
    """
    Every (method, sweep value, seed) cell, rows in canonical order. Writes the
    CSV when config.output_path is set.
    """
    config.validate()
    cells = build_cells(config)
    logger.info("running %d cells with %d job(s)", len(cells), jobs)
    rows = _map_cells(run_cell, cells, jobs)
    order = sorted(range(len(cells)), key=lambda i: cells[i].sort_key())
    rows = [rows[i] for i in order]
    if config.output_path:
        write_rows(rows, config.output_path, RESULT_COLUMNS)
    return rows


class Panel(enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"


FIG2_GAMMAS = [0.05, 0.1, 0.2, 0.4]
FIG2_FRACTIONS = [0.01, 0.05, 0.1, 0.5, 1.0]
FIG2_SEEDS = [0, 1, 2, 3, 4]


def panel_config(panel, n_mc=DEFAULT_N_MC, base_seed=0):
    """
    Default sweep per panel: (a) population linear models over gamma,
    (b) linear models with n=100, (c) the 512-unit ReLU network with n=100,
    (d) ENP over the annotation fraction with n=1000.
    """
    panel = Panel(panel)
    common = dict(params=p0(), n_mc=n_mc, base_seed=base_seed)
    if panel is Panel.A:
        return ExperimentConfig(n_train=None, seeds=[0], sweep_axis=SweepAxis.GAMMA,
                                sweep_values=list(FIG2_GAMMAS), **common)
    if panel is Panel.B:
        return ExperimentConfig(n_train=100, seeds=list(FIG2_SEEDS), sweep_axis=SweepAxis.GAMMA,
                                sweep_values=list(FIG2_GAMMAS), **common)
    if panel is Panel.C:
        return ExperimentConfig(n_train=100, seeds=list(FIG2_SEEDS), sweep_axis=SweepAxis.GAMMA,
                                sweep_values=list(FIG2_GAMMAS), model_kind=ModelKind.MLP,
                                train=TrainConfig(model_kind=ModelKind.MLP), **common)
    return ExperimentConfig(methods=[TrainMethod.ENP], n_train=1000, seeds=list(FIG2_SEEDS),
                            sweep_axis=SweepAxis.ANNOTATION_FRACTION, sweep_values=list(FIG2_FRACTIONS), **common)


def summarize(rows, config):
    """
    Plot-ready table: one line per (method, sweep value) with mean and
    standard deviation over seeds of the successful cells.
    """
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    frame = frame[frame["status"] == "ok"]
    axis = config.sweep_axis
    x_column = {SweepAxis.GAMMA: "gamma", SweepAxis.PC: "p_c", SweepAxis.ETA: "eta",
                SweepAxis.ANNOTATION_FRACTION: "fraction", SweepAxis.N: "n_train", None: "gamma"}[axis]
    frame = frame.assign(x=frame[x_column].astype(float))
    grouped = frame.groupby(["method", "x"], sort=False)
    summary = grouped.agg(mean_balanced=("balanced", "mean"), std_balanced=("balanced", "std"),
                          mean_worst=("worst", "mean"), std_worst=("worst", "std"),
                          mean_acc_c1=("acc_c1", "mean"), mean_acc_c2=("acc_c2", "mean"),
                          n_seeds=("seed", "count")).reset_index()
    summary["std_balanced"] = summary["std_balanced"].fillna(0.0)
    summary["std_worst"] = summary["std_worst"].fillna(0.0)
    summary.insert(1, "x_axis", axis.value if axis else "none")
    summary["_order"] = summary["method"].map(lambda m: method_index(m))
    return summary.sort_values(["_order", "x"], kind="stable").drop(columns="_order").reset_index(drop=True)


def rows_path_for(output_path):
    path = Path(output_path)
    return str(path.with_name(f"{path.stem}_rows{path.suffix or '.csv'}"))


def repro_fig2(panel, output_path, jobs=1, n_mc=DEFAULT_N_MC, base_seed=0):
    """
    Run one panel's default sweep. Writes the summary to `output_path` and the
    raw rows to `<stem>_rows.csv`; returns the summary DataFrame.
    """
    config = panel_config(panel, n_mc=n_mc, base_seed=base_seed)
    rows = run(config, jobs=jobs)
    write_rows(rows, rows_path_for(output_path), RESULT_COLUMNS)
    summary = summarize(rows, config)
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(output_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return summary


# Gap sweeps run with a weak mean shift and a small feature scale, so the
# fitted minority direction follows sampling noise and the gap tracks
# 1/sqrt(#examples). At P0 fewer than 3d minority examples are fit exactly.
GAP_PARAMS = dict(d=20, mu_norm=5e-4, sigma=0.02, gamma=0.1, eta=0.02, p_c=0.5)
GAP_STEP_SIZE = 1000.0
GAP_PCS = [0.5, 0.75, 0.9, 0.9375]
GAP_SEEDS = list(range(20))


def gap_config(sweep_axis=SweepAxis.PC, sweep_values=None, n_train=200, seeds=None, base_seed=0):
    """
    Default gen-gap sweep: ICC and ENP on GAP_PARAMS, 20 seeds, n=200.
    """
    if sweep_values is None:
        sweep_values = list(GAP_PCS) if sweep_axis is SweepAxis.PC else [100, 400, 1600]
    return ExperimentConfig(params=make_params(**GAP_PARAMS), methods=[TrainMethod.ICC, TrainMethod.ENP],
                            n_train=n_train, seeds=list(GAP_SEEDS if seeds is None else seeds),
                            sweep_axis=sweep_axis, sweep_values=list(sweep_values), base_seed=base_seed,
                            train=TrainConfig(step_size=GAP_STEP_SIZE))


def _gap_cell(args):
    method, params, n, fraction, seed, train = args
    try:
        gap = generalization_gap(method, params, n, fraction, seed, train)
        return GapRow(**gap.as_dict(), status="ok")
    except Exception as e:
        return GapRow(method=TrainMethod(method).value, context="C2", train_loss=math.nan, test_loss=math.nan,
                      gap=math.nan, n=int(n), p_c=params.p_c, seed=int(seed),
                      status=f"error:{type(e).__name__}: {e}")


def gen_gap_cmd(config=None, jobs=1):
    """
    One GapRow per (method, sweep value, seed) over a PC or N sweep.
    Methods other than ICC and ENP in the config are skipped. Without a
    config the gap_config() defaults run.
    """
    config = config or gap_config()
    config.validate()
    if config.sweep_axis not in (SweepAxis.PC, SweepAxis.N):
        raise ConfigError("gen-gap needs a p_c or n sweep")
    methods = [m for m in config.methods if TrainMethod(m) in (TrainMethod.ICC, TrainMethod.ENP)]
    if not methods:
        raise ConfigError("gen-gap needs ICC or ENP in run.methods")
    jobs_list = []
    for method in methods:
        for sweep_index, value in config.sweep_points():
            params = config.params.replace(p_c=value) if config.sweep_axis is SweepAxis.PC else config.params
            n = int(value) if config.sweep_axis is SweepAxis.N else int(config.n_train or 200)
            for seed in config.seeds:
                seed_value = mix_seed(config.base_seed, seed, sweep_index)
                jobs_list.append((method, params, n, config.fraction, seed_value, config.train))
    rows = _map_cells(_gap_cell, jobs_list, jobs)
    if config.output_path:
        write_rows(rows, config.output_path, GAP_COLUMNS)
    return rows


# ---------------------------------------------------------
#  CLI
# ---------------------------------------------------------

def _config_from_args(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.base_seed = args.seed
    if args.out:
        config.output_path = args.out
    return config


def cmd_gen(args):
    config = _config_from_args(args)
    print(f"\n[Step 1] Sampling {args.n} examples (seed={config.base_seed})...")
    dataset = attach_annotations(sample_dataset(config.params, args.n, config.base_seed), args.fraction)
    out = config.output_path or "dataset.csv"
    save_dataset(dataset, out)
    print(f"Dataset saved to {out} ({dataset.n_annotated} annotated)")


def cmd_train(args):
    config = _config_from_args(args)
    print(f"\n[Step 1] Loading dataset {args.data}...")
    dataset = load_dataset(args.data)
    print(f"\n[Step 2] Training {args.method}...")
    kind = ModelKind(args.model_kind)
    train = config.train.replace(seed=config.base_seed, model_kind=kind)
    result = fit_method(TrainMethod(args.method), dataset, train, MaskPolicy(args.mask_policy))
    out = config.output_path or "model.txt"
    save_model(result.model, out)
    print(f"Model saved to {out} after {result.steps} steps")


def cmd_eval(args):
    config = _config_from_args(args)
    model = load_model(args.model)
    params = load_dataset(args.data).params if args.data else config.params
    n_mc = args.n_mc or config.n_mc
    print(f"\n[Step 1] Evaluating {args.model} on {n_mc} samples per context...")
    accuracy = report(model, params, n_mc, config.base_seed, oracle_router=args.oracle_router)
    frame = pd.DataFrame([accuracy.as_dict()])
    print(frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"), end="")


def cmd_oracle(args):
    config = _config_from_args(args)
    params = config.params
    table = pd.DataFrame([{"method": row.method.value, "acc_c1": row.acc_c1, "acc_c2": row.acc_c2}
                          for row in theorem1_table(params)])
    print(table.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"), end="")
    ratio_c1, ratio_c2 = corollary1_ratios(params)
    print(f"\ncorollary ratios: c1={ratio_c1:.9g} c2={ratio_c2:.9g}")
    bounds = generalization_bounds(params, args.n, args.delta)
    print(f"bounds (n={bounds.n}, delta={bounds.delta}): c0={bounds.c0:.9g} "
          f"icc={bounds.icc_bound:.9g} enp={bounds.enp_bound:.9g} ratio={bounds.icc_bound / bounds.enp_bound:.9g}")


def cmd_run(args):
    config = _config_from_args(args)
    if not config.output_path:
        config.output_path = DEFAULT_OUT
    print(f"\n[Step 1] Running {len(build_cells(config))} cells...")
    rows = run(config, jobs=args.jobs)
    failed = sum(1 for row in rows if row["status"] != "ok")
    print(f"\nRun Completed! {len(rows)} rows ({failed} failed). Output: {config.output_path}")


def cmd_repro_fig2(args):
    out = args.out or f"fig2_{args.panel}.csv"
    print(f"\n[Step 1] Reproducing panel ({args.panel})...")
    summary = repro_fig2(args.panel, out, jobs=args.jobs, n_mc=args.n_mc or DEFAULT_N_MC,
                         base_seed=args.seed or 0)
    print(summary.to_string(index=False))
    print(f"\nPanel Completed! Output: {out} (rows: {rows_path_for(out)})")


def cmd_gen_gap(args):
    if args.config:
        config = _config_from_args(args)
    else:
        config = gap_config(base_seed=args.seed or 0)
        config.output_path = args.out
    if not config.output_path:
        config.output_path = "gen_gap.csv"
    print("\n[Step 1] Measuring minority-context generalization gaps...")
    rows = gen_gap_cmd(config, jobs=args.jobs)
    print(f"\nGap Sweep Completed! {len(rows)} rows. Output: {config.output_path}")


def build_parser():
    parser = argparse.ArgumentParser(description="Two-context reliability experiments")
    parser.add_argument("--config", help="key = value experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="base seed (unsigned 64-bit)")
    parser.add_argument("--out", help="output path")
    parser.add_argument("--jobs", type=int, default=DEFAULT_JOBS, help="parallel worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="sample a dataset file")
    gen.add_argument("--n", type=int, default=100)
    gen.add_argument("--fraction", type=float, default=0.0)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train a model on a dataset file")
    train.add_argument("--data", required=True)
    train.add_argument("--method", choices=[m.value for m in TrainMethod], required=True)
    train.add_argument("--model-kind", choices=[k.value for k in ModelKind], default=ModelKind.LINEAR.value)
    train.add_argument("--mask-policy", choices=[p.value for p in MaskPolicy], default=MaskPolicy.ZERO_MASK.value)
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="Monte-Carlo accuracy of a model file")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--data", help="dataset file whose header supplies the parameters")
    evaluate.add_argument("--n-mc", type=int, default=None)
    evaluate.add_argument("--oracle-router", action="store_true")
    evaluate.set_defaults(func=cmd_eval)

    oracle = sub.add_parser("oracle", help="closed-form accuracies and bounds")
    oracle.add_argument("--n", type=int, default=1000)
    oracle.add_argument("--delta", type=float, default=0.05)
    oracle.set_defaults(func=cmd_oracle)

    run_parser = sub.add_parser("run", help="run a configured sweep")
    run_parser.set_defaults(func=cmd_run)

    fig = sub.add_parser("repro-fig2", help="reproduce one simulation panel")
    fig.add_argument("--panel", choices=[p.value for p in Panel], required=True)
    fig.add_argument("--n-mc", type=int, default=None)
    fig.set_defaults(func=cmd_repro_fig2)

    gap = sub.add_parser("gen-gap", help="minority-context generalization gaps")
    gap.set_defaults(func=cmd_gen_gap)
    return parser


def main(argv=None):
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CrlabError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
