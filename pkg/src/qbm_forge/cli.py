"""``qbm-forge`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .errors import CapacityError, QbmForgeError, ValidationError

log = logging.getLogger("qbm_forge")

EXIT_OK, EXIT_VALIDATION, EXIT_CAPACITY, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("preprocess", "train", "sample", "evaluate", "heatmap", "schedule", "demo12")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TransformOptions(_Section):
    alpha: float = 0.5
    tau: float = 1.0


class SyntheticOptions(_Section):
    n1: int = 1000
    mu1: float = -2.0
    n2: int = 500
    mu2: float = 3.0
    sigma: float = 1.0
    n_bits: int = 8


class DataOptions(_Section):
    pairs: dict[str, str] = Field(default_factory=dict)
    holidays: Optional[str] = None
    k_sigma: Optional[float] = 10.0
    n_bits: int = 16
    transform: Optional[TransformOptions] = None
    indicators: bool = False
    window: int = 63
    synthetic: Optional[SyntheticOptions] = None
    dataset: Optional[str] = None


class TrainOptions(_Section):
    model: Literal["rbm", "bqrbm"] = "bqrbm"
    n_hidden: int = 4
    minibatch: int = 10
    epochs: int = 100
    eta0: float = 0.1
    t_decay: int = 50
    T_decay: int = 10
    cd_steps: int = 1
    eta_beta0: float = 0.1
    beta_t_decay: int = 50
    beta_T_decay: int = 20
    beta_hat0: float = 0.5
    s_star: float = 1.0
    beta_per_minibatch: bool = False
    kl_every: int = 1
    effective_temperature_mK: Optional[float] = None
    n_samples: int = 10_000
    gauges: int = 1
    resume: Optional[str] = None


class SampleOptions(_Section):
    model: Optional[str] = None
    dataset: Optional[str] = None
    n_samples: int = 10_000
    sets: int = 10
    thermalization: int = 1000
    spacing: int = 100
    effective_temperature_mK: Optional[float] = None


class EvaluateOptions(_Section):
    dataset: Optional[str] = None
    samples: list[str] = Field(default_factory=list)
    bins: int = 32
    epsilon: float = 1e-6


class HeatmapOptions(_Section):
    n_qubits: int = 8
    n_visible: Optional[int] = None
    sigma: float = 0.1
    problem_seed: int = 0
    s0: float = 0.5
    T0: float = 50.0
    s_grid: list[float] = Field(default_factory=lambda: [round(0.05 * k, 2) for k in range(2, 21)])
    t_grid: list[float] = Field(default_factory=lambda: [float(t) for t in range(10, 201, 10)])
    gauges: int = 10
    n_samples: int = 10_000


class ScheduleOptions(_Section):
    s_quench: float = 0.55
    t_relative: float = 20.0
    pause_duration: float = 10.0
    quench_rate: float = 2.0
    n_points: int = 201


class RunConfig(_Section):
    seed: int = 0
    out: str = "out"
    curve: Optional[str] = None
    data: DataOptions = Field(default_factory=DataOptions)
    train: TrainOptions = Field(default_factory=TrainOptions)
    sample: SampleOptions = Field(default_factory=SampleOptions)
    evaluate: EvaluateOptions = Field(default_factory=EvaluateOptions)
    heatmap: HeatmapOptions = Field(default_factory=HeatmapOptions)
    schedule: ScheduleOptions = Field(default_factory=ScheduleOptions)


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return RunConfig.model_validate(raw)


def _curve(cfg: RunConfig):
    from .schedule import default_curve, load_curve

    return load_curve(cfg.curve) if cfg.curve else default_curve()


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    fields: list[str] = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _dataset_path(cfg: RunConfig, override: str | None = None) -> Path:
    return Path(override or cfg.data.dataset or Path(cfg.out) / "dataset.txt")


def cmd_preprocess(cfg: RunConfig) -> Path:
    from .data import (filter_rows, join_pairs, load_holidays, load_ohlc, preprocess, save_dataset,
                       summary_table, synthetic_bimodal)

    d = cfg.data
    out = _out(cfg)
    if d.synthetic is not None:
        s = d.synthetic
        ds = synthetic_bimodal(s.n1, s.mu1, s.n2, s.mu2, s.sigma, s.n_bits, cfg.seed)
        table = pd.DataFrame({"x": ds.values()[0]})
    else:
        if not d.pairs:
            raise ValidationError("data.pairs is empty and no synthetic generator is configured")
        series = {name: load_ohlc(path) for name, path in d.pairs.items()}
        returns, volumes = join_pairs(series)
        holidays = load_holidays(d.holidays) if d.holidays else None
        table = filter_rows(returns, volumes, holidays, d.k_sigma)
        transform = (d.transform.alpha, d.transform.tau) if d.transform else None
        ds = preprocess(table, d.n_bits, transform, d.indicators, d.window)
    path = out / "dataset.txt"
    save_dataset(ds, path)
    summary = summary_table(table)
    summary.to_csv(out / "summary.csv", float_format="%.10g")
    print(summary.to_string(float_format=lambda v: f"{v:.6g}"))
    print(f"wrote {path} ({ds.n_features} rows x {ds.n_samples} samples)")
    return path


def _backend(cfg: RunConfig, effective_T: float | None, seed_offset: int):
    from .bqrbm import SimulatedAnnealer

    t = cfg.train
    return SimulatedAnnealer(_curve(cfg), effective_T, t.n_samples, t.gauges, seed=[cfg.seed, seed_offset])


def cmd_train(cfg: RunConfig) -> Path:
    from .data import load_dataset

    ds = load_dataset(_dataset_path(cfg))
    out = _out(cfg)
    t = cfg.train
    if t.model == "rbm":
        from .rbm import TrainConfig, load_rbm, save_rbm, train_rbm

        tc = TrainConfig(t.minibatch, t.epochs, t.eta0, t.t_decay, t.T_decay, t.cd_steps, cfg.seed)
        params, start = None, 0
        if t.resume:
            params, _, start = load_rbm(t.resume)
        params, history = train_rbm(ds, tc, params, n_hidden=t.n_hidden, start_epoch=start)
        save_rbm(params, out / "model.json", tc, start + t.epochs)
    else:
        from .bqrbm import BqrbmConfig, kl_evaluator, load_bqrbm, save_bqrbm, train_bqrbm

        bc = BqrbmConfig(t.n_hidden, t.minibatch, t.epochs, t.eta0, t.t_decay, t.T_decay, t.eta_beta0,
                         t.beta_t_decay, t.beta_T_decay, t.beta_hat0, t.s_star, t.beta_per_minibatch,
                         cfg.seed, t.kl_every, t.n_samples)
        params, start = None, 0
        if t.resume:
            params, _, start, _ = load_bqrbm(t.resume)
        backend = _backend(cfg, t.effective_temperature_mK, 1)
        evaluate = kl_evaluator(ds, _backend(cfg, t.effective_temperature_mK, 2), t.n_samples) if t.kl_every else None
        params, history = train_bqrbm(ds, backend, bc, params, start_epoch=start, evaluate=evaluate)
        save_bqrbm(params, out / "model.json", bc, start + t.epochs, _curve(cfg).name)
    _write_rows(out / "history.csv", history)
    print(f"wrote {out / 'model.json'} and {out / 'history.csv'} ({len(history)} epochs)")
    return out / "model.json"


def cmd_sample(cfg: RunConfig) -> list[Path]:
    from dataclasses import replace

    from .data import load_dataset, save_dataset

    sc = cfg.sample
    model_path = Path(sc.model or Path(cfg.out) / "model.json")
    doc = json.loads(model_path.read_text(encoding="utf-8"))
    ds = load_dataset(_dataset_path(cfg, sc.dataset))
    out = _out(cfg)
    rng = np.random.default_rng(cfg.seed)
    if doc.get("schema", "").startswith("qbm_forge.rbm"):
        from .rbm import load_rbm, sample_rbm

        params, _, _ = load_rbm(model_path)
        sets = [sample_rbm(params, sc.n_samples, sc.thermalization, sc.spacing, rng).T for _ in range(sc.sets)]
    else:
        from .bqrbm import SimulatedAnnealer, load_bqrbm, sample_bqrbm

        params, _, _, _ = load_bqrbm(model_path)
        backend = SimulatedAnnealer(_curve(cfg), sc.effective_temperature_mK, sc.n_samples, seed=cfg.seed)
        sets = [b.T for b in sample_bqrbm(params, backend, sc.n_samples, sc.sets)]
    paths = []
    for k, bits in enumerate(sets):
        if bits.shape[0] != ds.n_features:
            raise ValidationError("model width does not match the dataset layout")
        path = out / f"samples_{k:02d}.txt"
        save_dataset(replace(ds, bits=bits, meta={"sample_set": k, "model": str(model_path)}), path)
        paths.append(path)
    print(f"wrote {len(paths)} sample sets to {out}")
    return paths


def cmd_evaluate(cfg: RunConfig) -> Path:
    from .data import load_dataset
    from .metrics import report

    ec = cfg.evaluate
    ds = load_dataset(_dataset_path(cfg, ec.dataset))
    files = [Path(p) for p in ec.samples] or sorted(Path(cfg.out).glob("samples_*.txt"))
    if not files:
        raise FileNotFoundError("no sample files given or found")
    sets = []
    for f in files:
        s = load_dataset(f)
        if s.codec != ds.codec:
            raise ValidationError(f"{f}: codec does not match the dataset")
        sets.append(s.bits)
    rep = report(ds, sets, ec.bins, ec.epsilon, cfg.seed)
    target = _out(cfg) / "report"
    rep.write(target)
    print(json.dumps({"kl_mean": rep.kl_mean, "kl": rep.kl}, indent=1))
    return target


def cmd_heatmap(cfg: RunConfig) -> Path:
    from .metrics import kl_heatmap
    from .sampler import annealer_facade
    from .schedule import random_ising_problem

    h = cfg.heatmap
    curve = _curve(cfg)
    problem = random_ising_problem(h.n_qubits, h.sigma, h.problem_seed, h.n_visible)
    samples = annealer_facade(problem, None, curve, h.T0, h.s0, h.n_samples, h.gauges, cfg.seed)
    grid = kl_heatmap(problem, curve, samples, h.s_grid, h.t_grid)
    out = _out(cfg)
    grid.to_csv(out / "heatmap.csv")
    _write_rows(out / "ridge.csv", [{"s": s, "T_mK": t} for s, t in grid.ridge.items()])
    s_min, t_min = grid.argmin()
    print(f"argmin at s={s_min:g}, T={t_min:g} mK (samples drawn at s={h.s0:g}, T={h.T0:g} mK)")
    return out / "heatmap.csv"


def cmd_schedule(cfg: RunConfig) -> Path:
    from .schedule import PauseQuenchSpec, build_pause_quench, sample_schedule

    sc = cfg.schedule
    spec = PauseQuenchSpec(sc.s_quench, sc.t_relative, sc.pause_duration, sc.quench_rate)
    points = build_pause_quench(spec)
    out = _out(cfg)
    _write_rows(out / "waypoints.csv", [{"t_us": t, "s": s} for t, s in points])
    t, s, A, B = sample_schedule(_curve(cfg), points, sc.n_points)
    _write_rows(out / "schedule_curve.csv",
                [{"t_us": a, "s": b, "A_GHz": c, "B_GHz": d} for a, b, c, d in zip(t, s, A, B)])
    print("waypoints: " + ", ".join(f"({t:g}, {s:g})" for t, s in points))
    return out / "waypoints.csv"


def cmd_demo12(cfg: RunConfig) -> Path:
    """8 visible x 4 hidden model on the bimodal dataset, simulator fixed at 96 mK."""
    from .schedule import beta_to_temperature

    raw = cfg.model_dump()
    raw["data"]["synthetic"] = raw["data"]["synthetic"] or SyntheticOptions().model_dump()
    raw["train"].update(model="bqrbm", n_hidden=4)
    if cfg.train.effective_temperature_mK is None:
        raw["train"]["effective_temperature_mK"] = beta_to_temperature(0.5)
    cfg12 = RunConfig.model_validate(raw)
    cmd_preprocess(cfg12)
    return cmd_train(cfg12)


HANDLERS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "heatmap": cmd_heatmap,
    "schedule": cmd_schedule,
    "demo12": cmd_demo12,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbm-forge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ and HANDLERS[name].__doc__.splitlines()[0])
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("QBM_FORGE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        HANDLERS[args.command](cfg)
    except (pydantic.ValidationError, yaml.YAMLError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CapacityError as exc:
        print(f"capacity exceeded: {exc}; reduce the number of visible or hidden units", file=sys.stderr)
        return EXIT_CAPACITY
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except QbmForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
