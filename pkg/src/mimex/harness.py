"""Multi-seed experiment runner, CSV curve tables, confidence intervals and ablation presets."""

from __future__ import annotations

import copy
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .config import ConfigError, ExperimentConfig, config_from_dict, effective_seeds, load_config, to_dict
from .ppo import train

CURVE_HEADER = ("seed", "env_steps", "success_rate", "mean_intrinsic", "mimex_loss")
AGGREGATE_HEADER = ("env_steps", "n_seeds", "success_mean", "success_ci95", "intrinsic_mean")

# Two-sided 95% Student-t critical values t_{0.975, df} for df = 1..30.
T_TABLE_975 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)


def t_critical(df: int) -> float:
    if df < 1:
        raise ContractError("t interval needs at least 2 samples")
    if df <= len(T_TABLE_975):
        return T_TABLE_975[df - 1]
    from scipy.stats import t

    return float(t.ppf(0.975, df))


@dataclass(frozen=True)
class CurveRow:
    seed: int
    env_steps: int
    success_rate: float
    mean_intrinsic: float
    mimex_loss: float

    def cells(self) -> list[str]:
        return [str(self.seed), str(self.env_steps), f"{self.success_rate:.6f}",
                f"{self.mean_intrinsic:.6f}", f"{self.mimex_loss:.6f}"]


def sort_rows(rows: Iterable[CurveRow]) -> list[CurveRow]:
    return sorted(rows, key=lambda r: (r.seed, r.env_steps))


def write_curve_csv(path, rows: Iterable[CurveRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        writer.writerows(r.cells() for r in sort_rows(rows))


def read_curve_csv(path) -> list[CurveRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CURVE_HEADER:
            raise ContractError(f"{path}: expected header {','.join(CURVE_HEADER)}")
        return [CurveRow(int(s), int(n), float(a), float(b), float(c)) for s, n, a, b, c in reader]


def split_by_seed(rows: Iterable[CurveRow]) -> dict[int, list[CurveRow]]:
    tables: dict[int, list[CurveRow]] = {}
    for row in sort_rows(rows):
        tables.setdefault(row.seed, []).append(row)
    return tables


@dataclass
class Aggregate:
    env_steps: np.ndarray
    mean: np.ndarray
    halfwidth: np.ndarray
    n_seeds: int
    intrinsic_mean: np.ndarray

    def rows(self) -> list[list[str]]:
        return [[str(int(s)), str(self.n_seeds), f"{m:.6f}", f"{h:.6f}", f"{i:.6f}"]
                for s, m, h, i in zip(self.env_steps, self.mean, self.halfwidth, self.intrinsic_mean)]


def aggregate(tables: Sequence[Sequence[CurveRow]], min_seeds: int = 2) -> Aggregate:
    """Per-step mean success rate and 95% t-interval halfwidth across seeds.

    With ``min_seeds=1`` a single seed is accepted and reported with zero width.
    """
    tables = [list(t) for t in tables]
    if len(tables) < min_seeds:
        raise ContractError(f"aggregate needs at least {min_seeds} seeds, got {len(tables)}")
    grid = [r.env_steps for r in tables[0]]
    for t in tables[1:]:
        if [r.env_steps for r in t] != grid:
            raise ContractError("curve tables have misaligned env_steps grids")
    success = np.array([[r.success_rate for r in t] for t in tables], dtype=np.float64)
    intrinsic = np.array([[r.mean_intrinsic for r in t] for t in tables], dtype=np.float64)
    n = len(tables)
    mean = success.mean(axis=0)
    if n > 1:
        half = t_critical(n - 1) * success.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        half = np.zeros_like(mean)
    return Aggregate(np.array(grid), mean, half, n, intrinsic.mean(axis=0))


def write_aggregate_csv(path, agg: Aggregate) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_HEADER)
        writer.writerows(agg.rows())


def read_aggregate_csv(path) -> Aggregate:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, None) or ()) != AGGREGATE_HEADER:
            raise ContractError(f"{path}: expected header {','.join(AGGREGATE_HEADER)}")
        rows = list(reader)
    if not rows:
        raise ContractError(f"{path}: no rows")
    cols = list(zip(*rows))
    return Aggregate(np.array(cols[0], dtype=np.int64), np.array(cols[2], dtype=float),
                     np.array(cols[3], dtype=float), int(cols[1][0]), np.array(cols[4], dtype=float))


def auc(rows: Sequence[CurveRow]) -> float:
    """Area under the success curve, normalised by the step range (mean height)."""
    x = np.array([r.env_steps for r in rows], dtype=np.float64)
    y = np.array([r.success_rate for r in rows], dtype=np.float64)
    if len(x) < 2 or x[-1] == x[0]:
        return float(y.mean()) if len(y) else 0.0
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0 / (x[-1] - x[0]))


def run_seed(cfg_dict: dict, seed: int) -> list[CurveRow]:
    cfg = config_from_dict(cfg_dict)
    return [CurveRow(seed, p.env_steps, p.success_rate, p.mean_intrinsic, p.mimex_loss) for p in train(cfg, seed)]


def resolve_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config.validate()
    if isinstance(config, dict):
        return config_from_dict(config)
    return load_config(config)


def run_experiment(config, seeds: Sequence[int] | None = None, out_dir=None, workers: int = 1) -> list[CurveRow]:
    """Train every seed, write ``seed_<s>.csv`` files plus ``merged.csv``; return the merged rows."""
    cfg = resolve_config(config)
    seeds = effective_seeds(cfg.seeds if seeds is None else list(seeds))
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    cfg_dict = to_dict(cfg)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            per_seed = list(pool.map(run_seed, [cfg_dict] * len(seeds), seeds))
    else:
        per_seed = [run_seed(cfg_dict, s) for s in seeds]
    merged = sort_rows(r for rows in per_seed for r in rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for seed, rows in zip(seeds, per_seed):
            write_curve_csv(out / f"seed_{seed}.csv", rows)
        write_curve_csv(out / "merged.csv", merged)
    return merged


def aggregate_dir(in_dir, min_seeds: int = 2) -> Aggregate:
    path = Path(in_dir)
    merged = path / "merged.csv" if path.is_dir() else path
    return aggregate(list(split_by_seed(read_curve_csv(merged)).values()), min_seeds=min_seeds)


# ---------------------------------------------------------------- ablations

SMOKE_BASE = {
    "name": "keydoor-smoke",
    "env": {"name": "KeyDoorGrid", "sparsity": "sparse"},
    "explorer": "mimex",
    "seeds": [0],
    "total_env_steps": 20000,
    "eval_every": 5000,
    "eval_episodes": 3,
    "mimex": {"learning_rate": 1e-3},
    "transformer": {"encoder_dim": 64, "encoder_blocks": 2, "encoder_heads": 4,
                    "decoder_dim": 32, "decoder_blocks": 1, "decoder_heads": 2},
    "ppo": {"obs_norm_steps": 2000},
}


def _with(base: dict, section: str | None, **values) -> dict:
    cfg = copy.deepcopy(base)
    target = cfg if section is None else cfg.setdefault(section, {})
    for key, value in values.items():
        if isinstance(value, dict):
            target.setdefault(key, {}).update(value)
        else:
            target[key] = value
    return cfg


def ablation_presets(base: dict | None = None) -> dict[str, list[tuple[str, dict]]]:
    """Named ablation axes, each a list of ``(label, config dict)`` varying one setting."""
    base = copy.deepcopy(SMOKE_BASE if base is None else base)
    t = base.get("transformer", {})
    dec_dim, dec_blocks, dec_heads = t.get("decoder_dim", 64), t.get("decoder_blocks", 1), t.get("decoder_heads", 2)
    return {
        "seq_len": [(f"T={n}", _with(base, "mimex", window_length=n)) for n in (2, 3, 4, 5, 6)],
        "nm": [(f"nm{m}", _with(base, "mimex", mask={"num_samples": m})) for m in (1, 5)],
        "decoder_scale": [
            ("smaller", copy.deepcopy(base)),
            ("larger", _with(base, "transformer", decoder_dim=2 * dec_dim, decoder_blocks=2 * dec_blocks,
                             decoder_heads=2 * dec_heads)),
        ],
        "mask_ratio": [(f"ratio={r}", _with(base, "mimex", mask={"kind": "uniform_time", "ratio": r}))
                       for r in (0.2, 0.5, 0.7)],
        "feature_mask": [(f"feature={r}", _with(base, "mimex", mask={"kind": "uniform_feature", "ratio": r}))
                         for r in (0.8, 0.9, 0.95)],
    }


def run_preset(name: str, out_dir, seeds: Sequence[int] | None = None, base: dict | None = None,
               workers: int = 1) -> tuple[list[Aggregate], list[str], Path]:
    """Run every config of one preset, write per-config CSVs, an aggregate CSV each and one SVG."""
    from .plotting import emit_plot

    presets = ablation_presets(base)
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(presets)}")
    out = Path(out_dir)
    aggs, labels = [], []
    for label, cfg_dict in presets[name]:
        slug = label.replace("=", "_")
        rows = run_experiment(cfg_dict, seeds=seeds, out_dir=out / slug, workers=workers)
        agg = aggregate(list(split_by_seed(rows).values()), min_seeds=1)
        write_aggregate_csv(out / slug / "aggregate.csv", agg)
        aggs.append(agg)
        labels.append(label)
    svg = out / f"{name}.svg"
    emit_plot(aggs, labels, svg, title=name)
    return aggs, labels, svg


def worker_count(requested: int | None) -> int:
    if requested is not None:
        return max(1, requested)
    return max(1, min(4, os.cpu_count() or 1))
