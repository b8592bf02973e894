"""
Ablation sweeps.

A matrix is a list of switch combinations (rows) and a seed set. Every
(row, seed) pair becomes one child run under ``<sweep>/<row>/seed<seed>``;
children only differ from the base configuration through their row's
switches and ``train.seed``. Failed children are recorded and the sweep
carries on.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import numpy as np
from omegaconf import OmegaConf

from promptseg.pipeline.config import RunConfig, load_run_config, resolve_key
from promptseg.pipeline.train import train
from promptseg.utils.decorators import timed
from promptseg.utils.errors import ConfigError, PromptSegError
from promptseg.utils.logs import configure_logging

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class AblationRow:
    name: str
    switches: Dict[str, Any]

    def overrides(self) -> List[str]:
        return [f"{key}={_dotlist_value(value)}" for key, value in self.switches.items()]


@dataclass
class AblationMatrix:
    """
    :param rows: Switch combinations, each mapped to one child run per seed.
    :param seeds: Seeds shared by every row.
    """
    rows: List[AblationRow]
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))

    def __post_init__(self) -> None:
        names = [row.name for row in self.rows]
        if not self.rows:
            raise ConfigError("An ablation matrix needs at least one row")
        if len(set(names)) != len(names):
            raise ConfigError(f"Ablation row names must be unique, got {names}")
        if not self.seeds:
            raise ConfigError("An ablation matrix needs at least one seed")

    @classmethod
    def from_grid(cls, grid: Mapping[str, Sequence[Any]],
                  seeds: Sequence[int] = DEFAULT_SEEDS) -> AblationMatrix:
        """
        Every combination of the grid's values, in row-major order.
        """
        keys = [resolve_key(k) for k in grid]
        rows = []
        for values in product(*grid.values()):
            switches = dict(zip(keys, values))
            rows.append(AblationRow(_row_name(switches), switches))
        return cls(rows, [int(s) for s in seeds])

    @classmethod
    def load(cls, path: str | Path) -> AblationMatrix:
        """
        Read a matrix file holding either ``grid`` (switch -> values) or
        ``rows`` (a list of ``{name, switches}``), plus optional ``seeds``.

        :raises ConfigError: If the file is missing or malformed.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Matrix file not found: {path}")
        try:
            data = OmegaConf.to_container(OmegaConf.load(path))
        except Exception as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")

        seeds = data.get("seeds", list(DEFAULT_SEEDS))
        if "grid" in data:
            return cls.from_grid(data["grid"], seeds)
        if "rows" in data:
            rows = []
            for i, entry in enumerate(data["rows"]):
                switches = {resolve_key(k): v for k, v in entry.get("switches", {}).items()}
                rows.append(AblationRow(entry.get("name", _row_name(switches) or f"row{i}"),
                                        switches))
            return cls(rows, [int(s) for s in seeds])
        raise ConfigError(f"{path}: a matrix needs a 'grid' or 'rows' section")


def _dotlist_value(value: Any) -> str:
    return json.dumps(value) if isinstance(value, (bool, type(None))) else str(value)


def _row_name(switches: Mapping[str, Any]) -> str:
    parts = []
    for key, value in switches.items():
        short = key.rsplit(".", 1)[-1]
        shown = str(value).lower() if isinstance(value, bool) else str(value)
        parts.append(f"{short}-{shown}")
    return "_".join(parts)


def _factor_table() -> AblationMatrix:
    rows = []
    for ic, cl, ms in product((False, True), repeat=3):
        on = [tag for tag, flag in (("ic", ic), ("cl", cl), ("ms", ms)) if flag]
        rows.append(AblationRow("+".join(on) or "baseline", {
            "model.prompt_mode": "icpc" if ic else "learnable",
            "train.contrastive": cl,
            "model.multi_scale": ms,
        }))
    return AblationMatrix(rows)


PRESETS = {
    "factor-table": _factor_table,
    "prompt-modes": lambda: AblationMatrix.from_grid(
        {"prompt_mode": ["fixed", "learnable", "instance", "icpc", "cocoop"]}),
    "gamma": lambda: AblationMatrix.from_grid({"gamma": [0.1, 0.5, 1.0]}),
    "sampling": lambda: AblationMatrix.from_grid(
        {"sampling_strategy": ["random", "easy-to-hard"]}),
    # counts above the stride-32 points of a batch are truncated to availability
    "sampling-number": lambda: AblationMatrix.from_grid(
        {"positives_per_class": [2, 5, 10, 50]}),
}
"""Shipped matrices, keyed by name."""


def preset(name: str) -> AblationMatrix:
    """
    :raises ConfigError: For an unknown preset name.
    """
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; expected one of: {', '.join(PRESETS)}")
    return PRESETS[name]()


@dataclass
class ChildResult:
    row: str
    seed: int
    status: str
    val_miou: float | None = None
    val_raw_miou: float | None = None
    seconds: float | None = None
    error: str | None = None


@dataclass
class RowSummary:
    row: str
    mean: float
    std: float
    runs: int
    failures: int


@dataclass
class SweepSummary:
    rows: List[RowSummary]
    children: List[ChildResult]

    @property
    def failures(self) -> int:
        return sum(r.failures for r in self.rows)


def run_child(payload: Dict[str, Any]) -> ChildResult:
    """
    Train one child run. Top-level so worker processes can unpickle it.
    """
    row, seed = payload["row"], payload["seed"]
    try:
        cfg = OmegaConf.to_object(OmegaConf.merge(OmegaConf.structured(RunConfig),
                                                  payload["config"]))
        result, seconds = timed(train)(cfg)
    except Exception as exc:
        kind = "" if isinstance(exc, PromptSegError) else f"{type(exc).__name__}: "
        return ChildResult(row, seed, "failed", error=f"{kind}{exc}")
    return ChildResult(row, seed, "ok", result.final.get("val"), result.final.get("val_raw"),
                       seconds)


def child_config(base: RunConfig, row: AblationRow, seed: int, sweep_dir: Path) -> RunConfig:
    overrides = row.overrides() + [
        f"train.seed={seed}",
        f"name={row.name}/seed{seed}",
        f"out_dir={sweep_dir}",
    ]
    return load_run_config(None, overrides, base=base)


def summarize(matrix: AblationMatrix, children: Sequence[ChildResult]) -> List[RowSummary]:
    """
    Mean and (population) standard deviation of val mIoU over a row's
    successful seeds; NaN when every seed failed.
    """
    summary = []
    for row in matrix.rows:
        mine = [c for c in children if c.row == row.name]
        values = np.array([c.val_miou for c in mine
                           if c.status == "ok" and c.val_miou is not None], dtype=np.float64)
        mean = float(values.mean()) if values.size else math.nan
        std = float(values.std()) if values.size else math.nan
        failures = sum(c.status != "ok" for c in mine)
        summary.append(RowSummary(row.name, mean, std, len(mine), failures))
    return summary


def write_summary(summary: SweepSummary, sweep_dir: Path) -> None:
    sweep_dir.mkdir(parents=True, exist_ok=True)
    with open(sweep_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({
            "rows": [r.__dict__ for r in summary.rows],
            "children": [c.__dict__ for c in summary.children],
        }, fh, indent=2)

    with open(sweep_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "mean_val_miou", "std_val_miou", "runs", "failures"])
        for r in summary.rows:
            writer.writerow([r.row, r.mean, r.std, r.runs, r.failures])


def run_sweep(base: RunConfig, matrix: AblationMatrix, sweep_dir: str | Path,
              workers: int = 1) -> SweepSummary:
    """
    Run every child of a matrix and aggregate the results.

    :param base: Configuration every child starts from.
    :type base: RunConfig
    :param matrix: Rows and seeds.
    :type matrix: AblationMatrix
    :param sweep_dir: Parent directory of the child runs and the summary files.
    :type sweep_dir: str | Path
    :param workers: Worker processes; 1 runs children in this process.
    :type workers: int
    :return: Per-row aggregates and per-child results.
    :rtype: SweepSummary
    """
    sweep_dir = Path(sweep_dir)
    children: List[ChildResult] = []
    payloads = []
    for row in matrix.rows:
        for seed in matrix.seeds:
            try:
                cfg = child_config(base, row, seed, sweep_dir)
            except ConfigError as exc:
                children.append(ChildResult(row.name, seed, "failed", error=str(exc)))
                continue
            payloads.append({"row": row.name, "seed": seed,
                             "config": OmegaConf.to_container(OmegaConf.structured(cfg))})

    logger.info("Sweep of %d rows x %d seeds (%d runnable children) into %s",
                len(matrix.rows), len(matrix.seeds), len(payloads), sweep_dir)
    if workers > 1:
        level = logging.getLogger("promptseg").getEffectiveLevel()
        with ProcessPoolExecutor(max_workers=workers, initializer=configure_logging,
                                 initargs=(None, level)) as pool:
            results = list(pool.map(run_child, payloads))
    else:
        results = [run_child(p) for p in payloads]

    for result in results:
        if result.status != "ok":
            logger.error("Child %s/seed%d failed: %s", result.row, result.seed, result.error)
    children.extend(results)

    summary = SweepSummary(summarize(matrix, children), children)
    write_summary(summary, sweep_dir)
    return summary
