"""Deformation quality and registration accuracy: Jacobians, folds, metrics, grids, sweeps."""
import csv
import logging
import math
from dataclasses import asdict, dataclass
from itertools import product
from multiprocessing.dummy import Pool as ThreadPool
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.stats import spearmanr
from tqdm import tqdm

from . import engine, regularize, similarity
from .engine import RegistrationConfig, RegistrationResult
from .errors import ConfigError, ErrorCode, WarpforgeError
from .ndtensor import Tensor
from .regularize import RegularizerKind
from .warp import check_field, warp_bilinear

logger = logging.getLogger("analyze")

INTENSITY_SCALE = 255.0
SWEEP_COLUMNS = ["param", "value", "seed", "ssim", "mse", "fold_count", "fold_percent", "status", "pair"]


@dataclass
class FoldReport:
    fold_count: int
    fold_percent: float
    det_min: float
    det_max: float
    det_mean: float

    def to_dict(self) -> Dict[str, Union[int, float]]:
        return asdict(self)


@dataclass
class SweepRecord:
    param: str
    value: float
    seed: int
    ssim: float
    mse: float
    fold_count: int
    fold_percent: float
    status: str = "ok"
    pair: str = "pair"

    def sort_key(self) -> Tuple:
        return (self.pair, self.param, self.value, self.seed)


def jacobian_determinants(u: np.ndarray) -> np.ndarray:
    """Per-site det(I + grad u) on the (H-1) x (W-1) interior grid."""
    return regularize.jacobian_determinant(Tensor(np.asarray(u, dtype=np.float64))).data


def fold_report(u: np.ndarray) -> FoldReport:
    """Count sites with det <= 0; percent is relative to all H x W pixels."""
    det = jacobian_determinants(u)
    count = int(np.count_nonzero(det <= 0))
    pixels = u.shape[1] * u.shape[2]
    return FoldReport(
        fold_count=count,
        fold_percent=100.0 * count / pixels,
        det_min=float(det.min()),
        det_max=float(det.max()),
        det_mean=float(det.mean()),
    )


def eval_metrics(deformed: np.ndarray, fixed: np.ndarray) -> Tuple[float, float]:
    """(SSIM, MSE on the 0-255 scale), computed with the loss definitions outside the tape."""
    d = np.asarray(deformed, dtype=np.float64)
    f = np.asarray(fixed, dtype=np.float64)
    ssim_value = similarity.ssim(d, f).item()
    mse_value = similarity.mse(d, f).item() * INTENSITY_SCALE ** 2
    return ssim_value, mse_value


def displacement_stats(u: np.ndarray) -> Dict[str, float]:
    magnitude = np.hypot(u[0], u[1])
    return {"mean": float(magnitude.mean()), "max": float(magnitude.max())}


def render_grid(u: np.ndarray, spacing: int = 8) -> np.ndarray:
    """Regular grid (lines every ``spacing`` pixels) pulled through the same warp as the image."""
    if spacing < 2:
        raise ConfigError(f"grid spacing must be at least 2, got {spacing}")
    _, h, w = np.shape(u)
    check_field(u, (h, w))
    grid = np.zeros((h, w))
    grid[::spacing, :] = 1.0
    grid[:, ::spacing] = 1.0
    return warp_bilinear(grid, np.asarray(u, dtype=np.float64)).data


# --- parameter sweeps ---

def default_parameter(kind: RegularizerKind) -> str:
    return "sigma" if kind == RegularizerKind.GAUSSIAN else "lambda"


def cell_config(base: RegistrationConfig, kind: RegularizerKind, param: str, value: float, seed: int) -> RegistrationConfig:
    settings = base.model_dump()
    settings["seed"] = seed
    settings["regularizer"]["kind"] = kind
    if param == "lambda":
        settings["lam"] = value
    elif param in ("sigma", "alpha"):
        settings["regularizer"][param] = value
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected lambda, sigma or alpha")
    try:
        return RegistrationConfig.model_validate(settings)
    except ValidationError as e:
        raise ConfigError(f"invalid sweep cell {param}={value}: {e}") from e


@dataclass
class SweepCell:
    pair: str
    kind: RegularizerKind
    param: str
    value: float
    seed: int


def sweep(
    pairs: Sequence[Tuple[str, np.ndarray, np.ndarray]],
    kinds: Sequence[RegularizerKind],
    grid: Sequence[float],
    seeds: Sequence[int],
    base: RegistrationConfig,
    param: Optional[str] = None,
    jobs: int = 1,
    on_result: Optional[Callable[[SweepCell, RegistrationResult], None]] = None,
    progress: bool = False,
) -> List[SweepRecord]:
    """Run one registration per (pair, kind, value, seed) cell and collect sorted records.

    A failing cell is logged and recorded with its error status; the sweep goes on.
    """
    if not grid or not seeds or not pairs or not kinds:
        raise ConfigError("sweep needs at least one pair, kind, parameter value and seed")
    images = {name: (moving, fixed) for name, moving, fixed in pairs}
    cells = [
        SweepCell(name, kind, param or default_parameter(kind), float(value), int(seed))
        for (name, _, _), kind, value, seed in product(pairs, kinds, grid, seeds)
    ]

    def _failed(cell: SweepCell, code: ErrorCode, e: Exception) -> SweepRecord:
        logger.warning(f"Sweep cell {cell} failed: {e}")
        return SweepRecord(cell.param, cell.value, cell.seed, math.nan, math.nan, -1, math.nan,
                           status=f"failed:{code.value}", pair=cell.pair)

    def _run(cell: SweepCell) -> SweepRecord:
        moving, fixed = images[cell.pair]
        try:
            config = cell_config(base, cell.kind, cell.param, cell.value, cell.seed)
            result = engine.register(moving, fixed, config)
            ssim_value, mse_value = eval_metrics(result.deformed, fixed)
            folds = fold_report(result.field)
            if on_result is not None:
                on_result(cell, result)
        except WarpforgeError as e:
            return _failed(cell, e.code, e)
        except OSError as e:
            return _failed(cell, ErrorCode.IO_ERROR, e)
        return SweepRecord(cell.param, cell.value, cell.seed, ssim_value, mse_value, folds.fold_count,
                           folds.fold_percent, pair=cell.pair)

    logger.info(f"Sweep: {len(cells)} cells across {jobs} worker(s)")
    if jobs > 1 and len(cells) > 1:
        with ThreadPool(processes=min(jobs, len(cells))) as pool:
            records = list(tqdm(pool.imap_unordered(_run, cells), total=len(cells), desc="Sweep", unit="cell",
                                disable=not progress))
    else:
        records = [_run(c) for c in tqdm(cells, desc="Sweep", unit="cell", disable=not progress)]
    return sorted(records, key=SweepRecord.sort_key)


def write_sweep_csv(records: Sequence[SweepRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_COLUMNS)
        for r in sorted(records, key=SweepRecord.sort_key):
            writer.writerow([r.param, repr(r.value), r.seed, repr(r.ssim), repr(r.mse), r.fold_count,
                             repr(r.fold_percent), r.status, r.pair])


def sweep_trend(records: Sequence[SweepRecord]) -> List[Dict[str, Union[str, float, int]]]:
    """Spearman rank correlation of fold count and SSIM against the swept value, per (pair, param)."""
    groups: Dict[Tuple[str, str], List[SweepRecord]] = {}
    for r in records:
        if r.status == "ok":
            groups.setdefault((r.pair, r.param), []).append(r)

    def _rho(x, y) -> float:
        if len(set(x)) < 2 or len(set(y)) < 2:
            return 0.0
        return float(spearmanr(x, y)[0])

    rows = []
    for (pair, param), rs in sorted(groups.items()):
        values = [r.value for r in rs]
        rows.append({
            "pair": pair,
            "param": param,
            "cells": len(rs),
            "rho_fold_count": _rho(values, [r.fold_count for r in rs]),
            "rho_ssim": _rho(values, [r.ssim for r in rs]),
        })
    return rows
