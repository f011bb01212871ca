"""Method comparison on one image pair: every similarity loss (with and without
pre-filtering the fixed image) and every regularizer, plus the unregistered baseline."""
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging
import math

import numpy as np
from tabulate import tabulate

from core import analyze, data, engine
from core.engine import RegistrationConfig
from core.errors import WarpforgeError
from core.regularize import RegularizerKind
from core.similarity import SimilarityKind

logger = logging.getLogger("eval")

DEFAULT_PREFILTER_SIGMA = 1.0
DEFAULT_COMPARISON_LAMBDA = 0.1


def _row(group: str, method: str, prefilter: bool, deformed: np.ndarray, fixed: np.ndarray,
         field: np.ndarray, wall_time: float = 0.0) -> Dict[str, Any]:
    ssim_value, mse_value = analyze.eval_metrics(deformed, fixed)
    folds = analyze.fold_report(field)
    return {
        "group": group,
        "method": method,
        "prefilter": prefilter,
        "ssim": ssim_value,
        "mse_255": mse_value,
        "fold_count": folds.fold_count,
        "fold_percent": folds.fold_percent,
        "wall_time": wall_time,
        "status": "ok",
    }


def _failed(group: str, method: str, prefilter: bool, error: WarpforgeError) -> Dict[str, Any]:
    logger.warning(f"{group}/{method} failed: {error}")
    return {"group": group, "method": method, "prefilter": prefilter, "ssim": math.nan, "mse_255": math.nan,
            "fold_count": -1, "fold_percent": math.nan, "wall_time": 0.0, "status": f"failed:{error.code.value}"}


def _run(group: str, method: str, moving, fixed, config: RegistrationConfig) -> Dict[str, Any]:
    prefilter = config.prefilter_sigma is not None
    try:
        result = engine.register(moving, fixed, config)
    except WarpforgeError as e:
        return _failed(group, method, prefilter, e)
    # scored against the original fixed image, also when the optimizer saw a blurred one
    return _row(group, method, prefilter, result.deformed, fixed, result.field, result.wall_time)


def compare_methods(
    moving: np.ndarray,
    fixed: np.ndarray,
    base: RegistrationConfig,
    lam: float = DEFAULT_COMPARISON_LAMBDA,
    prefilter_sigma: float = DEFAULT_PREFILTER_SIGMA,
    losses: Optional[List[SimilarityKind]] = None,
    regularizers: Optional[List[RegularizerKind]] = None,
) -> List[Dict[str, Any]]:
    """Loss comparison runs without regularization; regularizer comparison keeps the base loss."""
    losses = list(SimilarityKind) if losses is None else losses
    regularizers = list(RegularizerKind) if regularizers is None else regularizers
    rows = [_row("baseline", "unregistered", False, moving, fixed, np.zeros((2, *fixed.shape)))]

    for kind, prefilter in product(losses, (False, True)):
        config = base.model_copy(update={
            "similarity": base.similarity.model_copy(update={"kind": kind}),
            "regularizer": base.regularizer.model_copy(update={"kind": RegularizerKind.NONE}),
            "lam": 0.0,
            "prefilter_sigma": prefilter_sigma if prefilter else None,
        })
        logger.info(f"Loss comparison: {kind.value} (prefilter={prefilter})")
        rows.append(_run("loss", kind.value, moving, fixed, config))

    for kind in regularizers:
        config = base.model_copy(update={
            "regularizer": base.regularizer.model_copy(update={"kind": kind}),
            "lam": lam if kind not in (RegularizerKind.NONE, RegularizerKind.GAUSSIAN) else 0.0,
        })
        logger.info(f"Regularizer comparison: {kind.value}")
        rows.append(_run("regularizer", kind.value, moving, fixed, config))
    return rows


def print_comparison_table(rows: List[Dict[str, Any]]) -> None:
    table = [
        [r["group"], r["method"], "yes" if r["prefilter"] else "no", f"{r['ssim']:.4f}", f"{r['mse_255']:.3f}",
         r["fold_count"], f"{r['fold_percent']:.3f}", f"{r['wall_time']:.1f}", r["status"]]
        for r in rows
    ]
    headers = ["Group", "Method", "Prefilter", "SSIM", "MSE", "|J| <= 0", "Fold %", "Time (s)", "Status"]
    print("\n" + tabulate(table, headers=headers, tablefmt="grid"))


def run_comparison(moving: np.ndarray, fixed: np.ndarray, base: RegistrationConfig, out_dir: Path,
                   **kwargs) -> List[Dict[str, Any]]:
    rows = compare_methods(moving, fixed, base, **kwargs)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.write_json({"config": base, "rows": rows}, out_dir / "comparison.json")
    print_comparison_table(rows)
    logger.info(f"Results saved to {out_dir / 'comparison.json'}")
    return rows
