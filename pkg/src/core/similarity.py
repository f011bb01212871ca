"""Differentiable image-similarity measures and the losses built from them.

Every ``*_loss`` value is "lower is better". The raw measures (``pcc``, ``ssim``,
...) run on the tape when their inputs require gradients and as plain numpy
evaluations otherwise, so the same definitions serve as evaluation metrics.
"""
import logging
from enum import Enum
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, model_validator

from . import ndtensor as nd
from .errors import DegenerateInputError, ShapeError
from .ndtensor import Tensor

logger = logging.getLogger("similarity")

ImageLike = Union[Tensor, np.ndarray]

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 7
CC_WINDOW = 3
CC_EPS = 1e-5
MI_BINS = 32
RANGE_TOLERANCE = 1e-6


class SimilarityKind(str, Enum):
    MSE = "mse"
    PCC = "pcc"
    LOCAL_CC = "cc"
    MI = "mi"
    SSIM = "ssim"
    SSIM_PCC = "ssim+pcc"


class SimilarityConfig(BaseModel):
    kind: SimilarityKind = SimilarityKind.SSIM_PCC
    ssim_window: int = SSIM_WINDOW
    c1: float = SSIM_C1
    c2: float = SSIM_C2
    cc_window: int = CC_WINDOW
    cc_eps: float = CC_EPS
    mi_bins: int = MI_BINS
    mi_sigma: Optional[float] = None  # None: anchor spacing

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def check_parameters(self) -> "SimilarityConfig":
        if self.ssim_window % 2 == 0 or self.cc_window % 2 == 0:
            raise ValueError("window sizes must be odd")
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be at least 2")
        if self.mi_sigma is not None and self.mi_sigma <= 0:
            raise ValueError("mi_sigma must be positive")
        if self.cc_eps <= 0 or self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilizing constants must be positive")
        return self

    @property
    def resolved_mi_sigma(self) -> float:
        return self.mi_sigma if self.mi_sigma is not None else 1.0 / (self.mi_bins - 1)


def _pair(d: ImageLike, f: ImageLike):
    d = nd.as_tensor(d)
    f = nd.as_tensor(f, dtype=d.dtype)
    if d.shape != f.shape or d.ndim != 2:
        raise ShapeError(f"images must share one H x W shape, got {d.shape} and {f.shape}", left=d.shape, right=f.shape)
    return d, f


def _require_variance(x: Tensor, name: str) -> None:
    if np.ptp(x.data) == 0:
        raise DegenerateInputError(f"{name} image has zero variance; correlation is undefined")


def mse(d: ImageLike, f: ImageLike) -> Tensor:
    d, f = _pair(d, f)
    return nd.mean(nd.square(f - d))


def pcc(d: ImageLike, f: ImageLike) -> Tensor:
    """Pearson correlation over all pixels."""
    d, f = _pair(d, f)
    _require_variance(d, "deformed")
    _require_variance(f, "fixed")
    dc = d - nd.mean(d)
    fc = f - nd.mean(f)
    return nd.sum(dc * fc) / nd.sqrt(nd.sum(dc * dc) * nd.sum(fc * fc))


def local_cc(d: ImageLike, f: ImageLike, window: int = CC_WINDOW, eps: float = CC_EPS) -> Tensor:
    """Sum over all valid windows of cross^2 / (var_f * var_d + eps), with centered window sums."""
    d, f = _pair(d, f)
    n = float(window * window)
    mu_d = nd.box_filter(d, window)
    mu_f = nd.box_filter(f, window)
    cross = (nd.box_filter(d * f, window) - mu_d * mu_f) * n
    var_d = (nd.box_filter(d * d, window) - mu_d * mu_d) * n
    var_f = (nd.box_filter(f * f, window) - mu_f * mu_f) * n
    return nd.sum(nd.square(cross) / (var_f * var_d + eps))


def _check_unit_range(x: Tensor, name: str) -> None:
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < -RANGE_TOLERANCE or hi > 1 + RANGE_TOLERANCE:
        raise DegenerateInputError(
            f"{name} intensities must be normalized to [0, 1], got [{lo:.4g}, {hi:.4g}]", low=lo, high=hi
        )


def parzen_joint(d: Tensor, f: Tensor, anchors: np.ndarray, sigma: float) -> Tensor:
    """Unnormalized joint density on the anchor grid: P[a, b] = mean_i G(f_i - a) G(d_i - b)."""
    anchors = anchors.astype(d.dtype)
    dd = d.data.ravel()[:, None]
    ff = f.data.ravel()[:, None]
    inv = 1.0 / (2.0 * sigma * sigma)
    wd = np.exp(-((dd - anchors) ** 2) * inv)
    wf = np.exp(-((ff - anchors) ** 2) * inv)
    count = dd.shape[0]
    joint = wf.T @ wd / count

    def _back(g):
        gd = np.sum((wf @ g) * wd * (-(dd - anchors) / (sigma * sigma)), axis=1) / count
        gf = np.sum((wd @ g.T) * wf * (-(ff - anchors) / (sigma * sigma)), axis=1) / count
        return gd.reshape(d.shape), gf.reshape(f.shape)

    return nd.op_result(joint, (d, f), _back)


def mi(d: ImageLike, f: ImageLike, sigma: Optional[float] = None, bins: int = MI_BINS) -> Tensor:
    """Mutual information (nats) from a Gaussian Parzen estimate of the joint intensity density."""
    d, f = _pair(d, f)
    if bins < 2:
        raise ShapeError(f"MI needs at least 2 bins, got {bins}")
    sigma = sigma if sigma is not None else 1.0 / (bins - 1)
    _check_unit_range(d, "deformed")
    _check_unit_range(f, "fixed")
    anchors = np.linspace(0.0, 1.0, bins)
    joint = parzen_joint(d, f, anchors, sigma)
    p = joint / nd.sum(joint)
    p_f = nd.sum(p, axis=1)
    p_d = nd.sum(p, axis=0)
    return nd.sum(nd.xlogx(p)) - nd.sum(nd.xlogx(p_f)) - nd.sum(nd.xlogx(p_d))


def ssim(d: ImageLike, f: ImageLike, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Mean SSIM over all valid uniform windows."""
    d, f = _pair(d, f)
    mu_d = nd.box_filter(d, window)
    mu_f = nd.box_filter(f, window)
    mu_df = mu_d * mu_f
    var_d = nd.box_filter(d * d, window) - mu_d * mu_d
    var_f = nd.box_filter(f * f, window) - mu_f * mu_f
    cov = nd.box_filter(d * f, window) - mu_df
    num = (mu_df * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_d * mu_d + mu_f * mu_f + c1) * (var_d + var_f + c2)
    return nd.mean(num / den)


def ssim_pcc(d: ImageLike, f: ImageLike, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Equal-weight SSIM + PCC loss: 0.5 (1 - SSIM) + 0.5 (1 - PCC)."""
    return (1.0 - ssim(d, f, window, c1, c2)) * 0.5 + (1.0 - pcc(d, f)) * 0.5


def loss(d: ImageLike, f: ImageLike, config: SimilarityConfig) -> Tensor:
    """L_sim for the configured kind."""
    kind = config.kind
    if kind == SimilarityKind.MSE:
        return mse(d, f)
    if kind == SimilarityKind.PCC:
        return 1.0 - pcc(d, f)
    if kind == SimilarityKind.LOCAL_CC:
        return -local_cc(d, f, config.cc_window, config.cc_eps)
    if kind == SimilarityKind.MI:
        return -mi(d, f, config.resolved_mi_sigma, config.mi_bins)
    if kind == SimilarityKind.SSIM:
        return 1.0 - ssim(d, f, config.ssim_window, config.c1, config.c2)
    if kind == SimilarityKind.SSIM_PCC:
        return ssim_pcc(d, f, config.ssim_window, config.c1, config.c2)
    raise ValueError(f"Unknown similarity kind: {kind}")


def needs_variance(kind: SimilarityKind) -> bool:
    return kind in (SimilarityKind.PCC, SimilarityKind.SSIM, SimilarityKind.SSIM_PCC)
