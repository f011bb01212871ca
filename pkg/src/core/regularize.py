"""Deformation-field regularizers and the Gaussian field-smoothing alternative.

Spatial gradients use forward differences; the last row/column, where a forward
difference does not exist, contributes nothing.
"""
import logging
from enum import Enum
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from . import ndtensor as nd
from .errors import ShapeError
from .ndtensor import Tensor

logger = logging.getLogger("regularize")

FieldLike = Union[Tensor, np.ndarray]


class RegularizerKind(str, Enum):
    NONE = "none"
    DIFFUSION = "diffusion"
    TV = "tv"
    DIFFUSION_JACOBIAN = "diffjac"
    GAUSSIAN = "gauss"


class RegularizerConfig(BaseModel):
    kind: RegularizerKind = RegularizerKind.NONE
    alpha: float = Field(1.0, ge=0.0)
    sigma: float = Field(1.0, gt=0.0)

    model_config = {"extra": "forbid"}

    @property
    def is_penalty(self) -> bool:
        return self.kind in (RegularizerKind.DIFFUSION, RegularizerKind.TV, RegularizerKind.DIFFUSION_JACOBIAN)


def _as_field(u: FieldLike) -> Tensor:
    u = nd.as_tensor(u)
    if u.ndim != 3 or u.shape[0] != 2 or min(u.shape[1:]) < 2:
        raise ShapeError(f"displacement field must be 2 x H x W with H, W >= 2, got {u.shape}", shape=u.shape)
    return u


def diffusion(u: FieldLike) -> Tensor:
    """Sum of squared forward differences over both channels and axes."""
    u = _as_field(u)
    return nd.sum(nd.square(nd.forward_diff(u, 2))) + nd.sum(nd.square(nd.forward_diff(u, 1)))


def tv(u: FieldLike) -> Tensor:
    """L1 norm of the forward differences."""
    u = _as_field(u)
    return nd.sum(nd.abs(nd.forward_diff(u, 2))) + nd.sum(nd.abs(nd.forward_diff(u, 1)))


def jacobian_determinant(u: FieldLike) -> Tensor:
    """det(I + grad u) on the (H-1) x (W-1) sites where both forward differences exist."""
    u = _as_field(u)
    _, h, w = u.shape
    ux, uy = nd.split_channels(u, 1)

    def _d(c: Tensor, axis: int) -> Tensor:
        return nd.crop(nd.forward_diff(c, axis), h - 1, w - 1)

    dux_dx, dux_dy = _d(ux, 2), _d(ux, 1)
    duy_dx, duy_dy = _d(uy, 2), _d(uy, 1)
    det = (dux_dx + 1.0) * (duy_dy + 1.0) - dux_dy * duy_dx
    return nd.reshape(det, (h - 1, w - 1))


def nonneg_jacobian_penalty(u: FieldLike) -> Tensor:
    """Sum of |det J| - det J: zero where det >= 0, 2|det| where det < 0."""
    det = jacobian_determinant(u)
    return nd.sum(nd.abs(det) - det)


def combined_diffusion_jacobian(u: FieldLike, alpha: float) -> Tensor:
    return diffusion(u) + nonneg_jacobian_penalty(u) * alpha


def gaussian_smooth_field(u: FieldLike, sigma: float) -> Tensor:
    """Convolve each displacement channel with a normalized Gaussian (reflective border)."""
    return nd.gaussian_blur(_as_field(u), sigma)


def penalty(u: FieldLike, config: RegularizerConfig) -> Optional[Tensor]:
    """R(phi) for penalty kinds; None for kinds that add no term to the loss."""
    if config.kind == RegularizerKind.DIFFUSION:
        return diffusion(u)
    if config.kind == RegularizerKind.TV:
        return tv(u)
    if config.kind == RegularizerKind.DIFFUSION_JACOBIAN:
        return combined_diffusion_jacobian(u, config.alpha)
    return None
