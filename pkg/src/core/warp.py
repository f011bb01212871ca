"""Spatial transformer: resample the moving image at p - u(p).

Images are H x W arrays with values in [0, 1]; displacement fields are 2 x H x W
arrays holding (u_x, u_y) in pixels, x along columns and y along rows; label maps
are H x W non-negative integer arrays.
"""
import logging
from typing import Tuple, Union

import numpy as np

from . import ndtensor as nd
from .errors import DegenerateInputError, ShapeError
from .ndtensor import Tensor

logger = logging.getLogger("warp")

Image = np.ndarray
DisplacementField = np.ndarray
LabelMap = np.ndarray


def check_image(image: Union[Image, Tensor], name: str = "image") -> None:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 2:
        raise ShapeError(f"{name} must be H x W, got shape {data.shape}", shape=data.shape)
    if not np.all(np.isfinite(data)):
        raise DegenerateInputError(f"{name} contains non-finite values")


def check_field(field: Union[DisplacementField, Tensor], shape: Tuple[int, int]) -> None:
    data = field.data if isinstance(field, Tensor) else np.asarray(field)
    if data.shape != (2, *shape):
        raise ShapeError(f"field shape {data.shape} does not match image {shape}", field=data.shape, image=shape)
    if not np.all(np.isfinite(data)):
        raise DegenerateInputError("displacement field contains non-finite values")


def _sample_coords(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Source coordinates p - u(p), clamped to the border, plus in-range masks."""
    _, h, w = u.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=u.dtype), np.arange(w, dtype=u.dtype), indexing="ij")
    xs = cols - u[0]
    ys = rows - u[1]
    x_in = (xs >= 0) & (xs <= w - 1)
    y_in = (ys >= 0) & (ys <= h - 1)
    return np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1), x_in, y_in


def warp_bilinear(moving: Union[Image, Tensor], field: Union[DisplacementField, Tensor]) -> Tensor:
    """I_m o phi (p) = I_m(p - u(p)) with bilinear interpolation and border clamping.

    Differentiable w.r.t. both the field and the moving image. At integral sample
    coordinates the derivative is taken from the cell to the right/below.
    """
    moving = nd.as_tensor(moving)
    field = nd.as_tensor(field, dtype=moving.dtype)
    check_image(moving, "moving")
    h, w = moving.shape
    check_field(field, (h, w))
    if h < 2 or w < 2:
        raise ShapeError(f"warp needs at least 2x2 images, got {h}x{w}")

    img = moving.data
    xs, ys, x_in, y_in = _sample_coords(field.data)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    wx = xs - x0.astype(xs.dtype)
    wy = ys - y0.astype(ys.dtype)
    a = img[y0, x0]
    b = img[y0, x0 + 1]
    c = img[y0 + 1, x0]
    d = img[y0 + 1, x0 + 1]
    w_a = (1 - wx) * (1 - wy)
    w_b = wx * (1 - wy)
    w_c = (1 - wx) * wy
    w_d = wx * wy
    out = w_a * a + w_b * b + w_c * c + w_d * d

    def _back(g):
        # d out / d x_s, d out / d y_s; d x_s / d u_x = -1 inside the image, 0 when clamped
        dx = (1 - wy) * (b - a) + wy * (d - c)
        dy = (1 - wx) * (c - a) + wx * (d - b)
        gu = np.stack([-g * dx * x_in, -g * dy * y_in])
        gm = np.zeros_like(img)
        np.add.at(gm, (y0, x0), g * w_a)
        np.add.at(gm, (y0, x0 + 1), g * w_b)
        np.add.at(gm, (y0 + 1, x0), g * w_c)
        np.add.at(gm, (y0 + 1, x0 + 1), g * w_d)
        return gm, gu

    return nd.op_result(out.astype(img.dtype, copy=False), (moving, field), _back)


def warp_nearest(labels: LabelMap, field: Union[DisplacementField, Tensor]) -> LabelMap:
    """Label at round(p - u(p)) (halves round up), clamped to the image. Not differentiable."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be H x W, got shape {labels.shape}")
    u = field.data if isinstance(field, Tensor) else np.asarray(field, dtype=np.float64)
    check_field(u, labels.shape)
    xs, ys, _, _ = _sample_coords(u)
    xi = np.floor(xs + 0.5).astype(np.intp)
    yi = np.floor(ys + 0.5).astype(np.intp)
    return labels[yi, xi]
