"""Hourglass generator network mapping a (moving, fixed) stack to a displacement field."""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from . import ndtensor as nd
from .errors import ConfigError, FormatError, ShapeError
from .ndtensor import Tensor

logger = logging.getLogger("unet")

CHECKPOINT_MAGIC = b"UNPW"
CHECKPOINT_VERSION = 1


class UNetConfig(BaseModel):
    input_size: int = 128
    encoder_channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    decoder_channels: List[int] = Field(default_factory=lambda: [64, 32])
    head_channels: int = 16
    depth: int = 3
    seed: int = 0

    model_config = {"extra": "forbid"}

    @field_validator("encoder_channels", "decoder_channels")
    @classmethod
    def positive_widths(cls, v: List[int]) -> List[int]:
        if any(c <= 0 for c in v):
            raise ValueError(f"channel widths must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def mirror_structure(self) -> "UNetConfig":
        if len(self.encoder_channels) != self.depth:
            raise ValueError(f"depth {self.depth} needs {self.depth} encoder widths, got {self.encoder_channels}")
        if len(self.decoder_channels) != len(self.encoder_channels) - 1:
            raise ValueError("decoder level count must equal encoder level count - 1")
        if self.head_channels <= 0:
            raise ValueError("head_channels must be positive")
        return self


class UNetParams:
    """Ordered named weight/bias tensors; these are the optimization variables."""

    def __init__(self, tensors: Dict[str, Tensor], config: UNetConfig):
        self.tensors = tensors
        self.config = config

    def __iter__(self):
        return iter(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "UNetParams":
        return UNetParams(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            self.config,
        )


def layer_specs(config: UNetConfig) -> List[Tuple[str, str, int, int, int]]:
    """(name, kind, c_in, c_out, k) for every layer in forward order."""
    specs = []
    c = 2
    for level, width in enumerate(config.encoder_channels):
        specs.append((f"enc{level}.conv0", "conv", c, width, 3))
        specs.append((f"enc{level}.conv1", "conv", width, width, 3))
        c = width
    specs.append(("bottleneck.conv0", "conv", c, c, 3))
    specs.append(("bottleneck.conv1", "conv", c, c, 3))

    skips = list(reversed(config.encoder_channels))
    for level, width in enumerate(config.decoder_channels):
        specs.append((f"dec{level}.up", "upconv", c, width, 2))
        specs.append((f"dec{level}.conv0", "conv", width + skips[level], width, 3))
        specs.append((f"dec{level}.conv1", "conv", width, width, 3))
        c = width

    head = config.head_channels
    specs.append(("head.up", "upconv", c, head, 2))
    specs.append(("head.conv", "conv", head + skips[-1], head, 3))
    specs.append(("head.out", "conv", head, 2, 1))
    return specs


def init(config: UNetConfig, dtype=np.float32) -> UNetParams:
    """He-normal weights (std = sqrt(2 / (k^2 * C_in))), zero biases, seeded."""
    m = config.input_size
    if m % (2 ** config.depth) != 0:
        raise ConfigError(f"input size {m} must be divisible by 2^{config.depth}", input_size=m, depth=config.depth)

    rng = np.random.default_rng(config.seed)
    tensors: Dict[str, Tensor] = {}
    for name, kind, c_in, c_out, k in layer_specs(config):
        std = np.sqrt(2.0 / (k * k * c_in))
        shape = (c_out, c_in, k, k) if kind == "conv" else (c_in, c_out, k, k)
        tensors[f"{name}.weight"] = Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    logger.debug(f"Initialized {len(tensors)} tensors ({count_parameters_from_config(config)} parameters)")
    return UNetParams(tensors, config)


def count_parameters(params: UNetParams) -> int:
    return int(sum(t.size for t in params))


def count_parameters_from_config(config: UNetConfig) -> int:
    return int(sum(k * k * c_in * c_out + c_out for _, _, c_in, c_out, k in layer_specs(config)))


def _conv_relu(params: UNetParams, name: str, x: Tensor) -> Tensor:
    return nd.relu(nd.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=1))


def _up(params: UNetParams, name: str, x: Tensor) -> Tensor:
    return nd.upconv2x2(x, params[f"{name}.weight"], params[f"{name}.bias"])


def forward(params: UNetParams, moving: Union[Tensor, np.ndarray], fixed: Union[Tensor, np.ndarray]) -> Tensor:
    """f_theta(I_m, I_f): 2 x M x M displacement field (u_x, u_y) in pixels."""
    config = params.config
    dtype = params["head.out.weight"].dtype
    moving = nd.as_tensor(moving, dtype=dtype)
    fixed = nd.as_tensor(fixed, dtype=dtype)
    m = config.input_size
    if moving.shape != (m, m) or fixed.shape != (m, m):
        raise ShapeError(
            f"network expects {m}x{m} images, got moving {moving.shape} and fixed {fixed.shape}",
            moving=moving.shape,
            fixed=fixed.shape,
        )

    x = nd.concat_channels(nd.reshape(moving, (1, m, m)), nd.reshape(fixed, (1, m, m)))
    skips = []
    for level in range(config.depth):
        x = _conv_relu(params, f"enc{level}.conv0", x)
        x = _conv_relu(params, f"enc{level}.conv1", x)
        skips.append(x)
        x = nd.maxpool2x2(x)
    x = _conv_relu(params, "bottleneck.conv0", x)
    x = _conv_relu(params, "bottleneck.conv1", x)

    for level in range(len(config.decoder_channels)):
        x = nd.concat_channels(_up(params, f"dec{level}.up", x), skips[-1 - level])
        x = _conv_relu(params, f"dec{level}.conv0", x)
        x = _conv_relu(params, f"dec{level}.conv1", x)

    x = nd.concat_channels(_up(params, "head.up", x), skips[0])
    x = _conv_relu(params, "head.conv", x)
    # no activation: displacements are signed
    return nd.conv2d(x, params["head.out.weight"], params["head.out.bias"], padding=0)


# --- checkpoints ---

def save_params(params: UNetParams, path: Union[str, Path]) -> None:
    """UNPW file: magic, u16 version, u32 tensor count, then per tensor
    (u16 ndim, u32 dims..., little-endian float32 payload) in forward order."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params))]
    for t in params:
        chunks.append(struct.pack("<H", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info(f"Saved {len(params)} parameter tensors to {path}")


def load_params(path: Union[str, Path], config: UNetConfig, dtype=np.float32) -> UNetParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a UNPW checkpoint", offset=0)
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)

    expected = init(config, dtype=dtype)
    if count != len(expected):
        raise FormatError(f"{path}: {count} tensors but config needs {len(expected)}", offset=6)

    offset = 10
    loaded: Dict[str, Tensor] = {}
    for name, ref in expected.tensors.items():
        try:
            (ndim,) = struct.unpack_from("<H", raw, offset)
            shape = struct.unpack_from(f"<{ndim}I", raw, offset + 2)
        except struct.error:
            raise FormatError(f"{path}: truncated tensor header for {name}", offset=offset)
        offset += 2 + 4 * ndim
        if tuple(shape) != ref.shape:
            raise FormatError(f"{path}: {name} has shape {shape}, expected {ref.shape}", offset=offset)
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {name}", offset=len(raw))
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        loaded[name] = Tensor(data.astype(dtype), requires_grad=True)
        offset += nbytes
    return UNetParams(loaded, config)
