"""Per-pair registration: optimize a freshly initialized generator network on one image pair.

Nothing is trained ahead of time and nothing persists between calls; every
``register`` call starts from a seeded random network.
"""
import logging
import time
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from . import ndtensor as nd
from . import regularize, similarity, unet
from .errors import DegenerateInputError, NumericalError, ShapeError
from .ndtensor import Tape, Tensor
from .regularize import RegularizerConfig, RegularizerKind
from .similarity import SimilarityConfig
from .unet import UNetConfig, UNetParams
from .warp import check_image, warp_bilinear, warp_nearest

logger = logging.getLogger("engine")

SMALL_IMAGE_ITERATIONS = 300
LARGE_IMAGE_ITERATIONS = 1500


class Precision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self):
        return np.float32 if self == Precision.FLOAT32 else np.float64


class AdamConfig(BaseModel):
    kind: Literal["adam"] = "adam"
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class SGDConfig(BaseModel):
    kind: Literal["sgd"] = "sgd"
    momentum: float = Field(0.9, ge=0.0, lt=1.0)


OptimizerConfig = Annotated[Union[AdamConfig, SGDConfig], Field(discriminator="kind")]


class RegistrationConfig(BaseModel):
    iterations: int = Field(SMALL_IMAGE_ITERATIONS, ge=1)
    similarity: SimilarityConfig = Field(default_factory=SimilarityConfig)
    regularizer: RegularizerConfig = Field(default_factory=RegularizerConfig)
    lam: float = Field(0.0, ge=0.0, description="weight of the regularizer penalty")
    learning_rate: float = Field(1e-3, gt=0.0)
    optimizer: OptimizerConfig = Field(default_factory=AdamConfig)
    seed: int = 0
    prefilter_sigma: Optional[float] = Field(None, gt=0.0)
    precision: Precision = Precision.FLOAT32
    network: UNetConfig = Field(default_factory=UNetConfig)

    model_config = {"extra": "forbid"}

    @classmethod
    def defaults_for(cls, size: int, **overrides) -> "RegistrationConfig":
        """Config with the iteration default sized for an M x M pair."""
        iterations = SMALL_IMAGE_ITERATIONS if size <= 128 else LARGE_IMAGE_ITERATIONS
        overrides.setdefault("iterations", iterations)
        return cls(**overrides)


@dataclass
class RegistrationResult:
    field: np.ndarray
    deformed: np.ndarray
    loss_trace: List[Tuple[float, float, float]]
    wall_time: float
    iterations_run: int
    deformed_labels: Optional[np.ndarray] = None
    params: Optional[UNetParams] = dc_field(default=None, repr=False)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1][0]

    @property
    def mean_displacement(self) -> float:
        return float(np.mean(np.hypot(self.field[0], self.field[1])))


# --- optimizers ---

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: UNetParams) -> "AdamState":
        return cls([np.zeros_like(t.data) for t in params], [np.zeros_like(t.data) for t in params])


@dataclass
class SGDState:
    velocity: List[np.ndarray]

    @classmethod
    def for_params(cls, params: UNetParams) -> "SGDState":
        return cls([np.zeros_like(t.data) for t in params])


def _check_state(params: UNetParams, grads: List[Optional[np.ndarray]], buffers: List[np.ndarray]) -> None:
    if len(grads) != len(params) or len(buffers) != len(params):
        raise ShapeError(f"optimizer state holds {len(buffers)} buffers for {len(params)} parameters")
    for t, b in zip(params, buffers):
        if b.shape != t.shape:
            raise ShapeError(f"optimizer buffer {b.shape} does not match parameter {t.shape}")


def adam_step(
    params: UNetParams,
    grads: List[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update applied in place."""
    _check_state(params, grads, state.m)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for t, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(t.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params: UNetParams, grads: List[Optional[np.ndarray]], state: SGDState, lr: float, momentum: float = 0.9) -> None:
    _check_state(params, grads, state.velocity)
    for t, g, vel in zip(params, grads, state.velocity):
        if g is None:
            continue
        vel *= momentum
        vel += g
        t.data -= lr * vel


def _optimizer(config: RegistrationConfig, params: UNetParams):
    opt = config.optimizer
    if isinstance(opt, AdamConfig):
        state = AdamState.for_params(params)
        return lambda grads: adam_step(params, grads, state, config.learning_rate, opt.beta1, opt.beta2, opt.eps)
    state = SGDState.for_params(params)
    return lambda grads: sgd_step(params, grads, state, config.learning_rate, opt.momentum)


# --- registration ---

def prefilter_fixed(fixed: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur of the fixed image, applied once before optimization."""
    check_image(fixed, "fixed")
    return nd.gaussian_blur(Tensor(np.asarray(fixed)), sigma).data


def _displacement(params: UNetParams, moving: Tensor, fixed: Tensor, regularizer: RegularizerConfig) -> Tensor:
    field = unet.forward(params, moving, fixed)
    if regularizer.kind == RegularizerKind.GAUSSIAN:
        field = regularize.gaussian_smooth_field(field, regularizer.sigma)
    return field


def register(
    moving: np.ndarray,
    fixed: np.ndarray,
    config: RegistrationConfig,
    labels: Optional[np.ndarray] = None,
    progress: bool = False,
) -> RegistrationResult:
    """Optimize a fresh network so that moving o phi matches fixed; returns phi and I_d."""
    check_image(moving, "moving")
    check_image(fixed, "fixed")
    if moving.shape != fixed.shape or moving.shape[0] != moving.shape[1]:
        raise ShapeError(
            f"moving {moving.shape} and fixed {fixed.shape} must share one square shape",
            moving=moving.shape,
            fixed=fixed.shape,
        )
    if labels is not None and np.shape(labels) != moving.shape:
        raise ShapeError(
            f"labels {np.shape(labels)} must match the moving image {moving.shape}",
            labels=np.shape(labels),
            moving=moving.shape,
        )
    if similarity.needs_variance(config.similarity.kind) and np.ptp(fixed) == 0:
        raise DegenerateInputError(f"fixed image is constant; {config.similarity.kind.value} is undefined")

    dtype = config.precision.dtype
    size = moving.shape[0]
    if config.prefilter_sigma:
        fixed = prefilter_fixed(fixed, config.prefilter_sigma)

    net_config = config.network.model_copy(update={"input_size": size, "seed": config.seed})
    params = unet.init(net_config, dtype=dtype)
    step = _optimizer(config, params)
    moving_t = Tensor(np.asarray(moving, dtype=dtype))
    fixed_t = Tensor(np.asarray(fixed, dtype=dtype))

    logger.info(
        f"Registering {size}x{size} pair: loss={config.similarity.kind.value}, "
        f"reg={config.regularizer.kind.value}, lambda={config.lam}, iterations={config.iterations}, seed={config.seed}"
    )
    start = time.perf_counter()
    trace: List[Tuple[float, float, float]] = []
    for it in tqdm(range(config.iterations), desc="Registering", unit="iter", disable=not progress):
        params.zero_grad()
        with Tape():
            field = _displacement(params, moving_t, fixed_t, config.regularizer)
            deformed = warp_bilinear(moving_t, field)
            sim = similarity.loss(deformed, fixed_t, config.similarity)
            reg = regularize.penalty(field, config.regularizer) if config.lam > 0 else None
            total = sim + reg * config.lam if reg is not None else sim
            if not np.isfinite(total.item()):
                logger.error(f"Loss became non-finite at iteration {it}")
                raise NumericalError(f"loss became non-finite at iteration {it}", iteration=it)
            nd.backward(total)

        sim_value = sim.item()
        reg_value = reg.item() if reg is not None else 0.0
        trace.append((sim_value + config.lam * reg_value, sim_value, reg_value))
        step([t.grad for t in params])
        if it % 50 == 0:
            logger.debug(f"iter {it}: total={trace[-1][0]:.6f} sim={sim_value:.6f} reg={reg_value:.6f}")

    final_field = _displacement(params, moving_t, fixed_t, config.regularizer).data
    deformed_final = warp_bilinear(moving_t, final_field).data
    elapsed = time.perf_counter() - start
    logger.info(f"Registration finished in {elapsed:.1f}s, final loss {trace[-1][0]:.6f}")

    return RegistrationResult(
        field=final_field,
        deformed=deformed_final,
        loss_trace=trace,
        wall_time=elapsed,
        iterations_run=len(trace),
        deformed_labels=warp_nearest(labels, final_field) if labels is not None else None,
        params=params,
    )
