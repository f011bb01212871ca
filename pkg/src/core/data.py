"""Synthetic test data (phantoms, ground-truth warps, corruptions) and file I/O."""
import json
import logging
import struct
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from matplotlib import colormaps
from matplotlib.colors import CenteredNorm
from PIL import Image as PILImage
from pydantic import BaseModel, Field, field_validator

from . import ndtensor as nd
from .errors import FormatError, GenerationError
from .ndtensor import Tensor
from .warp import DisplacementField, Image, LabelMap, check_image, warp_bilinear

logger = logging.getLogger("data")

PathLike = Union[str, Path]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PGM_MAGIC = b"P5"
FIELD_MAGIC = b"DFLD"
FIELD_VERSION = 1
FIELD_HEADER = struct.Struct("<4sHII")
RAW_SUFFIXES = (".raw", ".f32")
QUANT_MAX = 65535
MAX_WARP_ATTEMPTS = 100


class PhantomKind(str, Enum):
    SHEPP_LOGAN = "shepp"
    ELLIPSE_BODY = "body"


# (intensity, semi-axis a, semi-axis b, center x, center y, rotation in degrees)
# Intensities add up where ellipses overlap.
SHEPP_LOGAN_ELLIPSES: List[Tuple[float, float, float, float, float, float]] = [
    (1.0, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.8, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.1, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.1, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.1, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.1, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]

# Torso-like phantom: (label, name, intensity, a, b, x, y, degrees). Later entries paint over earlier ones.
BODY_ELLIPSES: List[Tuple[int, str, float, float, float, float, float, float]] = [
    (1, "body", 0.35, 0.85, 0.62, 0.00, 0.00, 0.0),
    (2, "right_lung", 0.08, 0.26, 0.38, -0.42, 0.08, 10.0),
    (3, "left_lung", 0.08, 0.26, 0.38, 0.42, 0.08, -10.0),
    (4, "heart", 0.60, 0.18, 0.16, 0.05, -0.12, 20.0),
    (5, "spine", 1.00, 0.09, 0.09, 0.00, -0.45, 0.0),
    (6, "aorta", 0.70, 0.05, 0.05, -0.12, -0.33, 0.0),
    (7, "sternum", 0.85, 0.08, 0.04, 0.00, 0.52, 0.0),
]
BODY_LABELS: Dict[int, str] = {0: "background", **{e[0]: e[1] for e in BODY_ELLIPSES}}


class PhantomSpec(BaseModel):
    kind: PhantomKind = PhantomKind.SHEPP_LOGAN
    size: int = 128
    noise: Optional[float] = Field(None, ge=0.0)
    blur: Optional[float] = Field(None, gt=0.0)
    seed: int = 0

    model_config = {"extra": "forbid"}

    @field_validator("size")
    @classmethod
    def check_size(cls, v: int) -> int:
        if v < 32 or v % 8 != 0:
            raise ValueError(f"phantom size must be >= 32 and divisible by 8, got {v}")
        return v

    @property
    def ellipse_count(self) -> int:
        return len(SHEPP_LOGAN_ELLIPSES if self.kind == PhantomKind.SHEPP_LOGAN else BODY_ELLIPSES)


class SyntheticWarpSpec(BaseModel):
    max_displacement: float = Field(8.0, ge=0.0)
    smoothness: float = Field(16.0, ge=2.0)
    seed: int = 0

    model_config = {"extra": "forbid"}


# --- generators ---

def _ellipse_mask(size: int, a: float, b: float, x0: float, y0: float, degrees: float) -> np.ndarray:
    coords = 2.0 * (np.arange(size) + 0.5) / size - 1.0
    x = coords[None, :]
    y = -coords[:, None]  # y grows upward
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    xr = (x - x0) * c + (y - y0) * s
    yr = -(x - x0) * s + (y - y0) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def _shepp_logan(size: int) -> Tuple[Image, LabelMap]:
    image = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.int64)
    for label, (intensity, a, b, x0, y0, deg) in enumerate(SHEPP_LOGAN_ELLIPSES, start=1):
        mask = _ellipse_mask(size, a, b, x0, y0, deg)
        image[mask] += intensity
        labels[mask] = label
    return np.clip(image, 0.0, 1.0), labels


def _ellipse_body(size: int) -> Tuple[Image, LabelMap]:
    image = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.int64)
    for label, _, intensity, a, b, x0, y0, deg in BODY_ELLIPSES:
        mask = _ellipse_mask(size, a, b, x0, y0, deg)
        image[mask] = intensity
        labels[mask] = label
    return image, labels


def make_phantom(spec: PhantomSpec) -> Tuple[Image, LabelMap]:
    """Intensity image in [0, 1] plus a label map with one label per ellipse."""
    if spec.kind == PhantomKind.SHEPP_LOGAN:
        image, labels = _shepp_logan(spec.size)
    else:
        image, labels = _ellipse_body(spec.size)
    if spec.noise or spec.blur:
        image = corrupt(image, noise_sigma=spec.noise, blur_sigma=spec.blur, seed=spec.seed)
    logger.debug(f"Phantom {spec.kind.value} {spec.size}x{spec.size}: {len(np.unique(labels)) - 1} labels")
    return image, labels


def corrupt(image: Image, noise_sigma: Optional[float] = None, blur_sigma: Optional[float] = None, seed: int = 0) -> Image:
    """Gaussian blur, then additive Gaussian noise scaled by the clean image's std, clamped to [0, 1].

    Without either setting the image comes back unchanged.
    """
    check_image(image)
    clean = np.asarray(image, dtype=np.float64)
    out = clean.copy()
    if blur_sigma:
        out = nd.gaussian_blur(Tensor(out), blur_sigma).data
    if noise_sigma:
        rng = np.random.default_rng(seed)
        out = np.clip(out + rng.normal(0.0, noise_sigma * clean.std(), size=out.shape), 0.0, 1.0)
    return out


def make_ground_truth_warp(spec: SyntheticWarpSpec, size: int) -> DisplacementField:
    """Smoothed random field rescaled so max |u| equals max_displacement, with no folded sites."""
    from .analyze import fold_report

    if spec.max_displacement == 0:
        return np.zeros((2, size, size))
    rng = np.random.default_rng(spec.seed)
    for attempt in range(1, MAX_WARP_ATTEMPTS + 1):
        raw = rng.standard_normal((2, size, size))
        smooth = nd.gaussian_blur(Tensor(raw), spec.smoothness).data
        peak = np.hypot(smooth[0], smooth[1]).max()
        if peak == 0:
            continue
        field = smooth * (spec.max_displacement / peak)
        folds = fold_report(field).fold_count
        if folds == 0:
            logger.debug(f"Ground-truth warp accepted on attempt {attempt}")
            return field
        logger.debug(f"Ground-truth warp attempt {attempt} folds {folds} sites, retrying")
    logger.error(f"No fold-free warp after {MAX_WARP_ATTEMPTS} attempts")
    raise GenerationError(
        f"could not generate a fold-free warp with max displacement {spec.max_displacement} and "
        f"smoothness {spec.smoothness}; try a smaller max_displacement or a larger smoothness",
        attempts=MAX_WARP_ATTEMPTS,
    )


def make_synthetic_pair(phantom: PhantomSpec, warp: SyntheticWarpSpec) -> Tuple[Image, Image, LabelMap, DisplacementField]:
    """(moving, fixed, fixed labels, ground truth): the phantom is the fixed image and its warped copy the moving one."""
    fixed, labels = make_phantom(phantom)
    truth = make_ground_truth_warp(warp, phantom.size)
    moving = warp_bilinear(fixed, truth).data
    return moving, fixed, labels, truth


# --- image I/O ---

def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _decode_png(raw: bytes, path: PathLike) -> np.ndarray:
    if len(raw) < 33:
        raise FormatError(f"{path}: PNG header truncated", offset=len(raw))
    if raw[12:16] != b"IHDR":
        raise FormatError(f"{path}: first PNG chunk is not IHDR", offset=12)
    bit_depth, color_type = raw[24], raw[25]
    if color_type != 0:
        raise FormatError(f"{path}: only grayscale PNG is supported, color type {color_type}", offset=25)
    if bit_depth not in (8, 16):
        raise FormatError(f"{path}: unsupported PNG bit depth {bit_depth}", offset=24)
    try:
        with PILImage.open(path) as img:
            values = np.array(img)
    except (OSError, SyntaxError) as e:
        raise FormatError(f"{path}: corrupt PNG payload: {e}", offset=33) from e
    return values.astype(np.float64) / float((1 << bit_depth) - 1)


def _pgm_header(raw: bytes, path: PathLike) -> Tuple[int, int, int, int]:
    """Parse a binary PGM header; returns width, height, maxval and the payload offset."""
    fields: List[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed PGM header", offset=pos)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: PGM header not terminated by whitespace", offset=pos)
    width, height, maxval = fields
    if width == 0 or height == 0 or not 0 < maxval <= QUANT_MAX:
        raise FormatError(f"{path}: invalid PGM dimensions or maxval {fields}", offset=2)
    return width, height, maxval, pos + 1


def _decode_pgm(raw: bytes, path: PathLike) -> np.ndarray:
    width, height, maxval, offset = _pgm_header(raw, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = offset + width * height * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(f"{path}: PGM payload truncated, expected {expected} bytes", offset=len(raw))
    values = np.frombuffer(raw, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    return values.astype(np.float64) / float(maxval)


def _sidecar(path: PathLike) -> Path:
    return Path(f"{path}.json")


def _decode_raw(raw: bytes, path: PathLike) -> np.ndarray:
    sidecar = _sidecar(path)
    try:
        header = json.loads(sidecar.read_text())
        width, height = int(header["width"]), int(header["height"])
    except FileNotFoundError as e:
        raise FormatError(f"{path}: raw image needs a sidecar header at {sidecar}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{sidecar}: malformed sidecar header: {e}", offset=0) from e
    if header.get("dtype", "float32") != "float32":
        raise FormatError(f"{sidecar}: raw images must be float32, got {header.get('dtype')}")
    if len(raw) != 4 * width * height:
        raise FormatError(f"{path}: raw payload holds {len(raw)} bytes, expected {4 * width * height}",
                          offset=min(len(raw), 4 * width * height))
    return np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(np.float64)


def read_image(path: PathLike) -> Image:
    """Load a grayscale image normalized by its declared bit depth (PNG, PGM or raw float32)."""
    raw = _read_bytes(path)
    if raw.startswith(PNG_SIGNATURE):
        image = _decode_png(raw, path)
    elif raw.startswith(PGM_MAGIC):
        image = _decode_pgm(raw, path)
    elif Path(path).suffix.lower() in RAW_SUFFIXES:
        image = _decode_raw(raw, path)
    else:
        raise FormatError(f"{path}: unrecognized image format", offset=0)
    if image.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image, got shape {image.shape}")
    logger.debug(f"Read {path}: {image.shape[1]}x{image.shape[0]}")
    return image


def _quantize(image: Image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * QUANT_MAX).astype(np.uint16)


def write_image(image: Image, path: PathLike) -> None:
    """Write an image; PNG and PGM are quantized to 16 bits, raw keeps float32."""
    check_image(image)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        path.write_bytes(np.asarray(image, dtype="<f4").tobytes())
        _sidecar(path).write_text(json.dumps({"width": image.shape[1], "height": image.shape[0], "dtype": "float32"}))
    else:
        # 16-bit PPM output is binary P5 with maxval 65535
        PILImage.fromarray(_quantize(image)).save(path, format="PPM" if suffix == ".pgm" else "PNG")


def read_labels(path: PathLike) -> LabelMap:
    """Label maps are PNGs of raw integer labels, no normalization."""
    try:
        with PILImage.open(path) as img:
            labels = np.array(img)
    except (OSError, SyntaxError) as e:
        raise FormatError(f"{path}: cannot decode label map: {e}", offset=0) from e
    if labels.ndim != 2:
        raise FormatError(f"{path}: label map must be single-channel, got shape {labels.shape}")
    return labels.astype(np.int64)


def write_labels(labels: LabelMap, path: PathLike) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > QUANT_MAX:
        raise FormatError(f"label values must lie in [0, {QUANT_MAX}]")
    dtype = np.uint8 if labels.max() <= 255 else np.uint16
    PILImage.fromarray(labels.astype(dtype)).save(path, format="PNG")


def write_heatmap(values: np.ndarray, path: PathLike, cmap: str = "RdBu") -> None:
    """Color-map a scalar grid with a diverging map centered on zero and save as RGB PNG."""
    limit = float(np.abs(values).max()) or 1.0
    rgba = colormaps[cmap](CenteredNorm(vcenter=0.0, halfrange=limit)(values))
    PILImage.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path, format="PNG")


# --- displacement field I/O ---

def write_field(u: DisplacementField, path: PathLike) -> None:
    """DFLD: magic, u16 version, u32 width, u32 height, then (u_x, u_y) float32 pairs row-major."""
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[0] != 2:
        raise FormatError(f"displacement field must be 2 x H x W, got {u.shape}")
    _, h, w = u.shape
    payload = np.stack([u[0], u[1]], axis=-1).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, w, h))
        f.write(payload)


def read_field(path: PathLike) -> DisplacementField:
    raw = _read_bytes(path)
    if len(raw) < FIELD_HEADER.size:
        raise FormatError(f"{path}: DFLD header truncated", offset=len(raw))
    magic, version, width, height = FIELD_HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FIELD_MAGIC!r}", offset=0)
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported DFLD version {version}", offset=4)
    if width == 0 or height == 0:
        raise FormatError(f"{path}: empty field {width}x{height}", offset=6)
    expected = FIELD_HEADER.size + 8 * width * height
    if len(raw) < expected:
        raise FormatError(f"{path}: DFLD payload truncated, expected {expected} bytes", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after DFLD payload", offset=expected)
    pairs = np.frombuffer(raw, dtype="<f4", offset=FIELD_HEADER.size).reshape(height, width, 2)
    return np.ascontiguousarray(pairs.transpose(2, 0, 1)).astype(np.float32)


# --- JSON ---

class ArrayJSONEncoder(json.JSONEncoder):
    """JSON encoder for pydantic models, numpy scalars/arrays, enums and paths."""

    def default(self, obj: Any) -> Any:
        if hasattr(obj, "model_dump"):
            return obj.model_dump(mode="json")
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, Path):
            return str(obj)
        return super().default(obj)


def write_json(obj: Any, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, cls=ArrayJSONEncoder, indent=2)
        f.write("\n")


def read_json(path: PathLike) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
