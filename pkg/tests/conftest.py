import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parent))

from core.data import PhantomKind, PhantomSpec, make_phantom  # noqa: E402
from core.unet import UNetConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    """A narrow network so registration tests stay fast."""
    return UNetConfig(input_size=32, encoder_channels=[4, 8, 8], decoder_channels=[8, 8], head_channels=4, depth=3)


@pytest.fixture
def shepp32():
    image, labels = make_phantom(PhantomSpec(kind=PhantomKind.SHEPP_LOGAN, size=32))
    return image, labels


@pytest.fixture
def shepp64():
    image, labels = make_phantom(PhantomSpec(kind=PhantomKind.SHEPP_LOGAN, size=64))
    return image, labels
