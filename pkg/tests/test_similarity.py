import numpy as np
import pytest
from pydantic import ValidationError

from core import similarity as sim
from core.errors import DegenerateInputError, ShapeError
from core.similarity import SimilarityConfig, SimilarityKind
from helpers import (check_grad, histogram_mi, local_cc_oracle, mse_oracle, pcc_oracle, ssim_oracle)


@pytest.fixture
def pair(rng):
    return rng.uniform(0.05, 0.95, size=(16, 16)), rng.uniform(0.05, 0.95, size=(16, 16))


class TestOracles:
    """Vectorized measures against direct loops on many small random inputs."""

    @pytest.mark.parametrize("seed", range(100))
    def test_pixelwise_and_windowed(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(8, 13, size=2)
        d, f = rng.uniform(size=(h, w)), rng.uniform(size=(h, w))
        assert sim.mse(d, f).item() == pytest.approx(mse_oracle(d, f), rel=1e-10, abs=1e-14)
        assert sim.pcc(d, f).item() == pytest.approx(pcc_oracle(d, f), rel=1e-10, abs=1e-12)
        assert sim.local_cc(d, f).item() == pytest.approx(local_cc_oracle(d, f), rel=1e-10)
        assert sim.ssim(d, f).item() == pytest.approx(ssim_oracle(d, f), rel=1e-10, abs=1e-12)


class TestKnownValues:
    def test_identical_images(self, pair):
        d, _ = pair
        assert sim.mse(d, d).item() == 0.0
        assert sim.pcc(d, d).item() == pytest.approx(1.0, abs=1e-12)
        assert sim.ssim(d, d).item() == 1.0
        assert sim.ssim_pcc(d, d).item() == pytest.approx(0.0, abs=1e-12)

    def test_mse_constant_offset(self):
        d = np.full((8, 8), 0.25)
        assert sim.mse(d, d + 0.1).item() == pytest.approx(0.01)

    def test_pcc_is_affine_invariant(self, pair):
        d, f = pair
        assert sim.pcc(0.5 * d + 0.2, f).item() == pytest.approx(sim.pcc(d, f).item(), rel=1e-12)
        assert sim.pcc(1.0 - d, d).item() == pytest.approx(-1.0, abs=1e-12)

    def test_mi_is_symmetric_and_non_negative(self, pair):
        d, f = pair
        assert sim.mi(d, f).item() == pytest.approx(sim.mi(f, d).item(), rel=1e-10)
        assert sim.mi(d, f).item() >= -1e-12
        assert sim.mi(d, d).item() > sim.mi(d, f).item()

    def test_losses_are_lower_is_better(self, pair):
        d, f = pair
        for kind in SimilarityKind:
            config = SimilarityConfig(kind=kind)
            assert sim.loss(d, d, config).item() < sim.loss(d, f, config).item(), kind

    @pytest.mark.parametrize("seed", range(5))
    def test_ssim_pcc_is_even_blend(self, seed):
        rng = np.random.default_rng(seed)
        d, f = rng.uniform(size=(2, 16, 16))
        blended = sim.ssim_pcc(d, f).item()
        halves = [sim.loss(d, f, SimilarityConfig(kind=kind)).item() for kind in (SimilarityKind.SSIM, SimilarityKind.PCC)]
        assert blended == pytest.approx(0.5 * halves[0] + 0.5 * halves[1], rel=1e-12, abs=1e-12)


class TestMutualInformation:
    @staticmethod
    def _quantized_pair(seed, bins=16):
        rng = np.random.default_rng(seed)
        anchors = np.linspace(0.0, 1.0, bins)
        idx = rng.integers(0, bins, size=(24, 24))
        noise = rng.integers(0, bins, size=(24, 24))
        related = np.where(rng.uniform(size=idx.shape) < 0.7, (idx * 5) % bins, noise)
        return anchors[idx], anchors[related]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_histogram_on_quantized_images(self, seed):
        bins = 16
        d, f = self._quantized_pair(seed, bins)
        expected = histogram_mi(d, f, bins)
        value = sim.mi(d, f, sigma=0.25 / (bins - 1), bins=bins).item()
        assert value == pytest.approx(expected, rel=0.05)

    def test_error_shrinks_with_narrower_kernel(self):
        bins = 16
        d, f = self._quantized_pair(0, bins)
        expected = histogram_mi(d, f, bins)
        spacing = 1.0 / (bins - 1)
        errors = [abs(sim.mi(d, f, sigma=factor * spacing, bins=bins).item() - expected)
                  for factor in (1.0, 0.5, 0.25, 0.125)]
        assert all(later < earlier for earlier, later in zip(errors, errors[1:])), errors
        assert errors[-1] / expected < 1e-6

    def test_two_level_image_carries_one_binary_choice(self):
        d = np.zeros((16, 16))
        d[:, 8:] = 1.0
        assert sim.mi(d, d, sigma=0.005).item() == pytest.approx(np.log(2.0), rel=1e-4)

    def test_orthogonal_ramps_share_no_information(self):
        d = np.tile(np.linspace(0.0, 1.0, 32), (32, 1))
        value = sim.mi(d, d.T).item()
        assert -1e-9 < value < 0.05

    def test_rejects_unnormalized(self, pair):
        d, f = pair
        with pytest.raises(DegenerateInputError):
            sim.mi(d * 3.0, f)


class TestGradients:
    @pytest.mark.parametrize("kind", list(SimilarityKind))
    def test_loss_gradient(self, kind, pair):
        d, f = pair
        config = SimilarityConfig(kind=kind)
        check_grad(lambda t: sim.loss(t, f, config), d, tol=1e-5)


class TestErrors:
    def test_constant_image_has_no_correlation(self):
        with pytest.raises(DegenerateInputError):
            sim.pcc(np.full((8, 8), 0.5), np.random.default_rng(0).uniform(size=(8, 8)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sim.mse(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_even_window_rejected(self):
        with pytest.raises(ValidationError):
            SimilarityConfig(ssim_window=6)

    def test_mi_default_sigma_is_anchor_spacing(self):
        assert SimilarityConfig(mi_bins=32).resolved_mi_sigma == pytest.approx(1 / 31)
