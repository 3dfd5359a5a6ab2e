import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from sadiagram.quality import PSNR_CAP, mse, psnr, ssim


def test_psnr_examples():
    a = np.full((8, 8, 3), 0.5)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_ssim_identical_and_negative(rng):
    a = rng.uniform(0, 1, (32, 32, 3))
    assert ssim(a, a) == 1.0
    assert ssim(a, 1.0 - a) < 0.5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_against_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (40, 37, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-6)
    ref = structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-4)
    assert psnr(a, b) == psnr(b, a)
    assert mse(a, b) == mse(b, a)
