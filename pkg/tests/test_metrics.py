import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrti_vsr.autodiff import DimensionError
from lrti_vsr.metrics import psnr_rgb, ssim_rgb


def psnr_oracle(a, b):
    total = 0.0
    for v in np.ndindex(a.shape):
        total += (a[v] - b[v]) ** 2
    return 10 * np.log10(a.size / total)


def ssim_oracle(a, b):
    """Direct sliding-window SSIM with an explicitly built Gaussian window."""
    g = np.array([np.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)])
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        vals = []
        for i in range(x.shape[0] - 10):
            for j in range(x.shape[1] - 10):
                px, py = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
                mx, my = (win * px).sum(), (win * py).sum()
                vx = (win * (px - mx) ** 2).sum()
                vy = (win * (py - my) ** 2).sum()
                cov = (win * (px - mx) * (py - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        scores.append(np.mean(vals))
    return float(np.mean(scores))


def test_psnr_cap_and_closed_form(rng):
    a = rng.random((8, 8, 3))
    assert psnr_rgb(a, a) == 99.0
    b = np.full((4, 4, 3), 0.5)
    assert psnr_rgb(b, b + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_oracle(rng):
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    assert abs(psnr_rgb(a, b) - psnr_oracle(a, b)) < 1e-9


def test_psnr_decreases_with_noise(rng):
    a = rng.random((16, 16, 3))
    noise = rng.standard_normal(a.shape)
    vals = [psnr_rgb(a, a + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr_rgb(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(DimensionError):
        ssim_rgb(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_ssim_identity_and_anticorrelation(rng):
    a = rng.random((16, 16, 3))
    assert ssim_rgb(a, a) == pytest.approx(1.0, abs=1e-12)
    binary = (rng.random((16, 16, 3)) > 0.5).astype(float)
    assert ssim_rgb(binary, 1 - binary) < 0


def test_ssim_matches_oracle(rng):
    a = rng.random((14, 13, 3))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert abs(ssim_rgb(a, b) - ssim_oracle(a, b)) < 1e-6


def test_ssim_window_too_large():
    with pytest.raises(DimensionError):
        ssim_rgb(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_ssim_bounded_and_symmetric(seed, amp):
    rng = np.random.default_rng(seed)
    a = rng.random((12, 12, 3))
    b = np.clip(a + amp * rng.standard_normal(a.shape), 0, 1)
    s = ssim_rgb(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim_rgb(b, a), abs=1e-12)
    if np.array_equal(a, b):
        assert s == pytest.approx(1.0, abs=1e-12)
    else:
        assert s < 1.0
