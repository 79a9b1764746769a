"""Preprocessing chain against brute-force oracles (all comparisons exact)."""

from fractions import Fraction

import numpy as np
import pytest

from thermoseg.irprep import (PreprocessConfig, box_filter,
                              crop, default_smooth_kernel, otsu_threshold,
                              preprocess_pipeline, remap_to_8bit,
                              remove_background)
from thermoseg.phantom import PhantomParams, generate_subject
from thermoseg.rng import Rng


def box_filter_oracle(img: np.ndarray, k: int) -> np.ndarray:
    """Naive O(H*W*k^2) mean with edge replication and round-half-up."""
    r = k // 2
    padded = np.pad(img.astype(np.int64), r, mode="edge")
    h, w = img.shape
    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            s = int(padded[i:i + k, j:j + k].sum())
            out[i, j] = (2 * s + k * k) // (2 * k * k)
    return out.astype(np.uint16)


def otsu_oracle(pixels: np.ndarray) -> int:
    """Exhaustive search maximizing w0*w1*(mu0-mu1)^2 with exact rationals."""
    hist = np.bincount(pixels.ravel(), minlength=65536).astype(np.int64)
    values = np.nonzero(hist)[0]
    total = pixels.size
    total_sum = int(np.dot(np.arange(65536), hist))
    best_t, best_var = int(values[0]), Fraction(-1)
    for t in values[:-1]:
        below = hist[:t + 1]
        w0 = int(below.sum())
        w1 = total - w0
        s0 = int(np.dot(np.arange(t + 1), below))
        mu0 = Fraction(s0, w0)
        mu1 = Fraction(total_sum - s0, w1)
        var = Fraction(w0, total) * Fraction(w1, total) * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, int(t)
    return best_t


# ---------------------------------------------------------------------------
# box filter


def test_box_filter_k1_is_identity():
    img = Rng(0).uniform((9, 9), 0, 65535).astype(np.uint16)
    assert np.array_equal(box_filter(img, 1), img)


def test_box_filter_constant_stays_constant():
    img = np.full((12, 12), 777, dtype=np.uint16)
    assert np.array_equal(box_filter(img, 5), img)


@pytest.mark.parametrize("k,shape,seed", [(5, (16, 16), 1), (3, (7, 11), 2),
                                          (7, (20, 9), 3), (9, (9, 9), 4)])
def test_box_filter_matches_naive_oracle_exactly(k, shape, seed):
    img = Rng(seed).uniform(shape, 0, 65535).astype(np.uint16)
    assert np.array_equal(box_filter(img, k), box_filter_oracle(img, k))


def test_box_filter_rejects_even_or_oversized_kernels():
    img = np.zeros((8, 8), dtype=np.uint16)
    with pytest.raises(ValueError):
        box_filter(img, 4)
    with pytest.raises(ValueError):
        box_filter(img, 9)


# ---------------------------------------------------------------------------
# Otsu


def test_otsu_bimodal_tie_breaks_to_smallest_t():
    img = np.array([[50] * 8, [200] * 8], dtype=np.uint16)
    result = otsu_threshold(img)
    assert result.threshold == 50
    assert not result.degenerate


def test_otsu_constant_image_is_degenerate():
    result = otsu_threshold(np.full((4, 4), 1234, dtype=np.uint16))
    assert result.threshold == 1234
    assert result.degenerate


def test_otsu_matches_exhaustive_oracle_on_100_seeded_images():
    for seed in range(100):
        rng = Rng(seed)
        # small alphabets keep the oracle cheap and force frequent ties
        levels = 2 + int(rng.uniform() * 12)
        vals = rng.uniform((levels,), 0, 4096).astype(np.uint16)
        idx = (rng.uniform((24 * 24,)) * levels).astype(int)
        img = vals[idx].reshape(24, 24)
        assert otsu_threshold(img).threshold == otsu_oracle(img)


# ---------------------------------------------------------------------------
# background removal and remap


def test_remove_background_identity_below_min():
    img = Rng(7).uniform((6, 6), 1000, 2000).astype(np.uint16)
    assert np.array_equal(remove_background(img, 10), img)


def test_remove_background_saturates_at_max():
    img = Rng(8).uniform((6, 6), 1000, 2000).astype(np.uint16)
    out = remove_background(img, 60000)
    assert np.all(out == 60000)


def test_bimodal_background_maps_to_zero_after_remap():
    img = np.array([[50] * 8, [200] * 8], dtype=np.uint16)
    t = otsu_threshold(img).threshold
    cleaned = remove_background(img, t)
    gray = remap_to_8bit(cleaned)
    assert np.all(gray[0] == 0)
    assert np.all(gray[1] == 255)


def test_remap_endpoints_and_constant():
    img = np.array([[0, 65535]], dtype=np.uint16)
    assert np.array_equal(remap_to_8bit(img), [[0, 255]])
    assert np.all(remap_to_8bit(np.full((3, 3), 9, dtype=np.uint16)) == 0)


def test_remap_three_values_round_half_up():
    img = np.array([[100, 150, 200]], dtype=np.uint16)
    assert np.array_equal(remap_to_8bit(img), [[0, 128, 255]])


def test_remap_is_monotone():
    img = Rng(9).uniform((32, 32), 0, 65535).astype(np.uint16)
    out = remap_to_8bit(img)
    a = img.ravel().astype(int)
    b = out.ravel().astype(int)
    order = np.argsort(a, kind="stable")
    assert np.all(np.diff(b[order]) >= 0)


# ---------------------------------------------------------------------------
# crop


def test_crop_cases():
    img = Rng(10).uniform((8, 10), 0, 255).astype(np.uint16)
    assert np.array_equal(crop(img, (0, 0, 10, 8)), img)
    assert crop(img, (3, 2, 4, 3)).shape == (1, 1)
    assert crop(img, (3, 2, 4, 3))[0, 0] == img[2, 3]
    with pytest.raises(ValueError):
        crop(img, (0, 0, 11, 8))
    with pytest.raises(ValueError):
        crop(img, (5, 5, 5, 6))


# ---------------------------------------------------------------------------
# pipeline


def test_default_smooth_kernel_scales_with_height():
    assert default_smooth_kernel(480) == 101
    assert default_smooth_kernel(64) == 13
    assert default_smooth_kernel(1) == 1
    for h in range(8, 256):
        assert default_smooth_kernel(h) % 2 == 1


def test_pipeline_zeroes_phantom_background():
    subject = generate_subject(21, PhantomParams(image_hw=64), "volunteer")
    frame = subject.frames[0].pixels
    result = preprocess_pipeline(frame, PreprocessConfig())
    # the generator knows its own background: everything below body level
    body = frame >= (PhantomParams().body_level - 4 * PhantomParams().noise_sigma)
    background = ~body
    zero_fraction = np.mean(result.frame.pixels[background] == 0)
    assert zero_fraction >= 0.99


def test_pipeline_constant_frame_is_degenerate_zeros():
    result = preprocess_pipeline(np.full((16, 16), 500, dtype=np.uint16),
                                 PreprocessConfig(smooth_kernel=3))
    assert result.degenerate
    assert np.all(result.frame.pixels == 0)


def test_pipeline_idempotent_on_its_own_output():
    subject = generate_subject(22, PhantomParams(image_hw=64), "patient")
    first = preprocess_pipeline(subject.frames[0].pixels, PreprocessConfig())
    reembedded = first.frame.pixels.astype(np.uint16)
    second = preprocess_pipeline(reembedded, PreprocessConfig())
    was_zero = first.frame.pixels == 0
    assert np.all(second.frame.pixels[was_zero] == 0)


def test_pipeline_crop_and_compensation():
    subject = generate_subject(23, PhantomParams(image_hw=64), "volunteer")
    rect = subject.recommended_crop
    result = preprocess_pipeline(subject.frames[0].pixels,
                                 PreprocessConfig(crop=rect, compensation=50))
    x0, y0, x1, y1 = rect
    assert result.frame.pixels.shape == (y1 - y0, x1 - x0)
