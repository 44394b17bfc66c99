import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from herbage.errors import DataError
from herbage.geometry import (
    MIN_EDGE_PX,
    CropConfig,
    CropWindow,
    crop_edge_for_altitude,
    extract_crop,
    plan_checkerboard_crops,
    plan_random_crops,
    upscale_crop,
)


def test_edge_scales_inversely_with_altitude():
    assert crop_edge_for_altitude(6.0) == 256
    assert crop_edge_for_altitude(12.0) == 128
    assert crop_edge_for_altitude(3.0) == 512


def test_edge_rejects_nonpositive_altitude():
    for bad in (0.0, -2.0):
        with pytest.raises(DataError):
            crop_edge_for_altitude(bad)


def test_edge_floor():
    # Extremely high altitude would give a sub-pixel crop; floor kicks in.
    assert crop_edge_for_altitude(1000.0) == MIN_EDGE_PX


def test_config_validation():
    with pytest.raises(DataError):
        CropConfig(base_edge_px=0)
    with pytest.raises(DataError):
        CropConfig(target_edge_px=100)  # not a multiple of 8
    CropConfig(target_edge_px=96)


@given(altitude=st.floats(3.0, 15.0))
def test_edge_within_half_pixel_of_exact(altitude):
    cfg = CropConfig()
    exact = cfg.base_edge_px * cfg.reference_altitude_m / altitude
    assert abs(crop_edge_for_altitude(altitude, cfg) - exact) <= 0.5


def test_random_crops_deterministic_and_in_bounds():
    cfg = CropConfig(base_edge_px=64, n_random_crops=20, rng_seed=42)
    a = plan_random_crops((500, 400), 6.0, cfg)
    b = plan_random_crops((500, 400), 6.0, cfg)
    assert a == b
    assert len(a) == 20
    for w in a:
        assert 0 <= w.x0 <= 500 - w.edge
        assert 0 <= w.y0 <= 400 - w.edge
        assert w.edge == 64


def test_random_crops_differ_across_seeds():
    cfg1 = CropConfig(base_edge_px=64, n_random_crops=20, rng_seed=1)
    cfg2 = CropConfig(base_edge_px=64, n_random_crops=20, rng_seed=2)
    assert plan_random_crops((500, 400), 6.0, cfg1) != plan_random_crops((500, 400), 6.0, cfg2)


@settings(max_examples=30)
@given(
    w=st.integers(80, 600),
    h=st.integers(80, 600),
    altitude=st.floats(4.0, 20.0),
    seed=st.integers(0, 1000),
)
def test_random_crops_always_in_bounds(w, h, altitude, seed):
    cfg = CropConfig(base_edge_px=64, n_random_crops=8, rng_seed=seed)
    edge = crop_edge_for_altitude(altitude, cfg)
    if edge > min(w, h):
        with pytest.raises(DataError):
            plan_random_crops((w, h), altitude, cfg)
        return
    for win in plan_random_crops((w, h), altitude, cfg):
        assert 0 <= win.x0 and win.x0 + win.edge <= w
        assert 0 <= win.y0 and win.y0 + win.edge <= h


def test_checkerboard_tiles_disjoint_and_drop_partials():
    cfg = CropConfig(base_edge_px=100)
    wins = plan_checkerboard_crops((350, 250), 6.0, cfg)
    # 100 px tiles in a 350x250 image: 3 columns x 2 rows, partial edges dropped
    assert len(wins) == 6
    covered = set()
    for w in wins:
        assert w.edge == 100
        cells = {(x, y) for x in range(w.x0, w.x0 + w.edge) for y in range(w.y0, w.y0 + 10)}
        assert not covered & cells
        covered |= cells


def test_extract_crop_bounds():
    img = np.arange(100 * 80 * 3, dtype=np.uint8).reshape(80, 100, 3)
    crop = extract_crop(img, CropWindow(10, 20, 30))
    assert crop.shape == (30, 30, 3)
    assert np.array_equal(crop, img[20:50, 10:40])
    with pytest.raises(DataError):
        extract_crop(img, CropWindow(90, 0, 30))


def test_upscale_crop_shape_and_range():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    out = upscale_crop(img, CropWindow(0, 0, 32), 128)
    assert out.shape == (128, 128, 3)
    assert out.dtype == np.uint8


def test_upscale_identity_on_constant_image():
    img = np.full((32, 32, 3), 117, dtype=np.uint8)
    out = upscale_crop(img, CropWindow(0, 0, 32), 96)
    assert np.all(out == 117)
