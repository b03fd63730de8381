import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradient_image
from oracles import block_mean_2x2, brute_grid
from pathforge.errors import (
    BadIndexError,
    BadMagicError,
    MagnificationUnavailableError,
    NoPatchesError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from pathforge.patch_grid import PatchGrid, PatchParams, load_grid, load_patch, plan_grid, save_grid
from pathforge.slide_io import MagInfo, read_region
from pathforge.tissue_seg import TissueMask

MAG20 = MagInfo(0.5, 20, "metadata_mpp")
MAG40 = MagInfo(0.25, 40, "metadata_mpp")


@pytest.fixture
def slide1024(make_slide):
    return make_slide(gradient_image(1024, 1024), tile_size=256, n_levels=3, metadata={"mpp_x": 0.5})


def full_mask(slide, scale=8.0):
    w, h = slide.dimensions
    return TissueMask(np.ones((int(h / scale), int(w / scale)), bool), scale)


def test_full_lattice(slide1024):
    grid = plan_grid(slide1024, full_mask(slide1024), MAG20, PatchParams(256, 20))
    assert len(grid) == 16
    assert {tuple(c) for c in grid.coords} == {(x, y) for x in (0, 256, 512, 768) for y in (0, 256, 512, 768)}
    assert grid.read_level == 0 and grid.resize_factor == 1.0


def test_40x_extent_and_step(slide1024):
    grid = plan_grid(slide1024, full_mask(slide1024), MAG40, PatchParams(256, 20))
    assert grid.level0_patch_extent == 512 and grid.step == 512
    assert grid.read_level == 1 and grid.resize_factor == 1.0
    grid = plan_grid(slide1024, full_mask(slide1024), MAG40, PatchParams(256, 20, overlap=64))
    assert grid.step == 384


def test_target_above_base(slide1024):
    with pytest.raises(MagnificationUnavailableError):
        plan_grid(slide1024, full_mask(slide1024), MAG20, PatchParams(256, 40))


def test_left_half_matches_brute_force(slide1024):
    m = np.zeros((128, 128), bool)
    m[:, :64] = True
    m[40:50, 64:90] = True
    tm = TissueMask(m, 8.0)
    params = PatchParams(128, 20, overlap=32, min_tissue_frac=0.5)
    grid = plan_grid(slide1024, tm, MAG20, params)
    want = brute_grid(m, 8.0, 1024, 1024, grid.level0_patch_extent, grid.step, 0.5)
    assert [tuple(c) for c in grid.coords.tolist()] == want


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.sampled_from([32, 48, 64]),
    st.integers(0, 3),
    st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]),
    st.sampled_from([2.0, 4.0, 5.0]),
)
def test_grid_equals_oracle(make_slide_cached, seed, patch, overlap_q, frac, scale):
    slide = make_slide_cached
    rng = np.random.default_rng(seed)
    m = rng.random((int(256 / scale), int(256 / scale))) < rng.uniform(0.2, 0.9)
    params = PatchParams(patch, 20, overlap=overlap_q * patch // 4, min_tissue_frac=frac)
    try:
        grid = plan_grid(slide, TissueMask(m, scale), MAG20, params)
        got = [tuple(c) for c in grid.coords.tolist()]
    except NoPatchesError:
        got = []
    step = patch - params.overlap
    assert got == brute_grid(m, scale, 256, 256, patch, step, frac)


@pytest.fixture(scope="module")
def make_slide_cached(tmp_path_factory):
    from pathforge.slide_io import open_slide, write_pyramid

    path = tmp_path_factory.mktemp("grid") / "s.spyr"
    write_pyramid(gradient_image(256, 256), path, 64, 1, {"mpp_x": 0.5})
    return open_slide(path)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_fraction_monotone(make_slide_cached, seed, a, b):
    a, b = sorted((a, b))
    m = np.random.default_rng(seed).random((64, 64)) < 0.5

    def coords(f):
        try:
            g = plan_grid(make_slide_cached, TissueMask(m, 4.0), MAG20, PatchParams(32, 20, min_tissue_frac=f))
            return {tuple(c) for c in g.coords.tolist()}
        except NoPatchesError:
            return set()

    assert coords(a) >= coords(b)


def test_no_overlap_patches_disjoint(slide1024):
    m = np.random.default_rng(3).random((128, 128)) < 0.5
    grid = plan_grid(slide1024, TissueMask(m, 8.0), MAG20, PatchParams(96, 20, min_tissue_frac=0.3))
    e = grid.level0_patch_extent
    cov = np.zeros((1024, 1024), int)
    for x, y in grid.coords:
        cov[y : y + e, x : x + e] += 1
        assert 0 <= x <= 1024 - e and 0 <= y <= 1024 - e
    assert cov.max() == 1


def test_no_patches(slide1024):
    tm = TissueMask(np.zeros((128, 128), bool), 8.0)
    with pytest.raises(NoPatchesError):
        plan_grid(slide1024, tm, MAG20)


def test_load_patch_identity(slide1024):
    grid = plan_grid(slide1024, full_mask(slide1024), MAG20, PatchParams(256, 20))
    for i in (0, 5, 15):
        x, y = grid.coords[i]
        assert np.array_equal(load_patch(slide1024, grid, i), read_region(slide1024, 0, int(x), int(y), 256, 256))


def test_load_patch_block_mean(make_slide):
    # 2x2-block checkerboard at level 0, single level so the resize path is used
    img = np.zeros((512, 512, 3), np.uint8)
    yy, xx = np.mgrid[0:512, 0:512]
    img[((yy // 2 + xx // 2) % 2) == 0] = (200, 40, 90)
    img[((yy // 2 + xx // 2) % 2) == 1] = (11, 250, 3)
    img[::2, ::2] = (0, 0, 0)  # break the block uniformity
    slide = make_slide(img, tile_size=128, n_levels=1)
    grid = plan_grid(slide, full_mask(slide, 4.0), MAG40, PatchParams(128, 20))
    assert grid.read_level == 0 and grid.resize_factor == 2.0
    x, y = (int(v) for v in grid.coords[3])
    want = block_mean_2x2(img[y : y + 256, x : x + 256])
    assert np.array_equal(load_patch(slide, grid, 3), want)


def test_bad_index(slide1024):
    grid = plan_grid(slide1024, full_mask(slide1024), MAG20)
    with pytest.raises(BadIndexError):
        load_patch(slide1024, grid, len(grid))
    with pytest.raises(BadIndexError):
        load_patch(slide1024, grid, -1)


def test_round_trip(slide1024, tmp_path):
    grid = plan_grid(slide1024, full_mask(slide1024), MAG40, PatchParams(128, 20, overlap=16, min_tissue_frac=0.4))
    save_grid(grid, tmp_path / "g.pgrd")
    assert load_grid(tmp_path / "g.pgrd") == grid


def test_save_rejects_empty_and_unsorted(tmp_path):
    empty = PatchGrid("s", PatchParams(), 256, 256, 0, 1.0)
    with pytest.raises(NoPatchesError):
        save_grid(empty, tmp_path / "e.pgrd")
    bad = PatchGrid("s", PatchParams(), 256, 256, 0, 1.0, np.array([[256, 0], [0, 0]]))
    with pytest.raises(ValidationError):
        save_grid(bad, tmp_path / "b.pgrd")


def test_load_errors(slide1024, tmp_path):
    grid = plan_grid(slide1024, full_mask(slide1024), MAG20)
    path = tmp_path / "g.pgrd"
    save_grid(grid, path)
    data = path.read_bytes()
    (tmp_path / "t.pgrd").write_bytes(data[:-24])
    with pytest.raises(TruncatedFileError):
        load_grid(tmp_path / "t.pgrd")
    (tmp_path / "m.pgrd").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        load_grid(tmp_path / "m.pgrd")
    (tmp_path / "v.pgrd").write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(VersionMismatchError):
        load_grid(tmp_path / "v.pgrd")


@pytest.mark.parametrize("kw", [{"patch_size": 0}, {"overlap": 256}, {"min_tissue_frac": 1.5}, {"overlap": -1}])
def test_params_validation(kw):
    with pytest.raises(ValidationError):
        PatchParams(**kw)
