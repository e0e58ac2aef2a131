import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicoal.volume import (MRVolume, extract_window, is_normalized, normalize, read_volume,
                            replicate_window, source_index, target_grid, target_slice_count,
                            window_indices, write_volume)


def clamp_oracle(n, S, m):
    out = []
    for off in range(-(m // 2 - 1), m // 2 + 1):
        i = n + off
        out.append(0 if i < 0 else S - 1 if i > S - 1 else i)
    return out


def vol_of(S, H=4, W=5, seed=0, **kw):
    return MRVolume(np.random.default_rng(seed).standard_normal((S, H, W)), kw.pop("modality", "T1"), **kw)


# -- source_index -------------------------------------------------------------

@pytest.mark.parametrize("k,h0,h1,n,delta", [(7, 5, 1, 1, 0.4), (0, 5, 1, 0, 0.0), (10, 5, 1, 2, 0.0)])
def test_source_index_examples(k, h0, h1, n, delta):
    got = source_index(k, h0, h1)
    assert got[0] == n
    assert got[1] == pytest.approx(delta, abs=1e-12)


@pytest.mark.parametrize("args", [(-1, 5, 1), (0, 0, 1), (0, 5, -1)])
def test_source_index_rejects_bad_input(args):
    with pytest.raises(ValueError):
        source_index(*args)


@given(k=st.integers(0, 10_000), h0=st.sampled_from([0.5, 1, 1.5, 2, 3, 5, 6.4]),
       h1=st.sampled_from([0.25, 0.5, 0.9375, 1, 1.2, 2]))
def test_source_index_matches_rational_oracle(k, h0, h1):
    # thicknesses are decimal millimetre values, so the oracle reads them as decimals
    pos = Fraction(k) * Fraction(str(h1)) / Fraction(str(h0))
    n, d = source_index(k, h0, h1)
    assert n == math.floor(pos)
    assert d == pytest.approx(float(pos - math.floor(pos)), abs=1e-12)
    assert 0 <= d < 1


# -- grids --------------------------------------------------------------------

@given(S=st.integers(1, 60), h0=st.sampled_from([1, 2, 3, 5, 4.8]), h1=st.sampled_from([0.6, 1, 0.9375, 2.5]))
def test_grid_positions_stay_in_source(S, h0, h1):
    grid = target_grid(S, h0, h1)
    assert grid.slice_count == math.floor(Fraction(S - 1) * Fraction(str(h0)) / Fraction(str(h1))) + 1
    for n, d in grid.positions:
        assert 0 <= n < S and 0 <= d < 1


@given(S=st.integers(1, 50))
def test_grid_same_thickness_is_identity(S):
    grid = target_grid(S, 2.0, 2.0)
    assert grid.slice_count == S
    assert all(d == 0 for _, d in grid.positions)
    assert [n for n, _ in grid.positions] == list(range(S))


@given(S=st.integers(1, 40), d=st.integers(1, 8))
def test_integer_dsf_grid_size(S, d):
    assert target_slice_count(S, d, 1) == d * (S - 1) + 1


def test_non_integer_grid():
    # 16/3 upsampling: 5 mm -> 0.9375 mm
    assert target_slice_count(10, 5, 0.9375) == math.floor(9 * 16 / 3) + 1


# -- windows ------------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(1, [0, 1, 2, 3]), (0, [0, 0, 1, 2]), (9, [8, 9, 9, 9])])
def test_window_examples(n, expected):
    assert window_indices(n, 10, 4) == expected
    assert clamp_oracle(n, 10, 4) == expected


@given(S=st.integers(1, 30), data=st.data(), m=st.sampled_from([2, 4, 6, 8]))
def test_window_matches_clamp_oracle(S, data, m):
    n = data.draw(st.integers(0, S - 1))
    vol = vol_of(S)
    win = extract_window(vol, n, m)
    idx = clamp_oracle(n, S, m)
    assert list(win.indices) == idx
    np.testing.assert_array_equal(win.slices, vol.voxels[idx])
    assert win.m == m and win.center_index == n


def test_window_errors():
    with pytest.raises(IndexError):
        extract_window(vol_of(5), 5, 4)
    with pytest.raises(ValueError):
        window_indices(0, 5, 3)


def test_replicate_window():
    s = np.arange(12, dtype=np.float32).reshape(3, 4)
    w4 = replicate_window(s, 4)
    assert w4.m == 4 and all(np.array_equal(x, s) for x in w4.slices)
    assert replicate_window(s, 1).m == 1
    same = MRVolume(np.repeat(s[None], 7, axis=0), "T1")
    np.testing.assert_array_equal(extract_window(same, 3, 4).slices, w4.slices)


# -- normalization ------------------------------------------------------------

def test_normalize_endpoints():
    v = MRVolume(np.array([0, 100], dtype=float).reshape(2, 1, 1), "T1")
    np.testing.assert_allclose(normalize(v, 0, 100).voxels.ravel(), [-1, 1])


def test_normalize_midpoint():
    v = MRVolume(np.array([0, 50, 100], dtype=float).reshape(3, 1, 1), "T1")
    np.testing.assert_allclose(normalize(v, 0, 100).voxels.ravel(), [-1, 0, 1], atol=1e-7)


def test_normalize_constant_volume_warns(caplog):
    v = MRVolume(np.full((2, 3, 3), 7.0), "T1")
    out = normalize(v)
    assert np.all(out.voxels == -1)
    assert "constant" in caplog.text


@settings(max_examples=30)
@given(seed=st.integers(0, 2**16), lo=st.floats(0, 10), hi=st.floats(90, 100))
def test_normalize_range(seed, lo, hi):
    v = MRVolume(np.random.default_rng(seed).gamma(2, 50, (3, 6, 6)), "T1")
    out = normalize(v, lo, hi)
    assert is_normalized(out)


def test_volume_invariants():
    with pytest.raises(ValueError):
        MRVolume(np.zeros((2, 2)), "T1")
    with pytest.raises(ValueError):
        MRVolume(np.array([[[np.nan]]]), "T1")
    with pytest.raises(ValueError):
        MRVolume(np.zeros((1, 1, 1)), "T1", thickness_mm=0)


# -- I/O ----------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".nii.gz", ".nii", ".npy"])
def test_volume_roundtrip(tmp_path, suffix):
    v = vol_of(6, 5, 4, modality="FLAIR", thickness_mm=2.5, inplane_spacing_mm=(0.9, 1.1))
    path = write_volume(v, tmp_path / f"vol{suffix}")
    back = read_volume(path)
    np.testing.assert_allclose(back.voxels, v.voxels)
    assert back.modality == "FLAIR"
    assert back.thickness_mm == pytest.approx(2.5)
    assert back.inplane_spacing_mm == pytest.approx((0.9, 1.1))


def test_read_missing_and_unsupported(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nope.npy")
    p = tmp_path / "x.txt"
    p.write_text("1")
    with pytest.raises(ValueError):
        read_volume(p)
