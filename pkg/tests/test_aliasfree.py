import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unicoal.aliasfree import (FilterDesignError, ScheduleError, build_schedule, crop_margin, design_lowpass,
                               frequency_response_table, pad_margin, resample2d, wrapped_nonlinearity)


def schedule_oracle(num_layers, r_N):
    """Straight transcription of the schedule arithmetic, one list per quantity."""
    fc, ft = [], []
    for i in range(num_layers):
        if i < 2:
            fc.append(r_N / 2)
            ft.append(2 ** 0.3 * r_N / 2)
        else:
            t = (i - 2) / (num_layers - 3)
            fc.append(math.exp(math.log(r_N / 2) + t * (math.log(2) - math.log(r_N / 2))))
            ft.append(math.exp(math.log(2 ** 0.3 * r_N / 2) + t * (2.1 * math.log(2) - math.log(2 ** 0.3 * r_N / 2))))
    r = [min(math.ceil(2 * f), r_N) for f in ft]
    fh = [max(ri / 2, f) - c for ri, f, c in zip(r, ft, fc)]
    return fc, ft, r, fh


def tone(f, rate, size, margin, axis=-1, phase=0.3):
    j = np.arange(size + 2 * margin)
    x = (j - margin + 0.5) / rate
    t = np.cos(2 * np.pi * f * x + phase)
    grid = np.broadcast_to(t[None, :] if axis == -1 else t[:, None], (len(j), len(j)))
    return torch.tensor(np.ascontiguousarray(grid))


# -- schedule -----------------------------------------------------------------

@pytest.mark.parametrize("r_N", [32, 64, 128, 256, 1024])
def test_schedule_matches_oracle(r_N):
    s = build_schedule(14, r_N)
    fc, ft, r, fh = schedule_oracle(14, r_N)
    np.testing.assert_allclose(s.cutoffs, fc, rtol=1e-12)
    np.testing.assert_allclose(s.stopbands, ft, rtol=1e-12)
    np.testing.assert_array_equal(s.resolutions, r)
    np.testing.assert_allclose(s.half_widths, fh, rtol=1e-12, atol=1e-12)


def test_schedule_256_endpoints():
    s = build_schedule(14, 256)
    assert s[2].cutoff == 128 and s[-1].cutoff == pytest.approx(2, abs=1e-12)
    assert s[-1].stopband == pytest.approx(2 ** 2.1, abs=1e-12)
    assert s[-1].resolution == 9
    assert s[0].critical and s[1].critical and not s[2].critical


def test_schedule_64_ratio():
    c = build_schedule(14, 64).cutoffs[2:]
    np.testing.assert_allclose(c[1:] / c[:-1], (2 / 32) ** (1 / 11), rtol=1e-12)


@pytest.mark.parametrize("r_N", [16, 32, 64, 256])
def test_schedule_monotone_and_power_of_two_rates(r_N):
    s = build_schedule(14, r_N)
    assert np.all(np.diff(s.cutoffs) <= 1e-12)
    assert np.all(np.diff(s.resolutions) <= 0)
    assert np.all(np.diff(s.rates) <= 0)
    for l in s:
        assert l.rate >= l.resolution and l.rate & (l.rate - 1) == 0
        if l.resolution < r_N:
            assert l.cutoff + l.half_width <= l.rate / 2 + 1e-9


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        build_schedule(14, 4)
    with pytest.raises(ScheduleError):
        build_schedule(2, 64)
    with pytest.raises(ScheduleError):
        build_schedule(14, 8, last_stopband=5)


# -- filter design ------------------------------------------------------------

def dft_gain(taps, f, rate, n=512):
    """Amplitude of a sampled tone after filtering, read from the DFT bin."""
    x = np.cos(2 * np.pi * f * np.arange(n + len(taps)) / rate)
    y = np.convolve(x, taps, mode="valid")[:n]
    k = f * n / rate
    assert abs(k - round(k)) < 1e-9, "tone must sit on a DFT bin"
    return 2 * abs(np.fft.rfft(y)[int(round(k))]) / n


@pytest.mark.parametrize("r_N", [32, 64, 256])
def test_filter_passband_and_stopband(r_N):
    s = build_schedule(14, r_N)
    prev = r_N
    for l in s:
        factor = max(prev // l.rate, 1)
        if l.cutoff >= prev / 2 - 1e-9 and factor == 1:
            prev = l.rate
            continue
        k = design_lowpass(l.cutoff, l.half_width, prev, factor)
        n = 4096
        f_pass = round(0.5 * l.cutoff * n / prev) * prev / n
        assert abs(dft_gain(k.taps, f_pass, prev, n) - 1) < 0.01
        f_stop = math.ceil((l.cutoff + l.half_width) * n / prev) * prev / n
        if f_stop < prev / 2:
            assert 20 * math.log10(dft_gain(k.taps, f_stop, prev, n) + 1e-300) <= -20
        prev = l.rate


@given(cutoff=st.floats(1, 60), hw_rel=st.floats(0, 1.5), factor=st.sampled_from([1, 2, 3, 4]))
@settings(max_examples=60)
def test_filter_dc_gain_and_symmetry(cutoff, hw_rel, factor):
    rate = 128
    k = design_lowpass(cutoff, hw_rel * cutoff, rate, factor)
    assert abs(k.taps.sum() - 1) < 1e-6
    np.testing.assert_allclose(k.taps, k.taps[::-1], atol=1e-9)
    assert (k.numtaps - factor) % 2 == 0


def test_impulse_through_kernel_returns_kernel():
    k = design_lowpass(8, 4, 64, 2)
    impulse = np.zeros(3 * k.numtaps)
    impulse[k.numtaps] = 1
    out = np.convolve(impulse, k.taps, mode="same")
    lo = k.numtaps - (k.numtaps - 1) // 2 - (0 if k.numtaps % 2 else 1) + (0 if k.numtaps % 2 else 1)
    np.testing.assert_allclose(out[lo:lo + k.numtaps], k.taps, atol=1e-15)


def test_filter_response_matches_dft():
    k = design_lowpass(10, 3, 64, 2)
    for f in (0, 5, 10, 13):
        assert abs(k.response(f)[0]) == pytest.approx(abs(np.sum(k.taps * np.exp(-2j * np.pi * f / 64 * np.arange(k.numtaps)))), abs=1e-12)


def test_filter_errors():
    with pytest.raises(FilterDesignError):
        design_lowpass(40, 2, 64)
    with pytest.raises(FilterDesignError):
        design_lowpass(0, 2, 64)
    with pytest.raises(FilterDesignError):
        design_lowpass(4, -1, 64)


def test_nyquist_same_rate_filter_is_identity():
    assert design_lowpass(32, 5, 64).taps.tolist() == [1.0]


# -- resampling ---------------------------------------------------------------

@pytest.mark.parametrize("rate_in,rate_out", [(32, 16), (16, 32), (32, 32), (64, 16), (16, 64)])
def test_constant_is_preserved(rate_in, rate_out):
    x = torch.full((2, 3, rate_in + 20, rate_in + 20), 0.7, dtype=torch.float64)
    cutoff = min(rate_in, rate_out) / 4
    y = resample2d(x, rate_in, rate_out, cutoff, cutoff / 2)
    assert y.shape[-1] == rate_out + 20
    torch.testing.assert_close(y, torch.full_like(y, 0.7), atol=1e-9, rtol=0)


def test_up_down_round_trip_of_band_limited_tone():
    rate, M = 32, 10
    x = tone(3.0, rate, rate, M) * tone(2.0, rate, rate, M, axis=-2)
    up = resample2d(x, rate, 2 * rate, 8, 4, M, 2 * M)
    back = resample2d(up, 2 * rate, rate, 8, 4, 2 * M, M)
    rms = (crop_margin(back - x, M).square().mean().sqrt() / crop_margin(x, M).square().mean().sqrt())
    assert rms < 0.01


@pytest.mark.parametrize("rate_in,rate_out,f", [(64, 32, 20.0), (32, 16, 11.0), (64, 16, 14.0), (64, 32, 30.0)])
def test_alias_suppression(rate_in, rate_out, f):
    M = 10
    cutoff = rate_out / 4
    x = tone(f, rate_in, rate_in, 4 * M)
    y = resample2d(x, rate_in, rate_out, cutoff, rate_out / 2 - cutoff, 4 * M, M)
    e_in = x.square().mean()
    e_out = crop_margin(y, M).square().mean()
    assert 10 * math.log10(float(e_out / e_in) + 1e-300) <= -20


@pytest.mark.parametrize("rate_in,rate_out,shift", [(32, 16, 2), (32, 16, 4), (16, 32, 1), (32, 32, 3), (64, 16, 4)])
def test_integer_shift_commutes(rate_in, rate_out, shift):
    M = 10
    g = torch.Generator().manual_seed(0)
    x = torch.zeros(rate_in + 2 * M, rate_in + 2 * M, dtype=torch.float64)
    c = (rate_in + 2 * M) // 2
    x[c - 4:c + 4, c - 3:c + 5] = torch.randn(8, 8, generator=g, dtype=torch.float64)
    cutoff = min(rate_in, rate_out) / 4
    op = lambda z: resample2d(z, rate_in, rate_out, cutoff, cutoff / 2, M, M)
    s_out = shift * rate_out // rate_in
    a = op(torch.roll(x, (shift, shift), (0, 1)))
    b = torch.roll(op(x), (s_out, s_out), (0, 1))
    torch.testing.assert_close(crop_margin(a, M), crop_margin(b, M), atol=1e-10, rtol=0)


def test_non_integer_factor_rejected():
    with pytest.raises(ValueError):
        resample2d(torch.zeros(1, 1, 44, 44), 24, 16, 4, 2)


# -- wrapped nonlinearity -----------------------------------------------------

def test_wrapped_on_positive_input_is_resampling_round_trip():
    rate, M = 32, 10
    x = 2.0 + tone(2.0, rate, rate, M) * tone(3.0, rate, rate, M, axis=-2)
    y = wrapped_nonlinearity(x, rate, 8, 4, M)
    err = crop_margin(y - x, M).square().mean().sqrt() / crop_margin(x, M).square().mean().sqrt()
    assert err < 0.01


def test_wrapped_zero_is_zero():
    x = torch.zeros(1, 2, 52, 52)
    assert torch.count_nonzero(wrapped_nonlinearity(x, 32, 8, 4)) == 0


@given(alpha=st.floats(0.01, 100), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_wrapped_positive_homogeneity(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 1, 36, 36, generator=g, dtype=torch.float64)
    a = wrapped_nonlinearity(alpha * x, 16, 4, 2)
    b = alpha * wrapped_nonlinearity(x, 16, 4, 2)
    torch.testing.assert_close(a, b, atol=1e-5 * max(alpha, 1), rtol=1e-5)


def test_wrapped_output_is_band_limited():
    rate, M = 32, 10
    g = torch.Generator().manual_seed(1)
    x = torch.randn(rate + 2 * M, rate + 2 * M, generator=g, dtype=torch.float64)
    y = crop_margin(wrapped_nonlinearity(x, rate, 6, 3, M), M)
    spec = np.abs(np.fft.fft(y.numpy(), axis=1)) ** 2
    f = np.fft.fftfreq(rate, 1 / rate)
    high = spec[:, np.abs(f) > 6 + 3 + 2].sum()   # two bins of slack for the finite crop
    assert high / spec.sum() < 0.01


# -- margin -------------------------------------------------------------------

def test_pad_margin_shapes_and_interior():
    x = torch.randn(2, 3, 16, 12)
    p = pad_margin(x, 10)
    assert p.shape == (2, 3, 36, 32)
    torch.testing.assert_close(crop_margin(p, 10), x)
    assert pad_margin(x, 0) is x
    torch.testing.assert_close(p[..., :10, 10:-10], x[..., :1, :].expand(-1, -1, 10, -1))


def test_frequency_response_table_rows():
    rows = frequency_response_table(build_schedule(14, 32), num_freqs=8)
    assert len(rows) == 14 * 8
    assert {"layer", "freq", "gain_db"} <= set(rows[0])
    assert all(abs(r["gain_db"]) < 1e-6 for r in rows if r["freq"] == 0)
