"""Band-limited signal operators for the alias-free encoder and synthesizer.

Feature maps are treated as samples of continuous signals on the unit square.
A map at sampling rate ``s`` with margin ``M`` has ``s + 2*M`` samples per axis,
and sample ``j`` sits at image coordinate ``(j - M + 0.5) / s``.  Every
resampling routine here is defined through those coordinates, so an integer
shift that is also integral at the output rate commutes exactly with it.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.signal
import torch
import torch.nn.functional as F

DEFAULT_MARGIN = 10
FILTER_SIZE = 6          # minimum taps per sample of the lower rate
LRELU_SLOPE = 0.2
LRELU_OVERSAMPLING = 2
STOPBAND_ATTENUATION_DB = 60.0


class ScheduleError(ValueError):
    pass


class FilterDesignError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Layer schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    index: int            # 1-based layer number
    cutoff: float         # f_c
    stopband: float       # f_t
    half_width: float     # f_h
    resolution: int       # r = min(ceil(2 f_t), r_N)
    rate: int             # operating sampling rate (power of two >= resolution)
    critical: bool

    @property
    def nyquist(self) -> float:
        return self.rate / 2


@dataclass(frozen=True)
class LayerSchedule:
    image_resolution: int
    layers: tuple[LayerSpec, ...]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerSpec:
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)

    @property
    def cutoffs(self) -> np.ndarray:
        return np.array([l.cutoff for l in self.layers])

    @property
    def stopbands(self) -> np.ndarray:
        return np.array([l.stopband for l in self.layers])

    @property
    def half_widths(self) -> np.ndarray:
        return np.array([l.half_width for l in self.layers])

    @property
    def resolutions(self) -> np.ndarray:
        return np.array([l.resolution for l in self.layers])

    @property
    def rates(self) -> np.ndarray:
        return np.array([l.rate for l in self.layers])

    def distinct_rates(self) -> list[int]:
        """Operating rates in encoder order, without repeats."""
        out: list[int] = []
        for l in self.layers:
            if not out or out[-1] != l.rate:
                out.append(l.rate)
        return out

    def to_dict(self) -> dict:
        return {
            "image_resolution": self.image_resolution,
            "layers": [l.__dict__.copy() for l in self.layers],
        }


def build_schedule(num_layers: int = 14, r_N: int = 256, num_critical: int = 2,
                   last_cutoff: float = 2.0, last_stopband: float = 2 ** 2.1,
                   first_stopband_rel: float = 2 ** 0.3) -> LayerSchedule:
    """Per-layer cutoff, stopband, resolution and transition half-width.

    Layers ``1..num_critical`` are critically sampled at ``f_c = r_N/2``.  From
    the first non-critical layer to the last one, the cutoff falls
    geometrically from ``r_N/2`` to ``last_cutoff`` and the stopband from
    ``first_stopband_rel * r_N/2`` to ``last_stopband``.
    """
    if num_layers < num_critical + 1:
        raise ScheduleError(f"need at least {num_critical + 1} layers, got {num_layers}")
    if r_N < 8:
        raise ScheduleError(f"image resolution must be >= 8, got {r_N}")
    if math.ceil(2 * last_stopband) > r_N:
        raise ScheduleError(
            f"r_N={r_N} cannot hold the final stopband {last_stopband:.3f} "
            f"(needs {math.ceil(2 * last_stopband)} samples)")

    fc0 = r_N / 2
    ft0 = first_stopband_rel * r_N / 2
    span = num_layers - num_critical - 1   # intervals between first non-critical and last layer
    layers = []
    for i in range(1, num_layers + 1):
        if i <= num_critical:
            fc, ft = fc0, ft0
        else:
            t = (i - num_critical - 1) / span if span > 0 else 1.0
            fc = fc0 * (last_cutoff / fc0) ** t
            ft = ft0 * (last_stopband / ft0) ** t
        r = min(math.ceil(2 * ft), r_N)
        fh = max(r / 2, ft) - fc
        rate = min(2 ** math.ceil(math.log2(r)), r_N)
        layers.append(LayerSpec(index=i, cutoff=fc, stopband=ft, half_width=fh,
                                resolution=r, rate=int(rate), critical=i <= num_critical))
    return LayerSchedule(image_resolution=r_N, layers=tuple(layers))


# ---------------------------------------------------------------------------
# Filter design
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterKernel:
    taps: np.ndarray
    rate: float
    cutoff: float
    half_width: float
    beta: float

    @property
    def numtaps(self) -> int:
        return len(self.taps)

    def response(self, freqs) -> np.ndarray:
        """Complex frequency response at ``freqs`` (cycles per unit)."""
        n = np.arange(self.numtaps) - (self.numtaps - 1) / 2
        freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
        return np.exp(-2j * np.pi * np.outer(freqs / self.rate, n)) @ self.taps


def _match_parity(n: int, factor: int) -> int:
    # Even factors need even-length filters (half-sample centre), odd factors odd ones.
    return n if (n - factor) % 2 == 0 else n + 1


def transition_half_width(cutoff: float, half_width: float) -> float:
    """Half-width actually designed for: keeps ``[0, cutoff/2]`` in the passband
    and puts the stopband edge no later than ``cutoff + half_width``."""
    return max(min(half_width, cutoff / 2), 0.05 * cutoff)


@functools.lru_cache(maxsize=None)
def _kaiser_sinc(cutoff: float, half_width: float, rate: float, factor: int,
                 attenuation: float, numtaps: int | None):
    hw = transition_half_width(cutoff, half_width)
    width = 2 * hw / (rate / 2)
    if numtaps is None:
        n_est, _ = scipy.signal.kaiserord(attenuation, width)
        numtaps = _match_parity(max(n_est, FILTER_SIZE * factor, 3), factor)
    beta = scipy.signal.kaiser_beta(attenuation)
    n = np.arange(numtaps) - (numtaps - 1) / 2
    h = (2 * cutoff / rate) * np.sinc(2 * cutoff / rate * n)
    h = h * np.kaiser(numtaps, beta)
    h = h / h.sum()
    h.setflags(write=False)
    return h, float(beta)


def design_lowpass(cutoff: float, half_width: float, rate: float, factor: int = 1,
                   attenuation: float = STOPBAND_ATTENUATION_DB,
                   numtaps: int | None = None) -> FilterKernel:
    """Kaiser-windowed sinc low-pass with unit DC gain.

    Length and Kaiser beta follow the Kaiser order estimate for ``attenuation``
    dB over the transition band ``cutoff +/- transition_half_width``.  The tap
    count is at least ``6 * factor`` and has the parity of ``factor`` so the
    filter centre lands on the resampled grid.  A same-rate filter whose cutoff
    sits at Nyquist is the identity.
    """
    if cutoff <= 0:
        raise FilterDesignError(f"cutoff must be positive, got {cutoff}")
    if half_width < 0:
        raise FilterDesignError(f"half_width must be >= 0, got {half_width}")
    if cutoff > rate / 2 + 1e-9:
        raise FilterDesignError(f"cutoff {cutoff} above Nyquist of rate {rate}")
    if cutoff >= rate / 2 - 1e-9 and factor == 1:
        return FilterKernel(taps=np.ones(1), rate=rate, cutoff=cutoff,
                            half_width=half_width, beta=0.0)
    cutoff = min(cutoff, rate / 2 * (1 - 1e-9))
    taps, beta = _kaiser_sinc(float(cutoff), float(half_width), float(rate), int(factor),
                              float(attenuation), numtaps)
    return FilterKernel(taps=taps, rate=rate, cutoff=cutoff, half_width=half_width, beta=beta)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def pad_margin(x: torch.Tensor, margin: int = DEFAULT_MARGIN) -> torch.Tensor:
    """Extend the last two axes by ``margin`` samples per side (edge replication)."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if margin == 0:
        return x
    return _pad_last(_pad_last(x, margin, margin, -1), margin, margin, -2)


def crop_margin(x: torch.Tensor, margin: int = DEFAULT_MARGIN) -> torch.Tensor:
    if margin == 0:
        return x
    return x[..., margin:-margin, margin:-margin]


def _pad_last(x, lo, hi, dim):
    if lo == 0 and hi == 0:
        return x
    n = x.shape[dim]
    idx = torch.arange(-lo, n + hi, device=x.device).clamp(0, n - 1)
    return x.index_select(dim, idx)


def _as_rows(x, dim):
    x = x.movedim(dim, -1)
    shape = x.shape
    return x.reshape(-1, 1, shape[-1]), shape


def _from_rows(y, shape, dim):
    return y.reshape(*shape[:-1], y.shape[-1]).movedim(-1, dim)


def _polyphase_normalized(taps, up):
    # Each output phase sums to exactly 1, so constants survive upsampling.
    w = np.asarray(taps, dtype=np.float64) * up
    if up > 1:
        w = w.copy()
        for p in range(up):
            w[p::up] /= w[p::up].sum()
    return w


def _upsample_axis(x, taps, up, margin_in, n_out, margin_out, dim):
    L = len(taps)
    assert (L - up) % 2 == 0, "filter length parity must match the upsampling factor"
    n_in = x.shape[dim]
    c = up * margin_in - margin_out + (L - up) // 2
    # Every output tap window must only cover real (zero-stuffed) samples:
    # full-convolution index j needs L - up <= j <= n_in * up - 1.
    lo = max(0, math.ceil((L - up - c) / up))
    hi = max(0, math.ceil((c + up * lo + n_out - (n_in + lo) * up) / up))
    if lo or hi:
        x = _pad_last(x, lo, hi, dim)
        c += up * lo
    rows, shape = _as_rows(x, dim)
    # Zero insertion then direct correlation; much faster on CPU than a
    # strided transposed convolution and identical for symmetric taps.
    n = rows.shape[-1]
    z = rows.new_zeros(rows.shape[0], 1, (n - 1) * up + 1 + 2 * (L - 1))
    z[..., L - 1:L + (n - 1) * up:up] = rows
    w = torch.tensor(_polyphase_normalized(taps, up), dtype=x.dtype, device=x.device).view(1, 1, L)
    y = F.conv1d(z.narrow(-1, c, n_out + L - 1), w)
    return _from_rows(y, shape, dim)


def _downsample_axis(x, taps, down, margin_in, n_out, margin_out, dim):
    L = len(taps)
    assert (L - down) % 2 == 0, "filter length parity must match the downsampling factor"
    n_in = x.shape[dim]
    e = margin_in - down * margin_out - (L - down) // 2
    need = down * (n_out - 1) + L
    lo = max(0, -e)
    hi = max(0, e + need - n_in)
    if lo or hi:
        x = _pad_last(x, lo, hi, dim)
        e += lo
    x = x.narrow(dim, e, need)
    rows, shape = _as_rows(x, dim)
    w = torch.tensor(taps, dtype=x.dtype, device=x.device).view(1, 1, L)
    y = F.conv1d(rows, w, stride=down)
    return _from_rows(y, shape, dim)


@functools.lru_cache(maxsize=512)
def _axis_matrix(kind, taps_bytes, factor, margin_in, n_in, n_out, margin_out):
    # The per-axis resampler (edge replication included) is linear, so it is
    # tabulated once as an n_in x n_out matrix; matmul is far cheaper than
    # single-channel convolutions, especially in the backward pass.
    taps = np.frombuffer(taps_bytes, dtype=np.float64)
    eye = torch.eye(n_in, dtype=torch.float64)
    fn = _upsample_axis if kind == "up" else _downsample_axis
    return fn(eye, taps, factor, margin_in, n_out, margin_out, -1).contiguous()


def _resample_axis(x, kind, taps, factor, margin_in, n_out, margin_out, dim):
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    m = _axis_matrix(kind, taps.tobytes(), factor, margin_in, x.shape[dim], n_out, margin_out)
    m = m.to(dtype=x.dtype, device=x.device)
    if dim == -1:
        return x @ m
    return m.transpose(0, 1) @ x


def _regrid_axis(x, margin_in, margin_out, dim):
    # Same rate, no filtering: crop or replicate to the new margin.
    d = margin_out - margin_in
    if d > 0:
        return _pad_last(x, d, d, dim)
    if d < 0:
        return x.narrow(dim, -d, x.shape[dim] + 2 * d)
    return x


def resample2d(x: torch.Tensor, rate_in: int, rate_out: int, cutoff: float,
               half_width: float, margin_in: int = DEFAULT_MARGIN,
               margin_out: int = DEFAULT_MARGIN, size_out: int | None = None,
               numtaps: int | None = None) -> torch.Tensor:
    """Filtered resampling of a ``[..., H, W]`` grid between integer-related rates.

    ``cutoff``/``half_width`` describe the low-pass applied at the higher of the
    two rates: the input band when upsampling, the output band when
    downsampling.  Output grids hold ``size_out`` (default ``rate_out``) samples
    plus ``margin_out`` on each side.
    """
    if rate_out >= rate_in:
        if rate_out % rate_in:
            raise ValueError(f"non-integer factor {rate_out}/{rate_in}; cascade integer steps")
    elif rate_in % rate_out:
        raise ValueError(f"non-integer factor {rate_in}/{rate_out}; cascade integer steps")
    size_out = rate_out if size_out is None else size_out
    n_out = size_out + 2 * margin_out

    if rate_out > rate_in:
        up = rate_out // rate_in
        k = design_lowpass(cutoff, half_width, rate_out, up, numtaps=numtaps)
        for dim in (-1, -2):
            x = _resample_axis(x, "up", k.taps, up, margin_in, n_out, margin_out, dim)
        return x
    if rate_out < rate_in:
        down = rate_in // rate_out
        k = design_lowpass(cutoff, half_width, rate_in, down, numtaps=numtaps)
        for dim in (-1, -2):
            x = _resample_axis(x, "down", k.taps, down, margin_in, n_out, margin_out, dim)
        return x
    if cutoff >= rate_in / 2 - 1e-9:
        for dim in (-1, -2):
            x = _regrid_axis(x, margin_in, margin_out, dim)
        return x
    k = design_lowpass(cutoff, half_width, rate_in, 1, numtaps=numtaps)
    for dim in (-1, -2):
        x = _resample_axis(x, "down", k.taps, 1, margin_in, n_out, margin_out, dim)
    return x


def wrapped_nonlinearity(x: torch.Tensor, rate: int, cutoff: float, half_width: float,
                         margin: int = DEFAULT_MARGIN, slope: float = LRELU_SLOPE,
                         gain: float = 1.0) -> torch.Tensor:
    """Leaky rectification evaluated at twice the sampling rate.

    The map is upsampled 2x, rectified, low-passed to ``cutoff`` and brought
    back to ``rate``, which suppresses the harmonics the rectifier creates.
    """
    hi = rate * LRELU_OVERSAMPLING
    y = resample2d(x, rate, hi, cutoff, half_width, margin, margin * LRELU_OVERSAMPLING,
                   size_out=hi)
    y = F.leaky_relu(y, slope)
    if gain != 1:
        y = y * gain
    return resample2d(y, hi, rate, cutoff, half_width, margin * LRELU_OVERSAMPLING, margin,
                      size_out=rate)


def frequency_response_table(schedule: LayerSchedule, num_freqs: int = 64) -> list[dict]:
    """Rows of (layer, frequency, gain in dB) for each layer's downsampling filter."""
    rows = []
    prev_rate = schedule.image_resolution
    for spec in schedule:
        factor = max(prev_rate // spec.rate, 1)
        k = design_lowpass(spec.cutoff, spec.half_width, prev_rate, factor)
        freqs = np.linspace(0, prev_rate / 2, num_freqs)
        mag = np.abs(k.response(freqs))
        for f, m in zip(freqs, mag):
            rows.append({
                "layer": spec.index, "rate_in": prev_rate, "rate_out": spec.rate,
                "cutoff": spec.cutoff, "half_width": spec.half_width,
                "freq": float(f), "gain_db": float(20 * np.log10(max(m, 1e-12))),
            })
        prev_rate = spec.rate
    return rows
