"""Framing, FFT cross-correlation and the PHAT-normalized correlation.

All correlations are computed over the full-length DFT of the analysis
window (no zero padding) and evaluated at integer lags -tau_max..tau_max.
"""

from dataclasses import dataclass

import numpy as np

PHAT_EPSILON = 1e-12


@dataclass
class Frame:
    """A single-channel analysis window."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("frame must be a non-empty 1D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("frame contains non-finite samples")


@dataclass
class CorrelationVector:
    """Correlation values over lags -tau_max..tau_max.

    Each of the N unit-modulus spectrum terms contributes at most 1/N, so
    every value is bounded by 1 (plus rounding slack). `degenerate` flags
    zero-energy input, where the epsilon guard forces an all-zero output.
    """

    values: np.ndarray
    tau_max: int
    degenerate: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (2 * self.tau_max + 1,):
            raise ValueError("correlation length must be 2*tau_max+1")

    @property
    def lags(self):
        return np.arange(-self.tau_max, self.tau_max + 1)

    def argmax_lag(self):
        return int(np.argmax(self.values)) - self.tau_max

    def csv_rows(self, pair_i, pair_j):
        """Rows `pair_i,pair_j,lag,value` for CSV export."""
        return [
            f"{pair_i},{pair_j},{lag},{val:.12g}"
            for lag, val in zip(self.lags, self.values)
        ]


def frame_signal(signal, window_len, hop):
    """Split a multichannel signal into non-padded per-channel frame lists.

    Returns a list over frame index; each entry is a list of per-channel
    Frame objects covering samples [t*hop, t*hop + window_len). A trailing
    partial window is dropped; a signal shorter than one window yields an
    empty list.
    """
    if window_len <= 0 or hop <= 0:
        raise ValueError("window_len and hop must be positive")
    signal = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    n = signal.shape[1]
    frames = []
    for start in range(0, n - window_len + 1, hop):
        frames.append(
            [Frame(ch[start : start + window_len], 0.0) for ch in signal]
        )
    return frames


def phat_weighted_spectrum(x_i, x_j, epsilon=PHAT_EPSILON):
    """Unit-modulus normalized cross-power spectrum of two equal-length frames."""
    cross = np.fft.fft(x_i) * np.conj(np.fft.fft(x_j))
    return cross / (np.abs(cross) + epsilon)


def _extract_lags(full_corr, tau_max):
    n = full_corr.shape[-1]
    idx = np.arange(-tau_max, tau_max + 1) % n
    return full_corr[..., idx]


def gcc_phat(x_i, x_j, tau_max, epsilon=PHAT_EPSILON):
    """PHAT cross-correlation of two frames at lags -tau_max..tau_max.

    Computed as the inverse DFT of the unit-modulus cross-power spectrum;
    the correlation takes the real part (the inputs are real).
    """
    xi = x_i.samples if isinstance(x_i, Frame) else np.asarray(x_i, float)
    xj = x_j.samples if isinstance(x_j, Frame) else np.asarray(x_j, float)
    if xi.shape != xj.shape:
        raise ValueError("frames must have equal length")
    n = xi.shape[0]
    if not tau_max < n / 2:
        raise ValueError("tau_max must be < N/2")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    degenerate = not (np.any(xi) and np.any(xj))
    weighted = phat_weighted_spectrum(xi, xj, epsilon)
    full = np.fft.ifft(weighted)
    values = _extract_lags(full.real, tau_max)
    assert np.max(np.abs(full.imag)) <= 1e-9
    return CorrelationVector(values, tau_max, degenerate=degenerate)


def gcc_phat_direct(x_i, x_j, tau_max, epsilon=PHAT_EPSILON):
    """O(N^2) term-by-term evaluation of the PHAT correlation (test oracle)."""
    xi = x_i.samples if isinstance(x_i, Frame) else np.asarray(x_i, float)
    xj = x_j.samples if isinstance(x_j, Frame) else np.asarray(x_j, float)
    if xi.shape != xj.shape:
        raise ValueError("frames must have equal length")
    n = xi.shape[0]
    if not tau_max < n / 2:
        raise ValueError("tau_max must be < N/2")
    k = np.arange(n)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / n)
    cross = (dft @ xi) * np.conj(dft @ xj)
    weighted = cross / (np.abs(cross) + epsilon)
    degenerate = not (np.any(xi) and np.any(xj))
    values = np.empty(2 * tau_max + 1)
    for i, tau in enumerate(range(-tau_max, tau_max + 1)):
        terms = weighted * np.exp(2j * np.pi * k * tau / n)
        values[i] = terms.sum().real / n
    return CorrelationVector(values, tau_max, degenerate=degenerate)


def top_k_peaks(corr, k):
    """Up to k local maxima as (lag, value), sorted by descending value.

    A lag qualifies when its value is >= both neighbors (endpoints compare
    one side only). Ties break toward smaller |lag|, then smaller lag.
    """
    if k < 1:
        return []
    v = corr.values
    n = v.shape[0]
    peaks = []
    for i in range(n):
        left_ok = i == 0 or v[i] >= v[i - 1]
        right_ok = i == n - 1 or v[i] >= v[i + 1]
        if left_ok and right_ok:
            lag = i - corr.tau_max
            peaks.append((lag, float(v[i])))
    peaks.sort(key=lambda p: (-p[1], abs(p[0]), p[0]))
    return peaks[:k]
