"""Minimal reverse-mode building blocks for the correlation network.

The architecture is a fixed pipeline, so each layer carries an explicit
backward function instead of a general tape. All math is float64; parameter
gradients accumulate into per-layer buffers until `zero_grad`.
"""

import numpy as np

from ngccphat import backend


class NonFiniteError(RuntimeError):
    """A forward or backward pass produced NaN/Inf."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Conv1d:
    """1D cross-correlation-style convolution, length-preserving, no bias.

    Padding is circular by default (exact shift equivariance) or zero.
    """

    def __init__(self, c_in, c_out, taps, circular=True, rng=None, scale=None):
        if taps % 2 == 0:
            raise ValueError("tap count must be odd")
        self.c_in, self.c_out, self.taps = c_in, c_out, taps
        self.circular = circular
        if rng is None:
            self.weights = np.zeros((c_out, c_in, taps))
        else:
            if scale is None:
                scale = 1.0 / np.sqrt(c_in * taps)
            self.weights = scale * rng.standard_normal((c_out, c_in, taps))
        self.grad = np.zeros_like(self.weights)
        self._x = None

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape[0] != self.c_in:
            raise ValueError(
                f"expected {self.c_in} input channels, got {x.shape[0]}"
            )
        self._x = x
        y = backend.conv1d_forward(x, self.weights, self.circular)
        _check_finite(y, "conv1d output")
        return y

    def backward(self, grad_y):
        grad_y = np.ascontiguousarray(grad_y, dtype=np.float64)
        self.grad += backend.conv1d_grad_weights(
            self._x, grad_y, self.taps, self.circular
        )
        return backend.conv1d_grad_input(grad_y, self.weights, self.circular)

    def parameters(self):
        return [("weights", self.weights, self.grad)]

    def zero_grad(self):
        self.grad[:] = 0.0

    # forward caches are swappable so shared weights can serve several
    # inputs (one per microphone / pair) before backward runs
    def get_cache(self):
        return self._x

    def set_cache(self, state):
        self._x = state


class SincConv:
    """Band-pass filter bank with two learnable cutoffs per filter.

    Kernels are the windowed difference of two sinc low-passes; gradients
    flow to the raw cutoff scalars through the materialized kernels. Cutoffs
    are reparameterized as f1 = f_min + |low|, f2 = min(f1 + b_min + |band|,
    f_max), all as fractions of the sampling rate, which keeps
    0 < f1 < f2 < Nyquist.
    """

    F_MIN = 30.0  # Hz
    BAND_MIN = 50.0  # Hz

    def __init__(self, n_filters, taps, sample_rate, circular=True, rng=None):
        if taps % 2 == 0:
            raise ValueError("tap count must be odd")
        self.n_filters, self.taps = n_filters, taps
        self.sample_rate = sample_rate
        self.circular = circular
        self.f_min = self.F_MIN / sample_rate
        self.b_min = self.BAND_MIN / sample_rate
        self.f_max = 0.5 * 0.99

        low, band = self._mel_init(n_filters, sample_rate)
        self.low_raw = low
        self.band_raw = band
        self.grad_low = np.zeros(n_filters)
        self.grad_band = np.zeros(n_filters)

        half = taps // 2
        self._n = np.arange(-half, half + 1, dtype=np.float64)
        self._window = 0.54 + 0.46 * np.cos(np.pi * self._n / half)  # Hamming
        self._x = None
        self._cache = None

    def _mel_init(self, n_filters, fs):
        def mel(f):
            return 2595.0 * np.log10(1.0 + f / 700.0)

        def imel(m):
            return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

        edges = imel(np.linspace(mel(self.F_MIN), mel(fs / 2 * 0.95), n_filters + 1))
        f1 = edges[:-1] / fs
        f2 = edges[1:] / fs
        low = f1 - self.f_min
        band = f2 - f1 - self.b_min
        return np.maximum(low, 1e-4), np.maximum(band, 1e-4)

    def cutoffs(self):
        """(f1, f2) per filter as fractions of Fs, after reparameterization."""
        f1 = np.minimum(self.f_min + np.abs(self.low_raw), self.f_max - self.b_min)
        f2 = np.minimum(f1 + self.b_min + np.abs(self.band_raw), self.f_max)
        return f1, f2

    def _materialize(self):
        f1, f2 = self.cutoffs()
        n = self._n
        arg1 = 2.0 * np.pi * np.outer(f1, n)
        arg2 = 2.0 * np.pi * np.outer(f2, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            kern = (np.sin(arg2) - np.sin(arg1)) / (np.pi * n)
        center = self.taps // 2
        kern[:, center] = 2.0 * (f2 - f1)
        kern *= self._window
        # d kern / d f2 = 2 cos(2 pi f2 n) * window (valid at n = 0 too)
        dk_df2 = 2.0 * np.cos(arg2) * self._window
        dk_df1 = -2.0 * np.cos(arg1) * self._window
        return kern, dk_df1, dk_df2

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape[0] != 1:
            raise ValueError("sinc layer expects a single input channel")
        kern, dk_df1, dk_df2 = self._materialize()
        self._x = x
        self._cache = (kern, dk_df1, dk_df2)
        w = np.ascontiguousarray(kern[:, None, :])
        y = backend.conv1d_forward(x, w, self.circular)
        _check_finite(y, "sinc output")
        return y

    def backward(self, grad_y):
        grad_y = np.ascontiguousarray(grad_y, dtype=np.float64)
        kern, dk_df1, dk_df2 = self._cache
        gw = backend.conv1d_grad_weights(self._x, grad_y, self.taps, self.circular)
        gw = gw[:, 0, :]  # [L, taps]
        gf1 = np.sum(gw * dk_df1, axis=1)
        gf2 = np.sum(gw * dk_df2, axis=1)
        # chain through the reparameterization; clamped cutoffs stop gradients
        f1_free = self.f_min + np.abs(self.low_raw) < self.f_max - self.b_min
        f1, _ = self.cutoffs()
        f2_free = f1 + self.b_min + np.abs(self.band_raw) < self.f_max
        sign_low = np.where(self.low_raw >= 0, 1.0, -1.0)
        sign_band = np.where(self.band_raw >= 0, 1.0, -1.0)
        self.grad_low += (
            sign_low * np.where(f1_free, gf1 + np.where(f2_free, gf2, 0.0), 0.0)
        )
        self.grad_band += sign_band * np.where(f2_free, gf2, 0.0)
        w = np.ascontiguousarray(kern[:, None, :])
        return backend.conv1d_grad_input(grad_y, w, self.circular)

    def parameters(self):
        return [
            ("low_raw", self.low_raw, self.grad_low),
            ("band_raw", self.band_raw, self.grad_band),
        ]

    def zero_grad(self):
        self.grad_low[:] = 0.0
        self.grad_band[:] = 0.0

    def get_cache(self):
        return (self._x, self._cache)

    def set_cache(self, state):
        self._x, self._cache = state


class LeakyReLU:
    """Elementwise leaky rectifier; preserves exact shift equivariance."""

    def __init__(self, slope=0.2):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x >= 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, grad_y):
        return np.where(self._mask, grad_y, self.slope * grad_y)

    def parameters(self):
        return []

    def zero_grad(self):
        pass

    def get_cache(self):
        return self._mask

    def set_cache(self, state):
        self._mask = state


def log_softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def softmax_xent(logits, target_lags, tau_max):
    """Average cross-entropy over K tracks against one target lag each.

    logits: [K, 2*tau_max+1]; target_lags: K integers in [-tau_max, tau_max].
    Returns (loss, grad wrt logits) with grad = (softmax - onehot) / K.
    """
    k_tracks = logits.shape[0]
    idx = np.asarray(target_lags) + tau_max
    if np.any(idx < 0) or np.any(idx >= logits.shape[1]):
        raise ValueError("target lag outside the lag axis")
    logp = log_softmax(logits, axis=1)
    loss = -np.mean(logp[np.arange(k_tracks), idx])
    grad = np.exp(logp)
    grad[np.arange(k_tracks), idx] -= 1.0
    return loss, grad / k_tracks


class Adam:
    """Bias-corrected Adam over a flat list of (name, value, grad) params."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(v) for _, v, _ in self.params]
        self.v = [np.zeros_like(v) for _, v, _ in self.params]

    def step(self):
        self.t += 1
        for i, (_, value, grad) in enumerate(self.params):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * grad**2
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for _, _, grad in self.params:
            grad[:] = 0.0


def grad_check(loss_fn, params, n_probe=50, step=1e-6, rng=None):
    """Central-difference check of analytic gradients.

    loss_fn() must run forward+backward from scratch and return the loss,
    leaving gradients in the (name, value, grad) triples. Probes up to
    n_probe random entries per parameter; returns a report dict with the
    max relative error and the worst offender.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for _, _, grad in params:
        grad[:] = 0.0
    loss_fn()
    analytic = [(name, grad.copy()) for name, _, grad in params]

    worst = {"name": None, "index": None, "rel_err": 0.0}
    results = {}
    for (name, value, grad), (_, g_ana) in zip(params, analytic):
        flat_v = value.reshape(-1)
        flat_g = g_ana.reshape(-1)
        n = flat_v.size
        idxs = rng.choice(n, size=min(n_probe, n), replace=False)
        max_rel = 0.0
        for i in idxs:
            orig = flat_v[i]
            flat_v[i] = orig + step
            lp = loss_fn()
            flat_v[i] = orig - step
            lm = loss_fn()
            flat_v[i] = orig
            numeric = (lp - lm) / (2 * step)
            denom = max(abs(numeric), abs(flat_g[i]), 1e-8)
            rel = abs(numeric - flat_g[i]) / denom
            if rel > max_rel:
                max_rel = rel
            if rel > worst["rel_err"]:
                worst = {"name": name, "index": int(i), "rel_err": rel}
        results[name] = max_rel
    return {"per_param": results, "max_rel_err": worst["rel_err"], "worst": worst}
