"""Pure-numpy fallback for the convolution kernels.

Each output position accumulates contributions in the same (channel, tap)
order via broadcasting, so the bit-exact circular shift equivariance of the
compiled kernels is preserved. Slower than the Cython path; selected only
when the extension is unavailable (or NGCCPHAT_FORCE_NUMPY=1).
"""

import numpy as np


def _shifted(x1d, offset, circular):
    # x1d viewed so that result[n] = x1d[n + offset] under the padding mode
    if circular:
        return np.roll(x1d, -offset)
    out = np.zeros_like(x1d)
    n = x1d.shape[0]
    if offset >= 0:
        out[: n - offset] = x1d[offset:]
    else:
        out[-offset:] = x1d[: n + offset]
    return out


def conv1d_forward(x, w, circular):
    """y[o, n] = sum_{c,t} w[o, c, t] * x[c, n + t - T//2]."""
    cin, n_len = x.shape
    cout, _, taps = w.shape
    half = taps // 2
    y = np.zeros((cout, n_len), dtype=np.float64)
    for c in range(cin):
        for t in range(taps):
            y += w[:, c, t, None] * _shifted(x[c], t - half, circular)[None, :]
    return y


def conv1d_grad_input(gy, w, circular):
    """gx[c, m] = sum_{o,t} w[o, c, t] * gy[o, m - t + T//2]."""
    cout, cin, taps = w.shape
    n_len = gy.shape[1]
    half = taps // 2
    gx = np.zeros((cin, n_len), dtype=np.float64)
    for o in range(cout):
        for t in range(taps):
            gx += w[o, :, t, None] * _shifted(gy[o], half - t, circular)[None, :]
    return gx


def conv1d_grad_weights(x, gy, taps, circular):
    """gw[o, c, t] = sum_n gy[o, n] * x[c, n + t - T//2].

    Uses a strided tap view and one matmul; weight gradients carry no
    summation-order contract, so BLAS is fine here.
    """
    x = np.asarray(x, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    cin, n_len = x.shape
    cout = gy.shape[0]
    half = taps // 2
    xp = np.zeros((cin, n_len + 2 * half))
    xp[:, half : half + n_len] = x
    if circular and half > 0:
        xp[:, :half] = x[:, n_len - half :]
        xp[:, half + n_len :] = x[:, :half]
    s0, s1 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(cin, taps, n_len), strides=(s0, s1, s1)
    )
    return np.einsum("on,ctn->oct", gy, cols, optimize=True)
