"""Benchmark the compiled convolution kernels against the numpy fallback.

Run as `python -m ngccphat.benchmark`. Times the three kernel entry points
at training-realistic shapes and a full model forward+backward step, and
verifies both backends agree numerically.
"""

import time

import numpy as np

from ngccphat import _np_kernels
from ngccphat import backend


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats=5):
    try:
        from ngccphat import _ckernels
    except ImportError:
        print("compiled backend unavailable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    cases = [
        ("sinc layer (1->32, 101 taps, N=480)", (1, 480), (32, 1, 101), True),
        ("mid layer (32->32, 11 taps, N=480)", (32, 480), (32, 32, 11), True),
        ("head layer (32->32, 5 taps, N=13)", (32, 13), (32, 32, 5), False),
    ]
    header = f"{'case':45s} {'cython':>10s} {'numpy':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, xshape, wshape, circular in cases:
        x = rng.standard_normal(xshape)
        w = rng.standard_normal(wshape)
        gy = rng.standard_normal((wshape[0], xshape[1]))

        y_c = _ckernels.conv1d_forward(x, w, circular)
        y_np = _np_kernels.conv1d_forward(x, w, circular)
        assert np.allclose(y_c, y_np, atol=1e-12)
        gx_c = _ckernels.conv1d_grad_input(gy, w, circular)
        gx_np = _np_kernels.conv1d_grad_input(gy, w, circular)
        assert np.allclose(gx_c, gx_np, atol=1e-12)
        gw_c = _ckernels.conv1d_grad_weights(x, gy, wshape[2], circular)
        gw_np = _np_kernels.conv1d_grad_weights(x, gy, wshape[2], circular)
        assert np.allclose(gw_c, gw_np, atol=1e-12)

        for op, args in [
            ("forward", lambda k: k.conv1d_forward(x, w, circular)),
            ("grad_input", lambda k: k.conv1d_grad_input(gy, w, circular)),
            ("grad_weights", lambda k: k.conv1d_grad_weights(x, gy, wshape[2], circular)),
        ]:
            t_c = _time(lambda: args(_ckernels), repeats)
            t_np = _time(lambda: args(_np_kernels), repeats)
            print(f"{name + ' ' + op:45s} {t_c * 1e3:8.2f}ms {t_np * 1e3:8.2f}ms "
                  f"{t_np / t_c:7.1f}x")


def bench_model_step(repeats=3):
    import os

    from ngccphat.model import ModelConfig, NgccPhatModel
    from ngccphat.pit import pit_loss, pit_loss_grad_logits

    rng = np.random.default_rng(1)
    config = ModelConfig()
    model = NgccPhatModel(config, seed=0)
    frame = rng.standard_normal((config.num_mics, config.window))
    labels = [[2] for _ in range(config.num_pairs)]

    def step():
        model.zero_grad()
        out = model.forward(frame)
        report = pit_loss(out.posterior, labels, 1)
        grad = pit_loss_grad_logits(out.posterior, labels, report)
        model.backward(grad, out.cache)

    t = _time(step, repeats)
    print(f"\nfull forward+backward per frame [{backend.BACKEND} backend]: "
          f"{t * 1e3:.1f}ms")
    if os.environ.get("NGCCPHAT_FORCE_NUMPY") != "1" and backend.BACKEND == "cython":
        print("re-run with NGCCPHAT_FORCE_NUMPY=1 for the fallback timing")


if __name__ == "__main__":
    bench_kernels()
    bench_model_step()
