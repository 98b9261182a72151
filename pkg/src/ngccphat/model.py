"""The learned correlation network.

A shared filter bank (sinc band-pass layer + three convolutions) is applied
to every microphone; PHAT-normalized cross-correlations are then computed
channel-wise per microphone pair, processed by a shared per-pair head into
TDOA features, and projected to K categorical output tracks over the lag
axis.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ngccphat.autodiff import Conv1d, LeakyReLU, SincConv, softmax
from ngccphat.signal_core import PHAT_EPSILON, frame_signal

CHECKPOINT_MAGIC = b"NGCP"
FEATURE_MAGIC = b"NGCF"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    num_mics: int = 4
    filter_channels: int = 32  # L
    feature_channels: int = 16  # C
    tracks: int = 3  # K
    filter_lengths: tuple = (101, 11, 9, 7)
    head_lengths: tuple = (5, 5, 3, 1)
    tau_max: int = 6
    sample_rate: float = 24000.0
    window: int = 480
    epsilon: float = PHAT_EPSILON
    circular: bool = True

    def __post_init__(self):
        if self.tracks < 1 or self.tau_max < 1:
            raise ValueError("tracks and tau_max must be >= 1")
        if any(t % 2 == 0 for t in self.filter_lengths + self.head_lengths):
            raise ValueError("filter lengths must be odd")

    @property
    def num_pairs(self):
        return self.num_mics * (self.num_mics - 1) // 2

    @property
    def num_lags(self):
        return 2 * self.tau_max + 1

    def pairs(self):
        m = self.num_mics
        return [(i, j) for i in range(m) for j in range(i + 1, m)]

    def to_dict(self):
        d = dict(self.__dict__)
        d["filter_lengths"] = list(self.filter_lengths)
        d["head_lengths"] = list(self.head_lengths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("filter_lengths", "head_lengths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class _Stack:
    """A feed-forward layer stack with explicit per-call caches, so shared
    weights can be applied to several inputs before any backward pass."""

    def __init__(self, layers):
        self.layers = layers

    def forward(self, x):
        cache = []
        for layer in self.layers:
            x = layer.forward(x)
            cache.append(layer.get_cache())
        return x, cache

    def backward(self, grad, cache):
        for layer, state in zip(reversed(self.layers), reversed(cache)):
            layer.set_cache(state)
            grad = layer.backward(grad)
        return grad

    def parameters(self, prefix):
        out = []
        for idx, layer in enumerate(self.layers):
            for name, value, grad in layer.parameters():
                out.append((f"{prefix}.{idx}.{name}", value, grad))
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


class ChannelwiseGccPhat:
    """Differentiable PHAT correlation per filter-bank channel.

    The normalized cross-spectrum is treated as a quotient with an
    epsilon-guarded denominator; exact quotient-rule gradients are
    propagated (no stop-gradient on the magnitude).
    """

    def __init__(self, tau_max, epsilon=PHAT_EPSILON):
        self.tau_max = tau_max
        self.epsilon = epsilon

    def _lag_idx(self, n):
        return np.arange(-self.tau_max, self.tau_max + 1) % n

    def forward(self, feat_i, feat_j):
        if feat_i.shape != feat_j.shape:
            raise ValueError("channel features must have matching shapes")
        n = feat_i.shape[1]
        xi = np.fft.fft(feat_i, axis=1)
        xj = np.fft.fft(feat_j, axis=1)
        cross = xi * np.conj(xj)
        mag = np.abs(cross)
        denom = mag + self.epsilon
        weighted = cross / denom
        full = np.fft.ifft(weighted, axis=1).real
        corr = full[:, self._lag_idx(n)]
        cache = (xi, xj, cross, mag, denom, n)
        return corr, cache

    def backward(self, grad_corr, cache):
        xi, xj, cross, mag, denom, n = cache
        g_full = np.zeros((grad_corr.shape[0], n))
        g_full[:, self._lag_idx(n)] = grad_corr
        g_w = np.fft.fft(g_full, axis=1) / n  # d/dRe + i*d/dIm of weighted
        a, b = cross.real, cross.imag
        m_guard = np.maximum(mag, 1e-300)
        inv_d = 1.0 / denom
        common = 1.0 / (m_guard * denom**2)
        ga = g_w.real * (inv_d - a * a * common) - g_w.imag * a * b * common
        gb = -g_w.real * a * b * common + g_w.imag * (inv_d - b * b * common)
        g_cross = ga + 1j * gb
        g_xi = g_cross * xj
        g_xj = np.conj(g_cross) * xi
        grad_i = n * np.fft.ifft(g_xi, axis=1).real
        grad_j = n * np.fft.ifft(g_xj, axis=1).real
        return grad_i, grad_j


@dataclass
class ModelOutput:
    posterior: np.ndarray  # [pairs, K, lags]
    logits: np.ndarray  # [pairs, K, lags]
    feature: np.ndarray  # [C, pairs, lags]
    cache: dict = field(repr=False, default=None)


class NgccPhatModel:
    """Full network: filter bank -> channel-wise correlation -> head -> tracks."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        L = c.filter_channels
        fb = [SincConv(L, c.filter_lengths[0], c.sample_rate, c.circular), LeakyReLU()]
        for taps in c.filter_lengths[1:]:
            fb += [Conv1d(L, L, taps, c.circular, rng=rng), LeakyReLU()]
        self.filterbank = _Stack(fb)

        head = []
        chans = [L, L, L, c.feature_channels]
        prev = L
        for out_ch, taps in zip(chans, c.head_lengths):
            head += [Conv1d(prev, out_ch, taps, circular=False, rng=rng), LeakyReLU()]
            prev = out_ch
        self.head = _Stack(head)
        self.track = Conv1d(c.feature_channels, c.tracks, 1, circular=False, rng=rng)
        self.gcc = ChannelwiseGccPhat(c.tau_max, c.epsilon)
        self.step_count = 0
        self.seed = seed
        self.meta = {}  # free-form provenance (e.g. training geometry hash)

    def parameters(self):
        params = self.filterbank.parameters("filterbank")
        params += self.head.parameters("head")
        params += [("track." + n, v, g) for n, v, g in self.track.parameters()]
        return params

    def zero_grad(self):
        self.filterbank.zero_grad()
        self.head.zero_grad()
        self.track.zero_grad()

    def filterbank_forward(self, frame):
        """Filter-bank features for one microphone: [window] -> [L, window]."""
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.config.window,):
            raise ValueError(
                f"expected frame of length {self.config.window}, got {frame.shape}"
            )
        y, _ = self.filterbank.forward(frame[None, :])
        return y

    def forward(self, frames):
        """Run the full network on one multichannel frame [M, window]."""
        c = self.config
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape != (c.num_mics, c.window):
            raise ValueError(
                f"expected input of shape {(c.num_mics, c.window)}, got {frames.shape}"
            )
        feats, fb_caches = [], []
        for m in range(c.num_mics):
            y, cache = self.filterbank.forward(frames[m][None, :])
            feats.append(y)
            fb_caches.append(cache)

        corrs, gcc_caches = [], []
        for i, j in c.pairs():
            corr, cache = self.gcc.forward(feats[i], feats[j])
            corrs.append(corr)
            gcc_caches.append(cache)

        features, head_caches = [], []
        logits = np.empty((c.num_pairs, c.tracks, c.num_lags))
        track_caches = []
        for p in range(c.num_pairs):
            feat, cache = self.head.forward(corrs[p])
            features.append(feat)
            head_caches.append(cache)
            logits[p] = self.track.forward(feat)
            track_caches.append(self.track.get_cache())

        posterior = softmax(logits, axis=2)
        feature = np.stack(features, axis=1)  # [C, pairs, lags]
        cache = {
            "fb": fb_caches,
            "gcc": gcc_caches,
            "head": head_caches,
            "track": track_caches,
        }
        return ModelOutput(posterior, logits, feature, cache)

    def backward(self, grad_logits, cache):
        """Accumulate parameter gradients from dLoss/dlogits [pairs, K, lags]."""
        c = self.config
        grad_feats = [np.zeros((c.filter_channels, c.window)) for _ in range(c.num_mics)]
        for p, (i, j) in enumerate(c.pairs()):
            self.track.set_cache(cache["track"][p])
            g_feat = self.track.backward(grad_logits[p])
            g_corr = self.head.backward(g_feat, cache["head"][p])
            g_i, g_j = self.gcc.backward(g_corr, cache["gcc"][p])
            grad_feats[i] += g_i
            grad_feats[j] += g_j
        for m in range(c.num_mics):
            self.filterbank.backward(grad_feats[m], cache["fb"][m])

    def extract_features(self, signal):
        """Non-overlapping windowed TDOA features for a long multichannel
        signal; the track projection is skipped."""
        c = self.config
        out = []
        for frame_set in frame_signal(signal, c.window, c.window):
            frames = np.stack([f.samples for f in frame_set])
            out.append(self.forward(frames).feature)
        return out

    # ---- checkpoint I/O -------------------------------------------------

    def save_checkpoint(self, path):
        params = self.parameters()
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "seed": self.seed,
            "step_count": self.step_count,
            "meta": self.meta,
            "params": [
                {"name": name, "shape": list(value.shape)}
                for name, value, _ in params
            ],
        }
        blob = json.dumps(manifest, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            for _, value, _ in params:
                fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())

    @classmethod
    def load_checkpoint(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError("not a checkpoint file")
            version, blob_len = struct.unpack("<IQ", fh.read(12))
            if version != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            manifest = json.loads(fh.read(blob_len))
            model = cls(ModelConfig.from_dict(manifest["config"]),
                        seed=manifest["seed"])
            model.step_count = manifest["step_count"]
            model.meta = manifest.get("meta", {})
            for entry, (name, value, _) in zip(manifest["params"], model.parameters()):
                if entry["name"] != name or tuple(entry["shape"]) != value.shape:
                    raise ValueError(f"checkpoint/model mismatch at {name}")
                raw = fh.read(4 * int(np.prod(value.shape)))
                value[:] = np.frombuffer(raw, dtype="<f4").reshape(value.shape)
        return model, manifest


def write_feature_file(path, features, config):
    """Binary feature container: header + [C, pairs, lags] float32 frames."""
    arr = np.stack(features) if features else np.empty(
        (0, config.feature_channels, config.num_pairs, config.num_lags)
    )
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(config.hash().encode())  # 16 hex chars
        fh.write(struct.pack("<QIII", arr.shape[0], config.feature_channels,
                             config.num_pairs, config.num_lags))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path):
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise ValueError("not a feature file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported feature file version {version}")
        config_hash = fh.read(16).decode()
        n_frames, c, pairs, lags = struct.unpack("<QIII", fh.read(20))
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(n_frames, c, pairs, lags)
    return config_hash, data


def posterior_csv_rows(posteriors, frame_indices=None):
    """`frame,pair,track,lag,prob` rows for posterior plot export."""
    rows = ["frame,pair,track,lag,prob"]
    for f_idx, post in enumerate(posteriors):
        frame = frame_indices[f_idx] if frame_indices is not None else f_idx
        n_pairs, k_tracks, n_lags = post.shape
        tau_max = (n_lags - 1) // 2
        for p in range(n_pairs):
            for k in range(k_tracks):
                for lag_i in range(n_lags):
                    rows.append(
                        f"{frame},{p},{k},{lag_i - tau_max},{post[p, k, lag_i]:.8g}"
                    )
    return rows
