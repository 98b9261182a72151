"""Synthetic acoustic scenes with exact TDOA ground truth.

Scenes are rendered by summing fractionally-delayed, distance-attenuated
source waveforms per microphone (or convolving with a shoebox image-source
impulse response), plus white noise at a configurable SNR. Labels come from
the geometry alone, so render/label consistency is testable.
"""

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_SOUND = 343.0
DIST_FLOOR = 0.1


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class ArrayGeometry:
    """Microphone positions in meters, shape [M, 3]."""

    mic_positions: np.ndarray

    def __post_init__(self):
        self.mic_positions = np.asarray(self.mic_positions, dtype=np.float64)
        if self.mic_positions.ndim != 2 or self.mic_positions.shape[1] != 3:
            raise ValueError("mic_positions must be [M, 3]")
        if self.mic_positions.shape[0] < 2:
            raise ValueError("need at least 2 microphones")
        for i in range(self.num_mics):
            for j in range(i + 1, self.num_mics):
                if np.array_equal(self.mic_positions[i], self.mic_positions[j]):
                    raise ValueError("microphone positions must be distinct")

    @property
    def num_mics(self):
        return self.mic_positions.shape[0]

    def pairs(self):
        m = self.num_mics
        return [(i, j) for i in range(m) for j in range(i + 1, m)]

    def hash(self, fs, c):
        h = hashlib.sha256()
        h.update(np.round(self.mic_positions, 9).tobytes())
        h.update(f"{fs}:{c}".encode())
        return h.hexdigest()[:16]


@dataclass
class Shoebox:
    dimensions: np.ndarray  # [Lx, Ly, Lz] meters
    reflection: float  # frequency-independent wall coefficient
    max_order: int = 2

    def __post_init__(self):
        self.dimensions = np.asarray(self.dimensions, dtype=np.float64)
        if self.dimensions.shape != (3,) or np.any(self.dimensions <= 0):
            raise ValueError("room dimensions must be 3 positive lengths")
        if not 0.0 <= self.reflection <= 0.9:
            raise ValueError("reflection coefficient must be in [0, 0.9]")
        if self.max_order > 4:
            raise ValueError("max_order above 4 not supported")

    def contains(self, point, margin=0.0):
        p = np.asarray(point, float)
        return bool(np.all(p > margin) and np.all(p < self.dimensions - margin))


@dataclass
class SourceEvent:
    position: np.ndarray  # 3D meters
    waveform: np.ndarray
    onset: int = 0  # samples
    gain: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.waveform = np.asarray(self.waveform, dtype=np.float64)
        if not np.all(np.isfinite(self.waveform)):
            raise ValueError("waveform contains non-finite samples")
        if self.gain <= 0:
            raise ValueError("gain must be positive")


@dataclass
class AcousticScene:
    geometry: ArrayGeometry
    events: list
    noise_snr_db: float | None = None
    room: Shoebox | None = None
    sample_rate: float = 24000.0
    speed_of_sound: float = SPEED_OF_SOUND
    noise_floor_rms: float = 0.05  # noise level for silent (P=0) scenes

    def __post_init__(self):
        if self.room is not None:
            for pos in self.geometry.mic_positions:
                if not self.room.contains(pos):
                    raise ValueError("microphone outside room")
            for ev in self.events:
                if not self.room.contains(ev.position):
                    raise ValueError("source outside room")


def tetrahedral_array(diameter):
    """Regular tetrahedron with centroid at the origin.

    `diameter` is the array aperture: the (common) distance between any two
    microphones. An 8.4 cm aperture at 24 kHz and c = 343 m/s gives a
    maximum TDOA of 6 samples.
    """
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    verts = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    )
    verts *= diameter / (2.0 * np.sqrt(2.0))  # unit-cube edge is 2*sqrt(2)
    return ArrayGeometry(verts)


def max_tdoa(geometry, fs, c=SPEED_OF_SOUND):
    """Largest possible TDOA over all microphone pairs, in samples."""
    best = 0
    for i, j in geometry.pairs():
        dist = np.linalg.norm(
            geometry.mic_positions[i] - geometry.mic_positions[j]
        )
        best = max(best, int(round_half_away(dist * fs / c)))
    return best


def true_tdoas(scene):
    """Integer TDOA labels per microphone pair (i<j), one per event."""
    geo = scene.geometry
    fs, c = scene.sample_rate, scene.speed_of_sound
    labels = {}
    for i, j in geo.pairs():
        lags = []
        for ev in scene.events:
            di = np.linalg.norm(ev.position - geo.mic_positions[i])
            dj = np.linalg.norm(ev.position - geo.mic_positions[j])
            lags.append(int(round_half_away((di - dj) * fs / c)))
        labels[(i, j)] = lags
    return labels


def fractional_delay_kernel(frac, half_width):
    """Windowed-sinc interpolation kernel for a fractional shift in [0, 1)."""
    k = np.arange(-half_width, half_width + 1)
    t = k - frac
    kern = np.sinc(t)
    kern *= 0.5 * (1.0 + np.cos(np.pi * t / (half_width + 1)))
    return kern


def fractional_delay(signal, delay, filter_half_width=32):
    """Delay a signal by a (possibly fractional) number of samples.

    Integer delays reproduce exact shifts (the sinc kernel collapses to a
    unit impulse); zeros are shifted in at the start. Output length equals
    input length.
    """
    if filter_half_width < 16:
        raise ValueError("filter_half_width must be >= 16")
    signal = np.asarray(signal, dtype=np.float64)
    n = signal.shape[0]
    int_part = int(np.floor(delay))
    frac = delay - int_part
    if frac == 0.0:
        shifted = signal
    else:
        kern = fractional_delay_kernel(frac, filter_half_width)
        shifted = np.convolve(signal, kern)[
            filter_half_width : filter_half_width + n
        ]
    out = np.zeros(n)
    if int_part >= 0:
        if int_part < n:
            out[int_part:] = shifted[: n - int_part]
    else:
        if -int_part < n:
            out[: n + int_part] = shifted[-int_part:]
    return out


def image_source_rir(room, source, mic, max_order, fs, c=SPEED_OF_SOUND):
    """Shoebox image-source impulse response.

    Mirrors the source over the walls up to the given total reflection
    order; each image contributes a tap of amplitude beta^order / distance
    at its propagation delay, placed with fractional-delay interpolation.
    """
    source = np.asarray(source, float)
    mic = np.asarray(mic, float)
    if not (room.contains(source) and room.contains(mic)):
        raise ValueError("source and microphone must be strictly inside room")
    if max_order > 4:
        raise ValueError("max_order above 4 not supported")

    half = 32
    images = []  # (position, total reflections)
    r_range = range(-(max_order + 1), max_order + 2)
    axes = []
    for axis in range(3):
        opts = []
        for p in (0, 1):
            for r in r_range:
                order = abs(r - p) + abs(r)
                if order <= max_order:
                    coord = (1 - 2 * p) * source[axis] + 2 * r * room.dimensions[axis]
                    opts.append((coord, order))
        axes.append(opts)
    for cx, ox in axes[0]:
        for cy, oy in axes[1]:
            for cz, oz in axes[2]:
                order = ox + oy + oz
                if order <= max_order:
                    images.append((np.array([cx, cy, cz]), order))

    dists = [np.linalg.norm(pos - mic) for pos, _ in images]
    length = int(np.ceil(max(dists) * fs / c)) + 2 * half + 2
    rir = np.zeros(length)
    for (pos, order), dist in zip(images, dists):
        amp = room.reflection**order / max(dist, 1e-6)
        if amp == 0.0:
            continue
        delay = dist * fs / c
        int_part = int(np.floor(delay))
        frac = delay - int_part
        kern = fractional_delay_kernel(frac, half)
        lo = int_part - half
        for k in range(2 * half + 1):
            idx = lo + k
            if 0 <= idx < length:
                rir[idx] += amp * kern[k]
    return rir


def render_scene(scene, length, seed):
    """Render a scene to multichannel samples of the given length.

    Returns (samples [M, length], skipped_events). Noise is white Gaussian,
    scaled per channel to the scene SNR relative to the clean mix (or to
    noise_floor_rms when the channel is silent).
    """
    if length <= 0:
        raise ValueError("length must be positive")
    geo = scene.geometry
    fs, c = scene.sample_rate, scene.speed_of_sound
    out = np.zeros((geo.num_mics, length))
    skipped = 0
    for ev in scene.events:
        if ev.onset >= length:
            skipped += 1
            continue
        placed = np.zeros(length)
        n_copy = min(len(ev.waveform), length - ev.onset)
        placed[ev.onset : ev.onset + n_copy] = ev.waveform[:n_copy]
        for i in range(geo.num_mics):
            dist = np.linalg.norm(ev.position - geo.mic_positions[i])
            if scene.room is not None:
                rir = image_source_rir(
                    scene.room, ev.position, geo.mic_positions[i],
                    scene.room.max_order, fs, c,
                )
                out[i] += ev.gain * np.convolve(placed, rir)[:length]
            else:
                delayed = fractional_delay(placed, dist * fs / c)
                out[i] += ev.gain / max(dist, DIST_FLOOR) * delayed
    if skipped:
        warnings.warn(f"{skipped} event(s) with onset beyond render length skipped")

    if scene.noise_snr_db is not None:
        rng = np.random.default_rng(seed)
        for i in range(geo.num_mics):
            rms = float(np.sqrt(np.mean(out[i] ** 2)))
            std = (
                rms * 10.0 ** (-scene.noise_snr_db / 20.0)
                if rms > 0
                else scene.noise_floor_rms
            )
            out[i] += std * rng.standard_normal(length)
    return out, skipped


@dataclass
class DatasetSpec:
    """Configuration for synthetic frame generation."""

    n_frames: int = 1000
    polyphony_weights: dict = field(default_factory=lambda: {1: 1.0})
    snr_db_range: tuple | None = (20.0, 20.0)
    distance_range: tuple = (1.0, 3.0)
    min_angle_deg: float = 0.0
    waveform: str = "white_noise"  # or "bandlimited_noise"
    band_hz: tuple = (300.0, 8000.0)
    gain_range: tuple = (0.5, 1.0)
    room: dict | None = None  # {"dimensions": [..], "reflection": b, "max_order": q}
    array_diameter: float = 0.084
    sample_rate: float = 24000.0
    window: int = 480
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        self.polyphony_weights = {
            int(k): float(v) for k, v in self.polyphony_weights.items()
        }
        if any(v < 0 for v in self.polyphony_weights.values()):
            raise ValueError("polyphony weights must be non-negative")
        if sum(self.polyphony_weights.values()) <= 0:
            raise ValueError("polyphony weights must have positive mass")
        if self.waveform not in ("white_noise", "bandlimited_noise"):
            raise ValueError(f"unknown waveform family: {self.waveform}")

    def geometry(self):
        return tetrahedral_array(self.array_diameter)

    def tau_max(self):
        return max_tdoa(self.geometry(), self.sample_rate, self.speed_of_sound)

    def to_dict(self):
        d = dict(self.__dict__)
        d["polyphony_weights"] = {
            str(k): v for k, v in self.polyphony_weights.items()
        }
        for key in ("snr_db_range", "distance_range", "gain_range", "band_hz"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("snr_db_range", "distance_range", "gain_range", "band_hz"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FrameRecord:
    audio: np.ndarray  # [M, window]
    labels: dict  # (i, j) -> list of int lags
    polyphony: int
    seed: int


def _sample_direction(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _make_waveform(spec, rng, length):
    w = rng.standard_normal(length)
    if spec.waveform == "bandlimited_noise":
        # each event gets its own random pass-band, giving events distinct
        # spectral signatures (stand-ins for distinct real-world sounds)
        lo_lim, hi_lim = spec.band_hz
        f_lo = np.exp(rng.uniform(np.log(lo_lim), np.log(hi_lim / 2.0)))
        f_hi = min(f_lo * rng.uniform(1.5, 4.0), hi_lim)
        spec_w = np.fft.rfft(w)
        freqs = np.fft.rfftfreq(length, d=1.0 / spec.sample_rate)
        spec_w[(freqs < f_lo) | (freqs > f_hi)] = 0.0
        w = np.fft.irfft(spec_w, n=length)
        rms = np.sqrt(np.mean(w**2))
        if rms > 0:
            w /= rms
    return w


def generate_frame(spec, seed):
    """Generate one labeled frame from its own seeded random stream."""
    rng = np.random.default_rng(seed)
    weights = sorted(spec.polyphony_weights.items())
    ps = np.array([p for p, _ in weights])
    mass = np.array([w for _, w in weights], dtype=float)
    poly = int(rng.choice(ps, p=mass / mass.sum()))

    geo = spec.geometry()
    room = None
    center = np.zeros(3)
    if spec.room is not None:
        room = Shoebox(
            np.asarray(spec.room["dimensions"], float),
            float(spec.room.get("reflection", 0.5)),
            int(spec.room.get("max_order", 2)),
        )
        center = room.dimensions / 2.0
        geo = ArrayGeometry(geo.mic_positions + center)

    min_cos = np.cos(np.deg2rad(spec.min_angle_deg)) if spec.min_angle_deg > 0 else None
    dirs, positions = [], []
    for _ in range(poly):
        for _attempt in range(200):
            d = _sample_direction(rng)
            if min_cos is not None and any(np.dot(d, prev) > min_cos for prev in dirs):
                continue
            dist = rng.uniform(*spec.distance_range)
            pos = center + d * dist
            if room is not None and not room.contains(pos, margin=0.1):
                continue
            dirs.append(d)
            positions.append(pos)
            break
        else:
            raise RuntimeError("could not place source satisfying constraints")

    fs, c = spec.sample_rate, spec.speed_of_sound
    max_dist = spec.distance_range[1] + spec.array_diameter
    crop = int(np.ceil(max_dist * fs / c)) + 80
    render_len = crop + spec.window
    if room is not None:
        # reverberant path delays can exceed the direct-path bound
        render_len += int(np.ceil(2 * np.max(room.dimensions) * room.max_order * fs / c))
        crop = render_len - spec.window

    events = []
    for k in range(poly):
        events.append(
            SourceEvent(
                position=positions[k],
                waveform=_make_waveform(spec, rng, render_len),
                onset=0,
                gain=rng.uniform(*spec.gain_range),
            )
        )

    snr = None
    if spec.snr_db_range is not None:
        snr = float(rng.uniform(*spec.snr_db_range))
    scene = AcousticScene(
        geometry=geo, events=events, noise_snr_db=snr, room=room,
        sample_rate=fs, speed_of_sound=c,
    )
    audio, _ = render_scene(scene, render_len, seed=rng.integers(2**63))
    frame = audio[:, crop : crop + spec.window]
    return FrameRecord(
        audio=frame, labels=true_tdoas(scene), polyphony=poly, seed=seed
    )


def sample_dataset(spec, seed):
    """Yield FrameRecords; each frame owns an independent seeded stream."""
    children = np.random.SeedSequence(seed).spawn(spec.n_frames)
    for child in children:
        yield generate_frame(spec, child)


def _pair_key(pair):
    return f"{pair[0]}-{pair[1]}"


def save_dataset(spec, seed, out_dir, threads=1):
    """Render and persist a dataset: float32 waveforms + JSON sidecars.

    Frames own independent seeded streams, so rendering parallelizes
    without affecting the output bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    geo = spec.geometry()
    geo_hash = geo.hash(spec.sample_rate, spec.speed_of_sound)
    count = 0
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial

        children = np.random.SeedSequence(seed).spawn(spec.n_frames)
        with ProcessPoolExecutor(max_workers=threads) as pool:
            stream = pool.map(partial(generate_frame, spec), children, chunksize=8)
            stream = enumerate(stream)
    else:
        stream = enumerate(sample_dataset(spec, seed))
    for idx, rec in stream:
        stem = os.path.join(out_dir, f"frame_{idx:06d}")
        rec.audio.astype("<f4").tofile(stem + ".f32")
        sidecar = {
            "labels": {_pair_key(p): lags for p, lags in rec.labels.items()},
            "P": rec.polyphony,
            "geometry_hash": geo_hash,
            "seed": seed,
            "index": idx,
        }
        with open(stem + ".json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True)
        count += 1
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "n_frames": count,
        "channels": geo.num_mics,
        "window": spec.window,
        "geometry_hash": geo_hash,
        "mic_positions": geo.mic_positions.tolist(),
        "tau_max": spec.tau_max(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(data_dir):
    """Load a persisted dataset; returns (manifest, list of FrameRecords)."""
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    m = manifest["channels"]
    window = manifest["window"]
    records = []
    for idx in range(manifest["n_frames"]):
        stem = os.path.join(data_dir, f"frame_{idx:06d}")
        audio = np.fromfile(stem + ".f32", dtype="<f4").reshape(m, window)
        with open(stem + ".json") as fh:
            sidecar = json.load(fh)
        labels = {
            tuple(int(x) for x in key.split("-")): lags
            for key, lags in sidecar["labels"].items()
        }
        records.append(
            FrameRecord(
                audio=audio.astype(np.float64),
                labels=labels,
                polyphony=sidecar["P"],
                seed=sidecar["seed"],
            )
        )
    return manifest, records
