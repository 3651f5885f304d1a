"""Ground-truth sound field generators and impulse-response data handling.

Two simulators are provided. The diffuse free-field generator assigns
independent band-limited noise excitations to near-uniform directions on a
large sphere and propagates each to the evaluation positions with the
free-space Green's function (distance attenuation plus fractional delay).
The image-source generator produces room impulse responses for a
rectangular room with a frequency-independent reflection coefficient.

Sub-sample propagation delays are realized with a 16-tap windowed-sinc
interpolation kernel; nearest-sample rounding would bias the spatial
coherence of the simulated fields.

A small on-disk container for measured or precomputed impulse responses is
also defined: a directory with a JSON manifest plus one little-endian
float64 raw file per response (see `save_rir_dataset`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.signal

from .covariance import fibonacci_lattice

__all__ = [
    "ExcitationSpec",
    "RoomSpec",
    "DiffuseSpec",
    "RirDataset",
    "DatasetSchemaError",
    "fractional_delay_kernel",
    "delay_signal",
    "bandlimited_noise",
    "simulate_diffuse",
    "image_source_rir",
    "render_room",
    "add_noise_snr",
    "save_rir_dataset",
    "load_rir_dataset",
]

_DELAY_TAPS = 16


class DatasetSchemaError(ValueError):
    """Raised for malformed or inconsistent impulse-response containers."""


@dataclass(frozen=True)
class ExcitationSpec:
    """Band-limited white-noise excitation.

    ``band`` is the (low, high) passband in Hz, ``num_samples`` the output
    length after the spectral-masking margins are discarded.
    """

    num_samples: int
    band: tuple[float, float] = (70.0, 1000.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 16:
            raise ValueError("need at least 16 samples")
        lo, hi = self.band
        if not 0 < lo < hi:
            raise ValueError(f"invalid band {self.band}")


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room with uniform real reflection coefficient."""

    dims: tuple[float, float, float]
    beta: float
    max_order: int
    src: tuple[float, float, float]
    discard: int = 800

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError("reflection coefficient must lie in [0, 1)")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")
        dims = np.asarray(self.dims, dtype=float)
        src = np.asarray(self.src, dtype=float)
        if np.any(dims <= 0):
            raise ValueError("room dimensions must be positive")
        if np.any(src <= 0) or np.any(src >= dims):
            raise ValueError("source must lie strictly inside the room")


@dataclass(frozen=True)
class DiffuseSpec:
    """Diffuse free-field simulation: directions on a sphere of given radius."""

    n_dirs: int
    radius: float
    seed: int = 0

    def __post_init__(self):
        if self.n_dirs < 1:
            raise ValueError("need at least one direction")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class RirDataset:
    """Impulse responses for microphone and validation positions."""

    fs: float
    mic_positions: np.ndarray
    validation_positions: np.ndarray
    mic_rirs: np.ndarray
    validation_rirs: np.ndarray

    def __post_init__(self):
        mp = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        vp = np.atleast_2d(np.asarray(self.validation_positions, dtype=float))
        mr = np.atleast_2d(np.asarray(self.mic_rirs, dtype=float))
        vr = np.atleast_2d(np.asarray(self.validation_rirs, dtype=float))
        object.__setattr__(self, "mic_positions", mp)
        object.__setattr__(self, "validation_positions", vp)
        object.__setattr__(self, "mic_rirs", mr)
        object.__setattr__(self, "validation_rirs", vr)
        if mp.shape[1] != 3 or vp.shape[1] != 3:
            raise DatasetSchemaError("positions must have shape (N, 3)")
        if mr.shape[0] != mp.shape[0]:
            raise DatasetSchemaError(
                f"{mp.shape[0]} microphone positions but {mr.shape[0]} responses"
            )
        if vr.shape[0] != vp.shape[0]:
            raise DatasetSchemaError(
                f"{vp.shape[0]} validation positions but {vr.shape[0]} responses"
            )
        if mr.shape[1] != vr.shape[1]:
            raise DatasetSchemaError("impulse responses must share one length")
        if not self.fs > 0:
            raise DatasetSchemaError("sample rate must be positive")


def fractional_delay_kernel(delay: float, taps: int = _DELAY_TAPS):
    """Windowed-sinc FIR realizing a pure delay of ``delay`` samples.

    Returns ``(offset, kernel)`` such that ``y[n] = sum_i kernel[i] *
    x[n - offset - i]`` approximates ``x[n - delay]``. Integer delays are
    reproduced exactly (the sinc collapses to a unit spike).
    """
    half = taps // 2
    offset = int(np.floor(delay)) - half + 1
    positions = offset + np.arange(taps) - delay  # in (-half, half]
    window = 0.5 * (1.0 + np.cos(np.pi * positions / half))
    return offset, np.sinc(positions) * window


def delay_signal(x: np.ndarray, delay: float, taps: int = _DELAY_TAPS) -> np.ndarray:
    """Delay ``x`` by a (fractional) number of samples, zero-padded edges."""
    x = np.asarray(x, dtype=float)
    offset, kernel = fractional_delay_kernel(delay, taps)
    conv = np.convolve(x, kernel)
    out = np.zeros_like(x)
    n = x.shape[0]
    dst_lo = max(0, offset)
    dst_hi = min(n, offset + conv.shape[0])
    if dst_lo < dst_hi:
        out[dst_lo:dst_hi] = conv[dst_lo - offset : dst_hi - offset]
    return out


def _bandlimited_block(rng, count: int, num_samples: int, band, fs: float) -> np.ndarray:
    """Rows of band-limited white noise with masking margins discarded."""
    lo, hi = band
    if hi >= fs / 2:
        raise ValueError(f"band {band} exceeds the Nyquist frequency {fs / 2}")
    margin = max(16, num_samples // 8)
    total = num_samples + 2 * margin
    white = rng.standard_normal((count, total))
    spec = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(total, d=1.0 / fs)
    spec[:, (freqs < lo) | (freqs > hi)] = 0.0
    shaped = np.fft.irfft(spec, n=total, axis=1)
    return shaped[:, margin : margin + num_samples]


def bandlimited_noise(spec: ExcitationSpec, fs: float) -> np.ndarray:
    """One realization of zero-mean band-limited white Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    return _bandlimited_block(rng, 1, spec.num_samples, spec.band, fs)[0]


def _random_rotation(rng) -> np.ndarray:
    """Uniform random rotation matrix via QR of a Gaussian matrix."""
    gauss = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def simulate_diffuse(
    spec: DiffuseSpec,
    excitation: ExcitationSpec,
    positions: np.ndarray,
    fs: float,
    c: float,
    center=None,
) -> np.ndarray:
    """Diffuse free-field signals at the given positions.

    Independent band-limited excitations are assigned to ``spec.n_dirs``
    directions on a sphere of radius ``spec.radius`` (a randomly rotated
    Fibonacci lattice, rotation seeded by ``spec.seed``) and propagated with
    the free-space Green's function: distance attenuation ``1 / (4 pi d)``
    and fractional propagation delay ``d / c``.

    Parameters
    ----------
    spec : DiffuseSpec
    excitation : ExcitationSpec
        Per-direction excitation family; ``excitation.seed`` seeds the
        direction signals.
    positions : np.ndarray
        Evaluation positions, shape (N, 3), strictly inside the sphere.
    fs, c : float
        Sampling rate and speed of sound.
    center : array_like, optional
        Sphere center; defaults to the centroid of ``positions``.

    Returns
    -------
    np.ndarray
        Signals of shape (N, excitation.num_samples).
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if center is None:
        center = positions.mean(axis=0)
    center = np.asarray(center, dtype=float).reshape(3)
    offsets = np.linalg.norm(positions - center, axis=1)
    if np.any(offsets >= spec.radius):
        raise ValueError("all positions must lie strictly inside the direction sphere")

    lattice = fibonacci_lattice(spec.n_dirs, spec.radius, center=(0.0, 0.0, 0.0))
    rotation = _random_rotation(np.random.default_rng(spec.seed))
    sources = lattice.points @ rotation.T + center

    dists = np.linalg.norm(positions[:, None, :] - sources[None, :, :], axis=2)
    delays = dists / c * fs
    pad = int(np.ceil(delays.max())) + _DELAY_TAPS
    T = excitation.num_samples

    exc_rng = np.random.default_rng(excitation.seed)
    signals = _bandlimited_block(exc_rng, spec.n_dirs, T + pad, excitation.band, fs)

    out = np.zeros((positions.shape[0], T))
    for j in range(spec.n_dirs):
        src_sig = signals[j]
        for p in range(positions.shape[0]):
            # Shift by delay - pad so that sample 0 of the output aligns
            # with sample `pad` of the padded excitation.
            shifted = delay_signal(src_sig, delays[p, j] - pad)
            out[p] += shifted[:T] / (4.0 * np.pi * dists[p, j])
    return out


def image_source_rir(room: RoomSpec, mic, fs: float, c: float) -> np.ndarray:
    """Impulse response of a rectangular room via the image-source sum.

    Image positions up to ``room.max_order`` total reflections contribute a
    distance-attenuated fractional-delay spike scaled by
    ``beta ** reflections``. The microphone must lie inside the room and not
    coincide with any image source.
    """
    mic = np.asarray(mic, dtype=float).reshape(3)
    dims = np.asarray(room.dims, dtype=float)
    src = np.asarray(room.src, dtype=float)
    if np.any(mic <= 0) or np.any(mic >= dims):
        raise ValueError("microphone must lie strictly inside the room")

    order = room.max_order
    span = (order + 1) // 2
    shifts = np.arange(-span, span + 1)
    grid = np.stack(np.meshgrid(shifts, shifts, shifts, indexing="ij"), axis=-1).reshape(-1, 3)
    parities = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), axis=-1).reshape(-1, 3)

    images = []
    counts = []
    for par in parities:
        pos = (1 - 2 * par) * src + 2.0 * grid * dims
        cnt = np.abs(grid - par).sum(axis=1) + np.abs(grid).sum(axis=1)
        keep = cnt <= order
        images.append(pos[keep])
        counts.append(cnt[keep])
    images = np.concatenate(images)
    counts = np.concatenate(counts)

    dist = np.linalg.norm(images - mic, axis=1)
    if dist.min() < 1e-6:
        raise ValueError("microphone coincides with an image source")
    amps = room.beta ** counts.astype(float) / (4.0 * np.pi * dist)
    delays = dist / c * fs

    length = int(np.ceil(delays.max())) + _DELAY_TAPS + 1
    rir = np.zeros(length)
    for amp, delay in zip(amps, delays):
        offset, kernel = fractional_delay_kernel(delay)
        lo = max(0, offset)
        hi = min(length, offset + kernel.shape[0])
        if lo < hi:
            rir[lo:hi] += amp * kernel[lo - offset : hi - offset]
    return rir


def render_room(
    room: RoomSpec,
    positions: np.ndarray,
    excitation: np.ndarray,
    num_samples: int,
    fs: float,
    c: float,
) -> np.ndarray:
    """Convolve an excitation with per-position room responses.

    The first ``room.discard`` convolution samples are dropped (onset
    transient) and the result is truncated to ``num_samples``; an error is
    raised when the excitation is too short to cover that.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    excitation = np.asarray(excitation, dtype=float)
    out = np.empty((positions.shape[0], num_samples))
    for i, pos in enumerate(positions):
        rir = image_source_rir(room, pos, fs, c)
        full = scipy.signal.fftconvolve(excitation, rir)
        usable = full[room.discard :]
        if usable.shape[0] < num_samples:
            raise ValueError(
                f"{usable.shape[0]} samples remain after discarding "
                f"{room.discard}, need {num_samples}"
            )
        out[i] = usable[:num_samples]
    return out


def add_noise_snr(signals: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Add white Gaussian noise at the requested SNR.

    The signal power is pooled over all channels; ``snr_db = inf`` returns
    an unchanged copy.
    """
    signals = np.asarray(signals, dtype=float)
    if np.isinf(snr_db) and snr_db > 0:
        return signals.copy()
    power = float(np.var(signals))
    if power == 0.0:
        raise ValueError("cannot scale noise against an all-zero signal")
    noise_std = np.sqrt(power * 10.0 ** (-snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return signals + noise_std * rng.standard_normal(signals.shape)


_MANIFEST = "manifest.json"


def save_rir_dataset(path, dataset: RirDataset) -> None:
    """Write a dataset directory: JSON manifest plus raw float64 files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    mic_files = [f"mic_{i:04d}.f64" for i in range(dataset.mic_rirs.shape[0])]
    val_files = [f"val_{i:04d}.f64" for i in range(dataset.validation_rirs.shape[0])]
    manifest = {
        "sample_rate": dataset.fs,
        "rir_length": int(dataset.mic_rirs.shape[1]),
        "mic_positions": dataset.mic_positions.tolist(),
        "validation_positions": dataset.validation_positions.tolist(),
        "mic_rir_files": mic_files,
        "validation_rir_files": val_files,
    }
    (root / _MANIFEST).write_text(json.dumps(manifest, indent=1))
    for name, rir in zip(mic_files, dataset.mic_rirs):
        (root / name).write_bytes(np.asarray(rir, dtype="<f8").tobytes())
    for name, rir in zip(val_files, dataset.validation_rirs):
        (root / name).write_bytes(np.asarray(rir, dtype="<f8").tobytes())


def _read_raw(path: Path, length: int) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    if data.shape[0] != length:
        raise DatasetSchemaError(f"{path.name}: expected {length} samples, found {data.shape[0]}")
    return data.astype(float)


def load_rir_dataset(path, fs: float | None = None) -> RirDataset:
    """Load a dataset directory, optionally resampling to ``fs``.

    Resampling uses polyphase rational resampling with the ratio
    ``fs / stored_rate`` reduced to small integers.
    """
    root = Path(path)
    manifest_path = root / _MANIFEST
    if not manifest_path.is_file():
        raise DatasetSchemaError(f"missing {_MANIFEST} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetSchemaError(f"malformed manifest: {exc}") from exc
    required = {
        "sample_rate",
        "rir_length",
        "mic_positions",
        "validation_positions",
        "mic_rir_files",
        "validation_rir_files",
    }
    missing = required - manifest.keys()
    if missing:
        raise DatasetSchemaError(f"manifest missing keys: {sorted(missing)}")
    length = int(manifest["rir_length"])
    mic_pos = np.asarray(manifest["mic_positions"], dtype=float)
    val_pos = np.asarray(manifest["validation_positions"], dtype=float)
    mic_files = manifest["mic_rir_files"]
    val_files = manifest["validation_rir_files"]
    if len(mic_files) != mic_pos.shape[0] or len(val_files) != val_pos.shape[0]:
        raise DatasetSchemaError("position and response counts disagree")
    mic_rirs = np.stack([_read_raw(root / f, length) for f in mic_files]) if mic_files else np.empty((0, length))
    val_rirs = np.stack([_read_raw(root / f, length) for f in val_files]) if val_files else np.empty((0, length))
    rate = float(manifest["sample_rate"])
    dataset = RirDataset(
        fs=rate,
        mic_positions=mic_pos,
        validation_positions=val_pos,
        mic_rirs=mic_rirs,
        validation_rirs=val_rirs,
    )
    if fs is not None and not np.isclose(fs, rate):
        ratio = Fraction(fs / rate).limit_denominator(1000)
        mic_rs = scipy.signal.resample_poly(dataset.mic_rirs, ratio.numerator, ratio.denominator, axis=1)
        val_rs = scipy.signal.resample_poly(dataset.validation_rirs, ratio.numerator, ratio.denominator, axis=1)
        dataset = RirDataset(
            fs=fs,
            mic_positions=mic_pos,
            validation_positions=val_pos,
            mic_rirs=mic_rs,
            validation_rirs=val_rs,
        )
    return dataset
