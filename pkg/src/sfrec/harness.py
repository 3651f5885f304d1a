"""Experiment harness: configuration, metrics, cross-validation, sweeps.

Runs seeded Monte-Carlo experiments over parameter grids (window length,
SNR, source-sphere radius, quadrature resolution, sample budget), selecting
the noise parameter of every method by leave-one-microphone-out
cross-validation, and writes the per-trial and aggregated results as CSV.

All randomness is derived from the experiment seed plus structural indices
(trial, grid point, purpose), so reruns of the same configuration are
bit-identical regardless of execution order. Wall-clock timings are kept
out of the CSV files for that reason and written to a JSON sidecar instead.
"""

from __future__ import annotations

import csv
import json
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .baselines import (
    FreqKernelConfig,
    apply_fir_bank,
    fd_krr_full,
    fd_krr_trunc,
    fd_krr_windowed,
    spatial_baseline,
)
from .covariance import (
    CovarianceSet,
    Geometry,
    KernelModel,
    MediumParams,
    SourceSpectrum,
    build_covariance_set,
    fibonacci_lattice,
)
from .estimator import (
    Reconstruction,
    fit_masked_posterior,
    fit_posterior,
    masked_posterior_cov,
    reconstruct_stream,
)
from .selection import (
    SelectionMask,
    random_selection,
    recent_selection,
    select,
)
from .simulator import (
    DiffuseSpec,
    ExcitationSpec,
    RoomSpec,
    add_noise_snr,
    bandlimited_noise,
    render_room,
    simulate_diffuse,
)

__all__ = [
    "METHOD_NAMES",
    "SELECTION_STRATEGIES",
    "ExperimentConfig",
    "SweepRecord",
    "SweepResult",
    "ConfigError",
    "derive_seed",
    "circular_array",
    "disc_grid",
    "nmse",
    "empirical_error_variance",
    "confidence_interval",
    "cv_select_sigma2",
    "reconstruct_method",
    "load_config",
    "config_from_dict",
    "run_sweep",
]

METHOD_NAMES = (
    "spatio-temporal",
    "spatial",
    "fd-krr-full",
    "fd-krr-causal",
    "fd-krr-noncausal",
    "fd-krr-trunc",
)
SELECTION_STRATEGIES = ("proposed", "random", "recent")

_WORKERS_ENV = "SFREC_WORKERS"


class ConfigError(ValueError):
    """Raised for invalid experiment configuration files."""


def derive_seed(*parts) -> int:
    """Deterministic 64-bit seed from mixed integer/string parts."""
    entropy = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# geometry builders


def circular_array(num_mics: int, radius: float, center) -> np.ndarray:
    """Evenly spaced microphones on a horizontal circle."""
    center = np.asarray(center, dtype=float).reshape(3)
    angles = 2.0 * np.pi * np.arange(num_mics) / num_mics
    out = np.tile(center, (num_mics, 1))
    out[:, 0] += radius * np.cos(angles)
    out[:, 1] += radius * np.sin(angles)
    return out


def disc_grid(radius: float, spacing: float, center) -> np.ndarray:
    """Horizontal square-grid points within a disc, row-major order."""
    center = np.asarray(center, dtype=float).reshape(3)
    n = int(np.floor(radius / spacing + 1e-9))
    points = []
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            if i * i + j * j <= n * n:
                points.append(center + np.array([i * spacing, j * spacing, 0.0]))
    return np.asarray(points)


# ---------------------------------------------------------------------------
# metrics


def nmse(u_hat: np.ndarray, u: np.ndarray, trim: int = 200, warmup: int = 0) -> float:
    """Normalized mean-square error in dB over the trimmed time range.

    Columns ``[max(trim, warmup), N - trim)`` are scored, excluding both the
    record edges and any estimator warm-up. A perfect reconstruction is
    clamped to the -300 dB sentinel; zero reference energy is an error.
    """
    u_hat = np.asarray(u_hat, dtype=float)
    u = np.asarray(u, dtype=float)
    if u_hat.shape != u.shape:
        raise ValueError(f"shape mismatch {u_hat.shape} vs {u.shape}")
    n = u.shape[-1]
    if n <= 2 * trim:
        raise ValueError(f"record of {n} samples too short for trim {trim}")
    start = max(trim, warmup)
    stop = n - trim
    if start >= stop:
        raise ValueError("no samples left after trimming and warm-up exclusion")
    diff = u_hat[..., start:stop] - u[..., start:stop]
    ref = float(np.sum(u[..., start:stop] ** 2))
    if ref == 0.0:
        raise ValueError("reference signal has zero energy in the scored range")
    err = float(np.sum(diff**2))
    if err == 0.0:
        return -300.0
    return max(-300.0, 10.0 * np.log10(err / ref))


def empirical_error_variance(errors: np.ndarray) -> np.ndarray:
    """Mean squared error per target over the validation time indices."""
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    if errors.shape[1] < 2:
        raise ValueError("need at least two time indices")
    return np.mean(errors**2, axis=1)


def confidence_interval(samples) -> tuple[float, float]:
    """95% normal-approximation confidence interval for the mean."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise ValueError("need at least two samples")
    mean = float(np.mean(samples))
    half = 1.96 * float(np.std(samples, ddof=1)) / np.sqrt(samples.size)
    return mean - half, mean + half


# ---------------------------------------------------------------------------
# method adapters


@dataclass(frozen=True)
class MethodContext:
    """Per-method settings shared by cross-validation and reconstruction."""

    name: str
    window: int
    kernel_model: KernelModel | None
    medium: MediumParams
    passband: tuple[float, float]

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}, expected one of {METHOD_NAMES}")
        if self.name in ("spatio-temporal", "spatial") and self.kernel_model is None:
            raise ValueError(f"method {self.name!r} needs a kernel model")


def _stacked_windows(signals: np.ndarray, window: int) -> np.ndarray:
    """Stacked causal windows, shape (M * window, T - window + 1)."""
    M, T = signals.shape
    out = np.empty((M * window, T - window + 1))
    for w in range(window):
        out[w * M : (w + 1) * M] = signals[:, window - 1 - w : T - w]
    return out


def _passband_residual_energy(err: np.ndarray, fs: float, passband) -> float:
    """Squared residual summed over the passband bins of the residual DFT."""
    spec = np.fft.rfft(err)
    freqs = np.fft.rfftfreq(err.shape[0], d=1.0 / fs)
    lo, hi = passband
    keep = (freqs >= lo) & (freqs <= hi)
    return float(np.sum(np.abs(spec[keep]) ** 2))


def _cv_errors_windowed_kernel(ctx, signals, mics, grid, causal):
    """Held-out-microphone errors of the finite-window FD estimator."""
    M, T = signals.shape
    W = ctx.window
    L = W if causal else 2 * W - 1
    fs = ctx.medium.fs
    from .baselines import _bin_filters, _passband_bins  # internal reuse

    bins = _passband_bins(L, fs, ctx.passband)
    out_slice = slice(L - 1, T) if causal else slice(W - 1, T - W + 1)
    errors = np.zeros(len(grid))
    if bins.size == 0:
        # No usable bins: prediction is identically zero for every sigma2.
        for m in range(M):
            target = signals[m, out_slice]
            errors += _passband_residual_energy(-target, fs, ctx.passband)
        return errors
    frames = np.lib.stride_tricks.sliding_window_view(signals, L, axis=1)
    spec = np.fft.rfft(frames, axis=2)[:, :, bins]
    omegas = 2.0 * np.pi * bins * fs / L
    coeff = (2.0 / L) * np.exp(2j * np.pi * bins * (W - 1) / L)
    for m in range(M):
        others = np.asarray([i for i in range(M) if i != m])
        geo = Geometry(mics=mics[others], targets=mics[m : m + 1], window=1)
        target = signals[m, out_slice]
        for gi, sigma2 in enumerate(grid):
            cfg = FreqKernelConfig(medium=ctx.medium, passband=ctx.passband, sigma2=sigma2)
            filters = _bin_filters(geo, cfg, omegas)[:, 0, :]  # (B, M-1)
            rec = np.einsum("bm,mtb->tb", filters, spec[others])
            pred = np.real(rec @ coeff)
            errors[gi] += _passband_residual_energy(pred - target, fs, ctx.passband)
    return errors


def _cv_errors(ctx: MethodContext, signals: np.ndarray, mics: np.ndarray, grid) -> np.ndarray:
    """Total held-out prediction error per noise-grid value."""
    M, T = signals.shape
    name = ctx.name
    fs = ctx.medium.fs

    if name in ("spatio-temporal", "spatial"):
        W = ctx.window if name == "spatio-temporal" else 1
        geo = Geometry(mics=mics, targets=mics, window=W)
        kyy = build_covariance_set(ctx.kernel_model, geo).kyy
        stacked = _stacked_windows(signals, W)
        errors = np.zeros(len(grid))
        for m in range(M):
            kept = np.ones(M * W, dtype=bool)
            kept[np.arange(W) * M + m] = False
            kept_idx = np.flatnonzero(kept)
            # The held-out microphone at lag zero is itself one of the
            # stacked samples, so its cross-covariance row is a slice.
            kuy_row = kyy[m, kept_idx]
            kyy_sub = kyy[np.ix_(kept_idx, kept_idx)]
            windows = stacked[kept_idx]
            target = signals[m, W - 1 :]
            for gi, sigma2 in enumerate(grid):
                factor = np.linalg.cholesky(kyy_sub + sigma2 * np.eye(kept_idx.size))
                filt = scipy.linalg.cho_solve((factor, True), kuy_row)
                pred = filt @ windows
                errors[gi] += float(np.sum((pred - target) ** 2))
        return errors

    if name == "fd-krr-full":
        from .baselines import _bin_filters, _passband_bins

        bins = _passband_bins(T, fs, ctx.passband)
        spec = np.fft.rfft(signals, axis=1)
        errors = np.zeros(len(grid))
        if bins.size == 0:
            return errors
        omegas = 2.0 * np.pi * bins * fs / T
        for m in range(M):
            others = np.asarray([i for i in range(M) if i != m])
            geo = Geometry(mics=mics[others], targets=mics[m : m + 1], window=1)
            obs = spec[m, bins]
            for gi, sigma2 in enumerate(grid):
                cfg = FreqKernelConfig(medium=ctx.medium, passband=ctx.passband, sigma2=sigma2)
                filters = _bin_filters(geo, cfg, omegas)[:, 0, :]
                pred = np.einsum("bm,mb->b", filters, spec[others][:, bins])
                errors[gi] += float(np.sum(np.abs(pred - obs) ** 2))
        return errors

    if name in ("fd-krr-causal", "fd-krr-noncausal"):
        return _cv_errors_windowed_kernel(ctx, signals, mics, grid, causal=name == "fd-krr-causal")

    if name == "fd-krr-trunc":
        W = ctx.window
        errors = np.zeros(len(grid))
        for m in range(M):
            others = np.asarray([i for i in range(M) if i != m])
            geo = Geometry(mics=mics[others], targets=mics[m : m + 1], window=1)
            target = signals[m, W - 1 :]
            for gi, sigma2 in enumerate(grid):
                cfg = FreqKernelConfig(medium=ctx.medium, passband=ctx.passband, sigma2=sigma2)
                bank = fd_krr_trunc(geo, cfg, t_grid=T, window=W)
                rec = apply_fir_bank(bank, signals[others])
                pred = rec.mean[0, W - 1 :]
                errors[gi] += _passband_residual_energy(pred - target, fs, ctx.passband)
        return errors

    raise ValueError(f"unknown method {name!r}")


def cv_select_sigma2(ctx: MethodContext, signals: np.ndarray, mics: np.ndarray, grid) -> float:
    """Leave-one-microphone-out selection of the noise parameter.

    Every microphone is held out in turn and predicted from the remaining
    ones with the method itself; the grid value with the smallest total
    error wins, ties going to the smallest value. Only microphone data is
    touched, never the validation targets.
    """
    if np.asarray(mics).shape[0] < 2:
        raise ValueError("cross-validation needs at least two microphones")
    grid = [float(g) for g in grid]
    if len(grid) == 0:
        raise ValueError("empty sigma2 grid")
    order = np.argsort(grid)
    sorted_grid = [grid[i] for i in order]
    if len(sorted_grid) == 1:
        return sorted_grid[0]
    errors = _cv_errors(ctx, np.asarray(signals, dtype=float), np.asarray(mics, dtype=float), sorted_grid)
    return sorted_grid[int(np.argmin(errors))]


def reconstruct_method(
    ctx: MethodContext,
    sigma2: float,
    signals: np.ndarray,
    geometry: Geometry,
    cov: CovarianceSet | None = None,
) -> Reconstruction:
    """Reconstruct the field at the geometry targets with one method.

    ``cov`` optionally supplies a prebuilt covariance set for the
    spatio-temporal method to avoid repeated Gram assembly.
    """
    signals = np.asarray(signals, dtype=float)
    name = ctx.name
    if name == "spatio-temporal":
        geo = Geometry(mics=geometry.mics, targets=geometry.targets, window=ctx.window)
        if cov is None:
            cov = build_covariance_set(ctx.kernel_model, geo)
        model = fit_posterior(cov, sigma2)
        return reconstruct_stream(model, signals, geo)
    if name == "spatial":
        return spatial_baseline(signals, geometry, ctx.kernel_model, sigma2)
    cfg = FreqKernelConfig(medium=ctx.medium, passband=ctx.passband, sigma2=sigma2)
    if name == "fd-krr-full":
        return fd_krr_full(signals, geometry, cfg)
    if name == "fd-krr-causal":
        return fd_krr_windowed(signals, geometry, cfg, ctx.window, causal=True)
    if name == "fd-krr-noncausal":
        return fd_krr_windowed(signals, geometry, cfg, ctx.window, causal=False)
    if name == "fd-krr-trunc":
        bank = fd_krr_trunc(geometry, cfg, t_grid=signals.shape[1], window=ctx.window)
        return apply_fir_bank(bank, signals)
    raise ValueError(f"unknown method {name!r}")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (see README for the JSON schema)."""

    c: float
    fs: float
    band_hz: tuple[float, float]
    q: float
    source_radius: float
    quadrature_points: int
    mics: np.ndarray
    targets: np.ndarray
    simulator: str
    diffuse_dirs: int
    diffuse_radius: float
    room_dims: tuple[float, float, float]
    room_beta: float
    room_max_order: int
    room_source_margin: float
    room_discard: int
    num_samples: int
    snr_db: float
    window: int
    methods: tuple[str, ...]
    sigma2_grid: tuple[float, ...]
    trials: int
    seed: int
    trim: int
    sweeps: dict
    selection_window: int
    selection_epsilon: float
    selection_rho: float
    selection_iters: int
    validation_distance: bool
    output_dir: str | None

    @property
    def medium(self) -> MediumParams:
        return MediumParams(c=self.c, fs=self.fs)

    @property
    def passband(self) -> tuple[float, float]:
        return self.band_hz

    def kernel_model(self, source_radius=None, quadrature_points=None) -> KernelModel:
        """Covariance model centered at the microphone-array centroid."""
        a = self.source_radius if source_radius is None else float(source_radius)
        qn = self.quadrature_points if quadrature_points is None else int(quadrature_points)
        center = self.mics.mean(axis=0)
        quad = fibonacci_lattice(qn, a, center=center)
        spectrum = SourceSpectrum.from_band_hz(*self.band_hz, q=self.q)
        return KernelModel(medium=self.medium, spectrum=spectrum, quadrature=quad)

    def method_context(self, name: str, window=None, model: KernelModel | None = None) -> MethodContext:
        W = self.window if window is None else int(window)
        needs_model = name in ("spatio-temporal", "spatial")
        if needs_model and model is None:
            model = self.kernel_model()
        return MethodContext(
            name=name,
            window=W,
            kernel_model=model if needs_model else None,
            medium=self.medium,
            passband=self.passband,
        )


_DEFAULTS = {
    "c": 343.0,
    "fs": 8000.0,
    "band_hz": (70.0, 1000.0),
    "q": 1.0,
    "source_radius": 5.0,
    "quadrature_points": 1000,
    "simulator": "diffuse",
    "num_samples": 2000,
    "snr_db": 20.0,
    "window": 10,
    "methods": ("spatio-temporal", "spatial", "fd-krr-full", "fd-krr-causal"),
    "trials": 1,
    "seed": 0,
    "trim": 200,
    "selection_window": 20,
    "selection_epsilon": 1e-9,
    "selection_rho": 1.2,
    "selection_iters": 100,
    "validation_distance": False,
    "output_dir": None,
}

_GEOMETRY_KEYS_CIRCLE = {"type", "num_mics", "array_radius", "center", "target_radius", "target_spacing"}
_GEOMETRY_KEYS_EXPLICIT = {"type", "mics", "targets"}
_DIFFUSE_KEYS = {"n_dirs", "radius"}
_ROOM_KEYS = {"dims", "beta", "max_order", "source_margin", "discard"}
_SWEEP_KEYS = {"window", "snr_db", "source_radius", "quadrature_points", "budget"}
_TOP_KEYS = set(_DEFAULTS) | {"geometry", "diffuse", "room", "sigma2_grid", "sweeps"}


def _geometry_from_dict(d: dict) -> tuple[np.ndarray, np.ndarray]:
    kind = d.get("type", "circle-disc")
    if kind == "circle-disc":
        unknown = set(d) - _GEOMETRY_KEYS_CIRCLE
        if unknown:
            raise ConfigError(f"unknown geometry keys {sorted(unknown)}")
        center = d.get("center", (1.5, 1.3, 1.2))
        mics = circular_array(int(d.get("num_mics", 8)), float(d.get("array_radius", 0.10)), center)
        targets = disc_grid(float(d.get("target_radius", 0.05)), float(d.get("target_spacing", 0.01)), center)
        return mics, targets
    if kind == "explicit":
        unknown = set(d) - _GEOMETRY_KEYS_EXPLICIT
        if unknown:
            raise ConfigError(f"unknown geometry keys {sorted(unknown)}")
        try:
            mics = np.asarray(d["mics"], dtype=float)
            targets = np.asarray(d["targets"], dtype=float)
        except KeyError as exc:
            raise ConfigError(f"explicit geometry needs key {exc}") from exc
        return np.atleast_2d(mics), np.atleast_2d(targets)
    raise ConfigError(f"unknown geometry type {kind!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed configuration dictionary."""
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    merged = dict(_DEFAULTS)
    for key in _DEFAULTS:
        if key in raw:
            merged[key] = raw[key]

    mics, targets = _geometry_from_dict(raw.get("geometry", {}))

    diffuse = raw.get("diffuse", {})
    if set(diffuse) - _DIFFUSE_KEYS:
        raise ConfigError(f"unknown diffuse keys {sorted(set(diffuse) - _DIFFUSE_KEYS)}")
    room = raw.get("room", {})
    if set(room) - _ROOM_KEYS:
        raise ConfigError(f"unknown room keys {sorted(set(room) - _ROOM_KEYS)}")

    grid_spec = raw.get("sigma2_grid", {"num": 20, "lo": 1e-9, "hi": 1.0})
    if isinstance(grid_spec, dict):
        extra = set(grid_spec) - {"num", "lo", "hi"}
        if extra:
            raise ConfigError(f"unknown sigma2_grid keys {sorted(extra)}")
        grid = tuple(
            float(v)
            for v in np.logspace(
                np.log10(float(grid_spec.get("lo", 1e-9))),
                np.log10(float(grid_spec.get("hi", 1.0))),
                int(grid_spec.get("num", 20)),
            )
        )
    else:
        grid = tuple(float(v) for v in grid_spec)
    if len(grid) < 1:
        raise ConfigError("sigma2 grid must not be empty")

    sweeps = raw.get("sweeps", {})
    if set(sweeps) - _SWEEP_KEYS:
        raise ConfigError(f"unknown sweep keys {sorted(set(sweeps) - _SWEEP_KEYS)}")
    for key, values in sweeps.items():
        if len(values) == 0:
            raise ConfigError(f"sweep grid {key!r} must not be empty")

    methods = tuple(merged["methods"])
    for m in methods:
        if m not in METHOD_NAMES:
            raise ConfigError(f"unknown method {m!r}; available: {METHOD_NAMES}")
    if int(merged["trials"]) < 1:
        raise ConfigError("trials must be >= 1")
    band = tuple(float(b) for b in merged["band_hz"])
    fs = float(merged["fs"])
    if not 0 < band[0] < band[1] < fs / 2:
        raise ConfigError(f"band {band} must lie inside (0, fs/2)")
    simulator = merged["simulator"]
    if simulator not in ("diffuse", "room"):
        raise ConfigError(f"unknown simulator {simulator!r}")

    return ExperimentConfig(
        c=float(merged["c"]),
        fs=fs,
        band_hz=band,
        q=float(merged["q"]),
        source_radius=float(merged["source_radius"]),
        quadrature_points=int(merged["quadrature_points"]),
        mics=mics,
        targets=targets,
        simulator=simulator,
        diffuse_dirs=int(diffuse.get("n_dirs", 1000)),
        diffuse_radius=float(diffuse.get("radius", 5.0)),
        room_dims=tuple(float(v) for v in room.get("dims", (3.0, 4.0, 2.5))),
        room_beta=float(room.get("beta", 0.5)),
        room_max_order=int(room.get("max_order", 8)),
        room_source_margin=float(room.get("source_margin", 0.3)),
        room_discard=int(room.get("discard", 800)),
        num_samples=int(merged["num_samples"]),
        snr_db=float(merged["snr_db"]),
        window=int(merged["window"]),
        methods=methods,
        sigma2_grid=grid,
        trials=int(merged["trials"]),
        seed=int(merged["seed"]),
        trim=int(merged["trim"]),
        sweeps={k: [float(v) for v in vs] for k, vs in sweeps.items()},
        selection_window=int(merged["selection_window"]),
        selection_epsilon=float(merged["selection_epsilon"]),
        selection_rho=float(merged["selection_rho"]),
        selection_iters=int(merged["selection_iters"]),
        validation_distance=bool(merged["validation_distance"]),
        output_dir=merged["output_dir"],
    )


def load_config(path) -> ExperimentConfig:
    """Load and validate a JSON configuration file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {p}: {exc}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# trial simulation


def simulate_trial(cfg: ExperimentConfig, trial: int, snr_db=None, seed_tag: str = "trial"):
    """Simulate one Monte-Carlo trial.

    Returns ``(noisy_mics, clean_mics, truth)`` with shapes (M, T), (M, T)
    and (P, T). Noise and field seeds are derived from the experiment seed,
    the trial index, and the tag, so distinct sweeps see independent data.
    """
    T = cfg.num_samples
    snr = cfg.snr_db if snr_db is None else float(snr_db)
    positions = np.vstack([cfg.mics, cfg.targets])
    M = cfg.mics.shape[0]
    if cfg.simulator == "diffuse":
        field = simulate_diffuse(
            DiffuseSpec(
                n_dirs=cfg.diffuse_dirs,
                radius=cfg.diffuse_radius,
                seed=derive_seed(cfg.seed, seed_tag, trial, "rot"),
            ),
            ExcitationSpec(
                num_samples=T, band=cfg.band_hz, seed=derive_seed(cfg.seed, seed_tag, trial, "exc")
            ),
            positions,
            cfg.fs,
            cfg.c,
            center=cfg.mics.mean(axis=0),
        )
    else:
        dims = np.asarray(cfg.room_dims)
        margin = cfg.room_source_margin
        rng = np.random.default_rng(derive_seed(cfg.seed, seed_tag, trial, "src"))
        src = margin + rng.random(3) * (dims - 2 * margin)
        room = RoomSpec(
            dims=cfg.room_dims,
            beta=cfg.room_beta,
            max_order=cfg.room_max_order,
            src=tuple(src),
            discard=cfg.room_discard,
        )
        excitation = bandlimited_noise(
            ExcitationSpec(
                num_samples=T + cfg.room_discard,
                band=cfg.band_hz,
                seed=derive_seed(cfg.seed, seed_tag, trial, "exc"),
            ),
            cfg.fs,
        )
        field = render_room(room, positions, excitation, T, cfg.fs, cfg.c)
    clean = field[:M]
    truth = field[M:]
    noisy = add_noise_snr(clean, snr, seed=derive_seed(cfg.seed, seed_tag, trial, "noise"))
    return noisy, clean, truth


# ---------------------------------------------------------------------------
# sweep engine


@dataclass(frozen=True)
class SweepRecord:
    """One (sweep, method, grid point, trial) measurement."""

    sweep: str
    method: str
    grid_value: float
    trial: int
    nmse_db: float
    sigma2: float
    wall_time: float
    objective: float | None = None


@dataclass
class SweepResult:
    """All sweep records plus aggregates, failures and emitted files."""

    records: list[SweepRecord] = field(default_factory=list)
    failures: list[tuple[str, int, str]] = field(default_factory=list)
    csv_paths: list[Path] = field(default_factory=list)

    def aggregates(self):
        """Mean NMSE and 95% interval per (sweep, method, grid value)."""
        groups: dict[tuple, list[float]] = {}
        for rec in self.records:
            groups.setdefault((rec.sweep, rec.method, rec.grid_value), []).append(rec.nmse_db)
        out = []
        for key in sorted(groups):
            vals = groups[key]
            mean = float(np.mean(vals))
            if len(vals) >= 2:
                lo, hi = confidence_interval(vals)
            else:
                lo = hi = mean
            out.append((*key, mean, lo, hi, len(vals)))
        return out

    @property
    def failure_fraction(self) -> float:
        total = len({(r.sweep, r.trial) for r in self.records}) + len(self.failures)
        return len(self.failures) / total if total else 0.0


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(_WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _pmap(fn, tasks):
    """Deterministic map over tasks, optionally in a process pool."""
    tasks = list(tasks)
    n = _workers()
    if n == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def _eval_methods(cfg, methods_ctx, signals, truth, geometry):
    """CV-tune and score each method on one trial's data."""
    out = []
    for ctx in methods_ctx:
        t0 = time.perf_counter()
        sigma2 = cv_select_sigma2(ctx, signals, geometry.mics, cfg.sigma2_grid)
        rec = reconstruct_method(ctx, sigma2, signals, geometry)
        warm = int(np.argmax(rec.valid)) if rec.valid.any() else 0
        stop = int(len(rec.valid) - np.argmax(rec.valid[::-1]))
        score = nmse(rec.mean[:, :stop], truth[:, :stop], trim=cfg.trim, warmup=warm)
        out.append((ctx.name, sigma2, score, time.perf_counter() - t0))
    return out


def _grid_sweep_task(args):
    """Worker for one trial of a (window | snr | radius | quadrature) sweep."""
    cfg, sweep, grid, trial = args
    records = []
    if sweep == "snr_db":
        _, clean, truth = simulate_trial(cfg, trial, snr_db=np.inf, seed_tag=sweep)
    else:
        noisy, _, truth = simulate_trial(cfg, trial, seed_tag=sweep)
    base_model = cfg.kernel_model() if sweep in ("window", "snr_db") else None
    for gi, value in enumerate(grid):
        if sweep == "snr_db":
            noisy = add_noise_snr(clean, value, seed=derive_seed(cfg.seed, sweep, trial, gi, "noise"))
        if sweep == "window":
            contexts = [cfg.method_context(m, window=int(value), model=base_model) for m in cfg.methods]
        elif sweep == "snr_db":
            contexts = [cfg.method_context(m, model=base_model) for m in cfg.methods]
        elif sweep == "source_radius":
            model = cfg.kernel_model(source_radius=value)
            contexts = [cfg.method_context("spatio-temporal", model=model)]
        else:  # quadrature_points
            model = cfg.kernel_model(quadrature_points=int(value))
            contexts = [cfg.method_context("spatio-temporal", model=model)]
        geometry = Geometry(mics=cfg.mics, targets=cfg.targets, window=cfg.window)
        for name, sigma2, score, wall in _eval_methods(cfg, contexts, noisy, truth, geometry):
            records.append(
                SweepRecord(
                    sweep=sweep,
                    method=name,
                    grid_value=float(value),
                    trial=trial,
                    nmse_db=score,
                    sigma2=sigma2,
                    wall_time=wall,
                )
            )
    return records


_SWEEP_FILES = {
    "window": "nmse_vs_W",
    "snr_db": "nmse_vs_snr",
    "source_radius": "nmse_vs_a",
    "quadrature_points": "nmse_vs_Q",
    "budget": "nmse_vs_K",
}
_SWEEP_COLUMN = {
    "window": "W",
    "snr_db": "snr_db",
    "source_radius": "a",
    "quadrature_points": "Q",
    "budget": "K",
}


def _budget_sweep_task(args):
    """Worker for one trial of the sample-budget sweep."""
    cfg, grid, trial = args
    W = cfg.selection_window
    M = cfg.mics.shape[0]
    noisy, _, truth = simulate_trial(cfg, trial, seed_tag="budget")
    model = cfg.kernel_model()
    geometry = Geometry(mics=cfg.mics, targets=cfg.targets, window=W)
    cov = build_covariance_set(model, geometry)
    ctx = cfg.method_context("spatio-temporal", window=W, model=model)
    sigma2 = cv_select_sigma2(ctx, noisy, cfg.mics, cfg.sigma2_grid)

    records = []
    patterns = []
    for gi, value in enumerate(grid):
        budget = int(value)
        masks: dict[str, SelectionMask] = {}
        relaxed = {}
        t_sel0 = time.perf_counter()
        proposed = select(
            cov,
            sigma2,
            budget,
            epsilon=cfg.selection_epsilon,
            rho=cfg.selection_rho,
            iters=cfg.selection_iters,
        )
        sel_time = time.perf_counter() - t_sel0
        masks["proposed"] = proposed.mask
        relaxed["proposed"] = proposed.relaxed_scores
        masks["random"] = random_selection(M * W, budget, seed=derive_seed(cfg.seed, "budget", trial, gi, "rand"))
        masks["recent"] = recent_selection(M, W, budget)
        for strategy in SELECTION_STRATEGIES:
            mask = masks[strategy]
            t0 = time.perf_counter()
            objective = float(np.trace(masked_posterior_cov(cov, mask, sigma2)))
            posterior = fit_masked_posterior(cov, mask.indices, sigma2)
            rec = reconstruct_stream(posterior, noisy, geometry)
            score = nmse(rec.mean, truth, trim=cfg.trim, warmup=W - 1)
            wall = time.perf_counter() - t0 + (sel_time if strategy == "proposed" else 0.0)
            records.append(
                SweepRecord(
                    sweep="budget",
                    method=strategy,
                    grid_value=float(budget),
                    trial=trial,
                    nmse_db=score,
                    sigma2=sigma2,
                    wall_time=wall,
                    objective=objective,
                )
            )
        scores = relaxed["proposed"]
        z = masks["proposed"].z
        for idx in range(M * W):
            patterns.append(
                (budget, trial, idx % M, idx // M, int(z[idx]), float(scores[idx]))
            )
    return records, patterns


def _validation_distance_task(args):
    cfg, trial = args
    noisy, _, truth = simulate_trial(cfg, trial, seed_tag="validation")
    model = cfg.kernel_model()
    geometry = Geometry(mics=cfg.mics, targets=cfg.targets, window=cfg.window)
    cov = build_covariance_set(model, geometry)
    ctx = cfg.method_context("spatio-temporal", model=model)
    sigma2 = cv_select_sigma2(ctx, noisy, cfg.mics, cfg.sigma2_grid)
    posterior = fit_posterior(cov, sigma2)
    rec = reconstruct_stream(posterior, noisy, geometry)
    start = max(cfg.trim, cfg.window - 1)
    stop = truth.shape[1] - cfg.trim
    err = rec.mean[:, start:stop] - truth[:, start:stop]
    emp = empirical_error_variance(err)
    ref = np.sum(truth[:, start:stop] ** 2, axis=1)
    per_target = 10.0 * np.log10(np.maximum(np.sum(err**2, axis=1), 1e-300) / ref)
    return sigma2, per_target, rec.variance, emp


def run_sweep(cfg: ExperimentConfig, output_dir=None) -> SweepResult:
    """Run all configured sweeps and write one CSV per figure analog.

    Per-trial failures are recorded and the affected trial is skipped;
    callers should treat a failure fraction above 10% as a run failure.
    """
    out_dir = Path(output_dir if output_dir is not None else (cfg.output_dir or "sweep_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    result = SweepResult()

    def run_tasks(sweep_name, tasks, worker):
        collected = []
        for trial, payload in enumerate(_pmap(_Guarded(worker), tasks)):
            if isinstance(payload, _TaskFailure):
                result.failures.append((sweep_name, trial, payload.message))
            else:
                collected.append(payload)
        return collected

    for sweep in ("window", "snr_db", "source_radius", "quadrature_points"):
        if sweep not in cfg.sweeps:
            continue
        grid = cfg.sweeps[sweep]
        tasks = [(cfg, sweep, grid, t) for t in range(cfg.trials)]
        for recs in run_tasks(sweep, tasks, _grid_sweep_task):
            result.records.extend(recs)

    patterns: list[tuple] = []
    if "budget" in cfg.sweeps:
        grid = cfg.sweeps["budget"]
        tasks = [(cfg, grid, t) for t in range(cfg.trials)]
        for recs, pats in run_tasks("budget", tasks, _budget_sweep_task):
            result.records.extend(recs)
            patterns.extend(pats)

    validation_rows: list[tuple] = []
    if cfg.validation_distance:
        tasks = [(cfg, t) for t in range(cfg.trials)]
        outs = run_tasks("validation", tasks, _validation_distance_task)
        if outs:
            center = cfg.mics.mean(axis=0)
            dists = np.linalg.norm(cfg.targets - center, axis=1)
            nm = np.mean([o[1] for o in outs], axis=0)
            pv = np.mean([o[2] for o in outs], axis=0)
            ev = np.mean([o[3] for o in outs], axis=0)
            validation_rows = [
                (p, float(dists[p]), float(nm[p]), float(pv[p]), float(ev[p]))
                for p in range(cfg.targets.shape[0])
            ]

    # CSV emission; wall times go to a JSON sidecar so reruns are
    # byte-identical.
    by_sweep: dict[str, list[SweepRecord]] = {}
    for rec in result.records:
        by_sweep.setdefault(rec.sweep, []).append(rec)
    for sweep, recs in sorted(by_sweep.items()):
        stem = _SWEEP_FILES[sweep]
        col = _SWEEP_COLUMN[sweep]
        recs = sorted(recs, key=lambda r: (r.grid_value, r.method, r.trial))
        header = ["method", col, "trial", "nmse_db", "sigma2"]
        rows = [[r.method, r.grid_value, r.trial, r.nmse_db, r.sigma2] for r in recs]
        if sweep == "budget":
            header.append("objective")
            for row, r in zip(rows, recs):
                row.append(r.objective)
        result.csv_paths.append(_write_csv(out_dir / f"{stem}.csv", header, rows))
        agg_rows = [
            (method, grid_value, mean, lo, hi, count)
            for (s, method, grid_value, mean, lo, hi, count) in result.aggregates()
            if s == sweep
        ]
        result.csv_paths.append(
            _write_csv(
                out_dir / f"{stem}_summary.csv",
                ["method", col, "mean_nmse_db", "ci_lo", "ci_hi", "trials"],
                agg_rows,
            )
        )

    if patterns:
        result.csv_paths.append(
            _write_csv(
                out_dir / "selection_patterns.csv",
                ["K", "trial", "mic_index", "lag", "selected", "relaxed_score"],
                sorted(patterns),
            )
        )
        counts: dict[tuple[int, int], list[int]] = {}
        for budget, trial, mic, lag, sel, _ in patterns:
            counts.setdefault((budget, lag), []).append(sel)
        lag_rows = [
            (budget, lag, float(np.mean(sels)))
            for (budget, lag), sels in sorted(counts.items())
        ]
        result.csv_paths.append(
            _write_csv(out_dir / "mics_per_lag.csv", ["K", "lag", "mean_selected_mics"], lag_rows)
        )

    if validation_rows:
        result.csv_paths.append(
            _write_csv(
                out_dir / "validation_distance.csv",
                ["target_index", "distance_m", "nmse_db", "posterior_variance", "empirical_error_variance"],
                validation_rows,
            )
        )

    timings = [
        {
            "sweep": r.sweep,
            "method": r.method,
            "grid_value": r.grid_value,
            "trial": r.trial,
            "wall_time_s": r.wall_time,
        }
        for r in result.records
    ]
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=1))
    if result.failures:
        (out_dir / "failures.json").write_text(
            json.dumps([{"sweep": s, "trial": t, "error": e} for s, t, e in result.failures], indent=1)
        )
    return result


class _TaskFailure:
    def __init__(self, message: str):
        self.message = message


class _Guarded:
    """Picklable wrapper converting worker exceptions into failure records."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, task):
        try:
            return self.fn(task)
        except Exception as exc:  # per-trial isolation
            return _TaskFailure(f"{type(exc).__name__}: {exc}")
