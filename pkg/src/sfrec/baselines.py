"""Frequency-domain kernel ridge regression baselines and the spatial case.

All baselines interpolate each DFT bin independently with the diffuse-field
sinc kernel, differing only in how the DFT is taken:

* ``fd_krr_full`` transforms the entire record (an offline reference with
  fine frequency resolution),
* ``fd_krr_windowed`` transforms a sliding causal window of length W (or a
  centered window of length 2W - 1 for the non-causal variant) and keeps one
  reconstructed sample per step,
* ``fd_krr_trunc`` builds bin-wise filters on a dense frequency grid,
  transforms them to FIR impulse responses, and truncates those to the
  causal window, and
* ``spatial_baseline`` is the spatio-temporal estimator with a window of
  one sample (zero-lag spatial covariance only).

Bins whose center frequency falls outside the excitation passband carry no
signal and are zeroed; DC and Nyquist are always excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import Geometry, KernelModel, MediumParams, build_covariance_set
from .estimator import Reconstruction, fit_posterior, reconstruct_stream

__all__ = [
    "FreqKernelConfig",
    "FirFilterBank",
    "diffuse_gram",
    "fd_krr_full",
    "fd_krr_windowed",
    "fd_krr_trunc",
    "apply_fir_bank",
    "spatial_baseline",
]


@dataclass(frozen=True)
class FreqKernelConfig:
    """Per-bin diffuse-kernel regression settings.

    ``passband`` is the (low, high) band in Hz used to decide which bins are
    reconstructed; the DFT length itself is set by each estimator (record
    length, window length, or an explicit grid size).
    """

    medium: MediumParams
    passband: tuple[float, float]
    sigma2: float

    def __post_init__(self):
        lo, hi = self.passband
        if not 0 <= lo < hi <= self.medium.fs / 2:
            raise ValueError(f"passband {self.passband} outside [0, fs/2]")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")


@dataclass(frozen=True)
class FirFilterBank:
    """Causal reconstruction FIR filters, shape (P, M, W)."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 3:
            raise ValueError("taps must have shape (P, M, W)")
        if not np.all(np.isfinite(taps)):
            raise ValueError("taps must be finite")


def diffuse_gram(positions_a, positions_b, omega: float, c: float) -> np.ndarray:
    """Diffuse-coherence kernel matrix ``sinc(omega * dist / c)``.

    Real and symmetric for coincident point sets, with unit diagonal.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    a = np.atleast_2d(np.asarray(positions_a, dtype=float))
    b = np.atleast_2d(np.asarray(positions_b, dtype=float))
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return np.sinc(dist * omega / (np.pi * c))


def _passband_bins(n: int, fs: float, passband) -> np.ndarray:
    """DFT bins of an n-point transform whose center frequency is in band.

    DC and (for even n) the Nyquist bin are excluded.
    """
    lo, hi = passband
    k = np.arange(1, (n - 1) // 2 + 1)
    f = k * fs / n
    return k[(f >= lo) & (f <= hi)]


def _bin_filters(geometry: Geometry, config: FreqKernelConfig, omegas: np.ndarray) -> np.ndarray:
    """Per-bin reconstruction filters, shape (B, P, M)."""
    c = config.medium.c
    mics, targets = geometry.mics, geometry.targets
    M = geometry.num_mics
    dist_yy = np.linalg.norm(mics[:, None, :] - mics[None, :, :], axis=2)
    dist_uy = np.linalg.norm(targets[:, None, :] - mics[None, :, :], axis=2)
    scaled = omegas[:, None, None] / c
    gyy = np.sinc(dist_yy[None] * scaled / np.pi) + config.sigma2 * np.eye(M)[None]
    guy = np.sinc(dist_uy[None] * scaled / np.pi)
    # filters F solve F gyy = guy; gyy is symmetric
    return np.linalg.solve(gyy, guy.transpose(0, 2, 1)).transpose(0, 2, 1)


def fd_krr_full(signals: np.ndarray, geometry: Geometry, config: FreqKernelConfig) -> Reconstruction:
    """Bin-wise diffuse-kernel regression on the DFT of the full record."""
    signals = np.asarray(signals, dtype=float)
    M, T = signals.shape
    if M != geometry.num_mics:
        raise ValueError("signal rows do not match the geometry")
    if T < 2:
        raise ValueError("need at least two samples")
    fs = config.medium.fs
    bins = _passband_bins(T, fs, config.passband)
    spec = np.fft.rfft(signals, axis=1)
    out_spec = np.zeros((geometry.num_targets, T // 2 + 1), dtype=complex)
    if bins.size:
        omegas = 2.0 * np.pi * bins * fs / T
        filters = _bin_filters(geometry, config, omegas)
        out_spec[:, bins] = np.einsum("bpm,mb->pb", filters, spec[:, bins])
    mean = np.fft.irfft(out_spec, n=T, axis=1)
    return Reconstruction(mean=mean, variance=None, valid=np.ones(T, dtype=bool))


def fd_krr_windowed(
    signals: np.ndarray,
    geometry: Geometry,
    config: FreqKernelConfig,
    window: int,
    causal: bool = True,
) -> Reconstruction:
    """Bin-wise regression on a sliding finite window.

    The causal variant transforms the last ``window`` samples at each step
    and emits the final reconstructed sample; the non-causal variant uses a
    centered window of ``2 window - 1`` samples and emits the center sample.
    Steps without a complete window are flagged invalid.
    """
    signals = np.asarray(signals, dtype=float)
    M, T = signals.shape
    if M != geometry.num_mics:
        raise ValueError("signal rows do not match the geometry")
    if window < 2:
        raise ValueError("window must be >= 2")
    L = window if causal else 2 * window - 1
    if T < L:
        raise ValueError(f"record length {T} shorter than the transform window {L}")
    fs = config.medium.fs
    m_star = window - 1  # extracted sample inside the window
    bins = _passband_bins(L, fs, config.passband)

    P = geometry.num_targets
    mean = np.zeros((P, T))
    valid = np.zeros(T, dtype=bool)
    if causal:
        out_slice = slice(L - 1, T)
    else:
        out_slice = slice(window - 1, T - window + 1)
    valid[out_slice] = True

    if bins.size:
        frames = np.lib.stride_tricks.sliding_window_view(signals, L, axis=1)
        spec = np.fft.rfft(frames, axis=2)[:, :, bins]  # (M, n_frames, B)
        omegas = 2.0 * np.pi * bins * fs / L
        filters = _bin_filters(geometry, config, omegas)
        rec = np.einsum("bpm,mtb->ptb", filters, spec)
        # Single-sample inverse DFT: only conjugate-pair bins contribute.
        coeff = (2.0 / L) * np.exp(2j * np.pi * bins * m_star / L)
        mean[:, out_slice] = np.real(rec @ coeff)
    return Reconstruction(mean=mean, variance=None, valid=valid)


def fd_krr_trunc(
    geometry: Geometry, config: FreqKernelConfig, t_grid: int, window: int
) -> FirFilterBank:
    """Causally truncated FIR bank from a dense frequency-domain design.

    Bin-wise filters are built on a ``t_grid``-point frequency grid, turned
    into time-domain impulse responses by an inverse DFT, and truncated to
    the first ``window`` taps (tap 0 is lag 0).
    """
    if t_grid < window:
        raise ValueError("t_grid must be at least the window length")
    fs = config.medium.fs
    bins = _passband_bins(t_grid, fs, config.passband)
    P, M = geometry.num_targets, geometry.num_mics
    spec = np.zeros((t_grid // 2 + 1, P, M), dtype=complex)
    if bins.size:
        omegas = 2.0 * np.pi * bins * fs / t_grid
        spec[bins] = _bin_filters(geometry, config, omegas)
    impulse = np.fft.irfft(spec, n=t_grid, axis=0)  # (t_grid, P, M)
    taps = impulse[:window].transpose(1, 2, 0)
    return FirFilterBank(taps=taps)


def apply_fir_bank(bank: FirFilterBank, signals: np.ndarray) -> Reconstruction:
    """Causal FIR filtering of the microphone signals with a filter bank."""
    signals = np.asarray(signals, dtype=float)
    P, M, W = bank.taps.shape
    if signals.shape[0] != M:
        raise ValueError(f"signals must have {M} rows")
    T = signals.shape[1]
    nfft = T + W - 1
    taps_f = np.fft.rfft(bank.taps, n=nfft, axis=2)
    sig_f = np.fft.rfft(signals, n=nfft, axis=1)
    out_f = np.einsum("pmf,mf->pf", taps_f, sig_f)
    mean = np.fft.irfft(out_f, n=nfft, axis=1)[:, :T]
    valid = np.zeros(T, dtype=bool)
    valid[W - 1 :] = True
    return Reconstruction(mean=mean, variance=None, valid=valid)


def spatial_baseline(
    signals: np.ndarray, geometry: Geometry, model: KernelModel, sigma2: float
) -> Reconstruction:
    """Purely spatial reconstruction: the estimator with a one-sample window."""
    geo = Geometry(mics=geometry.mics, targets=geometry.targets, window=1)
    cov = build_covariance_set(model, geo)
    posterior = fit_posterior(cov, sigma2)
    return reconstruct_stream(posterior, np.asarray(signals, dtype=float), geo)
