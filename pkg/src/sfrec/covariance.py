"""Space-time covariance of a stochastically driven sound field.

The sound field is modeled as the solution of the 3D free-space wave
equation driven by band-limited white noise that is spatially white on the
surface of a sphere enclosing the microphones and the reconstruction region.
The induced covariance between two interior points at a given time lag is a
surface integral over the source sphere, which is approximated here with an
equal-area Fibonacci quadrature.

For large sphere radii the normalized spatial coherence of this model tends
to the classical diffuse-field sinc coherence, which is exposed both as the
exact sinc evaluation (`coherence_diffuse`) and as the cross-spectral
density of the quadrature model (`cross_spectral_density`), the latter being
useful as a consistency check of the quadrature.

Conventions
-----------
Positions are 3-vectors in meters. Time lags are integer sample counts at
the sampling rate of :class:`MediumParams`. The stacked observation vector
of M microphones over a causal window of W samples is ordered so that the
sample of microphone ``m`` at lag ``w`` has flat index ``w * M + m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "MediumParams",
    "SourceSpectrum",
    "SphereQuadrature",
    "KernelModel",
    "Geometry",
    "CovarianceSet",
    "temporal_correlation",
    "fibonacci_lattice",
    "space_time_cov",
    "build_covariance_set",
    "cross_spectral_density",
    "coherence_diffuse",
    "windowed_cross_cov",
    "windowed_cross_cov_matrix",
]

# Positions closer than this to a quadrature node make the 1/distance
# weights meaningless.
_NODE_CLEARANCE = 1e-9


@dataclass(frozen=True)
class MediumParams:
    """Propagation medium and temporal sampling.

    Parameters
    ----------
    c : float
        Speed of sound in m/s.
    fs : float
        Sampling rate in Hz.
    """

    c: float
    fs: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"speed of sound must be positive, got {self.c}")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")

    @property
    def ts(self) -> float:
        """Sampling interval in seconds."""
        return 1.0 / self.fs


@dataclass(frozen=True)
class SourceSpectrum:
    """Flat band-limited source spectrum.

    The source process has a flat power spectral density on
    ``[omega_lo, omega_hi]`` (and the mirrored negative band), normalized so
    that the induced temporal correlation equals one at zero lag.

    Parameters
    ----------
    omega_lo, omega_hi : float
        Band edges in rad/s, ``0 < omega_lo < omega_hi``.
    q : float
        Source intensity scale (dimensionless).
    """

    omega_lo: float
    omega_hi: float
    q: float = 1.0

    def __post_init__(self):
        if not 0 < self.omega_lo < self.omega_hi:
            raise ValueError(
                f"band edges must satisfy 0 < omega_lo < omega_hi, got "
                f"({self.omega_lo}, {self.omega_hi})"
            )
        if not self.q > 0:
            raise ValueError(f"source intensity must be positive, got {self.q}")

    @classmethod
    def from_band_hz(cls, f_lo: float, f_hi: float, q: float = 1.0) -> "SourceSpectrum":
        """Build a spectrum from band edges in Hz."""
        return cls(2.0 * np.pi * f_lo, 2.0 * np.pi * f_hi, q)


@dataclass(frozen=True)
class SphereQuadrature:
    """Equal-area quadrature on a sphere surface.

    Parameters
    ----------
    radius : float
        Sphere radius in meters.
    center : np.ndarray
        Sphere center, shape (3,).
    points : np.ndarray
        Node positions on the surface, shape (Q, 3).
    weight : float
        Common area weight ``4 pi radius^2 / Q``.
    """

    radius: float
    center: np.ndarray
    points: np.ndarray
    weight: float

    def __post_init__(self):
        if self.num_points < 1:
            raise ValueError("quadrature needs at least one node")
        radii = np.linalg.norm(self.points - self.center, axis=1)
        if np.max(np.abs(radii - self.radius)) > 1e-12 * self.radius:
            raise ValueError("quadrature nodes are not on the sphere surface")
        expected = 4.0 * np.pi * self.radius**2 / self.num_points
        if not np.isclose(self.weight, expected, rtol=1e-12):
            raise ValueError("weight does not match 4*pi*radius^2/Q")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class KernelModel:
    """Covariance model: medium, source spectrum, and sphere quadrature."""

    medium: MediumParams
    spectrum: SourceSpectrum
    quadrature: SphereQuadrature


@dataclass(frozen=True)
class Geometry:
    """Microphone and reconstruction geometry with the causal window length.

    The flat index of the spatio-temporal sample of microphone ``m`` at lag
    ``w`` is ``w * num_mics + m`` with lags ``0 .. window - 1``, lag 0 being
    the most recent sample.
    """

    mics: np.ndarray
    targets: np.ndarray
    window: int

    def __post_init__(self):
        object.__setattr__(self, "mics", np.atleast_2d(np.asarray(self.mics, dtype=float)))
        object.__setattr__(self, "targets", np.atleast_2d(np.asarray(self.targets, dtype=float)))
        if self.mics.ndim != 2 or self.mics.shape[1] != 3:
            raise ValueError("mics must have shape (M, 3)")
        if self.targets.ndim != 2 or self.targets.shape[1] != 3:
            raise ValueError("targets must have shape (P, 3)")
        if self.num_mics < 1 or self.num_targets < 1 or self.window < 1:
            raise ValueError("need at least one microphone, one target and window >= 1")

    @property
    def num_mics(self) -> int:
        return self.mics.shape[0]

    @property
    def num_targets(self) -> int:
        return self.targets.shape[0]

    @property
    def num_samples(self) -> int:
        """Number of spatio-temporal samples in one observation window."""
        return self.num_mics * self.window

    def flat_index(self, mic: int, lag: int) -> int:
        """Flat index of microphone ``mic`` at lag ``lag``."""
        if not (0 <= mic < self.num_mics and 0 <= lag < self.window):
            raise IndexError(f"(mic={mic}, lag={lag}) outside geometry")
        return lag * self.num_mics + mic


@dataclass(frozen=True)
class CovarianceSet:
    """Gram blocks of the joint field/observation covariance.

    ``kuu`` is P x P (targets at zero lag), ``kuy`` is P x MW (targets
    against stacked observations) and ``kyy`` is MW x MW (stacked
    observations), all ordered by the flat index of :class:`Geometry`.
    """

    kuu: np.ndarray
    kuy: np.ndarray
    kyy: np.ndarray


def temporal_correlation(delta, spectrum: SourceSpectrum):
    """Stationary temporal correlation of the band-limited source process.

    Evaluates ``(sin(omega_hi d) - sin(omega_lo d)) / (d (omega_hi -
    omega_lo))`` with a series expansion on a branch around ``d = 0`` where
    the ratio is indeterminate. The result is even in ``delta``, bounded by
    one, and equals one at zero lag.

    Parameters
    ----------
    delta : float or np.ndarray
        Time lag(s) in seconds.
    spectrum : SourceSpectrum

    Returns
    -------
    float or np.ndarray
        Dimensionless correlation, same shape as ``delta``.
    """
    delta = np.asarray(delta, dtype=float)
    w1, w2 = spectrum.omega_lo, spectrum.omega_hi
    small = np.abs(delta) * (w1 + w2) < 1e-6
    # Second-order expansion around zero; the quartic term is < 1e-25 on
    # the branch so the switch is seamless.
    series = 1.0 - delta**2 * (w2**2 + w1 * w2 + w1**2) / 6.0
    safe = np.where(small, 1.0, delta)
    exact = (np.sin(w2 * safe) - np.sin(w1 * safe)) / (safe * (w2 - w1))
    out = np.where(small, series, exact)
    return out if out.ndim else float(out)


def fibonacci_lattice(num_points: int, radius: float, center=(0.0, 0.0, 0.0)) -> SphereQuadrature:
    """Near-uniform Fibonacci lattice quadrature on a sphere surface.

    Latitudes are placed at ``z_i = 1 - (2 i + 1) / Q`` and longitudes advance
    by the golden angle, which yields an equal-area node set suitable for a
    plain average-times-area surface quadrature.

    Parameters
    ----------
    num_points : int
        Number of nodes Q, at least one.
    radius : float
        Sphere radius in meters.
    center : array_like
        Sphere center, shape (3,).

    Returns
    -------
    SphereQuadrature
    """
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float).reshape(3)
    i = np.arange(num_points)
    z = 1.0 - (2.0 * i + 1.0) / num_points
    golden_angle = np.pi * (3.0 - np.sqrt(5.0))
    lon = golden_angle * i
    rho = np.sqrt(np.maximum(0.0, 1.0 - z**2))
    unit = np.column_stack((rho * np.cos(lon), rho * np.sin(lon), z))
    points = center + radius * unit
    weight = 4.0 * np.pi * radius**2 / num_points
    return SphereQuadrature(radius=radius, center=center, points=points, weight=weight)


def _check_interior(quad: SphereQuadrature, points: np.ndarray, what: str) -> None:
    """Reject points on/outside the source sphere or touching a node."""
    points = np.atleast_2d(points)
    radii = np.linalg.norm(points - quad.center, axis=1)
    if np.any(radii >= quad.radius):
        raise ValueError(
            f"{what} must lie strictly inside the source sphere "
            f"(radius {quad.radius}); worst offender at distance {radii.max():.6g}"
        )
    # Nodes and evaluation points both live near the sphere surface scale,
    # so an absolute clearance is appropriate.
    for p in points:
        d = np.linalg.norm(quad.points - p, axis=1)
        if d.min() < _NODE_CLEARANCE:
            raise ValueError(f"{what} coincides with a quadrature node")


def _node_distances(quad: SphereQuadrature, points: np.ndarray) -> np.ndarray:
    """Distances from each point (N, 3) to each quadrature node, shape (N, Q)."""
    diff = np.atleast_2d(points)[:, None, :] - quad.points[None, :, :]
    return np.linalg.norm(diff, axis=2)


def _lag_table(model: KernelModel, dist_a: np.ndarray, dist_b: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Covariance between two fixed points for a vector of integer lags.

    ``dist_a`` and ``dist_b`` are (Q,) node-distance vectors of the two
    points. Returns one covariance value per entry of ``lags``.
    """
    spec = model.spectrum
    quad = model.quadrature
    path = (dist_a - dist_b) / model.medium.c
    deltas = lags[:, None] * model.medium.ts - path[None, :]
    corr = temporal_correlation(deltas, spec)
    scale = spec.q * quad.weight / (16.0 * np.pi**2)
    return scale * np.sum(corr / (dist_a * dist_b)[None, :], axis=1)


def space_time_cov(model: KernelModel, r, rp, lag: int) -> float:
    """Covariance between the field at ``r`` and at ``rp`` lagged by ``lag`` samples.

    Both points must lie strictly inside the source sphere. The value is a
    quadrature sum over the sphere nodes of the source correlation evaluated
    at the lag corrected by the propagation-path difference, weighted with
    the product of inverse distances.

    Satisfies the stationarity symmetry
    ``space_time_cov(m, r, rp, l) == space_time_cov(m, rp, r, -l)``.
    """
    r = np.asarray(r, dtype=float).reshape(3)
    rp = np.asarray(rp, dtype=float).reshape(3)
    _check_interior(model.quadrature, np.stack([r, rp]), "evaluation point")
    da = _node_distances(model.quadrature, r)[0]
    db = _node_distances(model.quadrature, rp)[0]
    return float(_lag_table(model, da, db, np.asarray([lag]))[0])


def build_covariance_set(model: KernelModel, geometry: Geometry) -> CovarianceSet:
    """Assemble the Gram blocks for a geometry and window length.

    Entries follow the flat stacking of :class:`Geometry`:
    ``kyy[(m, w), (m', w')] = C(r_m, r_m'; w' - w)`` and
    ``kuy[p, (m, w)] = C(rhat_p, r_m; w)``, with ``kuu`` the zero-lag target
    block. Only upper-triangle pair tables are evaluated; the rest is filled
    by the stationarity symmetry so both symmetric blocks are exact.
    """
    mics, targets, W = geometry.mics, geometry.targets, geometry.window
    M, P = geometry.num_mics, geometry.num_targets
    quad = model.quadrature
    _check_interior(quad, mics, "microphone position")
    _check_interior(quad, targets, "target position")

    dist_m = _node_distances(quad, mics)
    dist_t = _node_distances(quad, targets)
    lags = np.arange(-(W - 1), W)

    # Per-pair lag tables, mirrored across the diagonal: O(M^2 W) kernel
    # evaluations instead of O(M^2 W^2).
    tables = np.empty((M, M, 2 * W - 1))
    for a in range(M):
        for b in range(a, M):
            tab = _lag_table(model, dist_m[a], dist_m[b], lags)
            tables[a, b] = tab
            if b != a:
                tables[b, a] = tab[::-1]
    lag_idx = (np.arange(W)[None, :] - np.arange(W)[:, None]) + (W - 1)
    kyy = tables[:, :, lag_idx].transpose(2, 0, 3, 1).reshape(M * W, M * W)

    kuu = np.empty((P, P))
    zero = np.asarray([0])
    for a in range(P):
        kuu[a, a] = _lag_table(model, dist_t[a], dist_t[a], zero)[0]
        for b in range(a + 1, P):
            v = _lag_table(model, dist_t[a], dist_t[b], zero)[0]
            kuu[a, b] = v
            kuu[b, a] = v

    kuy = np.empty((P, M * W))
    spec = model.spectrum
    scale = spec.q * quad.weight / (16.0 * np.pi**2)
    inv_dd = 1.0 / (dist_t[:, None, :] * dist_m[None, :, :])
    path = (dist_t[:, None, :] - dist_m[None, :, :]) / model.medium.c
    for w in range(W):
        corr = temporal_correlation(w * model.medium.ts - path, spec)
        kuy[:, w * M : (w + 1) * M] = scale * np.sum(corr * inv_dd, axis=2)

    return CovarianceSet(kuu=kuu, kuy=kuy, kyy=kyy)


def cross_spectral_density(model: KernelModel, r, rp, omega: float) -> complex:
    """Cross-spectral density of the quadrature model at angular frequency ``omega``.

    Valid for frequencies inside the source band where the flat spectral
    density ``pi / (omega_hi - omega_lo)`` is nonzero. Hermitian in the two
    positions, real and positive for coincident points.
    """
    spec = model.spectrum
    if not spec.omega_lo <= abs(omega) <= spec.omega_hi:
        raise ValueError(
            f"omega {omega} outside the source band "
            f"[{spec.omega_lo}, {spec.omega_hi}] where the density vanishes"
        )
    r = np.asarray(r, dtype=float).reshape(3)
    rp = np.asarray(rp, dtype=float).reshape(3)
    quad = model.quadrature
    _check_interior(quad, np.stack([r, rp]), "evaluation point")
    da = _node_distances(quad, r)[0]
    db = _node_distances(quad, rp)[0]
    phi = np.pi / (spec.omega_hi - spec.omega_lo)
    phase = np.exp(-1j * (omega / model.medium.c) * (da - db))
    scale = spec.q * phi * quad.weight / (16.0 * np.pi**2)
    return complex(scale * np.sum(phase / (da * db)))


def coherence_diffuse(distance: float, omega: float, c: float):
    """Classical diffuse-field spatial coherence ``sin(x)/x`` with ``x = omega d / c``.

    Returns 1 at zero distance (the continuous limit).
    """
    if np.any(np.asarray(distance) < 0):
        raise ValueError("distance must be nonnegative")
    if not omega > 0:
        raise ValueError("omega must be positive")
    x = np.asarray(distance, dtype=float) * omega / c
    out = np.sinc(x / np.pi)
    return out if out.ndim else float(out)


def windowed_cross_cov_matrix(lag_cov, window: int) -> np.ndarray:
    """Cross-frequency covariance of length-``window`` DFT coefficients.

    ``lag_cov`` maps an integer lag to the stationary cross-covariance of
    two channels. With a rectangular window the DFT coefficients of the two
    windowed channels have covariance ``F T F^H`` where ``T`` is the Toeplitz
    matrix of the lag covariance and ``F`` the DFT matrix; off-diagonal
    entries quantify the cross-bin coupling caused by the finite window.

    Returns
    -------
    np.ndarray
        Complex (window, window) matrix indexed by DFT bins (k, l).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    table = np.asarray([lag_cov(int(l)) for l in range(-(window - 1), window)], dtype=float)
    col = table[window - 1 :]
    row = table[window - 1 :: -1]
    toep = scipy.linalg.toeplitz(col, row)
    grid = np.arange(window)
    dft = np.exp(-2j * np.pi * np.outer(grid, grid) / window)
    return dft @ toep @ dft.conj().T


def windowed_cross_cov(lag_cov, window: int, k: int, l: int) -> complex:
    """Single (k, l) entry of :func:`windowed_cross_cov_matrix`."""
    if not (0 <= k < window and 0 <= l < window):
        raise ValueError("bin indices must lie in [0, window)")
    table = np.asarray([lag_cov(int(t)) for t in range(-(window - 1), window)], dtype=float)
    col = table[window - 1 :]
    row = table[window - 1 :: -1]
    toep = scipy.linalg.toeplitz(col, row)
    grid = np.arange(window)
    ak = np.exp(-2j * np.pi * k * grid / window)
    bl = np.exp(2j * np.pi * l * grid / window)
    return complex(ak @ toep @ bl)
