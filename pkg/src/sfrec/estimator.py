"""Spatio-temporal LMMSE reconstruction from a causal observation window.

Given the Gram blocks of a :class:`~sfrec.covariance.CovarianceSet`, the
field at the target points and the stacked noisy observations are jointly
Gaussian, so the posterior mean is a linear filter applied to the current
observation window and the posterior covariance does not depend on the data.
The filter and the factorization of the observation covariance are
precomputed once per geometry (`fit_posterior`) and then applied per time
step (`reconstruct_stream`).

Masked variants restrict the estimator to a subset of the spatio-temporal
samples, either through a binary mask (equivalent to deleting rows/columns)
or through relaxed weights in (0, 1] acting as per-sample noise inflation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .covariance import CovarianceSet, Geometry

__all__ = [
    "PosteriorModel",
    "Reconstruction",
    "FactorizationError",
    "fit_posterior",
    "fit_masked_posterior",
    "posterior_mean",
    "posterior_cov",
    "masked_posterior_cov",
    "reconstruct_stream",
]


class FactorizationError(RuntimeError):
    """Raised when the observation covariance cannot be factorized."""


@dataclass(frozen=True)
class PosteriorModel:
    """Precomputed reconstruction filter and covariance factorization.

    ``factor`` is the lower Cholesky factor of the (possibly subset)
    regularized observation covariance, ``filt`` the P x MW reconstruction
    filter (columns of unselected samples are zero for masked fits) and
    ``post_var`` the diagonal of the posterior covariance at the targets.
    ``indices`` lists the selected flat sample indices, or None for a full
    fit.
    """

    factor: np.ndarray
    filt: np.ndarray
    sigma2: float
    post_var: np.ndarray
    indices: np.ndarray | None = None


@dataclass(frozen=True)
class Reconstruction:
    """Reconstructed field per target and time step.

    ``mean`` has shape (P, T). ``variance`` holds the P posterior variances
    (constant over time for a fixed geometry), or None for estimators that
    do not provide one. ``valid`` flags time steps with a complete window;
    warm-up steps are flagged invalid rather than zero-filled so metrics can
    exclude them deterministically.
    """

    mean: np.ndarray
    variance: np.ndarray | None
    valid: np.ndarray


def _chol_with_jitter(gram: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with an escalating diagonal jitter fallback.

    Jitter starts at 1e-12 * tr/n and escalates by factors of ten up to
    1e-6 * tr/n, after which a :class:`FactorizationError` reports the last
    attempted value.
    """
    n = gram.shape[0]
    scale = np.trace(gram) / n
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(gram + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = 1e-12 * scale
            elif jitter >= 1e-6 * scale:
                raise FactorizationError(
                    f"covariance factorization failed at jitter {jitter:.3e}"
                ) from None
            else:
                jitter *= 10.0


def fit_posterior(cov: CovarianceSet, sigma2: float) -> PosteriorModel:
    """Factorize the regularized observation covariance and build the filter.

    Parameters
    ----------
    cov : CovarianceSet
    sigma2 : float
        Observation noise variance, must be positive.

    Returns
    -------
    PosteriorModel
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    n = cov.kyy.shape[0]
    factor = _chol_with_jitter(cov.kyy + sigma2 * np.eye(n))
    filt = scipy.linalg.cho_solve((factor, True), cov.kuy.T).T
    post_var = np.diag(cov.kuu) - np.einsum("ij,ij->i", filt, cov.kuy)
    return PosteriorModel(factor=factor, filt=filt, sigma2=sigma2, post_var=post_var)


def fit_masked_posterior(cov: CovarianceSet, selected: np.ndarray, sigma2: float) -> PosteriorModel:
    """Fit the posterior restricted to the selected flat sample indices.

    The returned filter has full width with zero columns at unselected
    samples, so it can be applied to the full stacked window unchanged.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    selected = np.asarray(selected, dtype=int)
    if selected.size == 0:
        raise ValueError("selection is empty")
    kyy = cov.kyy[np.ix_(selected, selected)]
    kuy = cov.kuy[:, selected]
    factor = _chol_with_jitter(kyy + sigma2 * np.eye(selected.size))
    filt_sub = scipy.linalg.cho_solve((factor, True), kuy.T).T
    filt = np.zeros_like(cov.kuy)
    filt[:, selected] = filt_sub
    post_var = np.diag(cov.kuu) - np.einsum("ij,ij->i", filt_sub, kuy)
    return PosteriorModel(
        factor=factor, filt=filt, sigma2=sigma2, post_var=post_var, indices=selected
    )


def posterior_mean(model: PosteriorModel, y: np.ndarray) -> np.ndarray:
    """Posterior mean of the field given one stacked observation vector."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != model.filt.shape[1]:
        raise ValueError(
            f"observation length {y.shape[0]} does not match filter width {model.filt.shape[1]}"
        )
    return model.filt @ y


def posterior_cov(cov: CovarianceSet, model: PosteriorModel) -> np.ndarray:
    """Posterior covariance of the field at the targets (data independent)."""
    sigma = cov.kuu - model.filt @ cov.kuy.T
    return 0.5 * (sigma + sigma.T)


def _as_weights(z) -> np.ndarray:
    """Accept a SelectionMask-like object or a plain weight vector."""
    weights = getattr(z, "z", z)
    return np.asarray(weights, dtype=float)


def masked_posterior_cov(cov: CovarianceSet, z, sigma2: float) -> np.ndarray:
    """Posterior covariance when samples are weighted by ``z`` in [0, 1].

    Binary masks are routed through submatrix extraction, which is exact and
    cheaper; fractional weights use the full masked form
    ``kuu - kuy Z (Z kyy Z + sigma2 I)^{-1} Z kyu`` with ``Z = diag(z)``.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    weights = _as_weights(z)
    n = cov.kyy.shape[0]
    if weights.shape != (n,):
        raise ValueError(f"mask length {weights.shape} does not match {n} samples")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("mask weights must lie in [0, 1]")
    binary = np.all((weights == 0.0) | (weights == 1.0))
    if binary:
        selected = np.flatnonzero(weights)
        if selected.size == 0:
            return cov.kuu.copy()
        model = fit_masked_posterior(cov, selected, sigma2)
        return posterior_cov(cov, model)
    middle = weights[:, None] * cov.kyy * weights[None, :] + sigma2 * np.eye(n)
    factor = _chol_with_jitter(middle)
    kuy_z = cov.kuy * weights[None, :]
    sigma = cov.kuu - kuy_z @ scipy.linalg.cho_solve((factor, True), kuy_z.T)
    return 0.5 * (sigma + sigma.T)


def reconstruct_stream(model: PosteriorModel, signals: np.ndarray, geometry: Geometry) -> Reconstruction:
    """Apply the precomputed filter to every complete causal window.

    Parameters
    ----------
    model : PosteriorModel
    signals : np.ndarray
        Microphone samples, shape (M, T) with T >= window.
    geometry : Geometry

    Returns
    -------
    Reconstruction
        Means for time steps ``window - 1 .. T - 1``; earlier steps are
        flagged invalid.
    """
    signals = np.asarray(signals, dtype=float)
    M, W = geometry.num_mics, geometry.window
    if signals.ndim != 2 or signals.shape[0] != M:
        raise ValueError(f"signals must have shape (M={M}, T)")
    T = signals.shape[1]
    if T < W:
        raise ValueError(f"record length {T} shorter than window {W}")
    if model.filt.shape[1] != M * W:
        raise ValueError("model was fit for a different geometry")

    stacked = np.empty((M * W, T - W + 1))
    for w in range(W):
        stacked[w * M : (w + 1) * M] = signals[:, W - 1 - w : T - w]
    mean = np.zeros((model.filt.shape[0], T))
    mean[:, W - 1 :] = model.filt @ stacked
    valid = np.zeros(T, dtype=bool)
    valid[W - 1 :] = True
    return Reconstruction(mean=mean, variance=model.post_var.copy(), valid=valid)
