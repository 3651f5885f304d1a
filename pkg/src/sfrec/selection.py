"""Budget-constrained selection of spatio-temporal samples.

Chooses K of the MW samples in the causal observation window so that the
trace of the posterior covariance at the targets is minimized. Exhaustive
search over all subsets is intractable, so the pipeline first solves a
relaxed problem over weights on the capped simplex
``{z : sum(z) = K, eps <= z_i <= 1}`` with projected-gradient descent, keeps
the ``ceil(rho K)`` highest-scoring candidates, and finishes with a forward
greedy pass that optimizes the exact subset objective using incremental
(bordered) Cholesky updates.

Recent-lags and uniform-random selections are provided as baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .covariance import CovarianceSet
from .estimator import _chol_with_jitter, masked_posterior_cov

__all__ = [
    "SelectionMask",
    "SelectionResult",
    "selection_objective",
    "selection_objective_grad",
    "project_capped_simplex",
    "projected_gradient",
    "prune_candidates",
    "greedy_select",
    "select",
    "recent_selection",
    "random_selection",
]


@dataclass(frozen=True)
class SelectionMask:
    """Sample weights, either relaxed in ``[epsilon, 1]`` or binary.

    ``budget`` is the sample budget K: relaxed weights sum to K, binary
    masks have exactly K ones.
    """

    z: np.ndarray
    budget: int
    epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        if self.z.ndim != 1:
            raise ValueError("mask weights must be a vector")
        if self.is_binary:
            if int(np.sum(self.z)) != self.budget:
                raise ValueError("binary mask must have exactly `budget` ones")
        else:
            if abs(float(np.sum(self.z)) - self.budget) > 1e-6:
                raise ValueError("relaxed mask weights must sum to the budget")
            if np.any(self.z < self.epsilon - 1e-12) or np.any(self.z > 1.0 + 1e-12):
                raise ValueError("relaxed weights must lie in [epsilon, 1]")

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.z == 0.0) | (self.z == 1.0)))

    @property
    def indices(self) -> np.ndarray:
        """Selected flat indices of a binary mask."""
        if not self.is_binary:
            raise ValueError("indices are only defined for binary masks")
        return np.flatnonzero(self.z)


@dataclass(frozen=True)
class SelectionResult:
    """Final binary mask with its objective and optimization traces."""

    mask: SelectionMask
    objective: float
    relaxed_scores: np.ndarray | None
    trace_history: np.ndarray


def _weights(z, epsilon: float | None = None) -> np.ndarray:
    w = np.asarray(getattr(z, "z", z), dtype=float)
    floor = getattr(z, "epsilon", None)
    if epsilon is None:
        epsilon = floor if floor else 0.0
    if np.any(w < max(epsilon, 0.0)) or np.any(w <= 0.0):
        raise ValueError("relaxed weights must be positive and above the lower bound")
    return w


def _effective_gram(cov: CovarianceSet, w: np.ndarray, sigma2: float) -> np.ndarray:
    """Heteroscedastic form ``kyy + sigma2 diag(z)^-2`` of the masked covariance."""
    gram = cov.kyy.copy()
    gram[np.diag_indices_from(gram)] += sigma2 / w**2
    return gram


def selection_objective(cov: CovarianceSet, z, sigma2: float) -> float:
    """Total posterior variance at the targets under relaxed weights ``z``.

    Uses the identity that weighting a sample by ``z_i`` is equivalent to
    inflating its noise variance to ``sigma2 / z_i^2``, which keeps the
    objective smooth in ``z``. Agrees with the trace of
    :func:`~sfrec.estimator.masked_posterior_cov` for weights above the
    lower bound.
    """
    w = _weights(z)
    gram = _effective_gram(cov, w, sigma2)
    factor = _chol_with_jitter(gram)
    solved = scipy.linalg.cho_solve((factor, True), cov.kuy.T)
    return float(np.trace(cov.kuu) - np.sum(solved * cov.kuy.T))


def selection_objective_grad(cov: CovarianceSet, z, sigma2: float) -> np.ndarray:
    """Gradient of :func:`selection_objective` with respect to the weights.

    Every entry is nonpositive: increasing any weight can only reduce the
    posterior variance.
    """
    w = _weights(z)
    gram = _effective_gram(cov, w, sigma2)
    factor = _chol_with_jitter(gram)
    half = scipy.linalg.cho_solve((factor, True), cov.kuy.T)  # gram^-1 kyu
    diag = np.einsum("ip,ip->i", half, half)
    return -2.0 * sigma2 * diag / w**3


def project_capped_simplex(v: np.ndarray, budget: float, epsilon: float) -> np.ndarray:
    """Euclidean projection onto ``{z : sum(z) = budget, epsilon <= z_i <= 1}``.

    The projection has the thresholding form ``clip(v - tau, epsilon, 1)``
    for a scalar shift ``tau`` found by bisection; the shift is then refined
    exactly on the set of unclipped coordinates so that the budget matches
    to better than 1e-9.
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if not (epsilon * n <= budget + 1e-12 and budget <= n + 1e-12):
        raise ValueError(
            f"budget {budget} infeasible for {n} samples with lower bound {epsilon}"
        )

    def clipped(tau):
        return np.clip(v - tau, epsilon, 1.0)

    lo, hi = v.min() - 1.0, v.max() - epsilon
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if clipped(mid).sum() > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(hi) + abs(lo)):
            break
    tau = 0.5 * (lo + hi)
    z = clipped(tau)
    free = (z > epsilon) & (z < 1.0)
    if np.any(free):
        # Exact shift for the frozen active sets.
        n_hi = np.count_nonzero(z >= 1.0)
        n_lo = np.count_nonzero(z <= epsilon)
        tau_exact = (v[free].sum() - (budget - n_hi - epsilon * n_lo)) / np.count_nonzero(free)
        z_exact = clipped(tau_exact)
        if abs(z_exact.sum() - budget) <= abs(z.sum() - budget):
            z = z_exact
    return z


def projected_gradient(
    cov: CovarianceSet,
    sigma2: float,
    budget: int,
    epsilon: float = 1e-9,
    iters: int = 100,
    armijo: float = 1e-4,
    max_halvings: int = 30,
) -> np.ndarray:
    """Minimize the relaxed objective on the capped simplex.

    Starts from the uniform feasible point and iterates projected gradient
    steps with Armijo backtracking (initial step ``1 / max|grad|``, halved
    until sufficient decrease). The objective never increases across
    accepted iterations; if the line search bottoms out the current iterate
    is returned.
    """
    n = cov.kyy.shape[0]
    z = np.clip(np.full(n, budget / n), epsilon, 1.0)
    f = selection_objective(cov, z, sigma2)
    for _ in range(iters):
        grad = selection_objective_grad(cov, z, sigma2)
        gmax = np.max(np.abs(grad))
        if gmax < 1e-15:
            break
        alpha = 1.0 / gmax
        accepted = False
        for _ in range(max_halvings):
            cand = project_capped_simplex(z - alpha * grad, budget, epsilon)
            step = cand - z
            if np.max(np.abs(step)) < 1e-14:
                return z
            f_cand = selection_objective(cov, cand, sigma2)
            if f_cand <= f + armijo * float(grad @ step):
                z, f = cand, f_cand
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return z
    return z


def prune_candidates(scores: np.ndarray, rho: float, budget: int) -> np.ndarray:
    """Indices of the ``ceil(rho * budget)`` largest relaxed scores.

    Ties are broken in favor of the smaller flat index. If the requested
    count exceeds the number of samples, all indices are returned.
    """
    if rho < 1:
        raise ValueError("rho must be >= 1")
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    keep = math.ceil(rho * budget)
    if keep >= n:
        return np.arange(n)
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:keep])


def greedy_select(
    cov: CovarianceSet, sigma2: float, candidates: np.ndarray, budget: int
) -> SelectionResult:
    """Forward greedy subset selection over the candidate indices.

    Starts from the empty set and adds, at each step, the candidate whose
    inclusion yields the largest drop in total posterior variance. Scores
    are maintained through a growing Cholesky factorization of the selected
    block, so each step costs one triangular solve per remaining candidate
    instead of a full refactorization. Ties are broken by the smaller flat
    index.
    """
    candidates = np.sort(np.asarray(candidates, dtype=int))
    if budget > candidates.size:
        raise ValueError(f"budget {budget} exceeds {candidates.size} candidates")
    n = cov.kyy.shape[0]
    n_targets = cov.kuu.shape[0]
    gram = cov.kyy + sigma2 * np.eye(n)

    chol = np.zeros((budget, budget))
    half = np.zeros((budget, n_targets))  # chol^-1 kyu on the selected set
    selected: list[int] = []
    remaining = list(candidates)
    objective = float(np.trace(cov.kuu))
    history = np.empty(budget)

    for step in range(budget):
        rem = np.asarray(remaining, dtype=int)
        kuy_rem = cov.kuy[:, rem]
        if step == 0:
            border_sq = np.zeros(rem.size)
            resid = kuy_rem.T
        else:
            sel = np.asarray(selected, dtype=int)
            cross = gram[np.ix_(sel, rem)]
            w_all = scipy.linalg.solve_triangular(chol[:step, :step], cross, lower=True)
            border_sq = np.einsum("ij,ij->j", w_all, w_all)
            resid = kuy_rem.T - w_all.T @ half[:step]
        # sigma2 > 0 keeps the Schur complement bounded away from zero
        pivot_sq = np.maximum(gram[rem, rem] - border_sq, 1e-300)
        pivot = np.sqrt(pivot_sq)
        gains = np.einsum("jp,jp->j", resid, resid) / pivot_sq
        best = int(np.argmax(gains))
        j = int(rem[best])

        if step > 0:
            chol[step, :step] = w_all[:, best]
        chol[step, step] = pivot[best]
        half[step] = resid[best] / pivot[best]
        selected.append(j)
        remaining.remove(j)
        objective -= float(gains[best])
        history[step] = objective

    z = np.zeros(n)
    z[selected] = 1.0
    mask = SelectionMask(z=z, budget=budget)
    exact = float(np.trace(masked_posterior_cov(cov, mask, sigma2)))
    return SelectionResult(
        mask=mask, objective=exact, relaxed_scores=None, trace_history=history
    )


def select(
    cov: CovarianceSet,
    sigma2: float,
    budget: int,
    epsilon: float = 1e-9,
    rho: float = 1.2,
    iters: int = 100,
) -> SelectionResult:
    """Full selection pipeline: relax, prune, then greedy refine."""
    relaxed = projected_gradient(cov, sigma2, budget, epsilon=epsilon, iters=iters)
    candidates = prune_candidates(relaxed, rho, budget)
    result = greedy_select(cov, sigma2, candidates, budget)
    return replace(result, relaxed_scores=relaxed)


def recent_selection(num_mics: int, window: int, budget: int) -> SelectionMask:
    """All microphones at the most recent lags, padded in microphone order.

    Selects every microphone at lags ``0 .. budget // M - 1`` and the
    remaining ``budget mod M`` samples from the next lag, lowest microphone
    indices first.
    """
    n = num_mics * window
    if not 0 < budget <= n:
        raise ValueError(f"budget must lie in [1, {n}]")
    z = np.zeros(n)
    full_lags, rem = divmod(budget, num_mics)
    z[: full_lags * num_mics] = 1.0
    if rem:
        start = full_lags * num_mics
        z[start : start + rem] = 1.0
    return SelectionMask(z=z, budget=budget)


def random_selection(num_samples: int, budget: int, seed) -> SelectionMask:
    """Uniformly random subset of ``budget`` samples, reproducible per seed."""
    if not 0 < budget <= num_samples:
        raise ValueError(f"budget must lie in [1, {num_samples}]")
    rng = np.random.default_rng(seed)
    idx = rng.choice(num_samples, size=budget, replace=False)
    z = np.zeros(num_samples)
    z[idx] = 1.0
    return SelectionMask(z=z, budget=budget)
