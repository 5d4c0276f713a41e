"""Diagonal-covariance Gaussian mixtures trained by EM."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class GmmError(ValueError):
    pass


@dataclass
class DiagonalGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: float = 1e-4
    llk_history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_densities(self, x: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x_t; mu_k, var_k)`` for every frame/component pair, ``(T, K)``."""
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise GmmError(f"frame dim {x.shape[1]} does not match model dim {self.dim}")
        inv = 1.0 / self.variances
        const = np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variances), axis=1)
                                              + np.sum(self.means ** 2 * inv, axis=1))
        quad = (x ** 2) @ inv.T - 2.0 * x @ (self.means * inv).T
        return const[None, :] - 0.5 * quad

    def posteriors(self, x: np.ndarray):
        """Return ``(responsibilities, per-frame log-likelihood)``."""
        lp = self.component_log_densities(x)
        peak = lp.max(axis=1, keepdims=True)
        llk = peak[:, 0] + np.log(np.sum(np.exp(lp - peak), axis=1))
        return np.exp(lp - llk[:, None]), llk

    def log_likelihood(self, x: np.ndarray) -> float:
        """Mean per-frame log-likelihood."""
        return float(np.mean(self.posteriors(x)[1]))


def kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def fit_gmm(x: np.ndarray, n_components: int, seed: int = 0, n_iter: int = 20,
            variance_floor: float = 1e-4, min_frames_per_component: int = 10) -> DiagonalGmm:
    """EM for a diagonal GMM seeded by k-means++ over the frame pool.

    The returned model carries the per-iteration mean log-likelihood in
    ``llk_history`` (one entry per E-step, the initial model included).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise GmmError("frame pool must be a 2-D matrix")
    if n_components < 1:
        raise GmmError("n_components must be >= 1")
    if len(x) < min_frames_per_component * n_components:
        raise GmmError(f"need at least {min_frames_per_component * n_components} frames for "
                       f"{n_components} components, got {len(x)}")
    rng = np.random.default_rng(seed)
    global_var = np.maximum(x.var(axis=0), variance_floor)
    gmm = DiagonalGmm(
        weights=np.full(n_components, 1.0 / n_components),
        means=kmeanspp_init(x, n_components, rng),
        variances=np.tile(global_var, (n_components, 1)),
        variance_floor=variance_floor,
    )
    for _ in range(n_iter):
        resp, llk = gmm.posteriors(x)
        gmm.llk_history.append(float(llk.mean()))
        occ = resp.sum(axis=0)
        empty = occ < 1e-8
        if np.any(empty):
            for k in np.flatnonzero(empty):
                log.warning("GMM component %d lost all frames; reinitialising from a random frame", k)
                gmm.means[k] = x[rng.integers(len(x))]
                gmm.variances[k] = global_var
            occ = np.where(empty, 1.0, occ)
            resp[:, empty] = 0.0
        first = resp.T @ x
        second = resp.T @ (x * x)
        means = first / occ[:, None]
        variances = second / occ[:, None] - means ** 2
        keep = ~empty
        gmm.means[keep] = means[keep]
        gmm.variances[keep] = np.maximum(variances[keep], variance_floor)
        weights = np.where(empty, 1.0 / len(x), occ)
        gmm.weights = weights / weights.sum()
    gmm.llk_history.append(gmm.log_likelihood(x))
    return gmm
