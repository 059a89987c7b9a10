"""Parametric Bayesian filters used as belief flows and jump maps.

Gaussian beliefs pack to ``mean (+) vec(cov)`` with column-major
vectorisation.  The EKF cores take an array module ``xp`` so the same algebra
runs under numpy and inside jitted JAX code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class FilterError(RuntimeError):
    """Covariance could not be repaired or an update was ill-posed."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of size {n}")

    @property
    def dim(self) -> int:
        return self.mean.size

    def pack(self) -> np.ndarray:
        return pack_belief(self.mean, self.cov)

    @classmethod
    def unpack(cls, b) -> "GaussianBelief":
        return cls(*unpack_belief(b))


def belief_dim(n: int) -> int:
    return n + n * n


def state_dim(packed_len: int) -> int:
    n = int(round((-1 + np.sqrt(1 + 4 * packed_len)) / 2))
    if n + n * n != packed_len:
        raise ValueError(f"{packed_len} is not a packed Gaussian belief length")
    return n


def pack_belief(mean, cov) -> np.ndarray:
    return np.concatenate([np.asarray(mean, dtype=float).ravel(), np.asarray(cov, dtype=float).ravel(order="F")])


def unpack_belief(b, n: int | None = None):
    b = np.asarray(b, dtype=float)
    if n is None:
        n = state_dim(b.size)
    return b[:n].copy(), b[n:n + n * n].reshape((n, n), order="F").copy()


def symmetrize(cov):
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def repair_cov(cov, attempts: int = 3) -> np.ndarray:
    """Symmetrise and, if needed, add diagonal jitter until Cholesky succeeds."""
    S = symmetrize(np.asarray(cov, dtype=float))
    if not np.all(np.isfinite(S)):
        raise FilterError("non-finite covariance")
    n = S.shape[0]
    scale = np.trace(S) / n
    jitter = 1e-9 * (scale if scale > 0 else 1.0)
    for attempt in range(attempts + 1):
        try:
            np.linalg.cholesky(S)
            return S
        except np.linalg.LinAlgError:
            if attempt == attempts:
                break
            S = S + jitter * np.eye(n)
    raise FilterError("covariance is not positive definite after jitter repair")


def psd_sqrt(cov) -> np.ndarray:
    """Matrix ``L`` with ``L L' = cov`` for positive semidefinite ``cov``."""
    w, V = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=float)))
    return V * np.sqrt(np.clip(w, 0.0, None))


def sym_sqrt(cov, xp=np):
    """Symmetric square root ``V diag(sqrt(max(w, 0))) V'`` of the symmetrised ``cov``.

    Unique for any PSD input, so two backends produce the same factor up to
    rounding; slightly negative eigenvalues are clipped to zero.
    """
    w, V = xp.linalg.eigh(0.5 * (cov + cov.T))
    return (V * xp.sqrt(xp.clip(w, 0.0, None))) @ V.T


def project_psd(cov, floor: float = 0.0) -> np.ndarray:
    """Nearest symmetric matrix with eigenvalues at least ``floor`` (Frobenius norm)."""
    w, V = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=float)))
    if w.min() >= floor:
        return symmetrize(np.asarray(cov, dtype=float))
    return symmetrize((V * np.maximum(w, floor)) @ V.T)


# --- unscented transform ---------------------------------------------------


@dataclass(frozen=True)
class UKFParams:
    """Range-only tracking UKF.  Noise covariance is ``R0 + ||mu - p|| R1``."""

    Q: np.ndarray
    R0: np.ndarray
    R1: np.ndarray
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0


def sigma_weights(n: int, alpha: float = 1.0, beta: float = 2.0, kappa: float = 0.0):
    lam = alpha * alpha * (n + kappa) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + 1.0 - alpha * alpha + beta
    return n + lam, wm, wc


def unscented_update(means, covs, noise_covs, ys, measure, alpha=1.0, beta=2.0, kappa=0.0):
    """Batched UKF measurement update with noise entering the measurement function.

    Sigma points cover the state augmented with the measurement noise, so
    ``measure(x_points, noise_points)`` may be nonlinear in the noise.
    Shapes: ``means (B,n)``, ``covs (B,n,n)``, ``noise_covs (B,r,r)``,
    ``ys (B,q)``; ``measure`` maps ``(B,S,n), (B,S,r)`` to ``(B,S,q)``.
    """
    B, n = means.shape
    r = noise_covs.shape[-1]
    na = n + r
    spread, wm, wc = sigma_weights(na, alpha, beta, kappa)
    Pa = np.zeros((B, na, na))
    Pa[:, :n, :n] = symmetrize(covs)
    Pa[:, n:, n:] = noise_covs
    try:
        L = np.linalg.cholesky(spread * Pa)
    except np.linalg.LinAlgError as exc:
        raise FilterError("sigma-point covariance not positive definite") from exc
    offsets = np.concatenate([np.zeros((B, 1, na)), np.swapaxes(L, 1, 2), -np.swapaxes(L, 1, 2)], axis=1)
    mean_a = np.concatenate([means, np.zeros((B, r))], axis=1)
    pts = mean_a[:, None, :] + offsets
    Z = measure(pts[..., :n], pts[..., n:])
    z_mean = np.einsum("s,bsq->bq", wm, Z)
    dz = Z - z_mean[:, None, :]
    dx = pts[..., :n] - means[:, None, :]
    Pzz = np.einsum("s,bsp,bsq->bpq", wc, dz, dz)
    Pxz = np.einsum("s,bsp,bsq->bpq", wc, dx, dz)
    K = np.swapaxes(np.linalg.solve(Pzz, np.swapaxes(Pxz, 1, 2)), 1, 2)
    innov = ys - z_mean
    new_means = means + np.einsum("bnq,bq->bn", K, innov)
    new_covs = symmetrize(symmetrize(covs) - np.einsum("bnp,bpq,bmq->bnm", K, Pzz, K))
    return new_means, new_covs


def unscented_predict(belief: GaussianBelief, fx: Callable, Q, alpha=1.0, beta=2.0, kappa=0.0) -> GaussianBelief:
    """Unscented prediction through ``fx`` with additive process noise ``Q``."""
    n = belief.dim
    spread, wm, wc = sigma_weights(n, alpha, beta, kappa)
    L = np.linalg.cholesky(spread * symmetrize(belief.cov))
    pts = np.vstack([belief.mean, belief.mean + L.T, belief.mean - L.T])
    F = np.array([fx(p) for p in pts])
    mean = wm @ F
    d = F - mean
    cov = np.einsum("s,sp,sq->pq", wc, d, d) + Q
    return GaussianBelief(mean, repair_cov(cov))


def range_measure(robot_pos):
    """Range ``||q - p + v||`` for batched sigma points (robot positions ``(B,2)``)."""
    robot_pos = np.asarray(robot_pos, dtype=float)

    def measure(q, v):
        d = q - robot_pos[:, None, :] + v
        return np.sqrt(np.einsum("bsi,bsi->bs", d, d))[..., None]

    return measure


def range_noise_cov(R0, R1, robot_pos, means):
    """Approximated noise covariance ``R0 + ||mu - p|| R1`` per batch entry."""
    dist = np.linalg.norm(np.asarray(means) - np.asarray(robot_pos), axis=-1)
    return np.asarray(R0)[None] + dist[:, None, None] * np.asarray(R1)[None]


def ukf_step(belief: GaussianBelief, robot_pos, observation, dt: float, params: UKFParams) -> GaussianBelief:
    """Brownian prediction over ``dt`` followed by a range update (skipped if ``observation`` is None)."""
    cov = belief.cov + np.asarray(params.Q) * dt
    if observation is None:
        return GaussianBelief(belief.mean.copy(), repair_cov(cov))
    p = np.asarray(robot_pos, dtype=float).reshape(1, -1)
    means = belief.mean.reshape(1, -1)
    R = range_noise_cov(params.R0, params.R1, p, means)
    y = np.atleast_1d(np.asarray(observation, dtype=float)).reshape(1, -1)
    m, c = unscented_update(means, cov[None], R, y, range_measure(p), params.alpha, params.beta, params.kappa)
    return GaussianBelief(m[0], repair_cov(c[0]))


# --- extended Kalman filter ------------------------------------------------


@dataclass(frozen=True)
class SystemModel:
    """Latent dynamics ``f``/``jac``, process noise ``Q``, measurement ``h``/``h_jac``, noise ``R``."""

    f: Callable
    jac: Callable
    Q: np.ndarray
    h: Callable | None = None
    h_jac: Callable | None = None
    R: np.ndarray | None = None


def ekf_predict_arrays(mean, cov, fx, A, Q, dt, xp=np):
    """One Euler step of ``mu' = f``, ``Sigma' = A Sigma + Sigma A' + Q``."""
    cov_dot = A @ cov + cov @ A.T + Q
    new_cov = cov + dt * cov_dot
    return mean + dt * fx, 0.5 * (new_cov + new_cov.T)


def ekf_update_arrays(mean, cov, y, hx, Hm, R, xp=np, joseph=False):
    """EKF innovation update; symmetrises the input and output covariances.

    ``joseph=True`` uses ``(I - K H) Sigma (I - K H)' + K R K'``, which keeps
    the result positive semidefinite under rounding.
    """
    cov = 0.5 * (cov + cov.T)
    S = Hm @ cov @ Hm.T + R
    K = xp.linalg.solve(S, Hm @ cov).T
    new_mean = mean + K @ (y - hx)
    if joseph:
        F = xp.eye(cov.shape[0]) - K @ Hm
        new_cov = F @ cov @ F.T + K @ R @ K.T
    else:
        new_cov = cov - K @ S @ K.T
    return new_mean, 0.5 * (new_cov + new_cov.T)


def ekf_predict_continuous(belief: GaussianBelief, u, system: SystemModel, dt: float) -> GaussianBelief:
    mu = belief.mean
    mean, cov = ekf_predict_arrays(mu, belief.cov, system.f(mu, u), system.jac(mu, u), system.Q, dt)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise FilterError("non-finite EKF prediction")
    return GaussianBelief(mean, cov)


def ekf_update(belief: GaussianBelief, y, system: SystemModel) -> GaussianBelief:
    mu = belief.mean
    Hm = np.atleast_2d(system.h_jac(mu))
    R = np.atleast_2d(system.R)
    S = Hm @ belief.cov @ Hm.T + R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e14:
        raise FilterError("singular innovation covariance")
    mean, cov = ekf_update_arrays(mu, belief.cov, np.atleast_1d(y), np.atleast_1d(system.h(mu)), Hm, R)
    return GaussianBelief(mean, repair_cov(cov))


def kalman_update(mean, cov, y, C, R):
    """Linear Kalman measurement update."""
    return ekf_update_arrays(np.asarray(mean, float), np.asarray(cov, float), np.atleast_1d(y), C @ mean, C, R)


# --- fixtures with closed-form jumps --------------------------------------


def kf1d_update(b, y):
    """Scalar KF update with unit observation noise: ``((mu + s y)/(s+1), s/(s+1))``."""
    mu, s = float(b[0]), float(b[1])
    if not s > 0:
        raise ValueError("variance must be positive")
    return np.array([(mu + s * y) / (s + 1.0), s / (s + 1.0)])


def categorical_update(b, likelihood, y: int) -> np.ndarray:
    """Unnormalised Bayes rule ``b_i <- p(y|i) b_i``; ``likelihood[y, i] = p(y|i)``."""
    b = np.asarray(b, dtype=float)
    lik = np.asarray(likelihood, dtype=float)
    if np.any(b < 0) or not np.any(b > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    if np.any(lik < 0) or np.any(lik > 1):
        raise ValueError("likelihood entries must lie in [0, 1]")
    row = lik[y] if lik.ndim == 2 else lik
    out = row * b
    if not np.any(out > 0):
        raise FilterError("observation contradicts the belief (all weights zero)")
    return out


def gaussian_entropy_exp(cov):
    """``sqrt(det(2 pi e Sigma))`` and its gradient ``0.5 * value * inv(Sigma)``."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    try:
        L = np.linalg.cholesky(symmetrize(cov))
    except np.linalg.LinAlgError as exc:
        raise FilterError("covariance is not positive definite") from exc
    value = (2 * np.pi * np.e) ** (n / 2) * np.prod(np.diag(L))
    inv = np.linalg.inv(cov)
    return float(value), 0.5 * value * symmetrize(inv)


def sample_observation(belief: GaussianBelief, measure: Callable, rng, noise_cov=None):
    """Draw a latent state from the belief, then an observation at that state.

    ``measure(x, v)`` returns the observation for latent ``x`` and noise ``v``;
    ``noise_cov`` is an array or a callable of the latent state.
    """
    x = belief.mean + psd_sqrt(belief.cov) @ rng.standard_normal(belief.dim)
    if noise_cov is None:
        return measure(x, None)
    R = noise_cov(x) if callable(noise_cov) else np.asarray(noise_cov, dtype=float)
    R = np.atleast_2d(R)
    v = psd_sqrt(R) @ rng.standard_normal(R.shape[0])
    return measure(x, v)
