"""Conditional means of the auxiliary variables.

Three families of latent variables turn the likelihood into a Gaussian form
in the parameters: Polya-Gamma variables (one per flip and one per spin and
interval), Poisson counts (one per spin and interval) and generalized
inverse Gaussian scales (one per coupling, only with a Laplace prior).  The
fitting algorithms only ever need their first moments, all of which have
closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .model import IntervalTable, IsingModel, log2cosh

PG_SERIES_CUTOFF = 1e-4
J_FLOOR = 1e-8


def pg_mean(b, c):
    """Mean of the tilted Polya-Gamma distribution PG(b, c).

    ``b / (2c) * tanh(c / 2)``, with the series ``b (1/4 - c^2/48)`` for
    ``|c| < 1e-4``.  Even in ``c`` and linear in ``b``.
    """
    b = np.asarray(b, dtype=np.float64)
    c = np.abs(np.asarray(c, dtype=np.float64))
    small = c < PG_SERIES_CUTOFF
    safe = np.where(small, 1.0, c)
    ratio = np.where(small, 0.25 - c * c / 48.0, np.tanh(0.5 * safe) / (2.0 * safe))
    out = b * ratio
    return out if out.ndim else float(out)


def poisson_mean(duration, gamma, s, h):
    """Mean Poisson count ``duration * gamma * exp(s h) / (2 cosh h)``."""
    out = (np.asarray(duration, dtype=np.float64) * gamma
           * expit(2.0 * np.asarray(s, dtype=np.float64) * np.asarray(h, dtype=np.float64)))
    return out if out.ndim else float(out)


def gig_beta_mean(J, lam, j_floor: float = J_FLOOR):
    """Mean of the Laplace mixing scale given a coupling value: ``1 / (lam |J|)``.

    ``|J|`` is floored at ``j_floor`` so the result stays finite.
    """
    if not np.all(np.asarray(lam) > 0):
        raise ValidationError("lambda must be positive")
    out = 1.0 / (np.asarray(lam, dtype=np.float64)
                 * np.maximum(np.abs(np.asarray(J, dtype=np.float64)), j_floor))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AugmentedMoments:
    """Expected auxiliary variables for one interval table.

    Attributes
    ----------
    flip_omega : ndarray, shape (n_flips,)
    interval_rho : ndarray, shape (n_intervals, N)
    interval_omega : ndarray, shape (n_intervals, N)
    beta : ndarray, shape (N, N), optional
        Mixing-scale means of the Laplace prior, one per coupling.
    """

    flip_omega: np.ndarray
    interval_rho: np.ndarray
    interval_omega: np.ndarray
    beta: np.ndarray | None = None

    def with_beta(self, beta) -> "AugmentedMoments":
        return AugmentedMoments(self.flip_omega, self.interval_rho, self.interval_omega,
                                np.asarray(beta, dtype=np.float64))


def compute_em_moments(table: IntervalTable, model: IsingModel) -> AugmentedMoments:
    """Latent means conditioned on point parameters (the EM expectation step).

    ``table`` must have been built from ``model``.
    """
    h = table.fields
    flip_omega = pg_mean(1.0, 2.0 * table.flip_fields)
    rho = poisson_mean(table.durations[:, None], model.gamma, table.states, h)
    omega = pg_mean(rho, 2.0 * h)
    return AugmentedMoments(np.atleast_1d(flip_omega), rho, omega)


def field_moments(table: IntervalTable, mu, sigma):
    """Posterior mean and second moment of every local field on the table.

    Parameters
    ----------
    mu : ndarray, shape (N, N+1)
        Row means ``(theta_i, J_i1, ..., J_iN)``.
    sigma : ndarray, shape (N, N+1, N+1)

    Returns
    -------
    mean, second : ndarray, shape (n_intervals, N)
    """
    x = table.design()
    mean = x @ np.asarray(mu).T
    var = np.empty_like(mean)
    for i in range(mean.shape[1]):
        var[:, i] = np.einsum("nj,nj->n", x @ sigma[i], x)
    np.maximum(var, 0.0, out=var)
    return mean, mean * mean + var


def _check_psd(sigma):
    for i, s in enumerate(sigma):
        if not np.all(np.isfinite(s)):
            raise ValidationError(f"covariance of row {i} is not finite")
        scale = max(1.0, float(np.abs(s).max()))
        if np.linalg.eigvalsh(0.5 * (s + s.T)).min() < -1e-10 * scale:
            raise ValidationError(f"covariance of row {i} is not positive semidefinite")


def compute_vb_moments(table: IntervalTable, post, gamma: float,
                       check: bool = True) -> AugmentedMoments:
    """Latent means under a Gaussian posterior over the parameter rows.

    Uses ``<H>`` and ``sqrt(<H^2>)`` in place of the point field.  ``post``
    needs ``mu`` (N, N+1) and ``sigma`` (N, N+1, N+1) attributes.
    """
    mu = np.asarray(post.mu)
    sigma = np.asarray(post.sigma)
    if mu.shape != (table.n_spins, table.n_spins + 1):
        raise ValidationError("posterior dimensions do not match the trajectory")
    if check:
        _check_psd(sigma)
    mean, second = field_moments(table, mu, sigma)
    return moments_from_field_moments(table, mean, second, gamma)


def moments_from_field_moments(table: IntervalTable, mean, second,
                               gamma: float) -> AugmentedMoments:
    """Latent means given ``<H>`` and ``<H^2>`` on every interval."""
    r = np.sqrt(second)
    k = np.arange(table.n_flips)
    flip_omega = pg_mean(1.0, 2.0 * r[k, table.flip_spins])
    # sqrt(<H^2>) >= |<H>| keeps the exponent non-positive
    rho = (table.durations[:, None] * gamma
           * np.exp(table.states * mean - log2cosh(r)))
    omega = pg_mean(rho, 2.0 * r)
    return AugmentedMoments(np.atleast_1d(flip_omega), rho, omega)
