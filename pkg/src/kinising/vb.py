"""Variational Bayes with a Laplace prior on couplings and a Gaussian prior on fields.

The approximate posterior factorises into a Gaussian over every parameter
row (``q1``) and a product of tilted Polya-Gamma, Poisson and generalized
inverse Gaussian factors for the auxiliary variables (``q2``).  Both
factors have closed-form optimal updates, and the free energy can be
evaluated exactly for any ``q1`` combined with the ``q2`` that is optimal
for some reference posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .em import MAX_JITTER, EmConfig, LinearSystem, assemble_system, expectation_pass
from .errors import NumericalError, ValidationError
from .model import (DEFAULT_CHUNK, IntervalTable, IsingModel, SpinTrajectory,
                    iter_interval_tables, log2cosh)
from .moments import (J_FLOOR, AugmentedMoments, compute_vb_moments, field_moments,
                      gig_beta_mean, moments_from_field_moments)

LOG_2PI = np.log(2.0 * np.pi)
# <beta> when <J^2> equals the Laplace prior variance 2 / lam^2
PRIOR_BETA = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class PriorConfig:
    """Laplace scale ``lam`` for couplings; Normal(mu_theta, 1/lambda_theta^2) for fields."""

    lam: float
    mu_theta: float = 0.0
    lambda_theta: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be positive")
        if not self.lambda_theta > 0:
            raise ValidationError("lambda_theta must be positive")


@dataclass(frozen=True, eq=False)
class RowPosteriorSet:
    """Gaussian posterior of every parameter row ``(theta_i, J_i1, ..., J_iN)``.

    Attributes
    ----------
    mu : ndarray, shape (N, N+1)
    sigma : ndarray, shape (N, N+1, N+1)
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[1] != mu.shape[0] + 1:
            raise ValidationError("mu must have shape (N, N+1)")
        n, d = mu.shape
        if sigma.shape != (n, d, d):
            raise ValidationError(f"sigma must have shape ({n}, {d}, {d})")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValidationError("posterior parameters must be finite")
        sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
        for i in range(n):
            try:
                np.linalg.cholesky(sigma[i])
            except np.linalg.LinAlgError:
                raise ValidationError(f"covariance of row {i} is not positive definite") from None
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_prior(cls, n: int, prior: PriorConfig) -> "RowPosteriorSet":
        """Gaussian with the prior's means and variances (Laplace variance ``2 / lam^2``)."""
        mu = np.zeros((n, n + 1))
        mu[:, 0] = prior.mu_theta
        var = np.full(n + 1, 2.0 / prior.lam ** 2)
        var[0] = 1.0 / prior.lambda_theta ** 2
        return cls(mu, np.broadcast_to(np.diag(var), (n, n + 1, n + 1)))

    @property
    def n_spins(self) -> int:
        return int(self.mu.shape[0])

    def mean_model(self, gamma: float) -> IsingModel:
        return IsingModel.from_rows(self.mu, gamma)

    @property
    def coupling_var(self) -> np.ndarray:
        """Posterior variances of the couplings, shape (N, N)."""
        return np.diagonal(self.sigma, axis1=1, axis2=2)[:, 1:]

    def coupling_second_moment(self) -> np.ndarray:
        return self.mu[:, 1:] ** 2 + self.coupling_var

    def zscores(self) -> np.ndarray:
        """``|<J_ij>| / sd(J_ij)``, the score used to call couplings nonzero."""
        return np.abs(self.mu[:, 1:]) / np.sqrt(self.coupling_var)

    def logdet(self) -> np.ndarray:
        return np.array([np.linalg.slogdet(s)[1] for s in self.sigma])

    def __eq__(self, other):
        if not isinstance(other, RowPosteriorSet):
            return NotImplemented
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)


def _beta_from(post: RowPosteriorSet, lam: float) -> np.ndarray:
    return gig_beta_mean(np.sqrt(post.coupling_second_moment()), lam, J_FLOOR)


def posterior_from_system(system: LinearSystem, beta, prior: PriorConfig,
                          jitter: float = 0.0) -> RowPosteriorSet:
    """Optimal Gaussian rows given expected normal equations and mixing scales.

    ``system.A`` already carries the factor 4 of the quadratic term, so the
    row precision is ``A_i + diag(lambda_theta^2, lam^2 <beta_i1>, ...)``.
    """
    n = system.n_spins
    d = n + 1
    mu = np.empty((n, d))
    sigma = np.empty((n, d, d))
    beta = np.asarray(beta, dtype=np.float64)
    eye = np.eye(d)
    for i in range(n):
        prec0 = np.empty(d)
        prec0[0] = prior.lambda_theta ** 2
        prec0[1:] = prior.lam ** 2 * beta[i]
        P = system.A[i] + np.diag(prec0)
        rhs = system.b[i].copy()
        rhs[0] += prec0[0] * prior.mu_theta
        eps = jitter
        while True:
            try:
                factor = linalg.cho_factor(P + eps * eye, lower=True)
                break
            except linalg.LinAlgError:
                if eps >= MAX_JITTER:
                    raise NumericalError(f"row {i}: posterior precision not positive definite") from None
                eps = min(max(10.0 * eps, 1e-12), MAX_JITTER)
        sigma[i] = linalg.cho_solve(factor, eye)
        mu[i] = linalg.cho_solve(factor, rhs)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise NumericalError("non-finite posterior")
    return RowPosteriorSet(mu, sigma)


def vb_update_q1(table: IntervalTable, moments: AugmentedMoments,
                 prior: PriorConfig) -> RowPosteriorSet:
    """Gaussian row update from latent means on a single table.

    Without ``moments.beta`` the mixing scales of the moment-matched prior
    (``1 / sqrt(2)``) are used.
    """
    beta = moments.beta
    if beta is None:
        beta = np.full((table.n_spins, table.n_spins), PRIOR_BETA)
    return posterior_from_system(assemble_system(table, moments), beta, prior)


def vb_update_q2(table: IntervalTable, post: RowPosteriorSet, prior: PriorConfig,
                 gamma: float) -> AugmentedMoments:
    """Latent means under ``post``, including the coupling mixing scales."""
    return compute_vb_moments(table, post, gamma, check=False).with_beta(
        _beta_from(post, prior.lam))


def _data_pass(traj: SpinTrajectory, post: RowPosteriorSet, gamma: float,
               ref: RowPosteriorSet | None, want_system: bool, chunk: int):
    """Data part of the free energy and (optionally) the expected normal equations.

    ``q2`` is optimal for ``ref`` (``post`` itself when ``ref`` is None).
    """
    total = 0.0
    system = LinearSystem.zeros(traj.n_spins) if want_system else None
    src = post if ref is None else ref
    for table in iter_interval_tables(traj, src.mean_model(gamma), chunk):
        m1, s1 = field_moments(table, post.mu, post.sigma)
        if ref is None:
            mr, sr = m1, s1
        else:
            mr, sr = field_moments(table, ref.mu, ref.sigma)
        mom = moments_from_field_moments(table, mr, sr, gamma)
        rr = np.sqrt(sr)
        gap = sr - s1
        k = np.arange(table.n_flips)
        sp = table.flip_spins
        sf = table.flip_states
        total += float(np.sum(sf * m1[k, sp] + log2cosh(rr[k, sp])
                              - 2.0 * mom.flip_omega * gap[k, sp]))
        rho = mom.interval_rho
        total += float(np.sum(gamma * table.durations) * table.n_spins - rho.sum())
        total += float(np.sum(rho * table.states * (mr - m1)
                              - 2.0 * mom.interval_omega * gap))
        if want_system:
            system = system + assemble_system(table, mom)
    return total, system


def _prior_terms(post: RowPosteriorSet, prior: PriorConfig,
                 ref: RowPosteriorSet | None) -> float:
    lam = prior.lam
    src = post if ref is None else ref
    j2_ref = src.coupling_second_moment()
    j2 = post.coupling_second_moment()
    a_ref = np.sqrt(j2_ref)
    beta = gig_beta_mean(a_ref, lam, J_FLOOR)
    # -ln of the Laplace density at sqrt(<J^2>) under the reference posterior
    coupling = np.sum(lam * a_ref - np.log(0.5 * lam) - 0.5 * lam ** 2 * beta * (j2_ref - j2))
    lt = prior.lambda_theta
    theta_mean = post.mu[:, 0]
    theta_var = post.sigma[:, 0, 0]
    field_ce = np.sum(0.5 * LOG_2PI - np.log(lt)
                      + 0.5 * lt ** 2 * ((theta_mean - prior.mu_theta) ** 2 + theta_var))
    d = post.mu.shape[1]
    neg_entropy = -0.5 * np.sum(d * (LOG_2PI + 1.0) + post.logdet())
    return float(coupling + field_ce + neg_entropy)


def free_energy(traj: SpinTrajectory, post: RowPosteriorSet, prior: PriorConfig,
                gamma: float, ref: RowPosteriorSet | None = None,
                chunk: int = DEFAULT_CHUNK) -> float:
    """Variational free energy of ``q1 = post`` and ``q2`` optimal for ``ref``.

    With ``ref=None`` the auxiliary factor is the optimal one for ``post``,
    which is the smallest free energy reachable with this ``q1``.  Its
    negative is a lower bound on the log marginal likelihood of the data.
    """
    if post.n_spins != traj.n_spins:
        raise ValidationError("posterior dimensions do not match the trajectory")
    data, _ = _data_pass(traj, post, gamma, ref, False, chunk)
    out = data + _prior_terms(post, prior, ref)
    if not np.isfinite(out):
        raise NumericalError("free energy is not finite")
    return out


@dataclass
class VbReport:
    """Result of :func:`vb_fit`; ``free_energy[m]`` belongs to the ``m``-th iterate."""

    posterior: RowPosteriorSet
    free_energy: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def final_free_energy(self) -> float:
        return self.free_energy[-1]


def vb_fit(traj: SpinTrajectory, gamma: float, prior: PriorConfig,
           cfg: EmConfig = EmConfig(), init: RowPosteriorSet | None = None) -> VbReport:
    """Alternate the auxiliary and Gaussian updates until the free energy settles.

    Unless ``init`` is given, the first Gaussian update uses the EM latent
    means at ``J = 0`` and the mixing scales of the moment-matched prior.
    ``cfg.tol`` bounds the relative free-energy change and ``cfg.max_iters``
    the number of further Gaussian updates.
    """
    n = traj.n_spins
    if init is None:
        _, system = expectation_pass(traj, IsingModel.zeros(n, gamma), cfg.chunk)
        post = posterior_from_system(system, np.full((n, n), PRIOR_BETA), prior)
    else:
        post = init
    if post.n_spins != n:
        raise ValidationError("initial posterior does not match the trajectory")
    report = VbReport(post)
    while True:
        data, system = _data_pass(traj, post, gamma, None, True, cfg.chunk)
        F = data + _prior_terms(post, prior, None)
        if not np.isfinite(F):
            raise NumericalError("free energy is not finite")
        report.posterior = post
        report.free_energy.append(F)
        if len(report.free_energy) > 1:
            if abs(F - report.free_energy[-2]) <= cfg.tol * abs(F):
                report.converged = True
                break
        if report.iterations >= cfg.max_iters:
            break
        post = posterior_from_system(system, _beta_from(post, prior.lam), prior)
        report.iterations += 1
    return report


def sweep_lambda(traj: SpinTrajectory, gamma: float, lambdas, mu_theta: float = 0.0,
                 lambda_theta: float = 1.0, cfg: EmConfig = EmConfig(),
                 warm_start: bool = False):
    """Fit VB for every ``lam`` in ``lambdas``; returns a list of (lam, VbReport).

    With ``warm_start`` each fit starts from the previous posterior instead
    of the prior, which saves iterations on fine grids.
    """
    out = []
    post = None
    for lam in lambdas:
        prior = PriorConfig(float(lam), mu_theta, lambda_theta)
        report = vb_fit(traj, gamma, prior, cfg, init=post if warm_start else None)
        post = report.posterior
        out.append((float(lam), report))
    return out


def best_lambda(sweep) -> float:
    """``lam`` with the smallest final free energy."""
    return min(sweep, key=lambda item: item[1].final_free_energy)[0]
