"""Maximum-likelihood and L1-penalised EM for the kinetic Ising model.

Given the latent means, the expected complete-data log-likelihood is a
quadratic form in each parameter row ``(theta_i, J_i1, ..., J_iN)``, so the
maximisation step is ``N`` independent linear solves ``A_i J_i = b_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NumericalError, ValidationError
from .model import (DEFAULT_CHUNK, IntervalTable, IsingModel, SpinTrajectory,
                    iter_interval_tables, table_log_likelihood)
from .moments import J_FLOOR, AugmentedMoments, compute_em_moments, gig_beta_mean

log = logging.getLogger(__name__)

MAX_JITTER = 1e-4


@dataclass(frozen=True)
class LinearSystem:
    """Per-row normal equations; ``A`` is (N, N+1, N+1) and ``b`` is (N, N+1).

    Index 0 of every row is the field slot, index ``j + 1`` the coupling
    from spin ``j``.
    """

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LinearSystem":
        return cls(np.zeros((n, n + 1, n + 1)), np.zeros((n, n + 1)))

    def __add__(self, other: "LinearSystem") -> "LinearSystem":
        return LinearSystem(self.A + other.A, self.b + other.b)

    @property
    def n_spins(self) -> int:
        return int(self.b.shape[0])


def pair_products(x: np.ndarray):
    """Rows ``x_j * x_k`` (``j <= k``) of shape (n_pairs, n) plus index arrays."""
    d = x.shape[1]
    jj, kk = np.triu_indices(d)
    xt = np.ascontiguousarray(x.T)
    z = np.empty((jj.size, x.shape[0]))
    off = 0
    for j in range(d):
        np.multiply(xt[j], xt[j:], out=z[off:off + d - j])
        off += d - j
    return z, jj, kk


def weighted_grams(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``G[i] = sum_n weights[n, i] * outer(x[n], x[n])`` for every column ``i``."""
    z, jj, kk = pair_products(x)
    g = z @ weights
    d = x.shape[1]
    out = np.empty((weights.shape[1], d, d))
    out[:, jj, kk] = g.T
    out[:, kk, jj] = g.T
    return out


def assemble_system(table: IntervalTable, moments: AugmentedMoments) -> LinearSystem:
    """Normal equations of the maximisation step for one table block.

    ``b_i = -sum_{flips of i} s_i x + sum_n <rho_i^n> s_i^n x^n`` and
    ``A_i = 4 (sum_{flips of i} <omega> x x^T + sum_n <omega_i^n> x^n x^nT)``
    with ``x = (1, s_1, ..., s_N)`` taken before each flip.
    """
    x = table.design()
    k = np.arange(table.n_flips)
    spins = table.flip_spins
    # flip k has the state vector of interval k, so it folds into the weights
    w = np.array(moments.interval_omega, dtype=np.float64)
    w[k, spins] += moments.flip_omega
    c = moments.interval_rho * table.states
    c[k, spins] -= table.flip_states
    A = 4.0 * weighted_grams(x, w)
    b = (x.T @ c).T
    return LinearSystem(A, b)


def solve_row(system: LinearSystem, i: int, jitter: float = 1e-10, l1_diag=None):
    """Solve ``(A_i + jitter I + diag(0, l1_diag)) J_i = b_i`` by Cholesky.

    The jitter is raised tenfold on factorisation failure, up to ``1e-4``.
    """
    A = system.A[i]
    b = system.b[i]
    d = b.size
    M = A.copy()
    if l1_diag is not None:
        M[np.arange(1, d), np.arange(1, d)] += np.asarray(l1_diag, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"row {i}: non-finite system matrix")
    eps = jitter
    while True:
        try:
            factor = linalg.cho_factor(M + eps * np.eye(d), lower=True)
            break
        except linalg.LinAlgError:
            if eps >= MAX_JITTER:
                raise NumericalError(f"row {i}: system not positive definite "
                                     f"even with jitter {eps:g}") from None
            eps = min(max(eps * 10.0, 1e-12), MAX_JITTER)
    M = M + eps * np.eye(d)
    sol = linalg.cho_solve(factor, b)
    resid = b - M @ sol
    if np.linalg.norm(resid) > 1e-8 * np.linalg.norm(b):
        sol = sol + linalg.cho_solve(factor, resid)
    if not np.all(np.isfinite(sol)):
        raise NumericalError(f"row {i}: non-finite solution")
    return sol


def smoothed_l1(J, j_floor: float = J_FLOOR) -> float:
    """``sum |J|`` with the kink inside ``|J| < j_floor`` replaced by a parabola.

    This is the penalty the floored mixing-scale update minorises exactly.
    """
    a = np.abs(np.asarray(J))
    inner = a * a / (2.0 * j_floor) + 0.5 * j_floor
    return float(np.where(a >= j_floor, a, inner).sum())


@dataclass(frozen=True)
class EmConfig:
    """Settings for :func:`em_fit`.  ``lam = 0`` is plain maximum likelihood."""

    max_iters: int = 100
    tol: float = 1e-8
    lam: float = 0.0
    init: IsingModel | None = None
    jitter: float = 1e-10
    chunk: int = DEFAULT_CHUNK
    j_floor: float = J_FLOOR

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")


@dataclass
class FitReport:
    """Result of :func:`em_fit`.

    ``loglik[m]`` is the log-likelihood of the ``m``-th iterate (``m = 0`` is
    the initial model); ``objective`` is the penalised version that EM
    increases (equal to ``loglik`` when ``lam = 0``).
    """

    model: IsingModel
    loglik: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def expectation_pass(traj: SpinTrajectory, model: IsingModel, chunk: int = DEFAULT_CHUNK):
    """Log-likelihood and normal equations at ``model`` in one sweep over the data."""
    ll = 0.0
    system = LinearSystem.zeros(traj.n_spins)
    for table in iter_interval_tables(traj, model, chunk):
        ll += table_log_likelihood(table, model.gamma)
        system = system + assemble_system(table, compute_em_moments(table, model))
    return ll, system


def em_fit(traj: SpinTrajectory, gamma: float, cfg: EmConfig = EmConfig()) -> FitReport:
    """Fit couplings and fields by EM.

    Stops when the relative change of the (penalised) objective drops below
    ``cfg.tol`` or after ``cfg.max_iters`` maximisation steps.
    """
    n = traj.n_spins
    model = cfg.init if cfg.init is not None else IsingModel.zeros(n, gamma)
    if model.n_spins != n:
        raise ValidationError("initial model does not match the trajectory")
    model = IsingModel(model.J, model.theta, gamma)
    report = FitReport(model)
    while True:
        ll, system = expectation_pass(traj, model, cfg.chunk)
        obj = ll - cfg.lam * smoothed_l1(model.J, cfg.j_floor) if cfg.lam > 0 else ll
        if not np.isfinite(obj):
            raise NumericalError("log-likelihood became non-finite")
        report.model = model
        report.loglik.append(ll)
        report.objective.append(obj)
        log.debug("iter %d loglik %.10g objective %.10g", report.iterations, ll, obj)
        if len(report.objective) > 1:
            prev = report.objective[-2]
            if abs(obj - prev) <= cfg.tol * abs(obj):
                report.converged = True
                break
        if report.iterations >= cfg.max_iters:
            break
        l1 = None
        if cfg.lam > 0:
            l1 = cfg.lam ** 2 * gig_beta_mean(model.J, cfg.lam, cfg.j_floor)
        rows = np.array([solve_row(system, i, cfg.jitter, None if l1 is None else l1[i])
                         for i in range(n)])
        model = IsingModel.from_rows(rows, gamma)
        report.iterations += 1
    return report
