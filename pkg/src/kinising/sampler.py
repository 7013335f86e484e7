"""Exact trajectory sampling (Gillespie) and random ground-truth models.

Random numbers come from numpy's ``Philox`` counter-based generator so that
a given seed yields the same stream on every platform.  The sampler draws
uniforms in rows of three, consumed in a fixed order per update:

1. waiting time ``-ln(1 - u0) / (gamma N)``,
2. spin index ``floor(u1 N)``,
3. flip if ``u2 < P_flip``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ValidationError
from .model import IsingModel, SpinTrajectory

_BLOCK = 1 << 16


def make_rng(seed, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``seed``; distinct ``stream`` values are independent."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def random_initial_state(n: int, seed) -> np.ndarray:
    """Each spin +1 or -1 with probability 1/2."""
    rng = make_rng(seed, stream=1)
    return np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)


@njit(cache=True)
def _run_block(u, t, t_end, total_rate, s, h, J, out_t, out_i, n_out, upd_t, n_upd):
    n = s.shape[0]
    record = upd_t.shape[0] > 0
    pos = 0
    while pos < u.shape[0]:
        if n_out >= out_t.shape[0] or (record and n_upd >= upd_t.shape[0]):
            break
        t_new = t - np.log1p(-u[pos, 0]) / total_rate
        if t_new >= t_end:
            return pos + 1, t_end, n_out, n_upd, True
        t = t_new
        i = min(int(u[pos, 1] * n), n - 1)
        coin = u[pos, 2]
        pos += 1
        if record:
            upd_t[n_upd] = t
            n_upd += 1
        if coin < 1.0 / (1.0 + np.exp(2.0 * s[i] * h[i])):
            s[i] = -s[i]
            d = 2.0 * s[i]
            for k in range(n):
                h[k] += J[k, i] * d
            out_t[n_out] = t
            out_i[n_out] = i
            n_out += 1
    return pos, t, n_out, n_upd, False


def gillespie_sample(model: IsingModel, s0, t_end: float, seed,
                     return_updates: bool = False):
    """Sample a trajectory of the Glauber dynamics on ``[0, t_end]``.

    Update attempts arrive as a Poisson process of rate ``gamma * N``; each
    picks a spin uniformly and flips it with the Glauber probability at the
    current configuration.  Only accepted flips are stored.

    Parameters
    ----------
    model : IsingModel
    s0 : array_like
        Initial configuration in {-1, +1}.
    t_end : float
    seed : int
    return_updates : bool
        Also return the times of all update attempts, accepted or not.

    Returns
    -------
    SpinTrajectory, or (SpinTrajectory, ndarray) with ``return_updates``.
    """
    n = model.n_spins
    s0 = np.asarray(s0)
    if s0.shape != (n,) or not np.all(np.abs(s0) == 1):
        raise ValidationError("s0 must be a vector of +-1 with one entry per spin")
    if not t_end > 0:
        raise ValidationError("t_end must be positive")
    rng = make_rng(seed, stream=2)
    rate = model.gamma * n
    J = np.ascontiguousarray(model.J)
    s = s0.astype(np.float64)
    t = 0.0
    cap = max(1024, int(1.2 * rate * t_end) + 64)
    out_t = np.empty(cap)
    out_i = np.empty(cap, dtype=np.int64)
    upd_t = np.empty(cap if return_updates else 0)
    n_out = n_upd = 0
    done = False
    while not done:
        u = rng.random((_BLOCK, 3))
        pos = 0
        while pos < _BLOCK and not done:
            # fresh fields each round keep incremental round-off bounded
            h = model.theta + J @ s
            used, t, n_out, n_upd, done = _run_block(
                u[pos:], t, t_end, rate, s, h, J, out_t, out_i, n_out, upd_t, n_upd)
            pos += used
            if n_out >= out_t.size:
                out_t = np.concatenate((out_t, np.empty(out_t.size)))
                out_i = np.concatenate((out_i, np.empty(out_i.size, dtype=np.int64)))
            if return_updates and n_upd >= upd_t.size:
                upd_t = np.concatenate((upd_t, np.empty(upd_t.size)))
    traj = SpinTrajectory(n, t_end, s0.astype(np.int8), out_t[:n_out].copy(),
                          out_i[:n_out].copy(), model.gamma)
    if return_updates:
        return traj, upd_t[:n_upd].copy()
    return traj


@dataclass(frozen=True)
class GenConfig:
    """Recipe for a random ground-truth model.

    Couplings are Normal(0, g^2 / N) and then zeroed independently with
    probability ``p_sparse``.  Fields are zero, or Normal(theta_mean,
    theta_sd) when ``theta_mode == "gaussian"``.
    """

    n_spins: int
    t_end: float = 1000.0
    g: float = 0.3
    p_sparse: float = 0.0
    theta_mode: str = "zero"
    theta_mean: float = 0.0
    theta_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_spins < 1:
            raise ValidationError("n_spins must be >= 1")
        if not self.t_end > 0:
            raise ValidationError("t_end must be positive")
        if self.g < 0:
            raise ValidationError("g must be >= 0")
        if not 0.0 <= self.p_sparse <= 1.0:
            raise ValidationError("p_sparse must lie in [0, 1]")
        if self.theta_mode not in ("zero", "gaussian"):
            raise ValidationError("theta_mode must be 'zero' or 'gaussian'")
        if self.theta_mode == "gaussian" and self.theta_sd < 0:
            raise ValidationError("theta_sd must be >= 0")


def generate_model(cfg: GenConfig, gamma: float = 100.0) -> IsingModel:
    rng = make_rng(cfg.seed, stream=0)
    n = cfg.n_spins
    J = rng.normal(0.0, cfg.g / np.sqrt(n), size=(n, n))
    J[rng.random((n, n)) < cfg.p_sparse] = 0.0
    if cfg.theta_mode == "gaussian":
        theta = rng.normal(cfg.theta_mean, cfg.theta_sd, size=n)
    else:
        theta = np.zeros(n)
    return IsingModel(J, theta, gamma)


def simulate(cfg: GenConfig, gamma: float = 100.0):
    """Ground-truth model plus one trajectory of length ``cfg.t_end``."""
    model = generate_model(cfg, gamma)
    s0 = random_initial_state(cfg.n_spins, cfg.seed)
    return model, gillespie_sample(model, s0, cfg.t_end, cfg.seed)
