"""Kinetic Ising model in continuous time: data types and likelihoods.

A trajectory of ``N`` spins on ``[0, T]`` is stored as an initial
configuration plus an ordered list of flip events.  Between events all spins
(and therefore all local fields) are constant, so every quantity the
inference code needs is a sum over constant intervals and over flips.

Interval ``k`` runs from the ``k``-th to the ``(k+1)``-th event (with the
start and end of the record as outer boundaries), so the flip that closes
interval ``k`` is evaluated with the state and fields of interval ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import ValidationError

TIE_JITTER = 1e-9
DEFAULT_CHUNK = 16384


def log2cosh(h):
    """``ln(2 cosh h)`` without overflow."""
    a = np.abs(h)
    return a + np.log1p(np.exp(-2.0 * a))


def flip_probability(s, h):
    """Probability that an updated spin in state ``s`` flips under field ``h``.

    Equal to ``exp(-s h) / (2 cosh h)``, evaluated as ``logistic(-2 s h)``.
    Works elementwise on arrays.
    """
    return expit(-2.0 * np.asarray(s, dtype=float) * np.asarray(h, dtype=float))


@dataclass(frozen=True, eq=False)
class SpinTrajectory:
    """Piecewise-constant record of ``n_spins`` binary spins on ``[0, t_end]``.

    Attributes
    ----------
    n_spins : int
    t_end : float
    initial_state : ndarray of int8, shape (n_spins,)
        Values in {-1, +1}.
    flip_times : ndarray of float, shape (n_flips,)
        Strictly increasing, inside ``(0, t_end)``.
    flip_spins : ndarray of int, shape (n_flips,)
    gamma : float or None
        Update rate the data were recorded with, if known.
    """

    n_spins: int
    t_end: float
    initial_state: np.ndarray
    flip_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flip_spins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    gamma: float | None = None

    def __post_init__(self):
        s0 = np.asarray(self.initial_state)
        times = np.asarray(self.flip_times, dtype=np.float64).reshape(-1)
        spins = np.asarray(self.flip_spins).reshape(-1)
        n = int(self.n_spins)
        if n < 1:
            raise ValidationError("n_spins must be positive")
        if not np.isfinite(self.t_end) or self.t_end <= 0:
            raise ValidationError("t_end must be positive and finite")
        if s0.shape != (n,):
            raise ValidationError(f"initial_state has shape {s0.shape}, expected ({n},)")
        if not np.all(np.abs(s0) == 1):
            raise ValidationError("initial_state entries must be -1 or +1")
        if times.shape != spins.shape:
            raise ValidationError("flip_times and flip_spins differ in length")
        if spins.size and not np.all(np.equal(np.mod(spins, 1), 0)):
            raise ValidationError("flip spin indices must be integers")
        spins = spins.astype(np.int64)
        if times.size:
            if not np.all(np.isfinite(times)):
                raise ValidationError("flip times must be finite")
            if times[0] <= 0.0 or times[-1] >= self.t_end:
                raise ValidationError("flip times must lie strictly inside (0, t_end)")
            if np.any(np.diff(times) <= 0.0):
                raise ValidationError("flip times must be strictly increasing")
            if spins.min() < 0 or spins.max() >= n:
                raise ValidationError("flip spin index out of range")
        if self.gamma is not None and not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValidationError("gamma must be positive when given")
        object.__setattr__(self, "n_spins", n)
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "initial_state", s0.astype(np.int8))
        object.__setattr__(self, "flip_times", times)
        object.__setattr__(self, "flip_spins", spins)
        for arr in (self.initial_state, self.flip_times, self.flip_spins):
            arr.setflags(write=False)

    @classmethod
    def from_events(cls, n_spins, t_end, initial_state, times, spins, gamma=None,
                    jitter_ties=False):
        """Build a trajectory from possibly unsorted events.

        With ``jitter_ties`` events sharing a timestamp are separated by
        ``TIE_JITTER`` (later events in input order move forward).
        """
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        spins = np.asarray(spins, dtype=np.int64).reshape(-1)
        order = np.argsort(times, kind="stable")
        times, spins = times[order].copy(), spins[order]
        if jitter_ties:
            for k in range(1, times.size):
                if times[k] <= times[k - 1]:
                    times[k] = times[k - 1] + TIE_JITTER
        return cls(n_spins, t_end, np.asarray(initial_state), times, spins, gamma)

    @property
    def n_flips(self) -> int:
        return int(self.flip_times.size)

    @property
    def n_intervals(self) -> int:
        return self.n_flips + 1

    @property
    def boundaries(self) -> np.ndarray:
        """Interval boundaries ``t_0 = 0 < t_1 < ... < t_{n_max+1} = t_end``."""
        return np.concatenate(([0.0], self.flip_times, [self.t_end]))

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def states(self) -> np.ndarray:
        """Spin configuration of every constant interval, shape (n_intervals, N)."""
        out = np.empty((self.n_intervals, self.n_spins), dtype=np.int8)
        _fill_states(self.initial_state, self.flip_spins, out)
        return out

    def state_at(self, t: float) -> np.ndarray:
        """Configuration at time ``t`` (right-continuous at flip times)."""
        k = int(np.searchsorted(self.flip_times, t, side="right"))
        s = self.initial_state.copy()
        if k:
            counts = np.bincount(self.flip_spins[:k], minlength=self.n_spins)
            s[counts % 2 == 1] *= -1
        return s

    def relabel(self, perm) -> "SpinTrajectory":
        """Return the trajectory with spin ``perm[k]`` renamed to ``k``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return SpinTrajectory(self.n_spins, self.t_end, self.initial_state[perm],
                              self.flip_times.copy(), inv[self.flip_spins], self.gamma)

    def __eq__(self, other):
        if not isinstance(other, SpinTrajectory):
            return NotImplemented
        return (self.n_spins == other.n_spins and self.t_end == other.t_end
                and self.gamma == other.gamma
                and np.array_equal(self.initial_state, other.initial_state)
                and np.array_equal(self.flip_times, other.flip_times)
                and np.array_equal(self.flip_spins, other.flip_spins))


@dataclass(frozen=True, eq=False)
class IsingModel:
    """Couplings ``J`` (row ``i`` holds the inputs to spin ``i``), fields and rate."""

    J: np.ndarray
    theta: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        J = np.array(self.J, dtype=np.float64)
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        n = theta.size
        if J.shape != (n, n):
            raise ValidationError(f"J has shape {J.shape}, expected ({n}, {n})")
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(theta))):
            raise ValidationError("model parameters must be finite")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValidationError("gamma must be positive")
        J.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "gamma", float(self.gamma))

    @classmethod
    def zeros(cls, n: int, gamma: float = 1.0) -> "IsingModel":
        return cls(np.zeros((n, n)), np.zeros(n), gamma)

    @classmethod
    def from_rows(cls, rows, gamma: float) -> "IsingModel":
        """Inverse of :attr:`rows`."""
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows[:, 1:], rows[:, 0], gamma)

    @property
    def n_spins(self) -> int:
        return int(self.theta.size)

    @property
    def rows(self) -> np.ndarray:
        """Stacked parameter rows ``(theta_i, J_i1, ..., J_iN)``, shape (N, N+1)."""
        return np.column_stack((self.theta, self.J))

    def relabel(self, perm) -> "IsingModel":
        perm = np.asarray(perm)
        return IsingModel(self.J[np.ix_(perm, perm)], self.theta[perm], self.gamma)

    def __eq__(self, other):
        if not isinstance(other, IsingModel):
            return NotImplemented
        return (self.gamma == other.gamma and np.array_equal(self.J, other.J)
                and np.array_equal(self.theta, other.theta))


@dataclass(frozen=True)
class IntervalTable:
    """States and local fields on a contiguous block of constant intervals.

    ``flip_spins[k]`` is the spin whose flip ends interval ``k`` of the block;
    the block's last interval has no entry when it is the end of the record.
    ``offset`` is the global index of the block's first interval.
    """

    durations: np.ndarray
    states: np.ndarray
    fields: np.ndarray
    flip_spins: np.ndarray
    offset: int = 0

    @property
    def n_intervals(self) -> int:
        return int(self.durations.size)

    @property
    def n_spins(self) -> int:
        return int(self.states.shape[1])

    @property
    def n_flips(self) -> int:
        return int(self.flip_spins.size)

    @property
    def flip_fields(self) -> np.ndarray:
        """Pre-flip field ``H_i(t)`` of the flipping spin for each flip."""
        k = np.arange(self.n_flips)
        return self.fields[k, self.flip_spins]

    @property
    def flip_states(self) -> np.ndarray:
        """Pre-flip value ``s_i(t)`` of the flipping spin for each flip."""
        k = np.arange(self.n_flips)
        return self.states[k, self.flip_spins]

    def design(self) -> np.ndarray:
        """Augmented state rows ``x = (1, s_1, ..., s_N)`` as float64."""
        x = np.empty((self.n_intervals, self.n_spins + 1))
        x[:, 0] = 1.0
        x[:, 1:] = self.states
        return x


@njit(cache=True)
def _fill_states(s0, flip_spins, out):
    s = s0.copy()
    out[0, :] = s
    for k in range(flip_spins.shape[0]):
        j = flip_spins[k]
        s[j] = -s[j]
        out[k + 1, :] = s


@njit(cache=True)
def _fill_block(s, flip_spins, start, J, theta, states, fields):
    # s: state of interval `start` (modified in place to the block's last state)
    n = s.shape[0]
    h = np.empty(n)
    for i in range(n):
        acc = theta[i]
        for j in range(n):
            acc += J[i, j] * s[j]
        h[i] = acc
    m = states.shape[0]
    for k in range(m):
        if k > 0:
            j = flip_spins[start + k - 1]
            s[j] = -s[j]
            sj2 = 2.0 * s[j]
            for i in range(n):
                h[i] += J[i, j] * sj2
        for i in range(n):
            states[k, i] = s[i]
            fields[k, i] = h[i]


def _check_dims(traj: SpinTrajectory, model: IsingModel):
    if model.n_spins != traj.n_spins:
        raise ValidationError(
            f"model has {model.n_spins} spins, trajectory has {traj.n_spins}")


def iter_interval_tables(traj: SpinTrajectory, model: IsingModel,
                         chunk: int = DEFAULT_CHUNK) -> Iterator[IntervalTable]:
    """Yield :class:`IntervalTable` blocks of at most ``chunk`` intervals.

    Fields are updated incrementally inside a block (a flip of spin ``j``
    shifts every ``H_i`` by ``2 J_ij s_j``) and recomputed from scratch at the
    start of each block, which bounds round-off drift.
    """
    _check_dims(traj, model)
    if chunk < 1:
        raise ValidationError("chunk must be positive")
    durations = traj.durations
    n_int = traj.n_intervals
    s = traj.initial_state.copy()
    J, theta = model.J, model.theta
    for start in range(0, n_int, chunk):
        stop = min(start + chunk, n_int)
        if start > 0:
            j = traj.flip_spins[start - 1]
            s[j] = -s[j]
        states = np.empty((stop - start, traj.n_spins), dtype=np.int8)
        fields = np.empty((stop - start, traj.n_spins))
        _fill_block(s, traj.flip_spins, start, J, theta, states, fields)
        flips = traj.flip_spins[start:min(stop, n_int - 1)]
        yield IntervalTable(durations[start:stop], states, fields, flips, start)


def build_interval_table(traj: SpinTrajectory, model: IsingModel) -> IntervalTable:
    """Single table covering the whole trajectory."""
    return next(iter_interval_tables(traj, model, chunk=traj.n_intervals))


def table_log_likelihood(table: IntervalTable, gamma: float) -> float:
    """Contribution of one table block to the continuous-time log-likelihood."""
    h_f = table.flip_fields
    s_f = table.flip_states
    flips = float(np.sum(-s_f * h_f - log2cosh(h_f)))
    # exp(sH)/(2cosh H) - 1 == -logistic(-2sH)
    stay = expit(-2.0 * table.states * table.fields)
    survival = -gamma * float(table.durations @ stay.sum(axis=1))
    return flips + survival


def log_likelihood(traj: SpinTrajectory, model: IsingModel,
                   chunk: int = DEFAULT_CHUNK) -> float:
    """Exact log-likelihood of a continuous-time trajectory.

    Sum over flips of ``-s H - ln 2cosh H`` (pre-flip values) plus
    ``gamma * sum_i integral (exp(s_i H_i) / (2 cosh H_i) - 1) dt``.
    """
    return float(sum(table_log_likelihood(t, model.gamma)
                     for t in iter_interval_tables(traj, model, chunk)))


def discrete_log_prob(traj: SpinTrajectory, model: IsingModel, dt: float) -> float:
    """Log-probability of the trajectory under the time-discretised dynamics.

    The record is cut into cells of width ``dt``; a flip at time ``t`` belongs
    to cell ``floor(t / dt)`` and every spin update in a cell uses the
    configuration at the start of that cell.  Meant as a reference for tests;
    the cost is linear in ``t_end / dt``.
    """
    _check_dims(traj, model)
    g = model.gamma
    if not dt > 0 or g * dt >= 1.0:
        raise ValidationError("need dt > 0 and gamma * dt < 1")
    ratio = traj.t_end / dt
    n_cells = int(round(ratio))
    if abs(ratio - n_cells) > 1e-6 * max(1.0, ratio):
        raise ValidationError("dt must divide t_end")
    cells = np.minimum((traj.flip_times / dt).astype(np.int64), n_cells - 1)
    key = cells * traj.n_spins + traj.flip_spins
    if np.unique(key).size != key.size:
        raise ValidationError("a spin flips twice within one cell; refine dt")

    starts = np.arange(n_cells) * dt
    idx = np.searchsorted(traj.flip_times, starts, side="left")
    all_states = traj.states()
    states = all_states[idx].astype(np.float64)
    fields = model.theta + states @ model.J.T
    p_flip = expit(-2.0 * states * fields)
    stay = np.log1p(-g * dt * p_flip)
    flipped = np.zeros((n_cells, traj.n_spins), dtype=bool)
    flipped[cells, traj.flip_spins] = True
    total = float(stay[~flipped].sum())
    total += float(np.sum(np.log(g * dt * p_flip[flipped])))
    return total
