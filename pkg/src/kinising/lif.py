"""Recurrent conductance-based integrate-and-fire network and spike binarization.

Three populations: Poisson input ``X`` (not integrated), excitatory ``E``
and inhibitory ``I``.  Synaptic conductances jump by the synaptic weight
after a transmission delay and decay exponentially (time constant
``tau_e`` for X/E sources, ``tau_i`` for I sources); the resulting currents
are ``g (V_rev - V)``.  Units: ms, mV, nS, pF inside the integrator; spike
times are reported in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import NumericalError, ValidationError
from .model import SpinTrajectory
from .sampler import make_rng

DESK = (200, 200, 50)
PAPER = (800, 800, 200)


@dataclass(frozen=True)
class LifConfig:
    n_x: int = 800
    n_e: int = 800
    n_i: int = 200
    c_m: float = 250.0      # pF (0.25 nF)
    g_l: float = 16.7       # nS
    v_l: float = -70.0
    v_th: float = -50.0
    v_r: float = -60.0
    ref_e: float = 2.0      # ms
    ref_i: float = 1.0
    rate_x: float = 10.0    # Hz
    p_connect: float = 0.2
    g_ee: float = 2.4       # onto E from E
    g_ei: float = 40.0      # onto E from I
    g_ie: float = 4.8       # onto I from E
    g_ii: float = 40.0
    g_ex: float = 5.4
    g_ix: float = 5.4
    tau_e: float = 5.0
    tau_i: float = 10.0
    v_e: float = 0.0
    v_i: float = -80.0
    delay_min: float = 0.5
    delay_max: float = 1.5
    conductance_scale: float = 1.0
    dt_sim: float = 0.05    # ms
    t_end: float = 10.0     # s
    n_e_record: int = 100
    n_i_record: int = 40
    seed: int = 0

    def __post_init__(self):
        if min(self.n_x, self.n_e, self.n_i) < 0 or self.n_e + self.n_i == 0:
            raise ValidationError("population sizes must be non-negative with E+I > 0")
        conds = (self.g_ee, self.g_ei, self.g_ie, self.g_ii, self.g_ex, self.g_ix,
                 self.conductance_scale, self.g_l)
        if min(conds) < 0:
            raise ValidationError("conductances must be >= 0")
        if not self.v_r < self.v_th:
            raise ValidationError("reset potential must lie below threshold")
        if not 0.0 <= self.p_connect <= 1.0:
            raise ValidationError("p_connect must lie in [0, 1]")
        if not (self.dt_sim > 0 and self.t_end > 0 and self.c_m > 0):
            raise ValidationError("dt_sim, t_end and c_m must be positive")
        if not 0 <= self.delay_min <= self.delay_max:
            raise ValidationError("need 0 <= delay_min <= delay_max")

    @classmethod
    def at_scale(cls, scale: str = "desk", **kw) -> "LifConfig":
        """Population sizes for ``desk`` (200/200/50) or ``paper`` (800/800/200)."""
        sizes = {"desk": DESK, "paper": PAPER}
        if scale not in sizes:
            raise ValidationError("scale must be 'desk' or 'paper'")
        n_x, n_e, n_i = sizes[scale]
        return cls(n_x=n_x, n_e=n_e, n_i=n_i, **kw)


@dataclass
class SpikeRecord:
    """Spike times (s) of the recorded E and I neurons.

    ``synapses[a, b]`` is True when recorded neuron ``b`` projects onto
    recorded neuron ``a``.
    """

    times: list
    pops: list
    t_end: float
    synapses: np.ndarray | None = None
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_neurons(self) -> int:
        return len(self.times)

    def rates(self) -> np.ndarray:
        return np.array([t.size for t in self.times], dtype=np.float64) / self.t_end


@dataclass(frozen=True)
class _Network:
    indptr: np.ndarray
    post: np.ndarray
    weight: np.ndarray
    delay: np.ndarray
    inhibitory: np.ndarray   # per presynaptic neuron
    adjacency: np.ndarray    # (n_post, n_pre) bool


def _build_network(cfg: LifConfig, rng) -> _Network:
    n_x, n_e, n_i = cfg.n_x, cfg.n_e, cfg.n_i
    n_post = n_e + n_i
    n_pre = n_x + n_e + n_i
    means = np.zeros((n_post, n_pre))
    # rows: targets E then I; columns: sources X, E, I
    means[:n_e, :n_x] = cfg.g_ex
    means[:n_e, n_x:n_x + n_e] = cfg.g_ee
    means[:n_e, n_x + n_e:] = cfg.g_ei
    means[n_e:, :n_x] = cfg.g_ix
    means[n_e:, n_x:n_x + n_e] = cfg.g_ie
    means[n_e:, n_x + n_e:] = cfg.g_ii
    adj = rng.random((n_post, n_pre)) < cfg.p_connect
    idx = np.arange(n_post)
    adj[idx, n_x + idx] = False
    # uniform with sd 0.5 * mean: half-width sqrt(3) * 0.5 * mean
    half = np.sqrt(3.0) * 0.5 * means
    w = (means + half * (2.0 * rng.random((n_post, n_pre)) - 1.0)) * cfg.conductance_scale
    d = cfg.delay_min + (cfg.delay_max - cfg.delay_min) * rng.random((n_post, n_pre))
    steps = np.maximum(1, np.rint(d / cfg.dt_sim)).astype(np.int64)
    pre_i, post_i = np.nonzero(adj.T)
    indptr = np.zeros(n_pre + 1, dtype=np.int64)
    np.cumsum(np.bincount(pre_i, minlength=n_pre), out=indptr[1:])
    inhib = np.zeros(n_pre, dtype=np.bool_)
    inhib[n_x + n_e:] = True
    return _Network(indptr, post_i.astype(np.int64), w[post_i, pre_i], steps[post_i, pre_i],
                    inhib, adj)


@njit(cache=True)
def _integrate(step0, n_steps, v, ge, gi, ref, buf_e, buf_i, x_ptr, x_ids,
               indptr, post, weight, delay, inhib, n_x, ref_steps,
               dt, c_m, g_l, v_l, v_th, v_r, v_e, v_i, dec_e, dec_i,
               out_step, out_neuron):
    n_post = v.shape[0]
    n_buf = buf_e.shape[0]
    n_out = 0
    for s in range(n_steps):
        step = step0 + s
        slot = step % n_buf
        for k in range(n_post):
            ge[k] += buf_e[slot, k]
            gi[k] += buf_i[slot, k]
            buf_e[slot, k] = 0.0
            buf_i[slot, k] = 0.0
        for q in range(x_ptr[s], x_ptr[s + 1]):
            p = x_ids[q]
            for e in range(indptr[p], indptr[p + 1]):
                tgt = (step + delay[e]) % n_buf
                buf_e[tgt, post[e]] += weight[e]
        for k in range(n_post):
            if ref[k] > 0:
                ref[k] -= 1
                v[k] = v_r
                continue
            dv = (-g_l * (v[k] - v_l) - ge[k] * (v[k] - v_e) - gi[k] * (v[k] - v_i)) / c_m
            v[k] += dt * dv
            if not (abs(v[k]) <= 1e3):
                return -1 - k
            if v[k] >= v_th:
                v[k] = v_r
                ref[k] = ref_steps[k]
                out_step[n_out] = step
                out_neuron[n_out] = k
                n_out += 1
                p = n_x + k
                for e in range(indptr[p], indptr[p + 1]):
                    tgt = (step + delay[e]) % n_buf
                    if inhib[p]:
                        buf_i[tgt, post[e]] += weight[e]
                    else:
                        buf_e[tgt, post[e]] += weight[e]
        for k in range(n_post):
            ge[k] *= dec_e
            gi[k] *= dec_i
    return n_out


def _poisson_input(cfg: LifConfig, rng, n_steps: int):
    """Step indices of all X spikes, grouped by step (CSR layout)."""
    t_ms = cfg.t_end * 1e3
    counts = rng.poisson(cfg.rate_x * cfg.t_end, size=cfg.n_x)
    ids = np.repeat(np.arange(cfg.n_x, dtype=np.int64), counts)
    steps = np.minimum((rng.random(ids.size) * t_ms / cfg.dt_sim).astype(np.int64), n_steps - 1)
    order = np.lexsort((ids, steps))
    steps, ids = steps[order], ids[order]
    ptr = np.zeros(n_steps + 1, dtype=np.int64)
    np.cumsum(np.bincount(steps, minlength=n_steps), out=ptr[1:])
    return ptr, ids, counts


def lif_simulate(cfg: LifConfig, segment_ms: float = 1000.0) -> SpikeRecord:
    """Forward-Euler simulation of the network; deterministic given ``cfg.seed``.

    Records ``n_e_record`` E and ``n_i_record`` I neurons chosen at random.
    ``meta`` holds all population rates and the X input spike counts.
    """
    rng_net = make_rng(cfg.seed, stream=20)
    rng_in = make_rng(cfg.seed, stream=21)
    rng_v = make_rng(cfg.seed, stream=22)
    rng_rec = make_rng(cfg.seed, stream=23)
    net = _build_network(cfg, rng_net)
    dt = cfg.dt_sim
    n_steps = int(round(cfg.t_end * 1e3 / dt))
    x_ptr, x_ids, x_counts = _poisson_input(cfg, rng_in, n_steps)

    n_post = cfg.n_e + cfg.n_i
    v = cfg.v_r + (cfg.v_th - cfg.v_r) * rng_v.random(n_post)
    ge = np.zeros(n_post)
    gi = np.zeros(n_post)
    ref = np.zeros(n_post, dtype=np.int64)
    ref_steps = np.empty(n_post, dtype=np.int64)
    ref_steps[:cfg.n_e] = int(round(cfg.ref_e / dt))
    ref_steps[cfg.n_e:] = int(round(cfg.ref_i / dt))
    n_buf = int(net.delay.max()) + 1 if net.delay.size else 1
    buf_e = np.zeros((n_buf, n_post))
    buf_i = np.zeros((n_buf, n_post))
    dec_e = np.exp(-dt / cfg.tau_e)
    dec_i = np.exp(-dt / cfg.tau_i)

    seg = max(1, int(round(segment_ms / dt)))
    # refractoriness bounds spikes per neuron per segment
    cap = n_post * (seg // (int(ref_steps.min()) + 1) + 1)
    out_step = np.empty(cap, dtype=np.int64)
    out_neuron = np.empty(cap, dtype=np.int64)
    all_steps, all_neurons = [], []
    for step0 in range(0, n_steps, seg):
        m = min(seg, n_steps - step0)
        ptr = x_ptr[step0:step0 + m + 1] - x_ptr[step0]
        ids = x_ids[x_ptr[step0]:x_ptr[step0 + m]]
        n_out = _integrate(step0, m, v, ge, gi, ref, buf_e, buf_i, ptr, ids,
                           net.indptr, net.post, net.weight, net.delay, net.inhibitory,
                           cfg.n_x, ref_steps, dt, cfg.c_m, cfg.g_l, cfg.v_l, cfg.v_th,
                           cfg.v_r, cfg.v_e, cfg.v_i, dec_e, dec_i, out_step, out_neuron)
        if n_out < 0:
            raise NumericalError(f"membrane potential of neuron {-1 - n_out} diverged; "
                                 f"reduce dt_sim (now {dt} ms)")
        all_steps.append(out_step[:n_out].copy())
        all_neurons.append(out_neuron[:n_out].copy())
    steps = np.concatenate(all_steps)
    neurons = np.concatenate(all_neurons)
    # stamped at the start of the crossing step so every time lies in [0, t_end)
    t_sec = steps * dt * 1e-3
    counts = np.bincount(neurons, minlength=n_post)

    rec_e = np.sort(rng_rec.choice(cfg.n_e, size=min(cfg.n_e_record, cfg.n_e), replace=False))
    rec_i = cfg.n_e + np.sort(rng_rec.choice(cfg.n_i, size=min(cfg.n_i_record, cfg.n_i),
                                             replace=False))
    ids = np.concatenate((rec_e, rec_i)).astype(np.int64)
    order = np.argsort(neurons, kind="stable")
    starts = np.r_[0, np.cumsum(counts)]
    sorted_t = t_sec[order]
    times = [sorted_t[starts[k]:starts[k + 1]].copy() for k in ids]
    pops = ["E" if k < cfg.n_e else "I" for k in ids]
    syn = net.adjacency[np.ix_(ids, cfg.n_x + ids)]
    rates = counts / cfg.t_end
    meta = {
        "rate_e": float(rates[:cfg.n_e].mean()) if cfg.n_e else 0.0,
        "rate_i": float(rates[cfg.n_e:].mean()) if cfg.n_i else 0.0,
        "rate_x": float(x_counts.sum() / max(cfg.n_x, 1) / cfg.t_end),
        "x_counts": x_counts,
    }
    return SpikeRecord(times, pops, cfg.t_end, syn, ids, meta)


def step_halving_check(cfg: LifConfig, tol: float = 0.05):
    """Population rates at ``dt_sim`` and ``dt_sim / 2``; True if within ``tol``."""
    coarse = lif_simulate(cfg).meta
    fine = lif_simulate(replace(cfg, dt_sim=0.5 * cfg.dt_sim)).meta
    ok = True
    for key in ("rate_e", "rate_i"):
        a, b = coarse[key], fine[key]
        if max(a, b) > 0 and abs(a - b) > tol * max(a, b):
            ok = False
    return ok, coarse, fine


def top_rate_indices(rec: SpikeRecord, n_e_keep: int, n_i_keep: int) -> np.ndarray:
    """Indices (into ``rec``) of the most active E and I neurons, E first."""
    rates = rec.rates()
    pops = np.array(rec.pops)
    keep = []
    for pop, n_keep in (("E", n_e_keep), ("I", n_i_keep)):
        idx = np.nonzero(pops == pop)[0]
        if n_keep > idx.size:
            raise ValidationError(f"only {idx.size} {pop} neurons recorded, {n_keep} requested")
        order = np.argsort(-rates[idx], kind="stable")
        keep.append(idx[order[:n_keep]])
    return np.concatenate(keep)


def active_windows(times, active: float):
    """Merged ``[t, t + active)`` windows around sorted spike times."""
    starts, ends = [], []
    for t in np.asarray(times, dtype=np.float64):
        if ends and t <= ends[-1]:
            ends[-1] = t + active
        else:
            starts.append(t)
            ends.append(t + active)
    return np.array(starts), np.array(ends)


def binarize(rec: SpikeRecord, indices, active_ms: float = 10.0,
             gamma: float | None = None) -> SpinTrajectory:
    """Spin +1 for ``active_ms`` after every spike of the chosen neurons, -1 otherwise."""
    active = active_ms * 1e-3
    t_end = rec.t_end
    s0 = -np.ones(len(indices), dtype=np.int8)
    ev_t, ev_i = [], []
    for col, k in enumerate(indices):
        starts, ends = active_windows(rec.times[k], active)
        for a, b in zip(starts, ends):
            if a <= 0.0:
                s0[col] = 1
            else:
                ev_t.append(a)
                ev_i.append(col)
            if b < t_end:
                ev_t.append(b)
                ev_i.append(col)
    return SpinTrajectory.from_events(len(indices), t_end, s0, ev_t, ev_i, gamma,
                                      jitter_ties=True)


def select_and_binarize(rec: SpikeRecord, n_e_keep: int = 30, n_i_keep: int = 10,
                        active_ms: float = 10.0, gamma: float | None = None) -> SpinTrajectory:
    """Keep the most active neurons of each population and binarize their spikes."""
    if rec.n_neurons == 0 or sum(t.size for t in rec.times) == 0:
        raise ValidationError("spike record is empty")
    return binarize(rec, top_rate_indices(rec, n_e_keep, n_i_keep), active_ms, gamma)
