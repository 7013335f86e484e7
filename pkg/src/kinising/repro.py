"""Scripted reproductions of the three experiments, at several scales.

Each ``figN`` function runs the whole pipeline, writes plot-ready CSV files
into ``out_dir`` together with ``summary.json`` and returns the summary.
``smoke`` is a seconds-long plumbing run, ``desk`` fits a CI budget and
``paper`` uses the published sizes.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .em import EmConfig, em_fit
from .errors import ValidationError
from .io import save_model, save_posterior, save_spikes, save_trajectory, write_csv
from .lif import LifConfig, binarize, lif_simulate, top_rate_indices
from .model import log_likelihood
from .sampler import GenConfig, generate_model, gillespie_sample, random_initial_state, simulate
from .stats import mse, offdiag_mask, pearson, roc_auc, trajectory_stats
from .vb import sweep_lambda

log = logging.getLogger(__name__)

SCALES = ("smoke", "desk", "paper")

FIG1 = {
    "smoke": dict(n=8, t_end=50.0, ladder_n=4, ladder=(25.0, 50.0, 100.0, 200.0), reps=3,
                  g_sweep=(0.1, 0.4), g_t_end=50.0),
    "desk": dict(n=40, t_end=1000.0, ladder_n=10, ladder=(250.0, 500.0, 1000.0, 2000.0), reps=3,
                 g_sweep=(0.1, 0.2, 0.4, 0.8), g_t_end=500.0),
    "paper": dict(n=40, t_end=1000.0, ladder_n=40, ladder=(250.0, 500.0, 1000.0, 2000.0, 4000.0),
                  reps=5, g_sweep=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6), g_t_end=1000.0),
}

FIG2 = {
    "smoke": dict(n=6, t_end=20.0, grid=(1.0, 1000.0, 6)),
    "desk": dict(n=25, t_end=50.0, grid=(1.0, 1000.0, 16)),
    "paper": dict(n=25, t_end=50.0, grid=(1.0, 1000.0, 31)),
}

FIG3 = {
    "smoke": dict(scale="desk", t_end=2.0, keep_e=6, keep_i=2, grid=(3.0, 300.0, 3)),
    "desk": dict(scale="desk", t_end=60.0, keep_e=30, keep_i=10, grid=(3.0, 300.0, 5)),
    "paper": dict(scale="paper", t_end=1000.0, keep_e=30, keep_i=10, grid=(1.0, 1000.0, 12)),
}

# sweeps stop earlier than single fits; the lambda ranking is settled long before 1e-8
SWEEP_TOL = 1e-6


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """``n`` log-spaced values from ``lo`` to ``hi`` inclusive."""
    if not (0 < lo <= hi) or n < 1:
        raise ValidationError("log grid needs 0 < lo <= hi and n >= 1")
    if n == 1:
        return np.array([float(lo)])
    return np.exp(np.linspace(np.log(lo), np.log(hi), n))


def _scale(table, scale):
    if scale not in table:
        raise ValidationError(f"scale must be one of {list(table)}")
    return table[scale]


def _finish(out_dir: Path, summary: dict) -> dict:
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def _trace_rows(report):
    return [(m, ll, obj) for m, (ll, obj) in enumerate(zip(report.loglik, report.objective))]


def _roc_rows(curve):
    return zip(curve.thresholds, curve.fpr, curve.tpr)


def recovery_run(n: int, t_end: float, seed: int, g: float = 0.3, gamma: float = 100.0,
                 cfg: EmConfig = EmConfig()):
    """Simulate a dense model and fit it by EM; returns (model, traj, report)."""
    model, traj = simulate(GenConfig(n, t_end, g, seed=seed), gamma)
    return model, traj, em_fit(traj, gamma, cfg)


def mse_ladder(n: int, t_values, reps: int, seed: int, g: float = 0.3, gamma: float = 100.0,
               cfg: EmConfig = EmConfig()) -> np.ndarray:
    """Coupling MSE per (T, replicate); each replicate keeps its model across T."""
    out = np.zeros((len(t_values), reps))
    for r in range(reps):
        model = generate_model(GenConfig(n, g=g, seed=seed * 1000 + r), gamma)
        s0 = random_initial_state(n, seed * 1000 + r)
        for k, t_end in enumerate(t_values):
            traj = gillespie_sample(model, s0, t_end, seed * 1000 + 100 * (k + 1) + r)
            fit = em_fit(traj, gamma, cfg)
            out[k, r] = mse(model.J, fit.model.J)
            log.info("ladder T=%g rep %d mse %.3e (%d iters)", t_end, r, out[k, r],
                     fit.iterations)
    return out


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def fig1(out_dir, scale: str = "desk", seed: int = 1, gamma: float = 100.0,
         cfg: EmConfig = EmConfig()) -> dict:
    """Dense-coupling recovery by EM: scatter, trace, MSE against T and g."""
    p = _scale(FIG1, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, traj, rep = recovery_run(p["n"], p["t_end"], seed, 0.3, gamma, cfg)
    est = rep.model
    n = p["n"]
    write_csv(out / "trace.csv", ("iter", "loglik", "penalized_obj"), _trace_rows(rep))
    write_csv(out / "scatter.csv", ("kind", "i", "j", "true", "est"),
              [("J", i, j, model.J[i, j], est.J[i, j]) for i in range(n) for j in range(n)]
              + [("theta", i, -1, model.theta[i], est.theta[i]) for i in range(n)])
    save_model(est, out / "model_est.json")

    ladder = np.array(p["ladder"])
    errs = mse_ladder(p["ladder_n"], ladder, p["reps"], seed, 0.3, gamma, cfg)
    med = np.median(errs, axis=1)
    write_csv(out / "mse_vs_T.csv", ("T", "mse") + tuple(f"mse_rep{r}" for r in range(p["reps"])),
              [(t, m, *row) for t, m, row in zip(ladder, med, errs)])

    g_rows = []
    for k, g in enumerate(p["g_sweep"]):
        mdl, _, fit = recovery_run(p["ladder_n"], p["g_t_end"], seed * 1000 + 500 + k, g,
                                   gamma, cfg)
        g_rows.append((g, mse(mdl.J, fit.model.J)))
    write_csv(out / "mse_vs_g.csv", ("g", "mse"), g_rows)

    summary = {
        "figure": "fig1", "scale": scale, "seed": seed,
        "n": n, "t_end": p["t_end"], "n_flips": traj.n_flips,
        "pearson_J": pearson(model.J, est.J), "mse_J": mse(model.J, est.J),
        "iterations": rep.iterations, "converged": rep.converged,
        "ladder_T": ladder.tolist(), "ladder_mse": med.tolist(),
        "ladder_slope": loglog_slope(ladder, med),
        "ladder_strictly_decreasing": bool(np.all(np.diff(med) < 0)),
    }
    return _finish(out, summary)


def em_lambda_sweep(train, test, gamma: float, lambdas, cfg: EmConfig = EmConfig()):
    """L1-EM fits along ``lambdas``; returns [(lam, report, test_loglik)]."""
    out = []
    for lam in lambdas:
        c = EmConfig(cfg.max_iters, cfg.tol, float(lam), None, cfg.jitter, cfg.chunk, cfg.j_floor)
        rep = em_fit(train, gamma, c)
        out.append((float(lam), rep, log_likelihood(test, rep.model)))
    return out


def fig2(out_dir, scale: str = "desk", seed: int = 2, gamma: float = 100.0,
         tol: float = SWEEP_TOL) -> dict:
    """Sparse couplings: lambda by held-out likelihood (L1-EM) and by free energy (VB)."""
    p = _scale(FIG2, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = GenConfig(p["n"], p["t_end"], 0.3, p_sparse=0.5, seed=seed)
    model, train = simulate(gen, gamma)
    test = gillespie_sample(model, random_initial_state(p["n"], seed + 7919), p["t_end"],
                            seed + 7919)
    lambdas = log_grid(*p["grid"])
    cfg = EmConfig(tol=tol)

    em_sweep = em_lambda_sweep(train, test, gamma, lambdas, cfg)
    write_csv(out / "em_sweep.csv", ("lambda", "test_loglik", "penalized_obj", "iters"),
              [(lam, tl, r.objective[-1], r.iterations) for lam, r, tl in em_sweep])
    lam_em, rep_em, _ = max(em_sweep, key=lambda item: item[2])

    vb_sweep = sweep_lambda(train, gamma, lambdas, cfg=cfg)
    write_csv(out / "vb_sweep.csv", ("lambda", "free_energy", "iters"),
              [(lam, r.final_free_energy, r.iterations) for lam, r in vb_sweep])
    lam_vb, rep_vb = min(vb_sweep, key=lambda item: item[1].final_free_energy)

    truth = model.J != 0
    roc_em = roc_auc(truth, np.abs(rep_em.model.J))
    roc_vb = roc_auc(truth, rep_vb.posterior.zscores())
    write_csv(out / "roc_em.csv", ("threshold", "fpr", "tpr"), _roc_rows(roc_em))
    write_csv(out / "roc_vb.csv", ("threshold", "fpr", "tpr"), _roc_rows(roc_vb))
    save_model(model, out / "model_true.json")
    save_posterior(rep_vb.posterior, out / "posterior.json")

    summary = {
        "figure": "fig2", "scale": scale, "seed": seed, "n": p["n"], "t_end": p["t_end"],
        "lambdas": lambdas.tolist(), "lambda_em": lam_em, "lambda_vb": lam_vb,
        "lambda_ratio": max(lam_em, lam_vb) / min(lam_em, lam_vb),
        "auc_em": roc_em.auc, "auc_vb": roc_vb.auc,
        "n_train_flips": train.n_flips, "n_test_flips": test.n_flips,
    }
    return _finish(out, summary)


def _pairs(n):
    return np.triu_indices(n, 1)


def fig3(out_dir, scale: str = "desk", seed: int = 7, gamma: float = 100.0,
         active_ms: float = 10.0, tol: float = SWEEP_TOL) -> dict:
    """Network data: VB on binarized spikes, resampling check and synapse ROC."""
    p = _scale(FIG3, scale)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lcfg = LifConfig.at_scale(p["scale"], t_end=p["t_end"], seed=seed)
    rec = lif_simulate(lcfg)
    keep = top_rate_indices(rec, p["keep_e"], p["keep_i"])
    traj = binarize(rec, keep, active_ms, gamma)
    save_spikes(rec, out / "spikes.json")
    save_trajectory(traj, out / "traj.json")

    lambdas = log_grid(*p["grid"])
    sweep = sweep_lambda(traj, gamma, lambdas, cfg=EmConfig(tol=tol), warm_start=True)
    write_csv(out / "vb_sweep.csv", ("lambda", "free_energy", "iters"),
              [(lam, r.final_free_energy, r.iterations) for lam, r in sweep])
    lam, rep = min(sweep, key=lambda item: item[1].final_free_energy)
    post = rep.posterior
    save_posterior(post, out / "posterior.json")

    fitted = post.mean_model(gamma)
    resampled = gillespie_sample(fitted, traj.initial_state, traj.t_end, seed + 104729)
    st_o = trajectory_stats(traj, 4, seed=seed)
    st_r = trajectory_stats(resampled, 4, seed=seed)
    n = traj.n_spins
    iu = _pairs(n)
    write_csv(out / "scatter_m.csv", ("i", "original", "resampled"),
              [(i, a, b) for i, (a, b) in enumerate(zip(st_o.m, st_r.m))])
    write_csv(out / "scatter_C2.csv", ("i", "j", "original", "resampled"),
              [(i, j, st_o.C2[i, j], st_r.C2[i, j]) for i, j in zip(*iu)])
    for name, a, b in (("C3", st_o.C3, st_r.C3), ("C4", st_o.C4, st_r.C4)):
        write_csv(out / f"scatter_{name}.csv",
                  tuple("ijkl"[:a[0].shape[1]]) + ("original", "resampled"),
                  [(*t, x, y) for t, x, y in zip(a[0].tolist(), a[1], b[1])])

    # synapses[post, pre] among the kept neurons; J[i, j] is the influence of j on i
    truth = rec.synapses[np.ix_(keep, keep)]
    mask = offdiag_mask(n)
    summary = {
        "figure": "fig3", "scale": scale, "seed": seed, "t_end": p["t_end"],
        "n_spins": n, "n_flips": traj.n_flips, "lambda": lam,
        "rate_e": rec.meta["rate_e"], "rate_i": rec.meta["rate_i"],
        "pearson_m": pearson(st_o.m, st_r.m),
        "pearson_C2": pearson(st_o.C2[iu], st_r.C2[iu]),
        "pearson_C3": pearson(st_o.C3[1], st_r.C3[1]),
        "pearson_C4": pearson(st_o.C4[1], st_r.C4[1]),
        "n_synapses": int(truth[mask].sum()),
    }
    if 0 < summary["n_synapses"] < mask.sum():
        roc = roc_auc(truth, post.zscores(), mask)
        write_csv(out / "roc_synapse.csv", ("threshold", "fpr", "tpr"), _roc_rows(roc))
        summary["auc_synapse"] = roc.auc
    else:
        summary["auc_synapse"] = None
    return _finish(out, summary)


FIGURES = {"fig1": fig1, "fig2": fig2, "fig3": fig3}
