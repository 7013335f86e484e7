"""``kinising`` command line interface.

Every run writes a JSON manifest next to its primary output.  The manifest
stores the argument vector, so ``kinising replay --manifest m.json`` repeats
the run and rewrites byte-identical outputs.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.  Errors are
reported as one line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import NumericalError, ValidationError

log = logging.getLogger("kinising")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def parse_grid(spec: str) -> np.ndarray:
    """``lo:hi:Nlog`` (log spaced), ``lo:hi:Nlin`` or a comma list."""
    from .repro import log_grid

    m = re.fullmatch(r"\s*([^:]+):([^:]+):(\d+)(log|lin)?\s*", spec)
    try:
        if m:
            lo, hi, n = float(m.group(1)), float(m.group(2)), int(m.group(3))
            if m.group(4) == "lin":
                if n < 1 or lo > hi:
                    raise ValidationError("linear grid needs lo <= hi and n >= 1")
                return np.linspace(lo, hi, n)
            return log_grid(lo, hi, n)
        values = np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise ValidationError(f"cannot parse grid {spec!r}") from None
    if values.size == 0 or np.any(values <= 0):
        raise ValidationError("grid values must be positive")
    return values


def _em_cfg(args, lam=0.0):
    from .em import EmConfig

    return EmConfig(max_iters=args.max_iters, tol=args.tol, lam=lam)


def cmd_generate(args):
    from .io import save_model, save_trajectory
    from .sampler import GenConfig, simulate

    cfg = GenConfig(args.n, args.t_end, args.g, args.p_sparse, args.theta_mode,
                    args.theta_mean, args.theta_sd, args.seed)
    model, traj = simulate(cfg, args.gamma)
    save_model(model, args.out_model)
    save_trajectory(traj, args.out_traj)
    return [args.out_model, args.out_traj]


def cmd_lif_sim(args):
    from .io import save_spikes, save_trajectory
    from .lif import LifConfig, lif_simulate, select_and_binarize

    cfg = LifConfig.at_scale(args.scale, t_end=args.t_end, seed=args.seed,
                             dt_sim=args.dt_sim, conductance_scale=args.conductance_scale)
    rec = lif_simulate(cfg)
    save_spikes(rec, args.out_spikes)
    outs = [args.out_spikes]
    if args.out_traj:
        traj = select_and_binarize(rec, args.keep_e, args.keep_i, args.active_ms, args.gamma)
        save_trajectory(traj, args.out_traj)
        outs.append(args.out_traj)
    return outs


def cmd_fit_em(args):
    from .em import em_fit
    from .io import load_trajectory, save_model, write_csv

    traj = load_trajectory(args.traj, jitter_ties=True)
    rep = em_fit(traj, args.gamma, _em_cfg(args, args.lam))
    save_model(rep.model, args.out)
    outs = [args.out]
    if args.trace:
        write_csv(args.trace, ("iter", "loglik", "penalized_obj"),
                  [(m, a, b) for m, (a, b) in enumerate(zip(rep.loglik, rep.objective))])
        outs.append(args.trace)
    log.info("EM: %d iterations, converged=%s", rep.iterations, rep.converged)
    return outs


def cmd_fit_vb(args):
    from .io import load_trajectory, save_posterior, write_csv
    from .vb import PriorConfig, vb_fit

    traj = load_trajectory(args.traj, jitter_ties=True)
    prior = PriorConfig(args.lam, args.mu_theta, args.lambda_theta)
    rep = vb_fit(traj, args.gamma, prior, _em_cfg(args))
    save_posterior(rep.posterior, args.out_posterior)
    outs = [args.out_posterior]
    if args.trace:
        write_csv(args.trace, ("iter", "free_energy"), list(enumerate(rep.free_energy)))
        outs.append(args.trace)
    return outs


def cmd_sweep_lambda(args):
    from .io import load_trajectory, write_csv
    from .vb import sweep_lambda

    traj = load_trajectory(args.traj, jitter_ties=True)
    grid = parse_grid(args.grid)
    sweep = sweep_lambda(traj, args.gamma, grid, args.mu_theta, args.lambda_theta,
                         _em_cfg(args), warm_start=args.warm_start)
    write_csv(args.out, ("lambda", "free_energy", "iters"),
              [(lam, r.final_free_energy, r.iterations) for lam, r in sweep])
    return [args.out]


def cmd_eval_stats(args):
    from .io import load_trajectory, write_csv
    from .stats import trajectory_stats

    traj = load_trajectory(args.traj, jitter_ties=True)
    rep = trajectory_stats(traj, args.order, args.subset_budget, args.seed)
    rows = [("m", i, -1, -1, -1, v) for i, v in enumerate(rep.m)]
    n = traj.n_spins
    rows += [("C2", i, j, -1, -1, rep.C2[i, j]) for i in range(n) for j in range(i, n)]
    for name, block in (("C3", rep.C3), ("C4", rep.C4)):
        if block is None:
            continue
        for t, v in zip(block[0].tolist(), block[1]):
            idx = t + [-1] * (4 - len(t))
            rows.append((name, *idx, v))
    write_csv(args.out, ("kind", "i", "j", "k", "l", "value"), rows)
    return [args.out]


def cmd_eval_mse(args):
    from .io import load_model, write_csv
    from .stats import mse

    a, b = load_model(args.true), load_model(args.est)
    if args.include_theta:
        val = mse(a.J, b.J, a.theta, b.theta)
    else:
        val = mse(a.J, b.J)
    write_csv(args.out, ("metric", "value"), [("mse", val)])
    return [args.out]


def cmd_eval_roc(args):
    from .io import load_model, load_posterior, write_csv
    from .stats import offdiag_mask, roc_auc

    truth = load_model(args.true).J != 0
    if (args.est is None) == (args.posterior is None):
        raise ValidationError("give exactly one of --est or --posterior")
    if args.est is not None:
        scores = np.abs(load_model(args.est).J)
    else:
        scores = load_posterior(args.posterior).zscores()
    mask = offdiag_mask(truth.shape[0]) if args.offdiag else None
    curve = roc_auc(truth, scores, mask)
    write_csv(args.out, ("threshold", "fpr", "tpr"),
              zip(curve.thresholds, curve.fpr, curve.tpr))
    print(f"auc,{curve.auc!r}")
    return [args.out]


def cmd_repro(args):
    from .em import EmConfig
    from .repro import fig1, fig2, fig3

    if args.figure == "fig1":
        fig1(args.out_dir, args.scale, args.seed, args.gamma,
             EmConfig(max_iters=args.max_iters, tol=args.tol))
    elif args.figure == "fig2":
        fig2(args.out_dir, args.scale, args.seed, args.gamma)
    else:
        fig3(args.out_dir, args.scale, args.seed, args.gamma)
    out = Path(args.out_dir)
    return sorted(str(f) for f in out.iterdir() if f.is_file() and f.name != "manifest.json")


def _common_fit(p, tol=True):
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--max-iters", type=int, default=100)
    if tol:
        p.add_argument("--tol", type=float, default=1e-8)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="kinising", description="Continuous-time kinetic Ising models.")
    ap.add_argument("--version", action="version", version=f"kinising {__version__}")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap on native worker threads (default: $KINISING_THREADS)")
    ap.add_argument("--manifest", default=None, help="where to write the run manifest")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="random model and simulated trajectory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t-end", type=float, default=1000.0)
    p.add_argument("--g", type=float, default=0.3)
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--p-sparse", type=float, default=0.0)
    p.add_argument("--theta-mode", choices=("zero", "gaussian"), default="zero")
    p.add_argument("--theta-mean", type=float, default=0.0)
    p.add_argument("--theta-sd", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-traj", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("lif-sim", help="integrate-and-fire network spikes")
    p.add_argument("--t-end", type=float, default=10.0, help="seconds")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt-sim", type=float, default=0.05, help="ms")
    p.add_argument("--conductance-scale", type=float, default=1.0)
    p.add_argument("--out-spikes", required=True)
    p.add_argument("--out-traj", default=None)
    p.add_argument("--keep-e", type=int, default=30)
    p.add_argument("--keep-i", type=int, default=10)
    p.add_argument("--active-ms", type=float, default=10.0)
    p.add_argument("--gamma", type=float, default=100.0)
    p.set_defaults(func=cmd_lif_sim)

    p = sub.add_parser("fit-em", help="maximum likelihood or L1 EM fit")
    p.add_argument("--traj", required=True)
    _common_fit(p)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_fit_em)

    p = sub.add_parser("fit-vb", help="variational Bayes fit")
    p.add_argument("--traj", required=True)
    _common_fit(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--mu-theta", type=float, default=0.0)
    p.add_argument("--lambda-theta", type=float, default=1.0)
    p.add_argument("--out-posterior", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_fit_vb)

    p = sub.add_parser("sweep-lambda", help="free energy over a lambda grid")
    p.add_argument("--traj", required=True)
    _common_fit(p)
    p.add_argument("--grid", default="1:1000:12log")
    p.add_argument("--mu-theta", type=float, default=0.0)
    p.add_argument("--lambda-theta", type=float, default=1.0)
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("eval", help="evaluation metrics")
    ev = p.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    q = ev.add_parser("stats")
    q.add_argument("--traj", required=True)
    q.add_argument("--order", type=int, choices=(2, 3, 4), default=2)
    q.add_argument("--subset-budget", type=int, default=2000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_eval_stats)
    q = ev.add_parser("mse")
    q.add_argument("--true", required=True)
    q.add_argument("--est", required=True)
    q.add_argument("--include-theta", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_eval_mse)
    q = ev.add_parser("roc")
    q.add_argument("--true", required=True, help="model whose nonzero couplings are positives")
    q.add_argument("--est", default=None, help="EM model; scores are |J|")
    q.add_argument("--posterior", default=None, help="VB posterior; scores are z-scores")
    q.add_argument("--offdiag", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_eval_roc)

    p = sub.add_parser("repro", help="scripted experiment reproductions")
    p.add_argument("figure", choices=("fig1", "fig2", "fig3"))
    p.add_argument("--scale", choices=("smoke", "desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("--manifest", dest="replay_manifest", required=True)
    p.set_defaults(func=None)
    return ap


_DEFAULT_SEEDS = {"fig1": 1, "fig2": 2, "fig3": 7}


def _manifest_path(args, outputs):
    if args.manifest:
        return Path(args.manifest)
    if args.command == "repro":
        return Path(args.out_dir) / "manifest.json"
    return Path(str(outputs[0]) + ".manifest.json")


def _inputs(args):
    keys = ("traj", "true", "est", "posterior")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None)}


def _write_manifest(path, argv, args, outputs, wall):
    seeds = {k: v for k, v in vars(args).items() if k == "seed"}
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "subcommand": args.command if args.command != "eval" else f"eval {args.metric}",
        "argv": list(argv),
        "flags": flags,
        "seeds": seeds,
        "inputs": _inputs(args),
        "outputs": [str(o) for o in outputs],
        "wall_seconds": wall,
        "version": __version__,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_replay(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    argv = doc.get("argv") if isinstance(doc, dict) else None
    if not isinstance(argv, list) or not all(isinstance(a, str) for a in argv):
        raise ValidationError(f"{path}: manifest has no argv list")
    return argv


def run(argv=None) -> int:
    """Execute one command line; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            inner = _load_replay(args.replay_manifest)
            if "replay" in inner:
                raise ValidationError("a manifest cannot replay another replay")
            return run(inner)
        if args.command == "repro" and args.seed is None:
            args.seed = _DEFAULT_SEEDS[args.figure]
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        threads = args.threads
        if threads is None and os.environ.get("KINISING_THREADS"):
            try:
                threads = int(os.environ["KINISING_THREADS"])
            except ValueError:
                raise ValidationError("KINISING_THREADS must be an integer") from None
        if threads is not None and threads < 1:
            raise ValidationError("thread count must be >= 1")
        t0 = time.perf_counter()
        with threadpool_limits(limits=threads):
            outputs = args.func(args)
        _write_manifest(_manifest_path(args, outputs), argv, args, outputs,
                        time.perf_counter() - t0)
        return 0
    except ValidationError as exc:
        _report("validation-error", exc)
        return 1
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _report("numerical-error", exc)
        return 2
    except OSError as exc:
        _report("validation-error", exc)
        return 1


def _report(kind, exc):
    msg = " ".join(str(exc).split())
    print(f"kinising: {kind}: {msg}", file=sys.stderr)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
