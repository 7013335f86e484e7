"""JSON and CSV interchange formats used by the command line.

Floats are written with ``repr`` precision, so reading back a written file
reproduces the in-memory values exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .lif import SpikeRecord
from .model import IsingModel, SpinTrajectory
from .vb import RowPosteriorSet


def _dump(obj, path):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def _load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None


def _require(doc, keys, path):
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ValidationError(f"{path}: missing keys {missing}")


def trajectory_to_dict(traj: SpinTrajectory) -> dict:
    return {
        "n_spins": traj.n_spins,
        "t_end": traj.t_end,
        "gamma": traj.gamma,
        "initial_state": [int(s) for s in traj.initial_state],
        "flips": [{"t": t, "i": i} for t, i in zip(traj.flip_times.tolist(),
                                                   traj.flip_spins.tolist())],
    }


def trajectory_from_dict(doc, jitter_ties: bool = False, where="trajectory") -> SpinTrajectory:
    _require(doc, ("n_spins", "t_end", "initial_state", "flips"), where)
    try:
        times = [float(f["t"]) for f in doc["flips"]]
        spins = [int(f["i"]) for f in doc["flips"]]
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{where}: flips must be objects with 't' and 'i'") from None
    gamma = doc.get("gamma")
    if jitter_ties:
        return SpinTrajectory.from_events(doc["n_spins"], doc["t_end"], doc["initial_state"],
                                          times, spins, gamma, jitter_ties=True)
    return SpinTrajectory(doc["n_spins"], doc["t_end"], np.asarray(doc["initial_state"]),
                          np.asarray(times, dtype=np.float64),
                          np.asarray(spins, dtype=np.int64), gamma)


def save_trajectory(traj: SpinTrajectory, path):
    _dump(trajectory_to_dict(traj), path)


def load_trajectory(path, jitter_ties: bool = False) -> SpinTrajectory:
    return trajectory_from_dict(_load(path), jitter_ties, str(path))


def model_to_dict(model: IsingModel) -> dict:
    return {"theta": model.theta.tolist(), "J": model.J.tolist(), "gamma": model.gamma}


def save_model(model: IsingModel, path):
    _dump(model_to_dict(model), path)


def load_model(path) -> IsingModel:
    doc = _load(path)
    _require(doc, ("theta", "J", "gamma"), str(path))
    try:
        return IsingModel(np.asarray(doc["J"], dtype=np.float64),
                          np.asarray(doc["theta"], dtype=np.float64), float(doc["gamma"]))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_posterior(post: RowPosteriorSet, path):
    rows = [{"mu": post.mu[i].tolist(), "sigma": post.sigma[i].tolist()}
            for i in range(post.n_spins)]
    _dump({"rows": rows}, path)


def load_posterior(path) -> RowPosteriorSet:
    doc = _load(path)
    _require(doc, ("rows",), str(path))
    try:
        mu = np.array([r["mu"] for r in doc["rows"]], dtype=np.float64)
        sigma = np.array([r["sigma"] for r in doc["rows"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: rows need 'mu' and 'sigma'") from None
    return RowPosteriorSet(mu, sigma)


def save_spikes(rec: SpikeRecord, path):
    doc = {
        "t_end": rec.t_end,
        "neurons": [{"pop": p, "times": t.tolist()} for p, t in zip(rec.pops, rec.times)],
    }
    if rec.ids is not None:
        for entry, k in zip(doc["neurons"], rec.ids.tolist()):
            entry["id"] = int(k)
    if rec.synapses is not None:
        post, pre = np.nonzero(rec.synapses)
        doc["synapses"] = [[int(a), int(b)] for a, b in zip(post, pre)]
    _dump(doc, path)


def load_spikes(path) -> SpikeRecord:
    doc = _load(path)
    _require(doc, ("neurons",), str(path))
    neurons = doc["neurons"]
    try:
        times = [np.asarray(n["times"], dtype=np.float64) for n in neurons]
        pops = [str(n["pop"]) for n in neurons]
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: neurons need 'pop' and numeric 'times'") from None
    if any(p not in ("E", "I", "X") for p in pops):
        raise ValidationError(f"{path}: pop must be E, I or X")
    t_end = doc.get("t_end")
    if t_end is None:
        t_end = max((float(t[-1]) for t in times if t.size), default=0.0)
    syn = None
    if "synapses" in doc:
        syn = np.zeros((len(neurons), len(neurons)), dtype=bool)
        for a, b in doc["synapses"]:
            syn[a, b] = True
    ids = None
    if neurons and all("id" in n for n in neurons):
        ids = np.array([n["id"] for n in neurons], dtype=np.int64)
    return SpikeRecord(times, pops, float(t_end), syn, ids)


def write_csv(path, header, rows):
    """Plain CSV: header row, comma delimiter, floats via ``repr``."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
