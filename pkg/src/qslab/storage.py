"""Versioned on-disk formats: ensembles (JSON manifest + npz payload),
survival curves and iteration logs as CSV, reports as JSON, sparse matrices
as Matrix Market triplets, and run manifests with content hashes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np
from scipy.io import mmwrite

from .estimators import SurvivalCurve
from .measures import WeightedEnsemble
from .phi import PhiIterationLog

ENSEMBLE_FORMAT_VERSION = 1
CURVE_FORMAT_VERSION = 1
TRAJECTORY_FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=True)


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_of_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_of_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def save_ensemble(ensemble: WeightedEnsemble, path) -> None:
    """Write <path>.json (manifest) and <path>.npz (occupancies, weights)."""
    path = Path(path)
    payload = path.with_suffix(".npz")
    with open(payload, "wb") as fh:
        np.savez(fh, occupancies=ensemble.occupancies,
                 weights=ensemble.weights)
    write_json(path.with_suffix(".json"), {
        "format_version": ENSEMBLE_FORMAT_VERSION,
        "kind": "weighted_ensemble",
        "n_atoms": ensemble.n_atoms,
        "num_sites": ensemble.num_sites,
        "normalization": ensemble.normalization,
        "censor_fraction": ensemble.censor_fraction,
        "payload": payload.name,
    })


def load_ensemble(path) -> WeightedEnsemble:
    path = Path(path)
    manifest = read_json(path.with_suffix(".json"))
    if manifest.get("kind") != "weighted_ensemble":
        raise ValueError(f"{path}: not an ensemble manifest")
    if manifest["format_version"] > ENSEMBLE_FORMAT_VERSION:
        raise ValueError("ensemble written by a newer format version")
    data = np.load(path.parent / manifest["payload"])
    return WeightedEnsemble(data["occupancies"], data["weights"],
                            manifest.get("censor_fraction", 0.0))


# ---------------------------------------------------------------------------
# curves and logs
# ---------------------------------------------------------------------------

def survival_curve_csv(curve: SurvivalCurve, n_sigma: float = 3.0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "estimate", "ci_lo", "ci_hi", "n_alive"])
    lo, hi = curve.ci(n_sigma)
    for k in range(curve.t.size):
        alive = "" if curve.n_alive is None else int(curve.n_alive[k])
        w.writerow([repr(float(curve.t[k])), repr(float(curve.estimate[k])),
                    repr(float(lo[k])), repr(float(hi[k])), alive])
    return buf.getvalue()


def save_survival_curve(curve: SurvivalCurve, path) -> None:
    Path(path).write_text(survival_curve_csv(curve))


def iteration_log_csv(log: PhiIterationLog) -> str:
    """One row per (iteration, probe); stats repeat across a run's probes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "e_tau", "ci", "censor_frac", "ess",
                "probe_s", "probe_value"])
    for it, row in enumerate(log.rows):
        probes = row.probes or {float("nan"): float("nan")}
        for s, val in sorted(probes.items()):
            w.writerow([it + 1, repr(row.e_tau),
                        repr(3.0 * row.e_tau_stderr),
                        repr(row.censor_fraction), repr(row.ess),
                        repr(float(s)), repr(float(val))])
    return buf.getvalue()


def save_iteration_log(log: PhiIterationLog, path) -> None:
    Path(path).write_text(iteration_log_csv(log))


# ---------------------------------------------------------------------------
# trajectories and matrices
# ---------------------------------------------------------------------------

def save_trajectory(traj, path) -> None:
    """Debug dump: npz with the initial state and the event list."""
    with open(Path(path), "wb") as fh:
        np.savez(fh,
                 format_version=np.int64(TRAJECTORY_FORMAT_VERSION),
                 initial=traj.initial, times=traj.times,
                 sources=traj.sources, destinations=traj.destinations,
                 terminal_time=np.float64(traj.terminal_time),
                 terminal_status=np.bytes_(traj.terminal_status.encode()),
                 frozen=np.bool_(traj.frozen))


def load_trajectory(path):
    from .dynamics import Trajectory
    data = np.load(Path(path))
    return Trajectory(
        initial=data["initial"],
        times=data["times"],
        sources=data["sources"],
        destinations=data["destinations"],
        terminal_time=float(data["terminal_time"]),
        terminal_status=bytes(data["terminal_status"]).decode(),
        frozen=bool(data["frozen"]),
    )


def save_matrix(matrix, path) -> None:
    """Sparse triplet text export (Matrix Market) for external verification."""
    mmwrite(str(path), matrix)
