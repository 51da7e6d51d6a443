"""Energy-drift evaluation: roll out a learned field and compare energies with the truth."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .odeint import IntegratorConfig, integrate
from .physics import energy, get_system, sample_initial_states, true_trajectory

__all__ = ["EvalReport", "energy_deviation_rmse", "rollout", "percentile", "aggregate",
           "test_initial_states", "write_report", "read_report", "write_energy_csv"]


def _as_field(model):
    return model if callable(model) else model.__call__


def rollout(model, s0, t_end=100.0, dt=0.1):
    """RK4 rollout of ``model`` from ``s0`` (batched); rows that overflow become ``inf``."""
    if not (t_end > 0 and dt > 0):
        raise ValueError("t_end and dt must be positive")
    s0 = np.asarray(s0, dtype=np.float64)
    if not np.isfinite(s0).all():
        raise ValueError("initial state must be finite")
    n_steps = int(round(t_end / dt))
    t = np.linspace(0.0, n_steps * dt, n_steps + 1)
    return t, integrate(_as_field(model), s0, t, IntegratorConfig("rk4", dt=dt), nonfinite="mask")


def _true_energies(system, s0, t):
    """Reference energy on the grid: E(s0) if conserved, else E along the true path."""
    if system.conservative:
        return np.broadcast_to(energy(system, s0)[..., None], s0.shape[:-1] + t.shape)
    rows = np.atleast_2d(s0)
    out = np.stack([energy(system, true_trajectory(system, r, t)) for r in rows])
    return out.reshape(s0.shape[:-1] + t.shape)


def _rmse_rows(model, system, s0, t_end, dt):
    t, states = rollout(model, s0, t_end, dt)
    with np.errstate(over="ignore", invalid="ignore"):
        e_model = np.moveaxis(energy(system, states), 0, -1)
        e_true = _true_energies(system, s0, t)
        rmse = np.sqrt(np.mean((e_model - e_true) ** 2, axis=-1))
    return np.where(np.isfinite(rmse), rmse, np.inf), t, e_model, e_true


def energy_deviation_rmse(model, system, s0, t_end=100.0, dt=0.1):
    """RMSE over the rollout grid of E(model state) - E(true state); ``inf`` on overflow."""
    system = get_system(system)
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.shape != (system.state_dim,):
        raise ValueError(f"expected a single state of dimension {system.state_dim}")
    return float(_rmse_rows(model, system, s0[None], t_end, dt)[0][0])


def percentile(values, q):
    """Percentile ``q`` (0-100) by linear interpolation between order statistics.

    ``inf`` entries sort last; an exact hit on an order statistic returns it
    without interpolating, so a finite rank next to ``inf`` stays finite.
    """
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("percentile of an empty array")
    if np.isnan(a).any():
        raise ValueError("percentile input contains NaN")
    if not 0 <= q <= 100:
        raise ValueError("q must lie in [0, 100]")
    pos = q / 100.0 * (a.size - 1)
    lo = int(math.floor(pos))
    frac = pos - lo
    if frac == 0.0:
        return float(a[lo])
    x0, x1 = a[lo], a[lo + 1]
    if x1 == x0:
        return float(x0)
    return float(x0 + frac * (x1 - x0))


@dataclass
class EvalReport:
    task: str
    model: str
    n_test: int
    rmse: np.ndarray = field(repr=False)
    median: float
    p2_5: float
    p97_5: float
    overflow_count: int

    @classmethod
    def from_rmse(cls, task, model, rmse):
        rmse = np.asarray(rmse, dtype=np.float64)
        return cls(task, model, rmse.size, rmse, percentile(rmse, 50), percentile(rmse, 2.5),
                   percentile(rmse, 97.5), int(np.isinf(rmse).sum()))

    def to_dict(self):
        return {"task": self.task, "model": self.model, "n_test": self.n_test,
                "rmse": [float(x) for x in self.rmse], "median": self.median,
                "p2_5": self.p2_5, "p97_5": self.p97_5, "overflow_count": self.overflow_count}


def test_initial_states(system, n_test, seed=0, sampler="normal"):
    """Fresh initial states; stream ``(seed, i, 1)`` never coincides with training draws."""
    system = get_system(system)
    return np.stack([sample_initial_states(
        system, 1, np.random.default_rng(np.random.SeedSequence([int(seed), i, 1])), sampler)[0]
        for i in range(n_test)])


def _chunk_rmse(args):
    model, name, s0, t_end, dt = args
    return _rmse_rows(model, get_system(name), s0, t_end, dt)[0]


def aggregate(model, system, n_test=100, seed=0, t_end=100.0, dt=0.1, sampler="normal",
              jobs=1, label=None, s0=None, return_series=False):
    """Evaluate ``model`` on ``n_test`` fresh initial states and summarize the RMSEs."""
    system = get_system(system)
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    s0 = test_initial_states(system, n_test, seed, sampler) if s0 is None else np.asarray(s0, float)
    label = label or getattr(model, "kind", None) or "model"
    if return_series:
        rmse, t, e_model, e_true = _rmse_rows(model, system, s0, t_end, dt)
        return EvalReport.from_rmse(system.name, label, rmse), (t, e_model, e_true)
    if jobs > 1 and len(s0) > 1:
        chunks = np.array_split(s0, min(jobs, len(s0)))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_chunk_rmse, [(model, system.name, c, t_end, dt) for c in chunks])
            rmse = np.concatenate(list(parts))
    else:
        rmse = _rmse_rows(model, system, s0, t_end, dt)[0]
    return EvalReport.from_rmse(system.name, label, rmse)


def write_report(report: EvalReport, path):
    # inf is written as the JSON extension token Infinity, which json.load reads back
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")


def read_report(path) -> EvalReport:
    with open(path) as fh:
        data = json.load(fh)
    missing = {"task", "model", "rmse"} - set(data)
    if missing:
        raise ValueError(f"{path}: report is missing {sorted(missing)}")
    return EvalReport.from_rmse(data["task"], data["model"], data["rmse"])


def write_energy_csv(path, t, e_model, e_true):
    """Long-format energy series: one row per (trajectory, time)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory", "t", "energy_model", "energy_true"])
        for i in range(e_model.shape[0]):
            for k in range(t.size):
                w.writerow([i, repr(float(t[k])), repr(float(e_model[i, k])), repr(float(e_true[i, k]))])
