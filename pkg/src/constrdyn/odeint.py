"""Fixed-step RK4 for model rollouts and adaptive Dormand-Prince RK45 for ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["IntegratorConfig", "NonFiniteStateError", "integrate", "rk4_step"]


class NonFiniteStateError(FloatingPointError):
    """Raised when the state stops being finite; carries the partial solution."""

    def __init__(self, time, partial):
        super().__init__(f"non-finite state at t={time:.6g}")
        self.time = time
        self.partial = partial


@dataclass
class IntegratorConfig:
    method: str = "rk45"
    dt: float = 0.1
    rtol: float = 1e-9
    atol: float = 1e-9
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.dt <= 0 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("dt and tolerances must be positive")


def rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f, s0, t_grid, cfg: IntegratorConfig | None = None, nonfinite: str = "raise"):
    """Solve ds/dt = f(s) and return states at each time in ``t_grid``.

    ``s0`` may carry leading batch axes; ``f`` must act row-wise on the last
    axis.  With ``nonfinite="mask"`` (rk4 only) rows that blow up are frozen
    at ``inf`` from the first non-finite grid point on, and the rest keep
    integrating; with ``"raise"`` a :class:`NonFiniteStateError` is raised.
    """
    cfg = cfg or IntegratorConfig()
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("t_grid must be a non-empty 1-D array")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    s0 = np.asarray(s0, dtype=np.float64)
    if nonfinite not in ("raise", "mask"):
        raise ValueError(f"unknown nonfinite mode {nonfinite!r}")
    if cfg.method == "rk4":
        return _integrate_rk4(f, s0, t_grid, cfg, nonfinite)
    if nonfinite == "mask":
        raise ValueError("masking is only supported for rk4")
    return _integrate_rk45(f, s0, t_grid, cfg)


def _integrate_rk4(f, s0, t_grid, cfg, nonfinite):
    dt = cfg.dt
    out = np.empty((t_grid.size,) + s0.shape)
    out[0] = s0
    y = s0.copy()
    t0 = t_grid[0]
    dead = np.zeros(s0.shape[:-1], dtype=bool)
    n = 0
    k = 1
    snap = 1e-9 * dt
    with np.errstate(over="ignore", invalid="ignore"):
        while k < t_grid.size:
            if n >= cfg.max_steps:
                raise RuntimeError(f"max_steps={cfg.max_steps} exceeded at t={t0 + n * dt:.6g}")
            y_new = rk4_step(f, y, dt)
            t, t_new = t0 + n * dt, t0 + (n + 1) * dt
            n += 1
            bad = ~np.isfinite(y_new).all(axis=-1)
            if np.any(bad & ~dead):
                if nonfinite == "raise":
                    raise NonFiniteStateError(t_new, out[:k].copy())
                dead |= bad
            if dead.any():
                y_new[dead] = 0.0
            while k < t_grid.size and t_grid[k] <= t_new + snap:
                if abs(t_grid[k] - t_new) <= snap:
                    out[k] = y_new
                else:
                    w = (t_grid[k] - t) / dt
                    out[k] = (1.0 - w) * y + w * y_new
                if dead.any():
                    out[k][dead] = np.inf
                k += 1
            y = y_new
    return out


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B_LOW
# coefficients of the 4th-order continuous extension (Hairer, Norsett & Wanner)
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(f, y0, f0, rtol, atol):
    scale = atol + np.abs(y0) * rtol
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _integrate_rk45(f, s0, t_grid, cfg):
    rtol, atol = cfg.rtol, cfg.atol
    out = np.empty((t_grid.size,) + s0.shape)
    out[0] = s0
    t, t_end = t_grid[0], t_grid[-1]
    y = s0.copy()
    fy = f(y)
    h = _initial_step(f, y, fy, rtol, atol) if t_end > t else 0.0
    k = 1
    steps = 0
    K = np.empty((7,) + s0.shape)
    while k < t_grid.size:
        steps += 1
        if steps > cfg.max_steps:
            raise RuntimeError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
        h = min(h, t_end - t)
        K[0] = fy
        for i in range(1, 7):
            dy = sum(a * K[j] for j, a in enumerate(_A[i]) if a != 0.0)
            K[i] = f(y + h * dy)
        y_new = y + h * np.tensordot(_B, K, axes=1)
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteStateError(t + h, out[:k].copy())
        err = h * np.tensordot(_E, K, axes=1)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = _rms(err / scale)
        if err_norm <= 1.0:
            t_new = t + h
            if t_end - t_new <= 1e-12 * max(1.0, abs(t_end)):
                t_new = t_end
            Q = np.tensordot(K, _P, axes=([0], [0]))  # shape s0.shape + (4,)
            while k < t_grid.size and t_grid[k] <= t_new:
                x = (t_grid[k] - t) / h
                powers = x ** np.arange(1, 5)
                out[k] = y + h * (Q @ powers)
                k += 1
            y, t = y_new, t_new
            fy = K[6]
            factor = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm ** -0.2)
        else:
            factor = max(0.2, 0.9 * err_norm ** -0.2)
        h *= factor
        if h < 1e-14 * max(1.0, abs(t)):
            raise RuntimeError(f"step size underflow at t={t:.6g}")
    return out
