"""Ground-truth systems, energies and trajectory datasets for the four benchmark tasks."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .odeint import IntegratorConfig, integrate

__all__ = [
    "SYSTEMS",
    "SystemDef",
    "Trajectory",
    "Dataset",
    "DatasetProtocol",
    "rhs_mass_spring",
    "rhs_single_pendulum",
    "rhs_double_pendulum",
    "rhs_damped_pendulum_xy",
    "energy",
    "get_system",
    "sample_initial_states",
    "trajectory_seed",
    "generate_dataset",
    "true_trajectory",
    "write_ndjson",
    "read_ndjson",
]

PENDULUM_G = 3.0
GROUND_TRUTH = IntegratorConfig("rk45", rtol=1e-11, atol=1e-11)
DAMPING = 0.05


def rhs_mass_spring(s):
    s = np.asarray(s, dtype=np.float64)
    x, v = s[..., 0], s[..., 1]
    return np.stack([v, -x], axis=-1)


def rhs_single_pendulum(s):
    s = np.asarray(s, dtype=np.float64)
    th, om = s[..., 0], s[..., 1]
    return np.stack([om, -PENDULUM_G * np.sin(th)], axis=-1)


def rhs_double_pendulum(s):
    """Unit masses and rods, g = 1."""
    s = np.asarray(s, dtype=np.float64)
    t1, t2, w1, w2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    d = t1 - t2
    den = 3.0 - np.cos(2.0 * d)
    a1 = (-3.0 * np.sin(t1) - np.sin(t1 - 2.0 * t2)
          - 2.0 * np.sin(d) * (w2 ** 2 + w1 ** 2 * np.cos(d))) / den
    a2 = 2.0 * np.sin(d) * (2.0 * w1 ** 2 + 2.0 * np.cos(t1) + w2 ** 2 * np.cos(d)) / den
    return np.stack([w1, w2, a1, a2], axis=-1)


def _angle_state(s):
    x, y, vx, vy = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    r = np.hypot(x, y)
    if np.any(r == 0):
        raise ValueError("pendulum position at the pivot has no angle")
    sin_t, cos_t = x / r, -y / r
    omega = vx * cos_t + vy * sin_t
    return sin_t, cos_t, omega


def rhs_damped_pendulum_xy(s):
    """Damped pendulum (m = l = g = 1) observed as (x, y, xdot, ydot)."""
    s = np.asarray(s, dtype=np.float64)
    sin_t, cos_t, om = _angle_state(s)
    alpha = -sin_t - DAMPING * om
    ax = -sin_t * om ** 2 + cos_t * alpha
    ay = cos_t * om ** 2 + sin_t * alpha
    return np.stack([s[..., 2], s[..., 3], ax, ay], axis=-1)


def _rhs_damped_angle(u):
    th, om = u[..., 0], u[..., 1]
    return np.stack([om, -np.sin(th) - DAMPING * om], axis=-1)


def _angle_to_xy(u):
    th, om = u[..., 0], u[..., 1]
    return np.stack([np.sin(th), -np.cos(th), np.cos(th) * om, np.sin(th) * om], axis=-1)


def _energy_mass_spring(s):
    return 0.5 * s[..., 0] ** 2 + 0.5 * s[..., 1] ** 2


def _energy_single_pendulum(s):
    return 0.5 * s[..., 1] ** 2 + PENDULUM_G * (1.0 - np.cos(s[..., 0]))


def _energy_double_pendulum(s):
    t1, t2, w1, w2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    return (w1 ** 2 + 0.5 * w2 ** 2 + w1 * w2 * np.cos(t1 - t2)
            - 2.0 * np.cos(t1) - np.cos(t2) + 3.0)


def _energy_damped_xy(s):
    # kinetic + potential measured from the rest position y = -1
    return 0.5 * (s[..., 2] ** 2 + s[..., 3] ** 2) + (1.0 + s[..., 1])


@dataclass(frozen=True)
class SystemDef:
    name: str
    state_dim: int
    rhs: object
    energy_fn: object
    params: dict
    conservative: bool
    n_traj: int
    n_samples: int
    noise_sigma: float
    batch_size: int
    constraint: str
    weight: float


SYSTEMS = {
    "mass_spring": SystemDef("mass_spring", 2, rhs_mass_spring, _energy_mass_spring,
                             {"m": 1.0, "k": 1.0}, True, 250, 30, 0.1, 32, "hamiltonian", 1e5),
    "single_pendulum": SystemDef("single_pendulum", 2, rhs_single_pendulum, _energy_single_pendulum,
                                 {"g": PENDULUM_G, "l": 1.0}, True, 250, 30, 0.1, 32,
                                 "hamiltonian", 1e4),
    "double_pendulum": SystemDef("double_pendulum", 4, rhs_double_pendulum, _energy_double_pendulum,
                                 {"m1": 1.0, "m2": 1.0, "l1": 1.0, "l2": 1.0, "g": 1.0}, True,
                                 2000, 300, 0.0, 1280, "transformed_hamiltonian", 1e3),
    "damped_pendulum_xy": SystemDef("damped_pendulum_xy", 4, rhs_damped_pendulum_xy, _energy_damped_xy,
                                    {"m": 1.0, "g": 1.0, "l": 1.0, "alpha": DAMPING}, False,
                                    250, 30, 0.1, 32, "dissipative", 1e2),
}


def get_system(name) -> SystemDef:
    if isinstance(name, SystemDef):
        return name
    try:
        return SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def energy(system, s):
    return get_system(system).energy_fn(np.asarray(s, dtype=np.float64))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    seed: int

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.derivs)):
            raise ValueError("times, states and derivs must have equal length")


@dataclass
class DatasetProtocol:
    n_traj: int
    n_samples: int
    t_span: tuple = (0.0, 2.0 * np.pi)


@dataclass
class Dataset:
    trajectories: list
    task: str
    noise_sigma: float
    protocol: DatasetProtocol = field(default=None)

    def arrays(self):
        """Stack every sample: (states, derivs), each of shape (N, state_dim)."""
        states = np.concatenate([tr.states for tr in self.trajectories])
        derivs = np.concatenate([tr.derivs for tr in self.trajectories])
        return states, derivs


def trajectory_seed(seed, index) -> int:
    """Per-trajectory seed derived from the dataset seed and the trajectory index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def sample_initial_states(system, n, rng, sampler="normal"):
    """Draw ``n`` initial states from the task's training distribution."""
    system = get_system(system)
    if sampler not in ("normal", "uniform"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if system.name == "damped_pendulum_xy":
        draw = rng.standard_normal((n, 2)) if sampler == "normal" else rng.uniform(-0.5, 0.5, (n, 2))
        return _angle_to_xy(draw)
    if sampler == "uniform":
        return rng.uniform(-0.5, 0.5, (n, system.state_dim))
    return rng.standard_normal((n, system.state_dim))


def true_trajectory(system, s0, t_grid, cfg=None):
    """Clean states of the true system on ``t_grid`` from a single initial state."""
    system = get_system(system)
    cfg = cfg or GROUND_TRUTH
    s0 = np.asarray(s0, dtype=np.float64)
    if system.name == "damped_pendulum_xy":
        sin_t, cos_t, om = _angle_state(s0)
        u0 = np.array([np.arctan2(sin_t, cos_t), om])
        return _angle_to_xy(integrate(_rhs_damped_angle, u0, t_grid, cfg))
    return integrate(system.rhs, s0, t_grid, cfg)


def _one_trajectory(args):
    name, n_samples, t_span, sigma, seed, index, sampler = args
    system = get_system(name)
    sub = trajectory_seed(seed, index)
    rng = np.random.default_rng(sub)
    s0 = sample_initial_states(system, 1, rng, sampler)[0]
    t = np.linspace(t_span[0], t_span[1], n_samples)
    clean = true_trajectory(system, s0, t)
    derivs = system.rhs(clean)
    states = clean + sigma * rng.standard_normal(clean.shape) if sigma > 0 else clean.copy()
    return Trajectory(t, states, derivs, sub)


def generate_dataset(system, n_traj=None, n_samples=None, noise_sigma=None, seed=0,
                     t_span=(0.0, 2.0 * np.pi), sampler="normal", jobs=1) -> Dataset:
    """Simulate ``n_traj`` trajectories; defaults follow the task's protocol.

    Each trajectory draws from its own stream keyed by ``(seed, index)``, so
    the output does not depend on ``jobs``.
    """
    system = get_system(system)
    n_traj = system.n_traj if n_traj is None else int(n_traj)
    n_samples = system.n_samples if n_samples is None else int(n_samples)
    sigma = system.noise_sigma if noise_sigma is None else float(noise_sigma)
    if n_traj < 1 or n_samples < 2 or sigma < 0:
        raise ValueError("need n_traj >= 1, n_samples >= 2 and noise_sigma >= 0")
    tasks = [(system.name, n_samples, tuple(t_span), sigma, seed, i, sampler) for i in range(n_traj)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trajs = list(pool.map(_one_trajectory, tasks, chunksize=max(1, n_traj // (4 * jobs))))
    else:
        trajs = [_one_trajectory(a) for a in tasks]
    return Dataset(trajs, system.name, sigma, DatasetProtocol(n_traj, n_samples, tuple(t_span)))


def _fmt(values):
    return "[" + ",".join(format(float(v), ".17g") for v in values) + "]"


def write_ndjson(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for tr in dataset.trajectories:
            fh.write('{"seed":%d,"t":%s,"s":[%s],"sdot":[%s]}\n' % (
                tr.seed, _fmt(tr.times),
                ",".join(_fmt(row) for row in tr.states),
                ",".join(_fmt(row) for row in tr.derivs)))


def read_ndjson(path, task=None, noise_sigma=float("nan")) -> Dataset:
    trajs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tr = Trajectory(np.asarray(rec["t"], dtype=np.float64),
                                np.asarray(rec["s"], dtype=np.float64),
                                np.asarray(rec["sdot"], dtype=np.float64),
                                int(rec["seed"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trajectory record ({exc})") from None
            trajs.append(tr)
    if not trajs:
        raise ValueError(f"{path}: no trajectories")
    return Dataset(trajs, task, noise_sigma,
                   DatasetProtocol(len(trajs), len(trajs[0].times),
                                   (float(trajs[0].times[0]), float(trajs[0].times[-1]))))
