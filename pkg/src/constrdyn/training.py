"""Derivative-matching training with an optional structural penalty, optimized by Adam.

The objective for a batch of states ``s`` with target derivatives ``y`` is

    mean_b ||y_b - f(s_b)||^2  +  w_c * mean_b C(df/ds at s_b)

where ``C`` is chosen by a :class:`~constrdyn.constraints.ConstraintSpec`.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .constraints import ConstraintSpec
from .models import DynamicsModel, build_model, save_checkpoint
from .physics import get_system

__all__ = ["TrainConfig", "AdamState", "NonFiniteLossError", "TrainResult",
           "loss", "loss_and_grad", "adam_step", "train", "model_for_config"]

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "mse", "penalty", "total", "wall_ms"]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    task: str
    model_kind: str = "node"
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    lr: float = 1e-4
    epochs: int = 1000
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task is not None:
            get_system(self.task)
        if isinstance(self.constraint, dict):
            self.constraint = ConstraintSpec(**self.constraint)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and checkpoint_every >= 0 required")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grad, state: AdamState, lr):
    """One bias-corrected Adam update; returns ``(params, state)`` as new objects."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("params, grad and optimizer state must have the same shape")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, step, state.beta1, state.beta2, state.eps)


def _check_pairing(model, constraint):
    if constraint.kind == "transformed_hamiltonian" and model.kind != "transformed_node":
        raise ValueError("transformed_hamiltonian constraint needs a transformed_node model")
    if constraint.kind in ("hamiltonian", "dissipative") and model.kind == "transformed_node":
        raise ValueError(f"{constraint.kind} constraint acts on s-space Jacobians; "
                         "use transformed_hamiltonian with transformed models")
    if model.kind == "oracle":
        raise ValueError("oracle models have nothing to train")


def loss(model: DynamicsModel, states, derivs, constraint: ConstraintSpec, tensors=None):
    """Return ``(total, mse, penalty)`` as autodiff Vars."""
    states = np.asarray(states, dtype=np.float64)
    derivs = np.asarray(derivs, dtype=np.float64)
    if states.ndim != 2 or states.shape != derivs.shape or len(states) == 0:
        raise ValueError("need non-empty (batch, dim) arrays of states and derivatives")
    _check_pairing(model, constraint)
    tensors = model.bind() if tensors is None else tensors
    if constraint.kind == "none":
        pred = model.field(tensors, states)
        penalty = ad.as_var(0.0)
    else:
        pred, jac = model.value_and_constraint_jacobian(tensors, states)
        penalty = ad.mean(constraint.penalty(jac))
    mse = ad.mean(ad.vsum(ad.square(pred - derivs), axis=-1))
    total = mse + constraint.weight * penalty if constraint.weight else mse + 0.0 * penalty
    return total, mse, penalty


def loss_and_grad(model, states, derivs, constraint, parameters=None):
    """Loss values and the flat gradient of the total with respect to the parameters."""
    with ad.Tape() as tape:
        tensors = model.bind(tape, parameters)
        total, mse, penalty = loss(model, states, derivs, constraint, tensors)
        if not np.isfinite(total.value):
            raise NonFiniteLossError(f"non-finite loss (mse={mse.value}, penalty={penalty.value})")
        grads = ad.backward(tape, total, tensors)
    return (float(total.value), float(mse.value), float(penalty.value)), model.flatten_grads(grads)


@dataclass
class TrainResult:
    model: DynamicsModel
    history: list


def model_for_config(config: TrainConfig) -> DynamicsModel:
    system = get_system(config.task)
    return build_model(config.model_kind, system.state_dim, seed=config.seed, **config.model)


def _write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in history:
            writer.writerow([row["epoch"], repr(row["mse"]), repr(row["penalty"]),
                             repr(row["total"]), row["wall_ms"]])


def train(config: TrainConfig, dataset, model=None, out_dir=None, progress=None) -> TrainResult:
    """Fit ``model`` (built from ``config`` if omitted) to a dataset or (states, derivs) pair.

    Samples are shuffled every epoch with a generator seeded by
    ``config.seed``.  With ``out_dir``, ``metrics.csv``, periodic
    ``ckpt_epoch*.json`` and a final ``model.json`` are written there.  A
    non-finite loss aborts training after saving the last good parameters.
    """
    if isinstance(dataset, tuple):
        states, derivs = dataset
    else:
        if None not in (dataset.task, config.task) and dataset.task != config.task:
            raise ValueError(f"dataset task {dataset.task!r} != config task {config.task!r}")
        states, derivs = dataset.arrays()
    states = np.asarray(states, dtype=np.float64)
    derivs = np.asarray(derivs, dtype=np.float64)
    model = model_for_config(config) if model is None else model
    if states.shape[-1] != model.state_dim:
        raise ValueError(f"data dimension {states.shape[-1]} != model dimension {model.state_dim}")
    _check_pairing(model, config.constraint)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    meta = {"task": config.task, "constraint": config.constraint.to_dict()}
    rng = np.random.default_rng(config.seed)
    opt = AdamState.zeros(model.n_params)
    history = []
    n = len(states)
    start_epoch = model.epoch
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            try:
                values, grad = loss_and_grad(model, states[idx], derivs[idx], config.constraint)
            except FloatingPointError as exc:
                log.error("epoch %d: %s; keeping last good parameters", epoch, exc)
                if out_dir is not None:
                    save_checkpoint(model, os.path.join(out_dir, "model.json"), meta)
                    _write_metrics(os.path.join(out_dir, "metrics.csv"), history)
                raise NonFiniteLossError(f"training diverged at epoch {epoch}: {exc}") from exc
            sums += np.asarray(values) * len(idx)
            model.parameters, opt = adam_step(model.parameters, grad, opt, config.lr)
        model.epoch = epoch
        mean = sums / n
        row = {"epoch": epoch, "total": float(mean[0]), "mse": float(mean[1]),
               "penalty": float(mean[2]), "wall_ms": int(round(1000 * (time.perf_counter() - t0)))}
        history.append(row)
        log.debug("epoch %d mse=%.3e penalty=%.3e", epoch, row["mse"], row["penalty"])
        if progress is not None:
            progress(row)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(out_dir, f"ckpt_epoch{epoch:05d}.json"), meta)
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "model.json"), meta)
        _write_metrics(os.path.join(out_dir, "metrics.csv"), history)
    return TrainResult(model, history)
