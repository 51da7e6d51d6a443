import csv

import numpy as np
import pytest

from constrdyn.constraints import ConstraintSpec
from constrdyn.models import NodeModel, load_checkpoint, symplectic_matrix
from constrdyn.physics import generate_dataset
from constrdyn.training import (
    AdamState, NonFiniteLossError, TrainConfig, adam_step, loss, loss_and_grad, train,
)

NONE = ConstraintSpec("none", 0.0)
HAM = ConstraintSpec("hamiltonian", 1e5)


def linear_model(W):
    return NodeModel(2, hidden_layers=0, parameters=np.concatenate([np.ravel(W), [0.0, 0.0]]))


@pytest.fixture(scope="module")
def small_set():
    return generate_dataset("mass_spring", n_traj=10, seed=0)


def test_zero_weight_total_equals_mse(small_set):
    S, Y = small_set.arrays()
    model = NodeModel(2, hidden_units=16, seed=1)
    for spec in (NONE, ConstraintSpec("hamiltonian", 0.0)):
        total, mse, _ = loss(model, S[:32], Y[:32], spec)
        assert total.value == mse.value


def test_perfect_model_has_zero_mse():
    ds = generate_dataset("mass_spring", n_traj=3, noise_sigma=0.0, seed=2)
    S, Y = ds.arrays()
    _, mse, penalty = loss(linear_model(symplectic_matrix(2)), S, Y, HAM)
    assert mse.value == 0.0 and penalty.value == 0.0


def test_identity_field_has_penalty_eight(small_set):
    S, Y = small_set.arrays()
    total, mse, penalty = loss(linear_model(np.eye(2)), S[:17], Y[:17], HAM)
    assert penalty.value == 8.0
    assert total.value == pytest.approx(mse.value + 8e5, rel=1e-15)


def test_mse_is_mean_of_per_sample_squared_error_sums(small_set):
    S, Y = small_set.arrays()
    model = NodeModel(2, hidden_units=8, seed=3)
    _, mse, _ = loss(model, S[:20], Y[:20], NONE)
    assert mse.value == pytest.approx(np.mean(np.sum((model(S[:20]) - Y[:20]) ** 2, axis=1)), rel=1e-14)


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        loss(NodeModel(2, hidden_units=4), np.zeros((0, 2)), np.zeros((0, 2)), NONE)


def test_batch_order_invariance(small_set):
    S, Y = small_set.arrays()
    model = NodeModel(2, hidden_units=16, seed=4)
    perm = np.random.default_rng(0).permutation(64)
    a = loss(model, S[:64], Y[:64], HAM)[0].value
    b = loss(model, S[:64][perm], Y[:64][perm], HAM)[0].value
    assert a == pytest.approx(b, rel=1e-13)


def test_constraint_model_pairing():
    with pytest.raises(ValueError):
        loss(NodeModel(2, hidden_units=4), np.zeros((1, 2)), np.zeros((1, 2)),
             ConstraintSpec("transformed_hamiltonian", 1.0))


# --- gradients ---

def fd_check(model, S, Y, spec, n_check=20, h=1e-6, seed=0):
    _, grad = loss_and_grad(model, S, Y, spec)
    rng = np.random.default_rng(seed)
    idx = rng.choice(model.n_params, n_check, replace=False)
    worst = 0.0
    for i in idx:
        p = model.parameters.copy()
        p[i] += h
        up = loss_and_grad(model, S, Y, spec, parameters=p)[0][0]
        p[i] -= 2 * h
        down = loss_and_grad(model, S, Y, spec, parameters=p)[0][0]
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(fd), 1e-6))
    return worst


@pytest.mark.parametrize("kind", ["none", "hamiltonian"])
def test_total_loss_gradient_matches_finite_differences(small_set, kind):
    S, Y = small_set.arrays()
    model = NodeModel(2, hidden_units=16, seed=5)
    assert fd_check(model, S[:16], Y[:16], ConstraintSpec(kind, 10.0)) < 1e-3


# --- Adam ---

def test_first_adam_step_closed_form():
    new, state = adam_step(np.array([0.0]), np.array([1.0]), AdamState.zeros(1), 1e-4)
    assert new[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-15)
    assert state.step == 1


def test_zero_gradient_keeps_parameters():
    p = np.random.default_rng(0).standard_normal(5)
    state = AdamState.zeros(5)
    for _ in range(3):
        new, state = adam_step(p, np.zeros(5), state, 1e-3)
        assert np.array_equal(new, p)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(1)
    p, state = rng.standard_normal(4), AdamState.zeros(4)
    m = v = np.zeros(4)
    q = p.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p, state = adam_step(p, g, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig("mass_spring", lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig("mass_spring", batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig("pendulum_on_a_cart")
    assert TrainConfig("mass_spring", constraint={"kind": "hamiltonian", "weight": 3}).constraint.weight == 3.0


# --- training loop ---

def small_config(**kw):
    base = dict(task="mass_spring", model_kind="node", constraint=NONE, lr=1e-3, epochs=3,
                batch_size=32, seed=7, model={"hidden_units": 16})
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_initial_model(small_set):
    cfg = small_config(epochs=0)
    result = train(cfg, small_set)
    init = NodeModel(2, hidden_units=16, seed=7)
    assert np.array_equal(result.model.parameters, init.parameters)
    assert result.history == []


def test_training_is_bitwise_deterministic(small_set):
    a = train(small_config(constraint=HAM), small_set)
    b = train(small_config(constraint=HAM), small_set)
    assert np.array_equal(a.model.parameters, b.model.parameters)
    assert [(r["mse"], r["penalty"]) for r in a.history] == [(r["mse"], r["penalty"]) for r in b.history]
    c = train(small_config(constraint=HAM, seed=8), small_set)
    assert not np.array_equal(a.model.parameters, c.model.parameters)


def test_outputs_written(tmp_path, small_set):
    train(small_config(checkpoint_every=2, epochs=4), small_set, out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["epoch", "mse", "penalty", "total", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert (tmp_path / "ckpt_epoch00002.json").exists() and (tmp_path / "ckpt_epoch00004.json").exists()
    assert load_checkpoint(tmp_path / "model.json").epoch == 4


def test_non_finite_loss_aborts_with_last_good_checkpoint(tmp_path):
    S = np.random.default_rng(0).standard_normal((40, 2))
    Y = S.copy()
    Y[33] = np.inf  # lands in some batch of the first epoch
    cfg = small_config()
    with pytest.raises(NonFiniteLossError):
        train(cfg, (S, Y), out_dir=tmp_path)
    saved = load_checkpoint(tmp_path / "model.json")
    assert np.isfinite(saved.parameters).all()


def test_dataset_task_must_match(small_set):
    with pytest.raises(ValueError):
        train(small_config(task="single_pendulum"), small_set)


def test_node_training_reduces_mse_tenfold():
    ds = generate_dataset("mass_spring", n_traj=50, seed=0)
    result = train(TrainConfig("mass_spring", "node", NONE, epochs=200, seed=0), ds)
    assert result.history[-1]["mse"] * 10 <= result.history[0]["mse"]


def test_hamiltonian_penalty_decreases_in_trend():
    ds = generate_dataset("mass_spring", n_traj=20, seed=1)
    result = train(TrainConfig("mass_spring", "node", HAM, epochs=30, seed=1), ds)
    pen = np.array([r["penalty"] for r in result.history])
    ma = np.convolve(pen, np.ones(5) / 5, mode="valid")
    # near its floor the penalty jitters; the trend is the fitted log slope
    slope = np.polyfit(np.arange(ma.size), np.log(ma), 1)[0]
    assert slope < 0
    assert ma[-1] * 100 < ma[0]
