import json

import numpy as np
import pytest

from constrdyn import autodiff as ad
from constrdyn.models import (
    CouplingConfig, CouplingNet, HnnModel, MlpConfig, NodeModel, TransformedModel, apply_symplectic,
    build_model, coupling_forward, coupling_inverse, hamiltonian_field, hnn_forward, load_checkpoint,
    mlp_apply, mlp_forward, save_checkpoint, symplectic_matrix, transformed_dynamics,
)

J2 = symplectic_matrix(2)


def numpy_mlp(params, shapes, x, act=lambda z: np.logaddexp(0.0, z)):
    """Plain-numpy forward pass used as an oracle for the taped MLP."""
    tensors, off = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        tensors.append(params[off:off + n].reshape(shape))
        off += n
    h = x
    for i in range(0, len(tensors), 2):
        h = h @ tensors[i].T + tensors[i + 1]
        if i + 2 < len(tensors):
            h = act(h)
    return h


def test_symplectic_matrix_properties():
    for n in (2, 4, 6):
        J = symplectic_matrix(n)
        np.testing.assert_array_equal(J.T, -J)
        np.testing.assert_array_equal(J @ J, -np.eye(n))
        np.testing.assert_array_equal(J.T @ J, np.eye(n))
        v = np.arange(1.0, n + 1)
        np.testing.assert_array_equal(apply_symplectic(v).value, J @ v)
    with pytest.raises(ValueError):
        symplectic_matrix(3)


def test_zero_weights_give_zero_field():
    model = NodeModel(2, hidden_layers=2, hidden_units=8, seed=0)
    model.parameters = np.zeros(model.n_params)
    np.testing.assert_array_equal(mlp_forward(model, np.array([[0.3, -2.0], [5.0, 1.0]])), 0.0)


def test_linear_config_with_symplectic_weight():
    model = NodeModel(2, hidden_layers=0, parameters=np.concatenate([J2.ravel(), [0.0, 0.0]]))
    np.testing.assert_array_equal(mlp_forward(model, np.array([1.0, 0.0])), [0.0, -1.0])


def test_mlp_matches_numpy_oracle():
    for act in ("softplus", "tanh", "relu"):
        model = NodeModel(4, hidden_units=32, activation=act, seed=42)
        x = np.random.default_rng(0).standard_normal((7, 4))
        fn = {"softplus": lambda z: np.logaddexp(0.0, z), "tanh": np.tanh,
              "relu": lambda z: np.maximum(z, 0.0)}[act]
        np.testing.assert_allclose(model(x), numpy_mlp(model.parameters, model.shapes, x, fn),
                                   rtol=1e-13, atol=1e-14)


def test_golden_seed_42():
    # regression lock of the default architecture at seed 42
    model = NodeModel(2, seed=42)
    assert model.n_params == 2 * 200 + 200 + 2 * (200 * 200 + 200) + 200 * 2 + 2
    out = model(np.array([0.5, -0.25]))
    np.testing.assert_allclose(out, [-0.9766550099743583, 1.1541165763501158], rtol=1e-12)


def test_parameter_count_checked():
    with pytest.raises(ValueError):
        NodeModel(2, hidden_layers=1, hidden_units=4, parameters=np.zeros(3))
    with pytest.raises(ValueError):
        MlpConfig(2, 2, activation="gelu")
    with pytest.raises(ValueError):
        MlpConfig(0, 2)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        NodeModel(2, hidden_units=4)(np.zeros(3))


def test_hnn_examples():
    # H = 1/2 (q^2 + p^2) gives (p, -q); H = q p gives (q, -p); constant H gives 0
    half_sq = lambda s: 0.5 * ad.vsum(ad.square(s), axis=-1)
    np.testing.assert_allclose(hamiltonian_field(half_sq, np.array([1.0, 2.0])).value, [2.0, -1.0])
    qp = lambda s: ad.vsum(s[..., :1] * s[..., 1:], axis=-1)
    np.testing.assert_allclose(hamiltonian_field(qp, np.array([1.0, 1.0])).value, [1.0, -1.0])
    const = lambda s: 0.0 * ad.vsum(s, axis=-1) + 3.0
    np.testing.assert_array_equal(hamiltonian_field(const, np.array([0.4, 0.2])).value, [0.0, 0.0])


def test_hnn_with_zero_output_layer_is_static():
    model = HnnModel(2, hidden_layers=2, hidden_units=16, seed=1)
    model.parameters[-(16 + 1):] = 0.0  # last weight row and bias: H constant
    np.testing.assert_array_equal(hnn_forward(model, np.array([[0.3, 0.7]])), 0.0)


def test_hnn_linear_hamiltonian():
    # zero hidden layers: H = w . s + b, so J grad H = (w_p, -w_q)
    model = HnnModel(2, hidden_layers=0, parameters=[0.7, -1.3, 5.0])
    np.testing.assert_allclose(model(np.array([[1.0, 2.0], [-3.0, 0.5]])), [[-1.3, -0.7]] * 2)


def test_hnn_field_is_symplectic_gradient_of_its_network():
    model = HnnModel(4, hidden_units=32, seed=3)
    tensors = model.bind()
    H = lambda s: ad.reshape(mlp_apply(tensors, s, "softplus"), s.shape[:-1])
    S = np.random.default_rng(2).standard_normal((5, 4))
    np.testing.assert_allclose(model(S), hamiltonian_field(H, S).value, rtol=1e-12, atol=1e-14)


def test_hnn_jacobian_is_hamiltonian():
    for seed in range(5):
        model = HnnModel(4, hidden_units=32, seed=seed, activation="tanh")
        S = np.random.default_rng(seed).standard_normal((100, 4))
        M = symplectic_matrix(4).T @ model.jacobian(S)
        assert np.abs(M - np.swapaxes(M, -1, -2)).max() < 1e-8


def test_hnn_needs_even_dimension():
    with pytest.raises(ValueError):
        HnnModel(3)


def test_hnn_rollout_preserves_learned_energy_to_fourth_order():
    from constrdyn.odeint import IntegratorConfig, integrate
    model = HnnModel(2, hidden_units=32, seed=4)
    model.parameters[-33:] *= 20.0  # scale H so the drift sits well above round-off
    s0 = np.array([0.8, -0.3])
    t = np.linspace(0, 5, 51)
    drift = []
    for dt in (0.1, 0.05, 0.025):
        out = integrate(model, s0, t, IntegratorConfig("rk4", dt=dt))
        drift.append(np.abs(model.hamiltonian(out) - model.hamiltonian(s0)).max())
    assert 12 < drift[0] / drift[1] < 20 and 12 < drift[1] / drift[2] < 20


# --- coupling layers ---

def test_coupling_round_trip():
    net = CouplingNet(CouplingConfig(4), np.random.default_rng(0))
    params = net.init_parameters(np.random.default_rng(5))
    params = params + 0.05 * np.random.default_rng(1).standard_normal(net.n_params)
    S = np.random.default_rng(2).standard_normal((1000, 4)) * 3
    back = coupling_inverse(net, coupling_forward(net, S, params), params)
    assert np.abs(back - S).max() < 1e-10


def test_coupling_zero_subnets_only_permute():
    perms = [[1, 0, 3, 2], [2, 3, 0, 1]]
    net = CouplingNet(CouplingConfig(4, n_blocks=2, permutations=perms))
    s = np.array([1.0, 2.0, 3.0, 4.0])
    z = coupling_forward(net, s, np.zeros(net.n_params))
    np.testing.assert_array_equal(z, s[perms[0]][perms[1]])
    np.testing.assert_array_equal(coupling_inverse(net, z, np.zeros(net.n_params)), s)


def test_coupling_single_block_hand_value():
    # scale subnet outputs ln 2 (bias only), shift subnet outputs 0
    net = CouplingNet(CouplingConfig(2, n_blocks=1, hidden_layers=0, permutations=[[0, 1]]))
    params = np.array([0.0, np.log(2.0), 0.0, 0.0])
    np.testing.assert_allclose(coupling_forward(net, np.array([1.0, 3.0]), params), [1.0, 6.0], rtol=1e-15)


def test_coupling_scale_is_clamped():
    net = CouplingNet(CouplingConfig(2, n_blocks=1, hidden_layers=0, permutations=[[0, 1]]))
    z = coupling_forward(net, np.array([1.0, 1.0]), np.array([0.0, 50.0, 0.0, 0.0]))
    assert z[1] == pytest.approx(np.exp(5.0))


def test_coupling_rejects_odd_dimension_and_bad_permutations():
    with pytest.raises(ValueError):
        CouplingConfig(3)
    with pytest.raises(ValueError):
        CouplingNet(CouplingConfig(2, n_blocks=1, permutations=[[0, 0]]))


def test_default_permutations_alternate_transformed_half():
    for seed in range(20):
        net = CouplingNet(CouplingConfig(4), np.random.default_rng(seed))
        for p in net.perms:
            assert set(p[:2].tolist()) != {0, 1}


def test_transformed_model_starts_at_permutation_only_transform():
    model = TransformedModel(4, hidden_units=16, seed=0)
    s = np.array([0.1, 0.2, 0.3, 0.4])
    z = model.transform(s)
    assert sorted(z.tolist()) == sorted(s.tolist())


def test_transformed_identity_g_reduces_to_latent_mlp():
    model = TransformedModel(2, hidden_units=16, n_blocks=1, permutations=[[0, 1]], seed=5)
    n_c = model.coupling.n_params
    model.parameters[:n_c] = 0.0
    latent = NodeModel(2, hidden_units=16, parameters=model.parameters[n_c:])
    S = np.random.default_rng(0).standard_normal((6, 2))
    np.testing.assert_allclose(transformed_dynamics(model, S), latent(S), rtol=1e-14)


def test_transformed_zero_latent_is_static():
    model = TransformedModel(4, hidden_units=16, seed=6)
    model.parameters[model.coupling.n_params:] = 0.0
    np.testing.assert_array_equal(model(np.ones((3, 4))), 0.0)


def test_transformed_linear_case_against_matrix_product():
    # g(s) = G s with G = diag(1, e^c) (single block, constant log-scale c),
    # f_z(z) = A z (linear latent): ds/dt = G^-1 A G s
    c = 0.4
    A = np.array([[0.3, -1.1], [0.7, 0.2]])
    model = TransformedModel(2, hidden_layers=0, n_blocks=1, block_layers=0, permutations=[[0, 1]])
    model.parameters = np.concatenate([[0.0, c, 0.0, 0.0], A.ravel(), [0.0, 0.0]])
    G = np.diag([1.0, np.exp(c)])
    s = np.array([0.9, -0.4])
    np.testing.assert_allclose(model(s), np.linalg.inv(G) @ A @ G @ s, rtol=1e-14)


def test_transformed_field_is_inverse_jacobian_times_latent():
    model = TransformedModel(4, hidden_units=16, seed=7)
    model.parameters = model.parameters + 0.05 * np.random.default_rng(1).standard_normal(model.n_params)
    s = np.array([0.3, -0.2, 0.5, 0.1])
    z = model.transform(s)
    latent = NodeModel(4, hidden_units=16, parameters=model.parameters[model.coupling.n_params:])
    G = model.transform_jacobian(s)
    np.testing.assert_allclose(model(s), np.linalg.solve(G, latent(z)), rtol=1e-10, atol=1e-12)


def test_transformed_hnn_latent_gives_skew_structure():
    model = TransformedModel(4, hidden_units=16, latent="hnn", seed=8)
    model.parameters = model.parameters + 0.1 * np.random.default_rng(2).standard_normal(model.n_params)
    s = np.array([0.2, 0.1, -0.3, 0.4])
    Gi = np.linalg.inv(model.transform_jacobian(s))
    D = Gi @ symplectic_matrix(4) @ Gi.T
    assert np.abs(D + D.T).max() < 1e-12


# --- checkpoints ---

@pytest.mark.parametrize("kind,extra", [
    ("node", {}), ("hnn", {}), ("transformed_node", {"n_blocks": 2}), ("transformed_node", {"latent": "hnn"}),
])
def test_checkpoint_round_trip_is_bitwise(tmp_path, kind, extra):
    model = build_model(kind, 4, seed=11, hidden_units=16, **extra)
    model.parameters = model.parameters + 0.01 * np.random.default_rng(0).standard_normal(model.n_params)
    model.epoch = 7
    path = tmp_path / "m.json"
    save_checkpoint(model, path)
    data = json.loads(path.read_text())
    assert {"kind", "config", "parameters", "seed", "epoch"} <= set(data)
    back = load_checkpoint(path)
    assert back.epoch == 7 and back.kind == kind
    S = np.random.default_rng(3).standard_normal((5, 4))
    assert np.array_equal(back(S), model(S))


def test_oracle_model_round_trip(tmp_path):
    model = build_model("oracle", task="single_pendulum")
    save_checkpoint(model, tmp_path / "o.json")
    back = load_checkpoint(tmp_path / "o.json")
    np.testing.assert_array_equal(back(np.array([np.pi / 2, 0.0])), model(np.array([np.pi / 2, 0.0])))


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_model("lnn", 2)


def test_load_checkpoint_missing_key(tmp_path):
    (tmp_path / "c.json").write_text('{"kind": "node"}')
    with pytest.raises(ValueError, match="parameters|config"):
        load_checkpoint(tmp_path / "c.json")
