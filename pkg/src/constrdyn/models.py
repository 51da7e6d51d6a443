"""Learned vector fields: plain MLP, Hamiltonian network, and coupling-transformed MLP.

Parameters of every model live in one flat float64 vector.  ``bind`` slices
that vector into per-layer tensors (tape leaves during training, constants
otherwise) and the ``field`` methods are written in the autodiff primitives,
so the same code serves rollouts, training and Jacobian constraints.

Linear layers follow the ``y = x @ W.T + b`` convention with ``W`` of shape
``(out, in)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import physics

__all__ = [
    "MlpConfig",
    "CouplingConfig",
    "CouplingNet",
    "DynamicsModel",
    "NodeModel",
    "HnnModel",
    "TransformedModel",
    "OracleModel",
    "symplectic_matrix",
    "apply_symplectic",
    "mlp_apply",
    "mlp_input_gradient",
    "hamiltonian_field",
    "mlp_forward",
    "hnn_forward",
    "coupling_forward",
    "coupling_inverse",
    "transformed_dynamics",
    "build_model",
    "model_from_dict",
    "save_checkpoint",
    "load_checkpoint",
]


def _sigmoid_grad(z):
    return ad.sigmoid(z)


def _tanh_grad(z):
    return 1.0 - ad.square(ad.tanh(z))


def _relu_grad(z):
    return ad.as_var((ad.as_var(z).value > 0).astype(np.float64))


ACTIVATIONS = {
    "softplus": (ad.softplus, _sigmoid_grad),
    "tanh": (ad.tanh, _tanh_grad),
    "relu": (ad.relu, _relu_grad),
}


@dataclass
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden_layers: int = 3
    hidden_units: int = 200
    activation: str = "softplus"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_units < 1:
            raise ValueError("MLP dimensions must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shapes(self):
        dims = [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]
        out = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            out += [(d_out, d_in), (d_out,)]
        return out

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.shapes)


def _glorot(shapes, rng, zero_last=False):
    chunks = []
    n_layers = len(shapes) // 2
    for i in range(n_layers):
        w_shape, b_shape = shapes[2 * i], shapes[2 * i + 1]
        if zero_last and i == n_layers - 1:
            chunks.append(np.zeros(int(np.prod(w_shape))))
        else:
            limit = np.sqrt(6.0 / (w_shape[0] + w_shape[1]))
            chunks.append(rng.uniform(-limit, limit, int(np.prod(w_shape))))
        chunks.append(np.zeros(int(np.prod(b_shape))))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def _linear(x, W, b):
    return ad.matmul(x, ad.swapaxes(W, -1, -2)) + b


def _as_rows(x):
    x = ad.as_var(x)
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    return x, False


def mlp_apply(tensors, x, activation="softplus"):
    """Hidden layers use ``activation``; the output layer is linear."""
    act = ACTIVATIONS[activation][0]
    h, squeeze = _as_rows(x)
    n_layers = len(tensors) // 2
    for i in range(n_layers):
        h = _linear(h, tensors[2 * i], tensors[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    if squeeze:
        h = ad.reshape(h, (h.shape[-1],))
    return h


def mlp_input_gradient(tensors, x, activation="softplus"):
    """Gradient of a scalar-output MLP with respect to its input, as taped ops.

    Written out layer by layer (rather than by reverse-mode) so that its own
    Jacobian can be taken with forward-mode tangents.
    """
    act, dact = ACTIVATIONS[activation]
    h, squeeze = _as_rows(x)
    n_layers = len(tensors) // 2
    pre = []
    for i in range(n_layers - 1):
        z = _linear(h, tensors[2 * i], tensors[2 * i + 1])
        pre.append(z)
        h = act(z)
    g = tensors[2 * (n_layers - 1)]  # (1, units): d out / d h_last
    for i in range(n_layers - 2, -1, -1):
        g = ad.matmul(g * dact(pre[i]), tensors[2 * i])
    if g.shape[0] != h.shape[0]:
        g = g + ad.as_var(np.zeros(h.shape[:-1] + (g.shape[-1],)))
    if squeeze:
        g = ad.reshape(g, (g.shape[-1],))
    return g


def symplectic_matrix(n: int) -> np.ndarray:
    """J = [[0, I], [-I, 0]] for even ``n``."""
    if n % 2:
        raise ValueError(f"symplectic structure needs an even dimension, got {n}")
    h = n // 2
    J = np.zeros((n, n))
    J[:h, h:] = np.eye(h)
    J[h:, :h] = -np.eye(h)
    return J


def apply_symplectic(v):
    """J @ v along the last axis: (v_p, -v_q)."""
    v = ad.as_var(v)
    n = v.shape[-1]
    if n % 2:
        raise ValueError(f"symplectic structure needs an even dimension, got {n}")
    h = n // 2
    return ad.concat([v[..., h:], -v[..., :h]], axis=-1)


def hamiltonian_field(H, s):
    """J grad H(s) for any scalar function ``H`` written in autodiff ops.

    The gradient comes from one forward-mode pass per coordinate, so the
    result is not itself differentiable with respect to ``s``.
    """
    s = ad.as_var(s)
    n = s.shape[-1]
    if n % 2:
        raise ValueError(f"Hamiltonian dynamics need an even dimension, got {n}")

    def scalar_H(x):
        out = ad.as_var(H(x))
        if out.ndim == s.ndim:
            out = out[..., 0]
        return out

    grads = []
    for i in range(n):
        e = np.zeros(s.shape)
        e[..., i] = 1.0
        grads.append(ad.jvp(scalar_H, s, e))
    return apply_symplectic(ad.stack(grads, axis=-1))


@dataclass
class CouplingConfig:
    dim: int
    n_blocks: int = 8
    hidden_layers: int = 2
    hidden_units: int = 100
    activation: str = "softplus"
    scale_clamp: float = 5.0
    permutations: list = field(default=None)

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"coupling layers need an even dimension >= 2, got {self.dim}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    @property
    def subnet(self):
        h = self.dim // 2
        return MlpConfig(h, h, self.hidden_layers, self.hidden_units, self.activation)

    @property
    def shapes(self):
        return self.subnet.shapes * (2 * self.n_blocks)


def _make_permutations(dim, n_blocks, rng):
    # a shuffle that keeps the previous block's conditioning half in place is
    # rolled by half, so consecutive blocks always transform different coordinates
    h = dim // 2
    perms = []
    for _ in range(n_blocks):
        perm = rng.permutation(dim)
        if set(perm[:h].tolist()) == set(range(h)):
            perm = np.roll(perm, h)
        perms.append(perm.tolist())
    return perms


class CouplingNet:
    """Stack of affine coupling blocks with fixed permutations.

    Each block permutes its input, keeps the first half ``x1`` and maps the
    second half to ``x2 * exp(a(x1)) + t(x1)``, with ``a`` clamped.
    """

    def __init__(self, config: CouplingConfig, rng=None):
        self.config = config
        if config.permutations is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            config.permutations = _make_permutations(config.dim, config.n_blocks, rng)
        perms = [np.asarray(p, dtype=np.int64) for p in config.permutations]
        if len(perms) != config.n_blocks or any(sorted(p.tolist()) != list(range(config.dim)) for p in perms):
            raise ValueError("permutations must be one permutation of range(dim) per block")
        self.perms = perms
        self.inv_perms = [np.argsort(p) for p in perms]
        self._per_subnet = len(config.subnet.shapes)

    @property
    def shapes(self):
        return self.config.shapes

    @property
    def n_params(self):
        return self.config.subnet.n_params * 2 * self.config.n_blocks

    def init_parameters(self, rng):
        sub = self.config.subnet.shapes
        return np.concatenate([_glorot(sub, rng, zero_last=True) for _ in range(2 * self.config.n_blocks)])

    def _subnets(self, tensors, k):
        m = self._per_subnet
        return tensors[2 * k * m:(2 * k + 1) * m], tensors[(2 * k + 1) * m:(2 * k + 2) * m]

    def _scale_shift(self, tensors, k, x1):
        scale_t, shift_t = self._subnets(tensors, k)
        c = self.config.scale_clamp
        a = ad.clip(mlp_apply(scale_t, x1, self.config.activation), -c, c)
        t = mlp_apply(shift_t, x1, self.config.activation)
        return a, t

    def forward(self, tensors, s):
        x = ad.as_var(s)
        if x.shape[-1] != self.config.dim:
            raise ValueError(f"expected dimension {self.config.dim}, got {x.shape[-1]}")
        h = self.config.dim // 2
        for k, perm in enumerate(self.perms):
            x = x[..., perm]
            x1, x2 = x[..., :h], x[..., h:]
            a, t = self._scale_shift(tensors, k, x1)
            x = ad.concat([x1, x2 * ad.exp(a) + t], axis=-1)
        return x

    def inverse(self, tensors, z):
        x = ad.as_var(z)
        if x.shape[-1] != self.config.dim:
            raise ValueError(f"expected dimension {self.config.dim}, got {x.shape[-1]}")
        h = self.config.dim // 2
        for k in range(self.config.n_blocks - 1, -1, -1):
            z1, z2 = x[..., :h], x[..., h:]
            a, t = self._scale_shift(tensors, k, z1)
            x = ad.concat([z1, (z2 - t) * ad.exp(-a)], axis=-1)
            x = x[..., self.inv_perms[k]]
        return x


class DynamicsModel:
    """Base class: a parameterized vector field s -> ds/dt."""

    kind = None

    def __init__(self, state_dim, parameters=None, seed=0):
        self.state_dim = int(state_dim)
        self.seed = int(seed)
        self.epoch = 0
        if parameters is None:
            parameters = self.init_parameters(np.random.default_rng(self.seed))
        parameters = np.array(parameters, dtype=np.float64).ravel()
        if parameters.size != self.n_params:
            raise ValueError(f"{self.kind} model expects {self.n_params} parameters, got {parameters.size}")
        self.parameters = parameters

    # layout -------------------------------------------------------------
    @property
    def shapes(self):
        raise NotImplementedError

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.shapes)

    def init_parameters(self, rng):
        raise NotImplementedError

    def bind(self, tape=None, parameters=None):
        """Slice the flat parameters into tensors (leaves on ``tape`` if given)."""
        flat = self.parameters if parameters is None else np.asarray(parameters, dtype=np.float64)
        tensors, offset = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            chunk = flat[offset:offset + size].reshape(shape)
            offset += size
            tensors.append(tape.variable(chunk) if tape is not None else ad.Var(chunk))
        return tensors

    @staticmethod
    def flatten_grads(grads):
        return np.concatenate([np.ravel(g) for g in grads]) if grads else np.zeros(0)

    # dynamics -----------------------------------------------------------
    def field(self, tensors, s):
        raise NotImplementedError

    def value_and_constraint_jacobian(self, tensors, s):
        """ds/dt and the Jacobian on which structural constraints act."""
        return ad.value_and_jacobian(lambda x: self.field(tensors, x), s)

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.state_dim:
            raise ValueError(f"expected state dimension {self.state_dim}, got {s.shape[-1]}")
        return self.field(self.bind(), s).value

    def jacobian(self, s):
        """d(ds/dt)/ds at ``s`` (batched over leading axes)."""
        tensors = self.bind()
        return ad.jacobian(lambda x: self.field(tensors, x), np.asarray(s, dtype=np.float64)).value

    # serialization ------------------------------------------------------
    @property
    def config(self):
        raise NotImplementedError

    def to_dict(self):
        return {"kind": self.kind, "config": self.config,
                "parameters": self.parameters.tolist(), "seed": self.seed, "epoch": self.epoch}

    def copy(self):
        return model_from_dict(self.to_dict())


class NodeModel(DynamicsModel):
    """Unconstrained MLP vector field."""

    kind = "node"

    def __init__(self, state_dim, hidden_layers=3, hidden_units=200, activation="softplus",
                 parameters=None, seed=0):
        self.mlp = MlpConfig(state_dim, state_dim, hidden_layers, hidden_units, activation)
        super().__init__(state_dim, parameters, seed)

    @property
    def shapes(self):
        return self.mlp.shapes

    def init_parameters(self, rng):
        return _glorot(self.shapes, rng)

    def field(self, tensors, s):
        return mlp_apply(tensors, s, self.mlp.activation)

    @property
    def config(self):
        return {"state_dim": self.state_dim, **_mlp_fields(self.mlp)}


class HnnModel(DynamicsModel):
    """ds/dt = J grad H(s) with H a scalar MLP."""

    kind = "hnn"

    def __init__(self, state_dim, hidden_layers=3, hidden_units=200, activation="softplus",
                 parameters=None, seed=0):
        if state_dim % 2:
            raise ValueError(f"HNN needs an even state dimension, got {state_dim}")
        self.mlp = MlpConfig(state_dim, 1, hidden_layers, hidden_units, activation)
        super().__init__(state_dim, parameters, seed)

    @property
    def shapes(self):
        return self.mlp.shapes

    def init_parameters(self, rng):
        return _glorot(self.shapes, rng)

    def hamiltonian(self, s):
        out = mlp_apply(self.bind(), np.asarray(s, dtype=np.float64), self.mlp.activation).value
        return out[..., 0]

    def field(self, tensors, s):
        return apply_symplectic(mlp_input_gradient(tensors, s, self.mlp.activation))

    @property
    def config(self):
        return {"state_dim": self.state_dim, **_mlp_fields(self.mlp)}


class TransformedModel(DynamicsModel):
    """z = g(s) through a coupling net, dz/dt = f_z(z), ds/dt = (dg^-1/dz) dz/dt.

    ``latent`` selects f_z: a plain MLP ("node", the trained variant) or a
    Hamiltonian network ("hnn", which makes the field exactly of the
    transformed-Hamiltonian form).
    """

    kind = "transformed_node"

    def __init__(self, state_dim, hidden_layers=3, hidden_units=200, activation="softplus",
                 n_blocks=8, block_layers=2, block_units=100, permutations=None,
                 latent="node", parameters=None, seed=0):
        if latent not in ("node", "hnn"):
            raise ValueError(f"unknown latent kind {latent!r}")
        self.latent = latent
        perm_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        self.coupling = CouplingNet(
            CouplingConfig(state_dim, n_blocks, block_layers, block_units, activation,
                           permutations=permutations), perm_rng)
        self.mlp = MlpConfig(state_dim, state_dim if latent == "node" else 1,
                             hidden_layers, hidden_units, activation)
        self._n_coupling = len(self.coupling.shapes)
        super().__init__(state_dim, parameters, seed)

    @property
    def shapes(self):
        return self.coupling.shapes + self.mlp.shapes

    def init_parameters(self, rng):
        return np.concatenate([self.coupling.init_parameters(rng), _glorot(self.mlp.shapes, rng)])

    def split(self, tensors):
        return tensors[:self._n_coupling], tensors[self._n_coupling:]

    def latent_field(self, latent_tensors, z):
        if self.latent == "hnn":
            return apply_symplectic(mlp_input_gradient(latent_tensors, z, self.mlp.activation))
        return mlp_apply(latent_tensors, z, self.mlp.activation)

    def field(self, tensors, s):
        s = ad.as_var(s)
        if s.tangent is not None:
            raise ValueError("the s-space Jacobian of a transformed model needs nested "
                             "tangents; use the latent Jacobian or finite differences")
        ctens, ltens = self.split(tensors)
        z = self.coupling.forward(ctens, s)
        zdot = self.latent_field(ltens, z)
        return ad.jvp(lambda u: self.coupling.inverse(ctens, u), z, zdot)

    def value_and_constraint_jacobian(self, tensors, s):
        ctens, ltens = self.split(tensors)
        z = self.coupling.forward(ctens, ad.as_var(s))
        z = ad.Var(z.value, z.tape, z.index)
        zdot, jac = ad.value_and_jacobian(lambda u: self.latent_field(ltens, u), z)
        sdot = ad.jvp(lambda u: self.coupling.inverse(ctens, u), z, zdot)
        return sdot, jac

    def transform(self, s):
        return self.coupling.forward(self.split(self.bind())[0], np.asarray(s, dtype=np.float64)).value

    def inverse_transform(self, z):
        return self.coupling.inverse(self.split(self.bind())[0], np.asarray(z, dtype=np.float64)).value

    def transform_jacobian(self, s):
        """G(s) = dg/ds."""
        ctens = self.split(self.bind())[0]
        return ad.jacobian(lambda x: self.coupling.forward(ctens, x), np.asarray(s, dtype=np.float64)).value

    def latent_hamiltonian(self, z):
        if self.latent != "hnn":
            raise ValueError("only the hnn latent defines a Hamiltonian")
        ltens = self.split(self.bind())[1]
        return mlp_apply(ltens, np.asarray(z, dtype=np.float64), self.mlp.activation).value[..., 0]

    def jacobian(self, s):
        raise NotImplementedError("s-space Jacobian of a transformed model is not taped; "
                                  "use transform_jacobian / latent Jacobian")

    @property
    def config(self):
        c = self.coupling.config
        return {"state_dim": self.state_dim, **_mlp_fields(self.mlp),
                "n_blocks": c.n_blocks, "block_layers": c.hidden_layers, "block_units": c.hidden_units,
                "permutations": [list(map(int, p)) for p in c.permutations], "latent": self.latent}


class OracleModel(DynamicsModel):
    """The true vector field of a task, exposed through the model interface."""

    kind = "oracle"

    def __init__(self, task, parameters=None, seed=0):
        self.system = physics.get_system(task)
        super().__init__(self.system.state_dim, np.zeros(0) if parameters is None else parameters, seed)

    @property
    def shapes(self):
        return []

    def init_parameters(self, rng):
        return np.zeros(0)

    def field(self, tensors, s):
        s = ad.as_var(s)
        if s.tangent is not None:
            raise ValueError("oracle model is not differentiable")
        return ad.Var(self.system.rhs(s.value))

    def __call__(self, s):
        return self.system.rhs(np.asarray(s, dtype=np.float64))

    @property
    def config(self):
        return {"task": self.system.name}


def _mlp_fields(mlp):
    return {"hidden_layers": mlp.hidden_layers, "hidden_units": mlp.hidden_units,
            "activation": mlp.activation}


MODEL_KINDS = {cls.kind: cls for cls in (NodeModel, HnnModel, TransformedModel, OracleModel)}


def build_model(kind, state_dim=None, seed=0, **config):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    if cls is OracleModel:
        return cls(seed=seed, **config)
    return cls(state_dim, seed=seed, **config)


def model_from_dict(data):
    kind = data["kind"]
    config = dict(data["config"])
    model = build_model(kind, seed=data.get("seed", 0), parameters=data["parameters"], **config)
    model.epoch = int(data.get("epoch", 0))
    return model


def save_checkpoint(model, path, meta=None):
    """Write the model as JSON; ``meta`` is an optional free-form record kept alongside."""
    data = model.to_dict()
    if meta is not None:
        data["meta"] = meta
    with open(path, "w") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        data = json.load(fh)
    for key in ("kind", "config", "parameters"):
        if key not in data:
            raise ValueError(f"{path}: checkpoint is missing {key!r}")
    return model_from_dict(data)


# functional aliases ---------------------------------------------------------


def mlp_forward(model: NodeModel, s):
    return model(s)


def hnn_forward(model: HnnModel, s):
    if model.kind != "hnn":
        raise ValueError("hnn_forward needs an hnn model")
    return model(s)


def coupling_forward(net: CouplingNet, s, parameters):
    return net.forward(_bind_shapes(net.shapes, parameters), np.asarray(s, dtype=np.float64)).value


def coupling_inverse(net: CouplingNet, z, parameters):
    return net.inverse(_bind_shapes(net.shapes, parameters), np.asarray(z, dtype=np.float64)).value


def transformed_dynamics(model: TransformedModel, s):
    if model.kind != "transformed_node":
        raise ValueError("transformed_dynamics needs a transformed_node model")
    return model(s)


def _bind_shapes(shapes, flat):
    flat = np.asarray(flat, dtype=np.float64)
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(ad.Var(flat[offset:offset + size].reshape(shape)))
        offset += size
    if offset != flat.size:
        raise ValueError(f"expected {offset} parameters, got {flat.size}")
    return out
