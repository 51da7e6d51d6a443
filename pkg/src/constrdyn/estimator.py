"""scikit-learn style wrapper: fit a vector field to (state, derivative) pairs."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .constraints import ConstraintSpec
from .evaluation import rollout
from .models import build_model
from .training import TrainConfig, train

__all__ = ["DynamicsRegressor"]


class DynamicsRegressor(RegressorMixin, BaseEstimator):
    """Learn ds/dt = f(s) by derivative matching with an optional structural penalty.

    ``X`` holds states and ``y`` the matching time derivatives, both of shape
    ``(n_samples, state_dim)``.  ``constraint`` is one of ``none``,
    ``hamiltonian``, ``transformed_hamiltonian`` or ``dissipative``.
    """

    def __init__(self, model_kind="node", constraint="none", weight=0.0, bounds=None,
                 hidden_layers=3, hidden_units=200, activation="softplus",
                 lr=1e-4, epochs=1000, batch_size=32, seed=0, task=None):
        self.model_kind = model_kind
        self.constraint = constraint
        self.weight = weight
        self.bounds = bounds
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.activation = activation
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.task = task

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        y = y.reshape(len(y), -1)
        if y.shape != X.shape:
            raise ValueError(f"y must have the shape of X {X.shape}, got {y.shape}")
        spec = ConstraintSpec(self.constraint, self.weight, self.bounds)
        config = TrainConfig(self.task, self.model_kind, spec, lr=self.lr, epochs=self.epochs,
                             batch_size=self.batch_size, seed=self.seed)
        model = build_model(self.model_kind, X.shape[1], seed=self.seed,
                            hidden_layers=self.hidden_layers, hidden_units=self.hidden_units,
                            activation=self.activation)
        result = train(config, (X, y), model=model)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_(X)

    def rollout(self, s0, t_end=100.0, dt=0.1):
        """RK4 trajectories ``(t, states)`` of the fitted field; overflowing rows become inf."""
        check_is_fitted(self, "model_")
        s0 = check_array(np.atleast_2d(s0), dtype=np.float64)
        return rollout(self.model_, s0, t_end, dt)
