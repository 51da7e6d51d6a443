"""Learning ODE dynamics with physics structure imposed through loss-function constraints."""
from .constraints import ConstraintSpec, dissipative_constraint, hamiltonian_constraint
from .estimator import DynamicsRegressor
from .evaluation import EvalReport, aggregate, energy_deviation_rmse
from .models import build_model, load_checkpoint, save_checkpoint
from .physics import SYSTEMS, generate_dataset, get_system
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConstraintSpec", "hamiltonian_constraint", "dissipative_constraint",
    "EvalReport", "aggregate", "energy_deviation_rmse",
    "build_model", "load_checkpoint", "save_checkpoint",
    "SYSTEMS", "generate_dataset", "get_system",
    "TrainConfig", "train",
    "DynamicsRegressor",
]
