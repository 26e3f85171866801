"""Federated trajectory recovery simulator."""

from .diffcore import ParameterVector
from .fedsim import FedConfig, aggregate, run_rounds, sample_clients, train_teacher, update_lambda
from .metrics import EvalReport, evaluate, mae_rmse, recall_precision
from .model import LteConfig, LteModel, recover, recover_many
from .roadnet import GridSpec, RoadNetwork, generate_grid_network
from .trajdata import (ClientDataset, IncompleteTrajectory, MapMatchedTrajectory, RawTrajectory,
                       TrajPair, generate_synthetic_trajectories, hmm_map_match, partition_clients)

__version__ = "0.1.0"
