"""Joint drift/volatility entropic bridge solver between sample sets."""

from .datasets import DatasetSpec, SampleBatch, generate, train_test_split
from .evaluation import W2Result, ecdf_distance, w2_exact, w2_subsampled
from .potential import (
    ConditionalCoupling,
    GmmPotential,
    conditional_coupling,
    drift,
    forward_map,
    log_h,
    recover_x,
    sample_conditional,
)
from .sampler import Trajectory, export_trajectories, infer, simulate_y_sde
from .trainer import (
    BridgeSample,
    SbbConfig,
    TrainReport,
    TrainingDivergedError,
    dsm_loss,
    sample_bridge,
    train,
    train_beta_large,
)
from .transport_net import TransportNet, ZRegressionBatch, z_forward, z_loss

__all__ = [
    "BridgeSample",
    "ConditionalCoupling",
    "DatasetSpec",
    "GmmPotential",
    "SampleBatch",
    "SbbConfig",
    "TrainReport",
    "TrainingDivergedError",
    "Trajectory",
    "TransportNet",
    "W2Result",
    "ZRegressionBatch",
    "conditional_coupling",
    "drift",
    "dsm_loss",
    "ecdf_distance",
    "export_trajectories",
    "forward_map",
    "generate",
    "infer",
    "log_h",
    "recover_x",
    "sample_bridge",
    "sample_conditional",
    "simulate_y_sde",
    "train",
    "train_beta_large",
    "train_test_split",
    "w2_exact",
    "w2_subsampled",
    "z_forward",
    "z_loss",
]

__version__ = "0.1.0"
