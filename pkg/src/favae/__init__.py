"""Ladder time-convolutional VAE for disentangling dynamic factors of
sequential data, with synthetic benchmark datasets and MIG evaluation."""

from .datasets import (
    TrajectoryDataset,
    gen_2d_reaching,
    gen_2d_wavy,
    load_dataset,
    save_dataset,
)
from .estimator import FAVAE, check_sequences
from .metrics import (
    LatentFactorTable,
    MigReport,
    build_latent_table,
    latent_traversal,
    mig,
    mutual_info,
)
from .model import LadderConfig, LadderModel, PointwiseBetaVAE
from .objective import (
    CapacitySchedule,
    KLDecomposition,
    LossReport,
    favae_loss,
    kl_decomposition_estimate,
    kl_diag_gaussian,
    recon_nll,
)
from .tensor import RngStream, Tape, Tensor, backward
from .training import (
    Adam,
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    run_experiment,
    save_checkpoint,
    train,
    train_pointwise,
)

__version__ = "0.1.0"

__all__ = [
    "FAVAE",
    "Adam",
    "CapacitySchedule",
    "Checkpoint",
    "KLDecomposition",
    "LadderConfig",
    "LadderModel",
    "LatentFactorTable",
    "LossReport",
    "MigReport",
    "PointwiseBetaVAE",
    "RngStream",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrajectoryDataset",
    "backward",
    "build_latent_table",
    "check_sequences",
    "favae_loss",
    "gen_2d_reaching",
    "gen_2d_wavy",
    "kl_decomposition_estimate",
    "kl_diag_gaussian",
    "latent_traversal",
    "load_checkpoint",
    "load_dataset",
    "mig",
    "model_from_checkpoint",
    "mutual_info",
    "recon_nll",
    "run_experiment",
    "save_checkpoint",
    "save_dataset",
    "train",
    "train_pointwise",
    "__version__",
]
