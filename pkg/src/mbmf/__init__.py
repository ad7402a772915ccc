"""Matrix factorisation with per-row and per-column magnitude bounds.

Every latent row of W and column of H has a prescribed Euclidean norm, so
each prediction ``(WH)_ij`` stays within ``r_w[i] * r_h[j]`` of zero. The
norms are enforced exactly by optimising over hyperspherical angles.
"""

from .data import SparseObservations, load_triplets, save_triplets
from .magnitudes import PreprocessRecord, prepare
from .optimizer import CENTERED, NONNEGATIVE, TrainConfig, TrainTrace, objective, predict, train
from .persistence import load_model, save_model
from .spherical import AngleState, FactorModel, MagnitudePair, build_factors

__version__ = "0.1.0"

__all__ = [
    "AngleState",
    "CENTERED",
    "FactorModel",
    "MagnitudePair",
    "NONNEGATIVE",
    "PreprocessRecord",
    "SparseObservations",
    "TrainConfig",
    "TrainTrace",
    "build_factors",
    "load_model",
    "load_triplets",
    "objective",
    "predict",
    "prepare",
    "save_model",
    "save_triplets",
    "train",
]
