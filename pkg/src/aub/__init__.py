"""Domain alignment by minimizing the alignment upper bound (AUB).

k invertible flows map each domain into a shared latent space where one
density model is fitted; training minimizes an upper bound on the
generalized Jensen-Shannon divergence between the domains.
"""

from .alignment import AlignmentModel, Mode, TrainConfig, TrainingDiverged, aub_loss, aub_metric, train
from .density import DiagonalGaussian, FixedStandardNormal, FlowDensity, GaussianMixture
from .evaluation import energy_distance, evaluate, parameter_count, translate
from .flows import AffineCouplingLayer, AffineFlow, FlowSequence, IdentityFlow, make_realnvp
from .numeric import NonFiniteError, ParameterStore, make_rng

__all__ = [
    "AffineCouplingLayer",
    "AffineFlow",
    "AlignmentModel",
    "DiagonalGaussian",
    "FixedStandardNormal",
    "FlowDensity",
    "FlowSequence",
    "GaussianMixture",
    "IdentityFlow",
    "Mode",
    "NonFiniteError",
    "ParameterStore",
    "TrainConfig",
    "TrainingDiverged",
    "aub_loss",
    "aub_metric",
    "energy_distance",
    "evaluate",
    "make_realnvp",
    "make_rng",
    "parameter_count",
    "train",
    "translate",
]

__version__ = "0.1.0"
