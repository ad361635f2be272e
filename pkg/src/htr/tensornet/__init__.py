from htr.tensornet.autodiff import Param, Tensor
from htr.tensornet.checkpoint import load_checkpoint, save_checkpoint
from htr.tensornet.distributions import DiagGaussianHead, sample_gaussian_tanh
from htr.tensornet.nn import Mlp, MlpSpec
from htr.tensornet.optim import Adam

__all__ = [
    "Adam",
    "DiagGaussianHead",
    "Mlp",
    "MlpSpec",
    "Param",
    "Tensor",
    "load_checkpoint",
    "sample_gaussian_tanh",
    "save_checkpoint",
]
