"""Mixture density networks trained with natural-gradient EM."""

from ngem.diffnet import DenseNet, FreeMixture, init_net, forward, backward
from ngem.mixture import (
    MixtureParams,
    DistGradients,
    head_transform,
    head_backward,
    log_mixture_density,
    nll_loss,
    sgem_loss,
    ngem_loss,
    responsibilities,
    natural_gradient,
)
from ngem.optim import Optimizer
from ngem.data import Dataset, gen_two_gaussians, gen_two_sinusoids, load_csv
from ngem.harness import RunConfig, train

__version__ = "0.1.0"
