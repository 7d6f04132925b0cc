"""Prototypical few-shot segmentation lab with a neural-ODE feature block.

Subpackages: tensor (autodiff numerics), ode (Runge-Kutta feature dynamics),
model (prototype segmentation), attacks (FGSM/PGD/SMIA), data (synthetic
episodes), harness (training, evaluation, experiments).
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
