"""Saddle lines, channels to infinity and their limits in small MLP loss landscapes."""

from .net import Dataset, LossFunction, NetworkParams, forward, loss_gradient, loss_hessian, mse_loss
from .flow import FlowConfig, FlowResult, integrate_flow, integrate_gradient_flow
from .data import TargetSpec, glorot_normal_init, make_dataset

__version__ = "0.1.0"
