"""Numeric core: autodiff tensors, fused kernels, FFT and gradient checking."""
from . import ops
from .backend import get_backend, set_backend, use_backend
from .fft import dft_direct, fft, ifft, inverse_spectrum, spectrum
from .fused import bilinear, ssm_scan, ssm_step
from .gradcheck import GradCheckReport, grad_check
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import ContractError, Param, ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "ops", "get_backend", "set_backend", "use_backend", "fft", "ifft", "dft_direct", "spectrum",
    "inverse_spectrum", "bilinear", "ssm_scan", "ssm_step", "GradCheckReport", "grad_check", "Module",
    "Linear", "MLP", "LayerNorm", "ContractError", "Param", "ShapeError", "Tensor", "as_tensor", "backward",
    "grad_enabled", "no_grad",
]
