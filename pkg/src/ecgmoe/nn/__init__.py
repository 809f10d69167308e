from .core import Module, Parameter, conv1d_forward, conv1d_backward, linear_forward, linear_backward, softmax
from .gradcheck import GradCheckReport, grad_check
from .layers import Conv1d, Linear, LoraLayer, MultiHeadAttention, lora_forward
from .losses import bce_with_logits, cross_entropy, mae, nt_xent

__all__ = [
    "Module", "Parameter", "conv1d_forward", "conv1d_backward", "linear_forward", "linear_backward",
    "softmax", "GradCheckReport", "grad_check", "Conv1d", "Linear", "LoraLayer", "MultiHeadAttention",
    "lora_forward", "bce_with_logits", "cross_entropy", "mae", "nt_xent",
]
