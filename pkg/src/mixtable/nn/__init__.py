from . import tensor as ops
from .gradcheck import check_gradients
from .layers import (
    MLP,
    LayerNorm,
    Linear,
    MultiHeadSelfAttention,
    ParameterStore,
    ResidualBlock,
    TransformerConfig,
    TransformerEncoder,
    scaled_dot_attention,
)
from .optim import Adam, adam_step, clip_grad_norm, cosine_lr
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "Adam",
    "LayerNorm",
    "Linear",
    "MLP",
    "MultiHeadSelfAttention",
    "ParameterStore",
    "ResidualBlock",
    "Tensor",
    "TransformerConfig",
    "TransformerEncoder",
    "adam_step",
    "as_tensor",
    "backward",
    "check_gradients",
    "clip_grad_norm",
    "cosine_lr",
    "ops",
    "scaled_dot_attention",
]
