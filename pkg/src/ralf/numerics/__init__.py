"""Dense tensor kernel with reverse-mode autodiff, AdamW, and sampling."""

from . import functional
from .checkpoint import CheckpointError
from .nn import (
    DecoderLayer,
    Embedding,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerEncoder,
    causal_mask,
    padding_mask,
)
from .optim import AdamW, NonFiniteGradient, adamw_step, clip_grad_norm, step_lr
from .sampling import EmptyDecodingSpace, topk_sample, topk_sample_batch
from .tensor import Parameter, ShapeError, Tensor, no_grad

__all__ = [
    "AdamW",
    "CheckpointError",
    "DecoderLayer",
    "Embedding",
    "EmptyDecodingSpace",
    "EncoderLayer",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "NonFiniteGradient",
    "Parameter",
    "ShapeError",
    "Tensor",
    "TransformerEncoder",
    "adamw_step",
    "causal_mask",
    "clip_grad_norm",
    "functional",
    "no_grad",
    "padding_mask",
    "step_lr",
    "topk_sample",
    "topk_sample_batch",
]
