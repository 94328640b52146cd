"""Minimal reverse-mode autodiff on numpy arrays."""
from .nn import Embedding, LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy_loss,
    dropout,
    embedding_lookup,
    gelu,
    get_default_dtype,
    l1_loss,
    layer_norm,
    masked_fill_rows,
    matmul,
    mean,
    mse_loss,
    mul,
    neg,
    relu,
    reshape,
    set_default_dtype,
    slice_,
    softmax,
    square,
    straight_through,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "Embedding", "GraphError", "LayerNorm", "Linear", "Module",
    "NonFiniteError", "Parameter", "ShapeError", "Tensor", "abs_", "adam_step", "add",
    "as_tensor", "backward", "concat", "cross_entropy_loss", "dropout", "embedding_lookup",
    "gelu", "get_default_dtype", "l1_loss", "layer_norm", "masked_fill_rows", "matmul",
    "mean", "mse_loss", "mul", "neg", "relu", "reshape", "set_default_dtype", "slice_",
    "softmax", "square", "straight_through", "sub", "sum_", "transpose",
]
