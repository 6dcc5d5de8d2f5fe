"""Dense tensors, reverse-mode autodiff and the small set of layers the captioner needs."""

from .checkpoint import MAGIC, load, loads, dumps, save
from .layers import (
    FFN,
    GLU,
    Embedding,
    LayerNorm,
    Linear,
    LSTMCell,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    TransformerBlock,
    ffn,
    glu,
    linear,
    lstm_cell,
)
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    cross_entropy_from_logits,
    debug_checks,
    embedding_lookup,
    exp,
    index,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mean_pool,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    sigmoid,
    sigmoid_bce,
    softmax,
    stack,
    stop_gradient,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
