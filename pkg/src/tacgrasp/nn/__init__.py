from .core import (
    AdamState,
    AttentionParams,
    LinearLayer,
    adam_step,
    attention_backward,
    attention_forward,
    init_attention,
    init_linear,
    max_rel_err,
    mlp_backward,
    mlp_forward,
    mse_loss,
    numeric_grad,
    sgd_step,
    softmax_rows,
)
from .modelfile import load_model, save_model

__all__ = [
    "AdamState",
    "AttentionParams",
    "LinearLayer",
    "adam_step",
    "attention_backward",
    "attention_forward",
    "init_attention",
    "init_linear",
    "load_model",
    "max_rel_err",
    "mlp_backward",
    "mlp_forward",
    "mse_loss",
    "numeric_grad",
    "save_model",
    "sgd_step",
    "softmax_rows",
]
