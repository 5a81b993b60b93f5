from .tensor import (
    Tensor, ShapeError, float64_eval,
    add, sub, mul, matmul, concat, slice_, reshape, transpose, sum_, mean,
    sigmoid, gelu, softplus, log, exp, cos, sin, softmax, log_softmax,
    layer_norm, embedding_gather, l2_norm, gather_sum, scale_rows,
    broadcast_rows,
)
from .optim import AdamW, MissingGradError
from .gradcheck import grad_check
from .bundle import ModelBundle
