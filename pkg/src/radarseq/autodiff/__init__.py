from .tensor import (
    BCE_EPS,
    NumericError,
    Tensor,
    add,
    as_tensor,
    bce_loss,
    concat,
    conv2d,
    dense,
    getitem,
    is_grad_enabled,
    lstm_sequence,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    set_finite_check,
    sigmoid,
    sub,
    sum_,
    take_rows,
    tanh,
    transpose,
)
from .optim import AdamState, accumulate_gradients, adam_step, clip_grad_norm
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, max_rel_error, numerical_grad
