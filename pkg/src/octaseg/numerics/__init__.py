from .gradcheck import check_op, grad_check, relative_error
from .ops import (
    ShapeError,
    collapse_conv,
    collapse_conv_backward,
    concat,
    concat_backward,
    conv2d,
    conv2d_backward,
    conv3d,
    conv3d_backward,
    pool2d,
    pool2d_backward,
    relu,
    relu_backward,
    resize_h_linear,
    resize_h_linear_backward,
    softmax,
    softmax_ce,
    uni_pool_h,
    uni_pool_h_backward,
    upsample2d,
    upsample2d_backward,
)
from .optim import Adam, AdamState, Param, adam_step
