"""
NAME
layers

DESCRIPTION
Building blocks of the registration network with their exact backward passes. Feature maps are arrays of
shape (C, nx, ny, nz); a batch is always a single image pair.

FUNCTIONS
conv3d
conv3d_backward
leaky_relu
leaky_relu_backward
avg_pool2
avg_pool2_backward
upsample
upsample_backward
init_conv
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from ..defaultvalues import default_leaky_slope
from ..volume import resample_array, resample_array_adjoint

KERNEL = 3


def _windows(x):
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    return sliding_window_view(padded, (KERNEL, KERNEL, KERNEL), axis=(1, 2, 3))


def conv3d(x, weight, bias=None):
    """
    3x3x3 convolution (cross-correlation) with stride 1 and zero padding 1.

    :param x:       array of shape (C_in, nx, ny, nz)
    :param weight:  array of shape (C_out, C_in, 3, 3, 3)
    :param bias:    array of shape (C_out,) or None
    :return:        array of shape (C_out, nx, ny, nz)
    """
    if x.shape[0] != weight.shape[1]:
        raise ValueError("Expected {} input channels, got {}".format(weight.shape[1], x.shape[0]))
    y = np.tensordot(weight, _windows(x), axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    if bias is not None:
        y += bias.reshape(-1, 1, 1, 1)
    return y


def conv3d_backward(x, weight, grad):
    """
    Gradients of conv3d with respect to its input, weight and bias.

    The input gradient is the correlation of the output gradient with the kernel flipped in all three axes
    and with input and output channels swapped.

    :return:    (grad_x, grad_weight, grad_bias)
    """
    grad_bias = grad.sum(axis=(1, 2, 3))
    grad_weight = np.tensordot(grad, _windows(x), axes=([1, 2, 3], [1, 2, 3]))
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    grad_x = conv3d(grad, flipped)
    return grad_x, grad_weight, grad_bias


def leaky_relu(x, slope=default_leaky_slope):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x, grad, slope=default_leaky_slope):
    """Gradient of leaky_relu, given its input x."""
    return np.where(x > 0, grad, slope * grad)


def avg_pool2(x):
    """Average over non-overlapping 2x2x2 blocks; every spatial size must be even."""
    c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError("Expected even spatial sizes for pooling, got {}".format((nx, ny, nz)))
    return x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(2, 4, 6))


def avg_pool2_backward(grad):
    spread = grad / 8
    for axis in (1, 2, 3):
        spread = np.repeat(spread, 2, axis=axis)
    return spread


def upsample(x, shape):
    """Trilinear align-corners resampling of feature maps to a spatial shape."""
    return resample_array(x, shape)


def upsample_backward(grad, shape):
    """Transpose of upsample, back to the spatial shape the features had."""
    return resample_array_adjoint(grad, shape)


def init_conv(rng, c_out, c_in, zero=False, dtype=np.float32):
    """
    Fan-in scaled normal weights (std sqrt(2 / fan_in)) and zero biases.

    :param rng:     numpy Generator
    :param zero:    zero weights as well, for registration heads
    :return:        (weight, bias)
    """
    weight = np.zeros((c_out, c_in, KERNEL, KERNEL, KERNEL), dtype=dtype)
    if not zero:
        fan_in = c_in * KERNEL ** 3
        weight[...] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=weight.shape)
    return weight, np.zeros(c_out, dtype=dtype)
