"""Pure-numpy 3D convolution kernels.

All kernels take an already padded input ``(N, C, Dp, Hp, Wp)`` and a kernel
``(O, C, kd, kh, kw)``. The loop runs over kernel offsets, so each iteration
is one tensordot over the channel axis; this keeps memory at one strided view
per offset instead of a full im2col buffer.
"""
import numpy as np


def _out_extent(n_in, k, stride):
    return (n_in - k) // stride + 1


def _window(xp, kd, kh, kw, out_shape, stride):
    do, ho, wo = out_shape
    return xp[
        :,
        :,
        kd : kd + stride * (do - 1) + 1 : stride,
        kh : kh + stride * (ho - 1) + 1 : stride,
        kw : kw + stride * (wo - 1) + 1 : stride,
    ]


def conv3d_forward(xp, w, stride):
    n, c, dp, hp, wp = xp.shape
    o, _, kd_, kh_, kw_ = w.shape
    out_shape = (
        _out_extent(dp, kd_, stride),
        _out_extent(hp, kh_, stride),
        _out_extent(wp, kw_, stride),
    )
    acc = np.zeros((o, n) + out_shape)
    for kd in range(kd_):
        for kh in range(kh_):
            for kw in range(kw_):
                xs = _window(xp, kd, kh, kw, out_shape, stride)
                acc += np.tensordot(w[:, :, kd, kh, kw], xs, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))


def conv3d_backward_input(g, w, padded_shape, stride):
    o, c, kd_, kh_, kw_ = w.shape
    out_shape = g.shape[2:]
    gx = np.zeros(padded_shape)
    for kd in range(kd_):
        for kh in range(kh_):
            for kw in range(kw_):
                contrib = np.tensordot(w[:, :, kd, kh, kw], g, axes=([0], [1]))
                view = _window(gx, kd, kh, kw, out_shape, stride)
                view += contrib.transpose(1, 0, 2, 3, 4)
    return gx


def conv3d_backward_weight(g, xp, kernel_shape, stride):
    o, c, kd_, kh_, kw_ = kernel_shape
    out_shape = g.shape[2:]
    gw = np.zeros(kernel_shape)
    for kd in range(kd_):
        for kh in range(kh_):
            for kw in range(kw_):
                xs = _window(xp, kd, kh, kw, out_shape, stride)
                gw[:, :, kd, kh, kw] = np.tensordot(
                    g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
    return gw
