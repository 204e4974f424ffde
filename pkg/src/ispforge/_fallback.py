"""Pure-numpy versions of the convolution kernels.

Same signatures and reduction order as the compiled ``_kernels`` module:
the forward pass and the input gradient are bit-identical to it, the
weight gradient agrees to floating-point rounding.
"""

import numpy as np


def conv2d_forward(xpad, weight, bias, out, stride, groups, o_start, o_end):
    n_batch, c_out, oh, ow = out.shape
    cin_g, kh, kw = weight.shape[1:]
    cout_g = c_out // groups
    acc = np.zeros((n_batch, o_end - o_start, oh, ow), dtype=out.dtype)
    tmp = np.empty_like(acc)
    ys = slice(0, (oh - 1) * stride + 1, stride)
    for g in range(o_start // cout_g, (o_end - 1) // cout_g + 1):
        lo = max(o_start, g * cout_g)
        hi = min(o_end, (g + 1) * cout_g)
        a = acc[:, lo - o_start:hi - o_start]
        t = tmp[:, lo - o_start:hi - o_start]
        for cig in range(cin_g):
            plane = xpad[:, g * cin_g + cig]
            for ky in range(kh):
                for kx in range(kw):
                    w = weight[lo:hi, cig, ky, kx][None, :, None, None]
                    src = plane[:, ky + ys.start:ky + ys.stop:stride,
                                kx:kx + (ow - 1) * stride + 1:stride]
                    np.multiply(w, src[:, None], out=t)
                    np.add(a, t, out=a)
    if len(bias):
        acc += bias[o_start:o_end][None, :, None, None]
    out[:, o_start:o_end] = acc


def conv2d_backward_input(grad_out, weight, grad_xpad, stride, groups):
    n_batch, c_out, oh, ow = grad_out.shape
    cin_g, kh, kw = weight.shape[1:]
    cout_g = c_out // groups
    for g in range(groups):
        dst_all = grad_xpad[:, g * cin_g:(g + 1) * cin_g]
        for o in range(g * cout_g, (g + 1) * cout_g):
            go = grad_out[:, o][:, None]
            for ky in range(kh):
                for kx in range(kw):
                    w = weight[o, :, ky, kx][None, :, None, None]
                    dst = dst_all[:, :, ky:ky + (oh - 1) * stride + 1:stride,
                                  kx:kx + (ow - 1) * stride + 1:stride]
                    dst += w * go


def conv2d_backward_weight(grad_out, xpad, grad_weight, stride, groups):
    n_batch, c_out, oh, ow = grad_out.shape
    cin_g, kh, kw = grad_weight.shape[1:]
    cout_g = c_out // groups
    go64 = grad_out.astype(np.float64)
    for g in range(groups):
        gsl = go64[:, g * cout_g:(g + 1) * cout_g]
        xs = xpad[:, g * cin_g:(g + 1) * cin_g]
        for ky in range(kh):
            for kx in range(kw):
                patch = xs[:, :, ky:ky + (oh - 1) * stride + 1:stride,
                           kx:kx + (ow - 1) * stride + 1:stride]
                grad_weight[g * cout_g:(g + 1) * cout_g, :, ky, kx] = np.tensordot(
                    gsl, patch.astype(np.float64), axes=((0, 2, 3), (0, 2, 3)))
