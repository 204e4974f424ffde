# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution kernels.

Every kernel takes an already zero-padded input. Per output element the
reduction runs over (input channel, kernel row, kernel column) in that
order with a separate multiply and add, so results match the numpy
fallback in ``_fallback.py`` bit for bit. Built with -ffp-contract=off.
"""


ctypedef fused real:
    float
    double


def conv2d_forward(const real[:, :, :, ::1] xpad,
                   const real[:, :, :, ::1] weight,
                   const real[::1] bias,
                   real[:, :, :, ::1] out,
                   int stride, int groups, int o_start, int o_end):
    """Fill ``out[:, o_start:o_end]``; ``bias`` may have length 0."""
    cdef Py_ssize_t n_batch = out.shape[0]
    cdef Py_ssize_t c_out = out.shape[1]
    cdef Py_ssize_t oh = out.shape[2]
    cdef Py_ssize_t ow = out.shape[3]
    cdef Py_ssize_t cin_g = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2]
    cdef Py_ssize_t kw = weight.shape[3]
    cdef Py_ssize_t cout_g = c_out // groups
    cdef bint has_bias = bias.shape[0] > 0
    cdef Py_ssize_t n, o, g, ci, cig, ky, kx, y, x, row
    cdef real wv, b
    cdef const real* src
    cdef real* acc

    with nogil:
        for n in range(n_batch):
            for o in range(o_start, o_end):
                g = o // cout_g
                b = bias[o] if has_bias else 0
                for y in range(oh):
                    acc = &out[n, o, y, 0]
                    for x in range(ow):
                        acc[x] = 0
                    row = y * stride
                    for cig in range(cin_g):
                        ci = g * cin_g + cig
                        for ky in range(kh):
                            for kx in range(kw):
                                wv = weight[o, cig, ky, kx]
                                src = &xpad[n, ci, row + ky, kx]
                                if stride == 1:
                                    for x in range(ow):
                                        acc[x] = acc[x] + wv * src[x]
                                else:
                                    for x in range(ow):
                                        acc[x] = acc[x] + wv * src[x * stride]
                    if has_bias:
                        for x in range(ow):
                            acc[x] = acc[x] + b


def conv2d_backward_input(const real[:, :, :, ::1] grad_out,
                          const real[:, :, :, ::1] weight,
                          real[:, :, :, ::1] grad_xpad,
                          int stride, int groups):
    """Accumulate d(loss)/d(padded input) into a zeroed ``grad_xpad``.

    Contributions to each element arrive in (output channel, ky, kx) order.
    """
    cdef Py_ssize_t n_batch = grad_out.shape[0]
    cdef Py_ssize_t c_out = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2]
    cdef Py_ssize_t ow = grad_out.shape[3]
    cdef Py_ssize_t cin_g = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2]
    cdef Py_ssize_t kw = weight.shape[3]
    cdef Py_ssize_t cout_g = c_out // groups
    cdef Py_ssize_t n, o, g, ci, cig, ky, kx, y, x
    cdef real wv
    cdef const real* go
    cdef real* dst

    with nogil:
        for n in range(n_batch):
            for g in range(groups):
                for cig in range(cin_g):
                    ci = g * cin_g + cig
                    for o in range(g * cout_g, (g + 1) * cout_g):
                        for ky in range(kh):
                            for kx in range(kw):
                                wv = weight[o, cig, ky, kx]
                                for y in range(oh):
                                    go = &grad_out[n, o, y, 0]
                                    dst = &grad_xpad[n, ci, y * stride + ky, kx]
                                    if stride == 1:
                                        for x in range(ow):
                                            dst[x] = dst[x] + wv * go[x]
                                    else:
                                        for x in range(ow):
                                            dst[x * stride] = dst[x * stride] + wv * go[x]


def conv2d_backward_weight(const real[:, :, :, ::1] grad_out,
                           const real[:, :, :, ::1] xpad,
                           real[:, :, :, ::1] grad_weight,
                           int stride, int groups):
    """Overwrite ``grad_weight``; sums run in (n, y, x) order in double."""
    cdef Py_ssize_t n_batch = grad_out.shape[0]
    cdef Py_ssize_t c_out = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2]
    cdef Py_ssize_t ow = grad_out.shape[3]
    cdef Py_ssize_t cin_g = grad_weight.shape[1]
    cdef Py_ssize_t kh = grad_weight.shape[2]
    cdef Py_ssize_t kw = grad_weight.shape[3]
    cdef Py_ssize_t cout_g = c_out // groups
    cdef Py_ssize_t n, o, g, ci, cig, ky, kx, y, x
    cdef double s0, s1, s2, s3
    cdef const real* go
    cdef const real* src

    with nogil:
        for o in range(c_out):
            g = o // cout_g
            for cig in range(cin_g):
                ci = g * cin_g + cig
                for ky in range(kh):
                    for kx in range(kw):
                        # four fixed interleaved partial sums, combined in a fixed order
                        s0 = 0
                        s1 = 0
                        s2 = 0
                        s3 = 0
                        for n in range(n_batch):
                            for y in range(oh):
                                go = &grad_out[n, o, y, 0]
                                src = &xpad[n, ci, y * stride + ky, kx]
                                x = 0
                                if stride == 1:
                                    while x + 4 <= ow:
                                        s0 = s0 + <double>go[x] * src[x]
                                        s1 = s1 + <double>go[x + 1] * src[x + 1]
                                        s2 = s2 + <double>go[x + 2] * src[x + 2]
                                        s3 = s3 + <double>go[x + 3] * src[x + 3]
                                        x = x + 4
                                while x < ow:
                                    s0 = s0 + <double>go[x] * src[x * stride]
                                    x = x + 1
                        grad_weight[o, cig, ky, kx] = <real>((s0 + s1) + (s2 + s3))
