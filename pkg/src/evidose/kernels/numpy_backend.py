"""Pure-numpy reference kernels for the rank-4 grid operations.

Convolution is evaluated as a GEMM over an im2col patch matrix, so the heavy
lifting lands in BLAS. The compiled backend in `_core` implements the same
contracts with explicit loops; the two are cross-checked in the test suite.

Shape conventions:
    x   (C_in, D, H, W)           activation grid
    w   (C_out, C_in, kd, kh, kw) convolution kernel
    b   (C_out,)                  bias
    gy  (C_out, Do, Ho, Wo)       gradient w.r.t. the convolution output
"""

import numpy as np


def _im2col(x, kd, kh, kw, pd, ph, pw):
    """Patch matrix of shape (C*kd*kh*kw, Do*Ho*Wo) for stride-1 convolution."""
    C, D, H, W = x.shape
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    Do = D + 2 * pd - kd + 1
    Ho = H + 2 * ph - kh + 1
    Wo = W + 2 * pw - kw + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(C, kd, kh, kw, Do, Ho, Wo),
        strides=(s[0], s[1], s[2], s[3], s[1], s[2], s[3]),
        writeable=False,
    )
    return view.reshape(C * kd * kh * kw, Do * Ho * Wo), (Do, Ho, Wo)


def conv3d_forward(x, w, b, pad):
    Cout, Cin, kd, kh, kw = w.shape
    cols, (Do, Ho, Wo) = _im2col(x, kd, kh, kw, pad, pad, pad)
    y = w.reshape(Cout, -1) @ cols
    y += b[:, None]
    return np.ascontiguousarray(y.reshape(Cout, Do, Ho, Wo))


def conv3d_backward(x, w, gy, pad, need_input_grad=True):
    Cout, Cin, kd, kh, kw = w.shape
    cols, _ = _im2col(x, kd, kh, kw, pad, pad, pad)
    gy_mat = gy.reshape(Cout, -1)
    gw = (gy_mat @ cols.T).reshape(w.shape)
    gb = gy_mat.sum(axis=1, dtype=np.float64).astype(x.dtype)
    if need_input_grad:
        # full correlation of gy with the flipped, channel-transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gcols, _ = _im2col(gy, kd, kh, kw, kd - 1 - pad, kh - 1 - pad, kw - 1 - pad)
        gx = (wt.reshape(Cin, -1) @ gcols).reshape(x.shape)
        gx = np.ascontiguousarray(gx)
    else:
        gx = None
    return gx, np.ascontiguousarray(gw), gb


def maxpool3d_forward(x, window):
    C, D, H, W = x.shape
    n = window
    D2, H2, W2 = D // n, H // n, W // n
    v = (
        x.reshape(C, D2, n, H2, n, W2, n)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(C, D2, H2, W2, n * n * n)
    )
    # argmax returns the first maximal offset; window flattening is (d, h, w)
    # major-to-minor, so ties resolve to the first index in scan order
    k = v.argmax(axis=-1)
    y = np.ascontiguousarray(np.take_along_axis(v, k[..., None], axis=-1)[..., 0])
    dd, hh, ww = np.unravel_index(k, (n, n, n))
    d2, h2, w2 = np.meshgrid(
        np.arange(D2), np.arange(H2), np.arange(W2), indexing="ij"
    )
    idx = ((d2 * n + dd) * H + (h2 * n + hh)) * W + (w2 * n + ww)
    return y, np.ascontiguousarray(idx.astype(np.int64))


def maxpool3d_backward(gy, idx, spatial_shape):
    C = gy.shape[0]
    D, H, W = spatial_shape
    gx = np.zeros((C, D * H * W), dtype=gy.dtype)
    # windows tile the input, so indices within a channel are unique and a
    # fancy assignment is a safe scatter-add
    gx[np.arange(C)[:, None], idx.reshape(C, -1)] = gy.reshape(C, -1)
    return gx.reshape(C, D, H, W)
