"""Pure numpy periodic convolution (im2col + matmul).

Used when the compiled extension is unavailable, and as the reference the
extension is benchmarked and tested against.
"""

import numpy as np


def _offsets(k: int, dilation: int) -> np.ndarray:
    return (np.arange(k) - k // 2) * dilation


def _im2col(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    off = _offsets(k, dilation)
    if x.ndim == 3:
        n = x.shape[1]
        idx = (np.arange(n)[:, None] + off[None, :]) % n
        return x[:, idx, :]
    n, m = x.shape[1:3]
    ix = (np.arange(n)[:, None] + off[None, :]) % n
    iy = (np.arange(m)[:, None] + off[None, :]) % m
    return x[:, ix[:, None, :, None], iy[None, :, None, :], :]


def conv_forward(x: np.ndarray, w: np.ndarray, dilation: int) -> np.ndarray:
    k, cout = w.shape[0], w.shape[-1]
    cols = _im2col(x, k, dilation)
    rows = int(np.prod(x.shape[:-1]))
    out = cols.reshape(rows, -1) @ w.reshape(-1, cout)
    return out.reshape(x.shape[:-1] + (cout,))


def conv_backward(x, w, gy, dilation, need_input=True):
    k, cin, cout = w.shape[0], w.shape[-2], w.shape[-1]
    rows = int(np.prod(x.shape[:-1]))
    cols = _im2col(x, k, dilation).reshape(rows, -1)
    g2 = gy.reshape(rows, cout)
    gw = (cols.T @ g2).reshape(w.shape)
    if not need_input:
        return None, gw
    gcols = (g2 @ w.reshape(-1, cout).T).reshape(x.shape[:-1] + w.shape[:-1])
    off = _offsets(k, dilation)
    gx = np.zeros_like(x)
    if x.ndim == 3:
        for j in range(k):
            gx += np.roll(gcols[:, :, j, :], off[j], axis=1)
    else:
        for j1 in range(k):
            for j2 in range(k):
                gx += np.roll(gcols[:, :, :, j1, j2, :], (off[j1], off[j2]), axis=(1, 2))
    return gx, gw
