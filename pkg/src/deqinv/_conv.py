"""Same-size 2-D correlation with half-sample symmetric padding, and its adjoints.

All arrays are batched ``(N, C, H, W)``; weights are ``(C_out, C_in, k, k)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    if p > x.shape[-1] or p > x.shape[-2]:
        raise ValueError(f"padding {p} exceeds image size {x.shape[-2:]}")
    # same as np.pad(mode="symmetric"), without its per-call overhead
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = x
    out[:, :, :p, p:p + w] = x[:, :, :p][:, :, ::-1]
    out[:, :, p + h:, p:p + w] = x[:, :, h - p:][:, :, ::-1]
    out[..., :p] = out[..., p:2 * p][..., ::-1]
    out[..., p + w:] = out[..., w:w + p][..., ::-1]
    return out


def pad_adjoint(xp: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of :func:`pad`: fold the mirrored border back onto the interior."""
    if p == 0:
        return xp
    h = xp.shape[-2] - 2 * p
    w = xp.shape[-1] - 2 * p
    out = xp[..., p:p + h, :].copy()
    out[..., :p, :] += np.flip(xp[..., :p, :], axis=-2)
    out[..., h - p:, :] += np.flip(xp[..., p + h:, :], axis=-2)
    res = out[..., p:p + w].copy()
    res[..., :p] += np.flip(out[..., :p], axis=-1)
    res[..., w - p:] += np.flip(out[..., p + w:], axis=-1)
    return res


def correlate_valid(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    # im2col then one matmul; einsum over a window view is slow for few channels
    k = w.shape[-1]
    n, c, hp, wp = xp.shape
    h, wd = hp - k + 1, wp - k + 1
    cols = np.empty((n, c, k, k, h, wd))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + wd]
    out = w.reshape(w.shape[0], -1) @ cols.reshape(n, c * k * k, h * wd)
    return out.reshape(n, w.shape[0], h, wd)


def correlate_valid_transpose(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`correlate_valid` with respect to the padded input."""
    k = w.shape[-1]
    if k == 1:
        return np.einsum("nohw,oc->nchw", g, w[:, :, 0, 0], optimize=True)
    n, o, h, wd = g.shape
    gp = np.zeros((n, o, h + 2 * (k - 1), wd + 2 * (k - 1)))
    gp[:, :, k - 1:k - 1 + h, k - 1:k - 1 + wd] = g
    wt = np.flip(w, axis=(2, 3)).transpose(1, 0, 2, 3)
    return correlate_valid(gp, wt)


def correlate_weight_grad(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.einsum("nohw,nchwij->ocij", g, win, optimize=True)


def conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return correlate_valid(pad(x, w.shape[-1] // 2), w)


def conv_same_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return pad_adjoint(correlate_valid_transpose(g, w), w.shape[-1] // 2)
