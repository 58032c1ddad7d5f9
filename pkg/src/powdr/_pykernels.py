"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built, or when ``POWDR_BACKEND=python``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(x, K, stride):
    p = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (K, K, K), axis=(2, 3, 4))
    # (N, C, OX, OY, OZ, K, K, K)
    return win[:, :, ::stride, ::stride, ::stride]


def conv3d_forward(x, w, b, stride):
    """Zero-padded 3D cross-correlation, kernel K (odd), padding K // 2."""
    x = np.asarray(x, dtype=np.float64)
    K = w.shape[2]
    cols = _cols(x, K, stride)
    out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, 4, 1)
    out += np.asarray(b, dtype=np.float64)[None, :, None, None, None]
    return np.ascontiguousarray(out)


def conv3d_backward(x, w, gout, stride, need_input_grad=True):
    """Gradients of conv3d_forward: returns (grad_x or None, grad_w, grad_b)."""
    x = np.asarray(x, dtype=np.float64)
    gout = np.asarray(gout, dtype=np.float64)
    K = w.shape[2]
    p = K // 2
    cols = _cols(x, K, stride)
    gw = np.tensordot(gout, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gb = gout.sum(axis=(0, 2, 3, 4))
    gx = None
    if need_input_grad:
        N, C, X, Y, Z = x.shape
        OX, OY, OZ = gout.shape[2:]
        s = stride
        # (N, OX, OY, OZ, C, K, K, K)
        gcols = np.tensordot(gout, w, axes=([1], [0]))
        gxp = np.zeros((N, C, X + 2 * p, Y + 2 * p, Z + 2 * p))
        for kx in range(K):
            for ky in range(K):
                for kz in range(K):
                    gxp[:, :,
                        kx:kx + s * (OX - 1) + 1:s,
                        ky:ky + s * (OY - 1) + 1:s,
                        kz:kz + s * (OZ - 1) + 1:s] += np.moveaxis(gcols[..., kx, ky, kz], 4, 1)
        gx = np.ascontiguousarray(gxp[:, :, p:p + X, p:p + Y, p:p + Z])
    return gx, gw, gb


def grow_region(allowed, seed, target, draws):
    """Random-frontier 6-connected growth from ``seed`` inside ``allowed``.

    Mirrors the compiled kernel step for step, so both produce the same mask
    for the same draws.
    """
    allowed = np.ascontiguousarray(allowed, dtype=np.uint8)
    H, W, D = allowed.shape
    okf = allowed.reshape(-1)
    state = np.zeros(H * W * D, dtype=np.uint8)
    if target <= 0:
        return state.reshape(H, W, D)
    WD = W * D
    frontier = []
    state[seed] = 2
    count = 1
    v = seed
    step = 0
    while True:
        x, rem = divmod(v, WD)
        y, z = divmod(rem, D)
        for ok, nb in (
            (x > 0, v - WD), (x < H - 1, v + WD),
            (y > 0, v - D), (y < W - 1, v + D),
            (z > 0, v - 1), (z < D - 1, v + 1),
        ):
            if ok and okf[nb] and state[nb] == 0:
                state[nb] = 1
                frontier.append(nb)
        if count >= target or not frontier:
            break
        j = min(int(draws[step] * len(frontier)), len(frontier) - 1)
        step += 1
        v = frontier[j]
        frontier[j] = frontier[-1]
        frontier.pop()
        state[v] = 2
        count += 1
    return (state == 2).astype(np.uint8).reshape(H, W, D)
