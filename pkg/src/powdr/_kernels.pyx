# cython: language_level=3
"""Compiled kernels: im2col/col2im 3D convolution on top of BLAS dgemm, and
random-frontier region growing.

Every routine here has a numpy twin in ``powdr._pykernels`` with the same
signature. Results agree to rounding for the convolutions and exactly for
region growing.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline Py_ssize_t _out_len(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (n + 2 * p - k) // s + 1


cdef void _im2col(const double[:, :, :, ::1] x, double[:, ::1] cols,
                  Py_ssize_t K, Py_ssize_t s, Py_ssize_t p,
                  Py_ssize_t OX, Py_ssize_t OY, Py_ssize_t OZ) noexcept nogil:
    cdef Py_ssize_t C = x.shape[0], X = x.shape[1], Y = x.shape[2], Z = x.shape[3]
    cdef Py_ssize_t c, kx, ky, kz, ox, oy, oz, ix, iy, iz, row, col
    for c in range(C):
        for kx in range(K):
            for ky in range(K):
                for kz in range(K):
                    row = ((c * K + kx) * K + ky) * K + kz
                    col = 0
                    for ox in range(OX):
                        ix = ox * s + kx - p
                        for oy in range(OY):
                            iy = oy * s + ky - p
                            if ix < 0 or ix >= X or iy < 0 or iy >= Y:
                                for oz in range(OZ):
                                    cols[row, col] = 0.0
                                    col += 1
                                continue
                            for oz in range(OZ):
                                iz = oz * s + kz - p
                                if iz < 0 or iz >= Z:
                                    cols[row, col] = 0.0
                                else:
                                    cols[row, col] = x[c, ix, iy, iz]
                                col += 1


cdef void _col2im(const double[:, ::1] cols, double[:, :, :, ::1] g,
                  Py_ssize_t K, Py_ssize_t s, Py_ssize_t p,
                  Py_ssize_t OX, Py_ssize_t OY, Py_ssize_t OZ) noexcept nogil:
    cdef Py_ssize_t C = g.shape[0], X = g.shape[1], Y = g.shape[2], Z = g.shape[3]
    cdef Py_ssize_t c, kx, ky, kz, ox, oy, oz, ix, iy, iz, row, col
    for c in range(C):
        for kx in range(K):
            for ky in range(K):
                for kz in range(K):
                    row = ((c * K + kx) * K + ky) * K + kz
                    col = 0
                    for ox in range(OX):
                        ix = ox * s + kx - p
                        for oy in range(OY):
                            iy = oy * s + ky - p
                            if ix < 0 or ix >= X or iy < 0 or iy >= Y:
                                col += OZ
                                continue
                            for oz in range(OZ):
                                iz = oz * s + kz - p
                                if iz >= 0 and iz < Z:
                                    g[c, ix, iy, iz] += cols[row, col]
                                col += 1


def conv3d_forward(x, w, b, int stride):
    """Zero-padded 3D cross-correlation, kernel K (odd), padding K // 2."""
    cdef const double[:, :, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[1]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2], p = K // 2, s = stride
    cdef Py_ssize_t OX = _out_len(xv.shape[2], K, s, p)
    cdef Py_ssize_t OY = _out_len(xv.shape[3], K, s, p)
    cdef Py_ssize_t OZ = _out_len(xv.shape[4], K, s, p)
    cdef int P = OX * OY * OZ, Kd = C * K * K * K, On = O
    out_arr = np.empty((N, O, OX, OY, OZ), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef double[:, ::1] cols = np.empty((Kd, P), dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double one = 1.0, zero = 0.0
    cdef char trans_n = b'N'
    cdef Py_ssize_t n, o, i, j, k
    for n in range(N):
        with nogil:
            _im2col(xv[n], cols, K, s, p, OX, OY, OZ)
            # row-major out[n] (O, P) = W (O, Kd) @ cols (Kd, P)
            dgemm(&trans_n, &trans_n, &P, &On, &Kd, &one, &cols[0, 0], &P,
                  <double*>&wv[0, 0], &Kd, &zero, &out[n, 0, 0, 0, 0], &P)
            for o in range(O):
                for i in range(OX):
                    for j in range(OY):
                        for k in range(OZ):
                            out[n, o, i, j, k] += bv[o]
    return out_arr


def conv3d_backward(x, w, gout, int stride, bint need_input_grad=True):
    """Gradients of conv3d_forward: returns (grad_x or None, grad_w, grad_b)."""
    cdef const double[:, :, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    gout_c = np.ascontiguousarray(gout, dtype=np.float64)
    cdef const double[:, :, :, :, ::1] gv = gout_c
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[1]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2], p = K // 2, s = stride
    cdef Py_ssize_t OX = gv.shape[2], OY = gv.shape[3], OZ = gv.shape[4]
    cdef int P = OX * OY * OZ, Kd = C * K * K * K, On = O
    gw_arr = np.zeros((O, Kd), dtype=np.float64)
    cdef double[:, ::1] gw = gw_arr
    cdef double[:, ::1] cols = np.empty((Kd, P), dtype=np.float64)
    cdef double[:, ::1] gcols = np.empty((Kd, P), dtype=np.float64)
    gx_arr = None
    cdef double[:, :, :, :, ::1] gx
    if need_input_grad:
        gx_arr = np.zeros(x.shape, dtype=np.float64)
        gx = gx_arr
    cdef double one = 1.0, zero = 0.0
    cdef char trans_n = b'N', trans_t = b'T'
    cdef Py_ssize_t n
    for n in range(N):
        with nogil:
            _im2col(xv[n], cols, K, s, p, OX, OY, OZ)
            # row-major gw (O, Kd) += gout[n] (O, P) @ cols.T (P, Kd)
            dgemm(&trans_t, &trans_n, &Kd, &On, &P, &one, &cols[0, 0], &P,
                  <double*>&gv[n, 0, 0, 0, 0], &P, &one, &gw[0, 0], &Kd)
            if need_input_grad:
                # row-major gcols (Kd, P) = W.T (Kd, O) @ gout[n] (O, P)
                dgemm(&trans_n, &trans_t, &P, &Kd, &On, &one, <double*>&gv[n, 0, 0, 0, 0], &P,
                      <double*>&wv[0, 0], &Kd, &zero, &gcols[0, 0], &P)
                _col2im(gcols, gx[n], K, s, p, OX, OY, OZ)
    gb = gout_c.sum(axis=(0, 2, 3, 4))
    return gx_arr, gw_arr.reshape(w.shape), gb


def grow_region(allowed, Py_ssize_t seed, Py_ssize_t target, const double[::1] draws):
    """Random-frontier 6-connected growth from ``seed`` inside ``allowed``.

    ``draws[i]`` in [0, 1) picks the frontier slot admitted at step i + 1.
    Returns a uint8 array of allowed's shape; fewer than ``target`` voxels are
    set only when the reachable component is too small.
    """
    cdef const cnp.uint8_t[:, :, ::1] ok = np.ascontiguousarray(allowed, dtype=np.uint8)
    cdef Py_ssize_t H = ok.shape[0], W = ok.shape[1], D = ok.shape[2]
    state_arr = np.zeros((H, W, D), dtype=np.uint8)
    cdef cnp.uint8_t[::1] state = state_arr.reshape(-1)
    cdef const cnp.uint8_t[::1] okf = np.ascontiguousarray(allowed, dtype=np.uint8).reshape(-1)
    cdef cnp.int64_t[::1] frontier = np.empty(H * W * D, dtype=np.int64)
    cdef Py_ssize_t fsize = 0, count = 0, v, j, x, y, z, nb, step
    cdef Py_ssize_t WD = W * D
    if target <= 0:
        return state_arr
    with nogil:
        state[seed] = 2
        count = 1
        v = seed
        step = 0
        while True:
            x = v // WD
            y = (v // D) % W
            z = v % D
            if x > 0:
                nb = v - WD
                if okf[nb] and state[nb] == 0:
                    state[nb] = 1; frontier[fsize] = nb; fsize += 1
            if x < H - 1:
                nb = v + WD
                if okf[nb] and state[nb] == 0:
                    state[nb] = 1; frontier[fsize] = nb; fsize += 1
            if y > 0:
                nb = v - D
                if okf[nb] and state[nb] == 0:
                    state[nb] = 1; frontier[fsize] = nb; fsize += 1
            if y < W - 1:
                nb = v + D
                if okf[nb] and state[nb] == 0:
                    state[nb] = 1; frontier[fsize] = nb; fsize += 1
            if z > 0:
                nb = v - 1
                if okf[nb] and state[nb] == 0:
                    state[nb] = 1; frontier[fsize] = nb; fsize += 1
            if z < D - 1:
                nb = v + 1
                if okf[nb] and state[nb] == 0:
                    state[nb] = 1; frontier[fsize] = nb; fsize += 1
            if count >= target or fsize == 0:
                break
            j = <Py_ssize_t>(draws[step] * fsize)
            if j >= fsize:
                j = fsize - 1
            step += 1
            v = frontier[j]
            frontier[j] = frontier[fsize - 1]
            fsize -= 1
            state[v] = 2
            count += 1
    state_arr[state_arr == 1] = 0
    state_arr[state_arr == 2] = 1
    return state_arr
