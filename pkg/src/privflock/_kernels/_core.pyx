# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: flocking control step, 3x3 conv and 3x3 max-pool."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

DEF TRACK_EPS = 1e-9


def flock_controls(cnp.ndarray[double, ndim=2] pos,
                   cnp.ndarray[double, ndim=2] vel,
                   cnp.ndarray[double, ndim=1] f_gains,
                   cnp.ndarray[double, ndim=1] f_radii,
                   cnp.ndarray[double, ndim=1] l_gains,
                   cnp.ndarray[double, ndim=1] l_radii,
                   double omega,
                   Py_ssize_t leader_index,
                   cnp.ndarray[double, ndim=1] target,
                   double v_max):
    cdef Py_ssize_t n = pos.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, 3), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] dist = np.empty((n, n), dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double dx, dy, dz, d, d2
    cdef double r_sep, r_align, r_coh, g_sep, g_align, g_coh
    cdef double sx, sy, sz, ux, uy, uz, tn, speed
    cdef Py_ssize_t cnt

    for i in range(n):
        dist[i, i] = 0.0
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            d = sqrt(dx * dx + dy * dy + dz * dz)
            dist[i, j] = d
            dist[j, i] = d

    for i in range(n):
        if i == leader_index:
            g_sep = l_gains[0]; g_align = l_gains[1]; g_coh = l_gains[2]
            r_sep = l_radii[0]; r_align = l_radii[1]; r_coh = l_radii[2]
        else:
            g_sep = f_gains[0]; g_align = f_gains[1]; g_coh = f_gains[2]
            r_sep = f_radii[0]; r_align = f_radii[1]; r_coh = f_radii[2]
        ux = 0.0; uy = 0.0; uz = 0.0

        # separation
        sx = 0.0; sy = 0.0; sz = 0.0
        cnt = 0
        for j in range(n):
            if j == i:
                continue
            d = dist[i, j]
            if d <= r_sep:
                cnt += 1
                if 0.0 < d < r_sep:
                    d2 = d * d
                    sx += (pos[i, 0] - pos[j, 0]) / d2
                    sy += (pos[i, 1] - pos[j, 1]) / d2
                    sz += (pos[i, 2] - pos[j, 2]) / d2
        if cnt > 0:
            ux += g_sep * (sx / cnt)
            uy += g_sep * (sy / cnt)
            uz += g_sep * (sz / cnt)

        # alignment
        sx = 0.0; sy = 0.0; sz = 0.0
        cnt = 0
        for j in range(n):
            if j != i and dist[i, j] <= r_align:
                cnt += 1
                sx += vel[j, 0]; sy += vel[j, 1]; sz += vel[j, 2]
        if cnt > 0:
            ux += g_align * (sx / cnt)
            uy += g_align * (sy / cnt)
            uz += g_align * (sz / cnt)
        else:
            ux += g_align * vel[i, 0]
            uy += g_align * vel[i, 1]
            uz += g_align * vel[i, 2]

        # cohesion
        sx = 0.0; sy = 0.0; sz = 0.0
        cnt = 0
        for j in range(n):
            if j != i and dist[i, j] <= r_coh:
                cnt += 1
                sx += pos[j, 0] - pos[i, 0]
                sy += pos[j, 1] - pos[i, 1]
                sz += pos[j, 2] - pos[i, 2]
        if cnt > 0:
            ux += g_coh * (sx / cnt)
            uy += g_coh * (sy / cnt)
            uz += g_coh * (sz / cnt)

        if i == leader_index:
            dx = target[0] - pos[i, 0]
            dy = target[1] - pos[i, 1]
            dz = target[2] - pos[i, 2]
            tn = sqrt(dx * dx + dy * dy + dz * dz)
            if tn >= TRACK_EPS:
                ux += omega * dx / tn
                uy += omega * dy / tn
                uz += omega * dz / tn

        speed = sqrt(ux * ux + uy * uy + uz * uz)
        if speed > v_max:
            ux *= v_max / speed
            uy *= v_max / speed
            uz *= v_max / speed
        out[i, 0] = ux; out[i, 1] = uy; out[i, 2] = uz
    return out


def conv3x3_forward(x_in, w_in, bias_in):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[::1] bias = np.ascontiguousarray(bias_in, dtype=np.float64)
    cdef Py_ssize_t nb = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    y_arr = np.empty((nb, f, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, o, ci, ki, kj, i, j, i0, i1, j0, j1, di, dj
    cdef double wv, bv
    for b in range(nb):
        for o in range(f):
            bv = bias[o]
            for i in range(h):
                for j in range(wd):
                    y[b, o, i, j] = bv
            for ci in range(c):
                for ki in range(3):
                    di = ki - 1
                    i0 = 0 if di >= 0 else -di
                    i1 = h if di <= 0 else h - di
                    for kj in range(3):
                        dj = kj - 1
                        j0 = 0 if dj >= 0 else -dj
                        j1 = wd if dj <= 0 else wd - dj
                        wv = w[o, ci, ki, kj]
                        for i in range(i0, i1):
                            for j in range(j0, j1):
                                y[b, o, i, j] += x[b, ci, i + di, j + dj] * wv
    return y_arr


def conv3x3_backward(x_in, w_in, dy_in):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[:, :, :, ::1] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef Py_ssize_t nb = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    dx_arr = np.zeros((nb, c, h, wd), dtype=np.float64)
    dw_arr = np.zeros((f, c, 3, 3), dtype=np.float64)
    db_arr = np.zeros(f, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t b, o, ci, ki, kj, i, j, i0, i1, j0, j1, di, dj
    cdef double wv, acc, g
    for b in range(nb):
        for o in range(f):
            acc = 0.0
            for i in range(h):
                for j in range(wd):
                    acc += dy[b, o, i, j]
            db[o] += acc
            for ci in range(c):
                for ki in range(3):
                    di = ki - 1
                    i0 = 0 if di >= 0 else -di
                    i1 = h if di <= 0 else h - di
                    for kj in range(3):
                        dj = kj - 1
                        j0 = 0 if dj >= 0 else -dj
                        j1 = wd if dj <= 0 else wd - dj
                        wv = w[o, ci, ki, kj]
                        acc = 0.0
                        for i in range(i0, i1):
                            for j in range(j0, j1):
                                g = dy[b, o, i, j]
                                acc += x[b, ci, i + di, j + dj] * g
                                dx[b, ci, i + di, j + dj] += wv * g
                        dw[o, ci, ki, kj] += acc
    return dx_arr, dw_arr, db_arr


def maxpool3x3_forward(cnp.ndarray[double, ndim=4] x):
    cdef Py_ssize_t nb = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef cnp.ndarray[double, ndim=4] y = np.empty((nb, c, h, wd), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=4] idx = np.empty((nb, c, h, wd), dtype=np.int64)
    cdef Py_ssize_t b, ci, i, j, ki, kj, ii, jj, best_idx
    cdef double best, v
    cdef bint have
    for b in range(nb):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    have = False
                    best = 0.0
                    best_idx = 0
                    for ki in range(3):
                        ii = i + ki - 1
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(3):
                            jj = j + kj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            v = x[b, ci, ii, jj]
                            if not have or v > best:
                                have = True
                                best = v
                                best_idx = ii * wd + jj
                    y[b, ci, i, j] = best
                    idx[b, ci, i, j] = best_idx
    return y, idx


def maxpool3x3_backward(cnp.ndarray[double, ndim=4] dy,
                        cnp.ndarray[cnp.int64_t, ndim=4] idx,
                        Py_ssize_t h, Py_ssize_t wd):
    cdef Py_ssize_t nb = dy.shape[0], c = dy.shape[1]
    cdef cnp.ndarray[double, ndim=4] dx = np.zeros((nb, c, h, wd), dtype=np.float64)
    cdef Py_ssize_t b, ci, i, j, flat
    for b in range(nb):
        for ci in range(c):
            for i in range(dy.shape[2]):
                for j in range(dy.shape[3]):
                    flat = idx[b, ci, i, j]
                    dx[b, ci, flat // wd, flat % wd] += dy[b, ci, i, j]
    return dx
