"""Numpy implementations of the hot kernels.

These are the reference fallback used when the compiled extension is not
available. Both backends implement the same contracts; see the package
__init__ for dispatch.
"""

import numpy as np

_TRACK_EPS = 1e-9


def flock_controls(pos, vel, f_gains, f_radii, l_gains, l_radii, omega,
                   leader_index, target, v_max):
    """Control velocities for every robot from one synchronous snapshot.

    pos, vel: (N, 3) float64. f_/l_gains and f_/l_radii: (3,) arrays ordered
    (separation, alignment, cohesion). target: (3,) look-ahead point for the
    leader's tracking term. Returns (N, 3) controls, norm-clipped to v_max.
    """
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]  # diff[i, j] = p_i - p_j
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    not_self = ~np.eye(n, dtype=bool)
    out = np.empty_like(pos)
    for i in range(n):
        if i == leader_index:
            gains, radii = l_gains, l_radii
        else:
            gains, radii = f_gains, f_radii
        d = dist[i]
        others = not_self[i]
        u = np.zeros(3)
        # separation: mean of inverse-square repulsion over the neighborhood;
        # robots at exactly the radius or coincident count toward the mean
        # but contribute a zero vector
        nb = others & (d <= radii[0])
        cnt = int(nb.sum())
        if cnt > 0:
            inner = nb & (d > 0.0) & (d < radii[0])
            if inner.any():
                s = (diff[i][inner] / (d[inner] ** 2)[:, None]).sum(axis=0)
                u += gains[0] * (s / cnt)
        # alignment: mean neighbor velocity, own velocity when alone
        nb = others & (d <= radii[1])
        if nb.any():
            u += gains[1] * vel[nb].mean(axis=0)
        else:
            u += gains[1] * vel[i]
        # cohesion: mean offset toward neighbors, zero when alone
        nb = others & (d <= radii[2])
        if nb.any():
            u += gains[2] * (-diff[i][nb]).mean(axis=0)
        if i == leader_index:
            tv = target - pos[i]
            tn = np.sqrt(tv @ tv)
            if tn >= _TRACK_EPS:
                u += omega * tv / tn
        speed = np.sqrt(u @ u)
        if speed > v_max:
            u *= v_max / speed
        out[i] = u
    return out


def _im2col(x):
    """(B, C, H, W) -> (B, C*9, H*W) patches for a 3x3, stride-1, pad-1 conv."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:h + 1, 1:w + 1] = x
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + h, kj:kj + w]
    return cols.reshape(b, c * 9, h * w)


def conv3x3_forward(x, w, bias):
    """3x3 convolution, stride 1, zero-padding 1. x (B,C,H,W); w (F,C,3,3)."""
    b, c, h, wd = x.shape
    f = w.shape[0]
    cols = _im2col(x)
    y = np.matmul(w.reshape(f, c * 9)[None], cols)  # (B, F, H*W)
    y += bias[None, :, None]
    return y.reshape(b, f, h, wd)


def conv3x3_backward(x, w, dy):
    """Gradients of the 3x3 conv. Returns (dx, dw, db)."""
    b, c, h, wd = x.shape
    f = w.shape[0]
    cols = _im2col(x)
    dy2 = dy.reshape(b, f, h * wd)
    db = dy2.sum(axis=(0, 2))
    dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, 3, 3)
    dcols = np.matmul(w.reshape(f, c * 9).T[None], dy2)  # (B, C*9, H*W)
    d6 = dcols.reshape(b, c, 3, 3, h, wd)
    dxp = np.zeros((b, c, h + 2, wd + 2), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + h, kj:kj + wd] += d6[:, :, ki, kj]
    return dxp[:, :, 1:h + 1, 1:wd + 1].copy(), dw, db


def maxpool3x3_forward(x):
    """3x3 max-pool, stride 1, padding 1 (padding never wins the max).

    Returns (y, idx) where idx holds the flat H*W input index of each
    window's maximum; ties go to the first cell in row-major window order.
    """
    b, c, h, w = x.shape
    xp = np.full((b, c, h + 2, w + 2), -np.inf, dtype=x.dtype)
    xp[:, :, 1:h + 1, 1:w + 1] = x
    stack = np.stack([xp[:, :, di:di + h, dj:dj + w]
                      for di in range(3) for dj in range(3)])
    k = np.argmax(stack, axis=0)  # (B, C, H, W), first max wins
    y = np.take_along_axis(stack, k[None], axis=0)[0]
    di = k // 3 - 1
    dj = k % 3 - 1
    ii = np.arange(h)[None, None, :, None] + di
    jj = np.arange(w)[None, None, None, :] + dj
    return y, (ii * w + jj).astype(np.int64)


def maxpool3x3_backward(dy, idx, h, w):
    """Scatter pooled gradients back to the argmax positions."""
    b, c = dy.shape[:2]
    dx = np.zeros((b * c, h * w), dtype=dy.dtype)
    rows = np.repeat(np.arange(b * c), h * w)
    np.add.at(dx, (rows, idx.reshape(-1)), dy.reshape(-1))
    return dx.reshape(b, c, h, w)
