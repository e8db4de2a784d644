"""Compiled inner loops for direct 3D cross-correlation.

All arrays share one float dtype and are C-contiguous. ``xp`` is the
zero-padded input (B, C, D+2r, H+2r, W+2r); keeping the padding explicit
lets the inner loops run without border tests, which is markedly faster
than clipping the ranges. Outputs are accumulated in place; weight gradients
sum one output row at a time so the row stays in cache.
"""
import numba as nb
import numpy as np


@nb.njit(cache=True)
def corr_dense(xp, w, out):
    nb_, co, d, h, ww = out.shape
    ci = w.shape[1]
    k0, k1, k2 = w.shape[2], w.shape[3], w.shape[4]
    for b in range(nb_):
        for o in range(co):
            for i in range(ci):
                for a in range(k0):
                    for e in range(k1):
                        for c in range(k2):
                            wt = w[o, i, a, e, c]
                            if wt == 0.0:
                                continue
                            for z in range(d):
                                for y in range(h):
                                    for x in range(ww):
                                        out[b, o, z, y, x] += wt * xp[b, i, z + a, y + e, x + c]


@nb.njit(cache=True)
def corr_depthwise(xp, w, out):
    nb_, ch, d, h, ww = out.shape
    k0, k1, k2 = w.shape[1], w.shape[2], w.shape[3]
    for b in range(nb_):
        for o in range(ch):
            for a in range(k0):
                for e in range(k1):
                    for c in range(k2):
                        wt = w[o, a, e, c]
                        if wt == 0.0:
                            continue
                        for z in range(d):
                            for y in range(h):
                                for x in range(ww):
                                    out[b, o, z, y, x] += wt * xp[b, o, z + a, y + e, x + c]


@nb.njit(cache=True, fastmath={"reassoc"})
def grad_w_dense(xp, g, gw):
    nb_, co, d, h, ww = g.shape
    ci = gw.shape[1]
    k0, k1, k2 = gw.shape[2], gw.shape[3], gw.shape[4]
    acc = np.zeros((k0, k1, k2))
    for o in range(co):
        for i in range(ci):
            acc[:] = 0.0
            for b in range(nb_):
                for z in range(d):
                    for y in range(h):
                        for a in range(k0):
                            for e in range(k1):
                                for c in range(k2):
                                    s = 0.0
                                    for x in range(ww):
                                        s += g[b, o, z, y, x] * xp[b, i, z + a, y + e, x + c]
                                    acc[a, e, c] += s
            gw[o, i] += acc


@nb.njit(cache=True, fastmath={"reassoc"})
def grad_w_depthwise(xp, g, gw):
    nb_, ch, d, h, ww = g.shape
    k0, k1, k2 = gw.shape[1], gw.shape[2], gw.shape[3]
    acc = np.zeros((k0, k1, k2))
    for o in range(ch):
        acc[:] = 0.0
        for b in range(nb_):
            for z in range(d):
                for y in range(h):
                    for a in range(k0):
                        for e in range(k1):
                            for c in range(k2):
                                s = 0.0
                                for x in range(ww):
                                    s += g[b, o, z, y, x] * xp[b, o, z + a, y + e, x + c]
                                acc[a, e, c] += s
        gw[o] += acc


# -- fused elementwise / normalization passes over (B, C, N) views ---------------

@nb.njit(cache=True)
def relu_fwd(x, out):
    for i in range(x.size):
        v = x[i]
        out[i] = 0.0 if v <= 0 else v  # NaN passes through


@nb.njit(cache=True)
def relu_bwd(y, g, out):
    for i in range(y.size):
        out[i] = g[i] if y[i] > 0 else 0.0


@nb.njit(cache=True)
def norm_stats(x, over_batch, eps, mu, inv):
    """Mean and 1/sqrt(var + eps) per (b, c), or per c when ``over_batch``."""
    nb_, ch, n = x.shape
    for c in range(ch):
        if over_batch:
            s = 0.0
            for b in range(nb_):
                for i in range(n):
                    s += x[b, c, i]
            m = s / (nb_ * n)
            q = 0.0
            for b in range(nb_):
                for i in range(n):
                    t = x[b, c, i] - m
                    q += t * t
            for b in range(nb_):
                mu[b, c] = m
                inv[b, c] = 1.0 / (q / (nb_ * n) + eps) ** 0.5
        else:
            for b in range(nb_):
                s = 0.0
                for i in range(n):
                    s += x[b, c, i]
                m = s / n
                q = 0.0
                for i in range(n):
                    t = x[b, c, i] - m
                    q += t * t
                mu[b, c] = m
                inv[b, c] = 1.0 / (q / n + eps) ** 0.5


@nb.njit(cache=True)
def norm_apply(x, mu, inv, scale, shift, xhat, out):
    nb_, ch, n = x.shape
    for b in range(nb_):
        for c in range(ch):
            m, v, s, t = mu[b, c], inv[b, c], scale[c], shift[c]
            for i in range(n):
                xh = (x[b, c, i] - m) * v
                xhat[b, c, i] = xh
                out[b, c, i] = xh * s + t


@nb.njit(cache=True)
def norm_backward(g, xhat, inv, scale, over_batch, train, gscale, gshift, dx):
    """Backward of ``scale * xhat + shift``; ``train`` includes the statistics' dependence on x."""
    nb_, ch, n = g.shape
    for c in range(ch):
        sg_all = 0.0
        sgx_all = 0.0
        for b in range(nb_):
            sg = 0.0
            sgx = 0.0
            for i in range(n):
                sg += g[b, c, i]
                sgx += g[b, c, i] * xhat[b, c, i]
            sg_all += sg
            sgx_all += sgx
            if not over_batch:
                k = scale[c] * inv[b, c]
                a = sg / n
                q = sgx / n
                for i in range(n):
                    dx[b, c, i] = k * (g[b, c, i] - a - xhat[b, c, i] * q) if train else k * g[b, c, i]
        gscale[c] += sgx_all
        gshift[c] += sg_all
        if over_batch:
            tot = nb_ * n
            a = sg_all / tot
            q = sgx_all / tot
            for b in range(nb_):
                k = scale[c] * inv[b, c]
                for i in range(n):
                    dx[b, c, i] = k * (g[b, c, i] - a - xhat[b, c, i] * q) if train else k * g[b, c, i]


@nb.njit(cache=True)
def maxpool2_fwd(x, out, arg):
    """2x2x2 max over (L, D, H, W); ties go to the first voxel in (z, y, x) order."""
    n, d, h, w = out.shape
    for l in range(n):
        for z in range(d):
            for y in range(h):
                for q in range(w):
                    best = x[l, 2 * z, 2 * y, 2 * q]
                    bi = 0
                    for t in range(1, 8):
                        v = x[l, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * q + (t & 1)]
                        if v > best or (v != v and best == best):  # NaN wins, as in np.max
                            best = v
                            bi = t
                    out[l, z, y, q] = best
                    arg[l, z, y, q] = bi


@nb.njit(cache=True)
def maxpool2_bwd(g, arg, out):
    n, d, h, w = g.shape
    for l in range(n):
        for z in range(d):
            for y in range(h):
                for q in range(w):
                    t = arg[l, z, y, q]
                    out[l, 2 * z + (t >> 2), 2 * y + ((t >> 1) & 1), 2 * q + (t & 1)] = g[l, z, y, q]
