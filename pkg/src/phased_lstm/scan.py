"""Compiled recurrence over a whole sequence as a single tape node.

The node consumes the inputs of every step together with the time-gate
openness ``k`` and yields the final ``(c, h)``.  Its vector-Jacobian
product is backpropagation through time over the stored gate activations.
A plain LSTM is the special case where ``k`` is the validity mask (1 on
real events, 0 on padding).

Gate blocks are laid out in the order input, forget, candidate, output
along the last axis of ``W_x``, ``W_h`` and ``b``.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .diffmath import Var


# exp(v) = p(r) * 2**kf with v = kf*ln2 + r, |r| <= ln2/2 and p a degree-13
# Taylor polynomial (relative error ~2e-16).  Written branch-free so the
# array version vectorises; the scalar version performs identical arithmetic.
_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_FAST = {"contract"}


@numba.njit(inline="always", fastmath=_FAST)
def _exp_core(v):
    v = min(max(v, -708.0), 709.0)
    kf = math.floor(v * _LOG2E + 0.5)
    r = v - kf * _LN2_HI - kf * _LN2_LO
    p = 1.0 / 6227020800.0
    p = p * r + 1.0 / 479001600.0
    p = p * r + 1.0 / 39916800.0
    p = p * r + 1.0 / 3628800.0
    p = p * r + 1.0 / 362880.0
    p = p * r + 1.0 / 40320.0
    p = p * r + 1.0 / 5040.0
    p = p * r + 1.0 / 720.0
    p = p * r + 1.0 / 120.0
    p = p * r + 1.0 / 24.0
    p = p * r + 1.0 / 6.0
    p = p * r + 0.5
    p = p * r + 1.0
    p = p * r + 1.0
    return p, kf


@numba.njit(inline="always", fastmath=_FAST)
def _exp1(v):
    p, kf = _exp_core(v)
    return p * math.ldexp(1.0, int(kf))


@numba.njit(fastmath=_FAST, cache=True)
def _exp_inplace(buf, bits):
    """``buf <- exp(buf)`` elementwise on 1-d arrays."""
    for i in range(buf.size):
        p, kf = _exp_core(buf[i])
        buf[i] = p
        bits[i] = np.int64(kf + 1023.0) << 52
    scale = bits.view(np.float64)
    for i in range(buf.size):
        buf[i] *= scale[i]


@numba.njit(fastmath=_FAST, cache=True)
def _forward(x, k, wx, wh, bias, wci, wcf, wco, keep):
    """Dense step loop; with ``keep`` all states and activations are stored.

    ``acts[t]`` holds input, forget, candidate and output gates, the
    proposed cell value and its tanh, side by side.  Sigmoid is
    ``1/(1+exp(-z))`` and tanh is ``1 - 2/(exp(2z)+1)``.
    """
    steps, batch, _ = x.shape
    n = wh.shape[0]
    rows = steps + 1 if keep else 1
    cs = np.zeros((rows, batch, n))
    hs = np.zeros((rows, batch, n))
    acts = np.zeros((steps if keep else 1, batch, 6 * n))
    c = np.zeros((batch, n))
    h = np.zeros((batch, n))
    z = np.empty((batch, 4 * n))
    zx = np.empty((batch, 4 * n))
    e1 = np.empty(batch * 3 * n)
    e2 = np.empty(batch * 2 * n)
    bits = np.empty(batch * 3 * n, dtype=np.int64)
    for t in range(steps):
        a_t = acts[t] if keep else acts[0]
        np.dot(h, wh, z)
        np.dot(x[t], wx, zx)
        for b in range(batch):
            o1 = b * 3 * n
            for j in range(n):
                cp = c[b, j]
                e1[o1 + j] = -((z[b, j] + zx[b, j]) + bias[j] + wci[j] * cp)
                e1[o1 + n + j] = -((z[b, n + j] + zx[b, n + j]) + bias[n + j] + wcf[j] * cp)
                e1[o1 + 2 * n + j] = 2.0 * ((z[b, 2 * n + j] + zx[b, 2 * n + j]) + bias[2 * n + j])
        _exp_inplace(e1, bits)
        for b in range(batch):
            o1 = b * 3 * n
            o2 = b * 2 * n
            a = a_t[b]
            for j in range(n):
                gi = 1.0 / (1.0 + e1[o1 + j])
                gf = 1.0 / (1.0 + e1[o1 + n + j])
                gg = 1.0 - 2.0 / (e1[o1 + 2 * n + j] + 1.0)
                cn = gf * c[b, j] + gi * gg
                a[j] = gi
                a[n + j] = gf
                a[2 * n + j] = gg
                a[4 * n + j] = cn
                e2[o2 + j] = -((z[b, 3 * n + j] + zx[b, 3 * n + j]) + bias[3 * n + j] + wco[j] * cn)
                e2[o2 + n + j] = 2.0 * cn
        _exp_inplace(e2, bits)
        for b in range(batch):
            o2 = b * 2 * n
            a = a_t[b]
            for j in range(n):
                go = 1.0 / (1.0 + e2[o2 + j])
                tc = 1.0 - 2.0 / (e2[o2 + n + j] + 1.0)
                a[3 * n + j] = go
                a[5 * n + j] = tc
                kk = k[t, b, j]
                # k*new + (1-k)*old keeps k=1 and k=0 exact
                c[b, j] = kk * a[4 * n + j] + (1.0 - kk) * c[b, j]
                h[b, j] = kk * (go * tc) + (1.0 - kk) * h[b, j]
        if keep:
            cs[t + 1] = c
            hs[t + 1] = h
    return c, h, cs, hs, acts


@numba.njit(fastmath=_FAST, cache=True)
def _forward_sparse(x, k, wx, wh, bias, wci, wcf, wco):
    """Inference loop that leaves units with a closed gate (k == 0) untouched."""
    steps, batch, _ = x.shape
    n = wh.shape[0]
    c = np.zeros((batch, n))
    h = np.zeros((batch, n))
    z = np.empty((batch, 4 * n))
    zx = np.empty((batch, 4 * n))
    for t in range(steps):
        kt = k[t]
        np.dot(h, wh, z)
        np.dot(x[t], wx, zx)
        for b in range(batch):
            for j in range(n):
                kk = kt[b, j]
                if kk == 0.0:
                    continue
                cp = c[b, j]
                gi = 1.0 / (1.0 + _exp1(-((z[b, j] + zx[b, j]) + bias[j] + wci[j] * cp)))
                gf = 1.0 / (1.0 + _exp1(-((z[b, n + j] + zx[b, n + j]) + bias[n + j] + wcf[j] * cp)))
                gg = 1.0 - 2.0 / (_exp1(2.0 * ((z[b, 2 * n + j] + zx[b, 2 * n + j]) + bias[2 * n + j])) + 1.0)
                cn = gf * cp + gi * gg
                go = 1.0 / (1.0 + _exp1(-((z[b, 3 * n + j] + zx[b, 3 * n + j]) + bias[3 * n + j] + wco[j] * cn)))
                tc = 1.0 - 2.0 / (_exp1(2.0 * cn) + 1.0)
                c[b, j] = kk * cn + (1.0 - kk) * cp
                h[b, j] = kk * (go * tc) + (1.0 - kk) * h[b, j]
    return c, h


@numba.njit(fastmath=_FAST, cache=True)
def _backward(gc_end, gh_end, k, wh, wci, wcf, wco, cs, hs, acts, need_k):
    steps, batch, n = k.shape
    dz = np.zeros((steps, batch, 4 * n))
    dk = np.zeros((steps, batch, n)) if need_k else np.zeros((1, 1, 1))
    dwci = np.zeros(n)
    dwcf = np.zeros(n)
    dwco = np.zeros(n)
    dc = gc_end.copy()
    dh = gh_end.copy()
    wht = np.ascontiguousarray(wh.T)
    for t in range(steps - 1, -1, -1):
        kt = k[t]
        dzt = dz[t]
        for b in range(batch):
            a = acts[t, b]
            for j in range(n):
                kk = kt[b, j]
                cp = cs[t, b, j]
                gi = a[j]
                gf = a[n + j]
                gg = a[2 * n + j]
                go = a[3 * n + j]
                cn = a[4 * n + j]
                tc = a[5 * n + j]
                g_c = dc[b, j]
                g_h = dh[b, j]
                if need_k:
                    dk[t, b, j] = g_c * (cn - cp) + g_h * (go * tc - hs[t, b, j])
                dcn = kk * g_c
                dhn = kk * g_h
                dzo = dhn * tc * go * (1.0 - go)
                dcn += dhn * go * (1.0 - tc * tc) + dzo * wco[j]
                dzi = dcn * gg * gi * (1.0 - gi)
                dzf = dcn * cp * gf * (1.0 - gf)
                dzg = dcn * gi * (1.0 - gg * gg)
                dwco[j] += dzo * cn
                dwci[j] += dzi * cp
                dwcf[j] += dzf * cp
                dc[b, j] = (1.0 - kk) * g_c + dcn * gf + dzi * wci[j] + dzf * wcf[j]
                dh[b, j] = (1.0 - kk) * g_h
                dzt[b, j] = dzi
                dzt[b, n + j] = dzf
                dzt[b, 2 * n + j] = dzg
                dzt[b, 3 * n + j] = dzo
        dh += dzt @ wht
    return dz, dk, dwci, dwcf, dwco


def _peeps(peeps, n):
    if peeps is None:
        z = np.zeros(n)
        return z, z, z
    return tuple(np.ascontiguousarray(p.value, dtype=np.float64) for p in peeps)


def recurrent_scan(
    x: np.ndarray,
    mask: np.ndarray,
    wx: Var,
    wh: Var,
    bias: Var,
    k: Var | None,
    peeps: tuple[Var, Var, Var] | None,
) -> Var:
    """Final ``[batch, 2*hidden]`` cell and hidden state (side by side) from a zero start.

    ``x`` is ``[steps, batch, in]`` and ``mask`` ``[steps, batch]`` marks
    real events; padded steps carry the state forward.  ``k`` is the gate
    openness as ``[steps*batch, hidden]`` rows (step-major), or ``None`` for
    a plain LSTM.  On a non-recording tape, units whose gate is exactly 0
    are skipped, since such a step leaves them unchanged.
    """
    tape = wh.tape
    steps, batch, n_in = x.shape
    n = wh.shape[0]
    x = np.ascontiguousarray(x, dtype=np.float64)
    valid = mask.astype(np.float64)[:, :, None]
    if k is None:
        kv = np.ascontiguousarray(np.broadcast_to(valid, (steps, batch, n)))
    else:
        kv = k.value.reshape(steps, batch, n) * valid
    wxv, whv, bv = (np.ascontiguousarray(v.value, dtype=np.float64) for v in (wx, wh, bias))
    pv = _peeps(peeps, n)
    keep = tape.recording
    if not keep and np.count_nonzero(kv) < 0.5 * kv.size:
        c, h = _forward_sparse(x, kv, wxv, whv, bv, *pv)
    else:
        c, h, cs, hs, acts = _forward(x, kv, wxv, whv, bv, *pv, keep)
    out = np.concatenate([c, h], axis=1)
    need_k = k is not None and k.requires_grad

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        dz, dk, dwci, dwcf, dwco = _backward(
            np.ascontiguousarray(g[:, :n]), np.ascontiguousarray(g[:, n:]), kv, whv, *pv, cs, hs, acts, need_k
        )
        flat = dz.reshape(steps * batch, 4 * n)
        grads = [
            x.reshape(steps * batch, n_in).T @ flat if wx.requires_grad else None,
            hs[:-1].reshape(steps * batch, n).T @ flat if wh.requires_grad else None,
            flat.sum(axis=0) if bias.requires_grad else None,
        ]
        if k is not None:
            grads.append((dk * valid).reshape(steps * batch, n) if need_k else None)
        if peeps is not None:
            grads += [dwci, dwcf, dwco]
        return grads

    parents = (wx, wh, bias) + ((k,) if k is not None else ()) + (tuple(peeps) if peeps is not None else ())
    return tape.record(out, parents, vjp, "recurrent_scan")
