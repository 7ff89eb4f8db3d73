"""Hot numeric kernels: numba-jitted fast path with a pure-numpy fallback.

Backend selection is controlled by the environment variable ``DYSTREAM_NUMBA``:
``1`` forces numba (import error if unavailable), ``0`` forces the numpy
fallback, unset means "numba if importable". The choice is fixed at import.

Every kernel here is *prefix stable*: the values computed for row/query ``i``
depend only on the rows the mask or geometry allows, never on how many later
rows happen to be in the buffer. The streaming engine re-encodes a growing
audio prefix each packet and demands bitwise agreement with the one-pass
offline encode; BLAS matmul does not guarantee this (its reduction order
changes with matrix size), so these kernels use fixed-order accumulation.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("DYSTREAM_NUMBA", "").strip().lower()
if _flag in ("0", "false", "off"):
    _HAVE_NUMBA = False
elif _flag in ("1", "true", "on"):
    import numba

    _HAVE_NUMBA = True
else:
    try:
        import numba

        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False


def backend_name() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _linear_rows_nb(x, w, b):
        # k-ascending accumulation per output element, vectorized over j
        t, din = x.shape
        dout = w.shape[1]
        out = np.empty((t, dout))
        for i in range(t):
            acc = b.copy()
            for k in range(din):
                xv = x[i, k]
                wk = w[k]
                for j in range(dout):
                    acc[j] += xv * wk[j]
            out[i] = acc
        return out

    @numba.njit(cache=True)
    def _rope_rows_nb(x, pos, inv_freq):
        t, d = x.shape
        out = np.empty((t, d))
        for i in range(t):
            for p in range(d // 2):
                th = pos[i] * inv_freq[p]
                c = np.cos(th)
                s = np.sin(th)
                a = x[i, 2 * p]
                bb = x[i, 2 * p + 1]
                out[i, 2 * p] = a * c - bb * s
                out[i, 2 * p + 1] = a * s + bb * c
        return out

    @numba.njit(cache=True)
    def _layer_norm_rows_nb(x, eps):
        t, d = x.shape
        xhat = np.empty((t, d))
        mean = np.empty(t)
        inv_std = np.empty(t)
        for i in range(t):
            m = 0.0
            for j in range(d):
                m += x[i, j]
            m /= d
            v = 0.0
            for j in range(d):
                dv = x[i, j] - m
                v += dv * dv
            v /= d
            isd = 1.0 / np.sqrt(v + eps)
            mean[i] = m
            inv_std[i] = isd
            for j in range(d):
                xhat[i, j] = (x[i, j] - m) * isd
        return xhat, mean, inv_std

    @numba.njit(cache=True)
    def _attention_rows_nb(q, k, v, allowed, scale, bias, off_lo, off_hi):
        # bias[h, clamp(j - i, off_lo, off_hi) - off_lo] is added to scores
        h, tq, dh = q.shape
        tk = k.shape[1]
        out = np.zeros((h, tq, dh))
        attn = np.zeros((h, tq, tk))
        use_bias = bias.shape[1] > 0
        for hh in range(h):
            for i in range(tq):
                mx = -np.inf
                for j in range(tk):
                    if allowed[i, j]:
                        s = 0.0
                        for dd in range(dh):
                            s += q[hh, i, dd] * k[hh, j, dd]
                        s *= scale
                        if use_bias:
                            off = j - i
                            if off < off_lo:
                                off = off_lo
                            elif off > off_hi:
                                off = off_hi
                            s += bias[hh, off - off_lo]
                        attn[hh, i, j] = s
                        if s > mx:
                            mx = s
                den = 0.0
                for j in range(tk):
                    if allowed[i, j]:
                        e = np.exp(attn[hh, i, j] - mx)
                        attn[hh, i, j] = e
                        den += e
                inv = 1.0 / den
                for j in range(tk):
                    if allowed[i, j]:
                        a = attn[hh, i, j] * inv
                        attn[hh, i, j] = a
                        for dd in range(dh):
                            out[hh, i, dd] += a * v[hh, j, dd]
        return out, attn


# ---------------------------------------------------------------------------
# numpy fallback implementations
# ---------------------------------------------------------------------------


def _linear_rows_np(x, w, b):
    # Accumulate over the input dim in fixed ascending order; each term is an
    # elementwise outer-product update, so row i never sees other rows.
    t = x.shape[0]
    out = np.tile(b, (t, 1))
    for k in range(w.shape[0]):
        out += x[:, k : k + 1] * w[k]
    return out


def _rope_rows_np(x, pos, inv_freq):
    angles = pos[:, None] * inv_freq[None, :]
    c = np.cos(angles)
    s = np.sin(angles)
    even = x[:, 0::2]
    odd = x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * c - odd * s
    out[:, 1::2] = even * s + odd * c
    return out


def _layer_norm_rows_np(x, eps):
    mean = x.mean(axis=-1)
    var = x.var(axis=-1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * inv_std[:, None]
    return xhat, mean, inv_std


def _attention_rows_np(q, k, v, allowed, scale, bias, off_lo, off_hi):
    h, tq, dh = q.shape
    tk = k.shape[1]
    out = np.zeros((h, tq, dh))
    attn = np.zeros((h, tq, tk))
    use_bias = bias.shape[1] > 0
    for i in range(tq):
        idx = np.flatnonzero(allowed[i])
        offsets = np.clip(idx - i, off_lo, off_hi) - off_lo if use_bias else None
        for hh in range(h):
            s = (k[hh, idx] @ q[hh, i]) * scale
            if use_bias:
                s = s + bias[hh, offsets]
            e = np.exp(s - s.max())
            a = e / e.sum()
            attn[hh, i, idx] = a
            out[hh, i] = a @ v[hh, idx]
    return out, attn


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def linear_rows(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise affine map ``x @ w + b`` with prefix-stable accumulation."""
    if _HAVE_NUMBA:
        return _linear_rows_nb(x, w, b)
    return _linear_rows_np(x, w, b)


def rope_rows(x: np.ndarray, pos: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    """Rotate consecutive feature pairs of each row by position-dependent angles."""
    if _HAVE_NUMBA:
        return _rope_rows_nb(x, pos, inv_freq)
    return _rope_rows_np(x, pos, inv_freq)


def layer_norm_rows(x: np.ndarray, eps: float):
    """Per-row normalization over the last axis. Returns (xhat, mean, inv_std)."""
    if _HAVE_NUMBA:
        return _layer_norm_rows_nb(x, eps)
    return _layer_norm_rows_np(x, eps)


def attention_rows(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    allowed: np.ndarray,
    scale: float,
    bias: np.ndarray | None = None,
    off_lo: int = 0,
    off_hi: int = 0,
):
    """Masked softmax attention over [heads, time, head_dim] inputs.

    ``bias`` (optional, [heads, off_hi-off_lo+1]) adds a learned value per
    clamped relative offset j-i to the scores. Disallowed key positions
    receive an attention weight of exactly 0.0. Returns (output, attention
    weights); the weights are kept for the backward pass.
    """
    if bias is None:
        bias = np.zeros((q.shape[0], 0))
    if _HAVE_NUMBA:
        return _attention_rows_nb(q, k, v, allowed, scale, bias, off_lo, off_hi)
    return _attention_rows_np(q, k, v, allowed, scale, bias, off_lo, off_hi)


def warmup() -> None:
    """Trigger JIT compilation so timings exclude compile cost."""
    x = np.zeros((2, 4))
    w = np.zeros((4, 4))
    b = np.zeros(4)
    linear_rows(x, w, b)
    rope_rows(x, np.zeros(2), np.ones(2))
    layer_norm_rows(x, 1e-5)
    q = np.zeros((1, 2, 4))
    allowed = np.ones((2, 2), dtype=np.bool_)
    attention_rows(q, q, q, allowed, 1.0)
