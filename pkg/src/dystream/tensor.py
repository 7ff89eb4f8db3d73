"""Minimal dense tensor kernel with reverse-mode differentiation.

Float64 throughout; the acceptance story of this repo leans on bitwise
reproducibility checks, so determinism wins over speed everywhere. The graph
is rebuilt for every loss (no persistent tape). Forward passes of the ops
that sit on the streaming inference path (linear, rope, layer_norm,
masked_attention) run through :mod:`dystream.kernels` and are prefix stable;
backward passes are free to use BLAS.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_GRAD_ENABLED = True
_FAST_FORWARD = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def fast_forward():
    """Allow BLAS forwards for linear/attention inside the block.

    BLAS reductions are not prefix stable, so this must never wrap a
    computation whose bitwise output is compared across different buffer
    lengths (the streaming encode path). Training steps and the fixed-length
    autoregressive generation loop qualify; both sides of any comparison must
    run in the same mode.
    """
    global _FAST_FORWARD
    prev = _FAST_FORWARD
    _FAST_FORWARD = True
    try:
        yield
    finally:
        _FAST_FORWARD = prev


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        # ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Immutable-by-convention float64 array node in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """A trainable leaf. Values are snapped to the float32 grid so that the
    f32 checkpoint payload round-trips bitwise."""
    arr = _as_f64(data).astype(np.float32).astype(np.float64)
    return Tensor(arr, requires_grad=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias another node's grad buffer or a view of one
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _wrap(a)
        c = float(b)
        out_data = a.data * c

        def backward_scalar(g):
            _accum(a, g * c)

        return _make(out_data, (a,), backward_scalar)

    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def silu(x: Tensor) -> Tensor:
    # numerically stable sigmoid in both tails
    d = x.data
    sig = np.empty_like(d)
    pos = d >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    sig[~pos] = e / (1.0 + e)
    out_data = d * sig

    def backward(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.array(x.data.sum())

    def backward(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _make(out_data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out_data = np.array(x.data.mean())

    def backward(g):
        _accum(x, np.full_like(x.data, float(g) / n))

    return _make(out_data, (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            _accum(x, acc)

    return _make(out_data, (x,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        start = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[start : start + n])
            start += n

    return _make(out_data, tuple(parts), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[:, start:stop].copy()

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc[:, start:stop] = g
            _accum(x, acc)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# fused model ops (prefix-stable forwards)
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map for [T, in] inputs."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"linear: shape mismatch {x.data.shape} @ {w.data.shape}"
        )
    if _FAST_FORWARD:
        out_data = x.data @ w.data
        if b is not None:
            out_data += b.data
    else:
        bias = b.data if b is not None else np.zeros(w.data.shape[1])
        out_data = kernels.linear_rows(x.data, w.data, bias)

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each row (timestep) over the last axis, then apply the
    optional affine transform. Never mixes information across rows."""
    if x.data.ndim != 2:
        raise ValueError("layer_norm expects [T, D] input")
    xhat, _, inv_std = kernels.layer_norm_rows(x.data, eps)
    if gain is not None:
        out_data = xhat * gain.data + (bias.data if bias is not None else 0.0)
    else:
        out_data = xhat

    def backward(g):
        gg = g * gain.data if gain is not None else g
        if gain is not None:
            _accum(gain, (g * xhat).sum(axis=0))
        if bias is not None:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv_std[:, None] * (gg - m1 - xhat * m2))

    parents = tuple(p for p in (x, gain, bias) if p is not None)
    return _make(out_data, parents, backward)


def _rope_inv_freq(dim: int, base: float) -> np.ndarray:
    half = dim // 2
    return base ** (-2.0 * np.arange(half) / dim)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position embedding: rotate consecutive feature pairs of row i
    by angles ``positions[i] * base**(-2p/D)``. Preserves pair 2-norms."""
    if x.data.ndim != 2:
        raise ValueError("rope_apply expects [T, D] input")
    if x.data.shape[1] % 2 != 0:
        raise ValueError("rope_apply requires an even feature dimension")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 1 or pos.shape[0] != x.data.shape[0]:
        raise ValueError("positions must be one per row")
    if np.any(pos < 0):
        raise ValueError("positions must be nonnegative")
    inv_freq = _rope_inv_freq(x.data.shape[1], base)
    out_data = kernels.rope_rows(x.data, pos, inv_freq)

    def backward(g):
        if x.requires_grad:
            # rotation is orthogonal; transpose == rotate by -theta
            _accum(x, kernels.rope_rows(np.ascontiguousarray(g), -pos, inv_freq))

    return _make(out_data, (x,), backward)


_MASK_CACHE: dict = {}


@dataclass(frozen=True)
class AttentionMask:
    """Boolean query-by-key admission matrix.

    ``allowed[i, j]`` is True iff query i may attend to key j. A lookahead-L
    mask admits exactly the pairs with ``j <= i + L``.
    """

    rows: int
    cols: int
    allowed: np.ndarray = field(repr=False)

    @staticmethod
    def from_bool(allowed) -> "AttentionMask":
        arr = np.ascontiguousarray(np.asarray(allowed, dtype=np.bool_))
        if arr.ndim != 2:
            raise ValueError("mask must be a 2-D boolean matrix")
        return AttentionMask(arr.shape[0], arr.shape[1], arr)

    def additive(self) -> np.ndarray:
        """0 at allowed pairs, -inf elsewhere (cached; for fast softmax masking)."""
        cached = getattr(self, "_additive", None)
        if cached is None:
            cached = np.where(self.allowed, 0.0, -np.inf)
            object.__setattr__(self, "_additive", cached)
        return cached

    @staticmethod
    def lookahead(frames: int, lookahead: int | None) -> "AttentionMask":
        """Square mask admitting j <= i + L; ``lookahead=None`` means unbounded."""
        if frames < 1:
            raise ValueError("mask needs at least one frame")
        if lookahead is not None and lookahead < 0:
            raise ValueError("lookahead must be >= 0")
        key = (frames, lookahead)
        cached = _MASK_CACHE.get(key)
        if cached is not None:
            return cached
        if lookahead is None:
            allowed = np.ones((frames, frames), dtype=np.bool_)
        else:
            i = np.arange(frames)
            allowed = i[None, :] <= (i[:, None] + lookahead)
        mask = AttentionMask.from_bool(allowed)
        if len(_MASK_CACHE) > 256:
            _MASK_CACHE.clear()
        _MASK_CACHE[key] = mask
        return mask

    @staticmethod
    def full(rows: int, cols: int) -> "AttentionMask":
        return AttentionMask.from_bool(np.ones((rows, cols), dtype=np.bool_))


_OFFSET_CACHE: dict = {}


def _offset_index(tq: int, tk: int, lo: int, hi: int) -> np.ndarray:
    """[tq, tk] matrix of clamped relative offsets j-i, shifted to start at 0."""
    key = (tq, tk, lo, hi)
    cached = _OFFSET_CACHE.get(key)
    if cached is None:
        j = np.arange(tk)[None, :]
        i = np.arange(tq)[:, None]
        cached = np.clip(j - i, lo, hi) - lo
        if len(_OFFSET_CACHE) > 256:
            _OFFSET_CACHE.clear()
        _OFFSET_CACHE[key] = cached
    return cached


def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: AttentionMask,
    heads: int,
    rel_bias: Tensor | None = None,
    rel_range: tuple[int, int] = (8, 8),
) -> Tensor:
    """Multi-head softmax attention restricted to the admitted pairs.

    Disallowed positions get exactly zero weight, so their key/value content
    cannot perturb the output even at the bit level. A fully-masked query row
    is an error, never a silent zero.

    ``rel_bias`` ([heads, past+future+1]) optionally adds a learned score
    bias per relative offset j-i, clamped to [-past, future]. The bias lives
    inside attention, so the receptive field stays governed by the mask.
    """
    tq, d = q.data.shape
    tk = k.data.shape[0]
    if k.data.shape != v.data.shape or k.data.shape[1] != d:
        raise ValueError("masked_attention: q/k/v feature dims must agree")
    if d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    if mask.rows != tq or mask.cols != tk:
        raise ValueError(
            f"mask {mask.rows}x{mask.cols} does not match sequence {tq}x{tk}"
        )
    if not mask.allowed.any(axis=1).all():
        raise ValueError("masked_attention: a query row is fully masked")
    past, future = rel_range
    if rel_bias is not None and rel_bias.data.shape != (heads, past + future + 1):
        raise ValueError("rel_bias must have shape [heads, past+future+1]")

    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    qh = np.ascontiguousarray(q.data.reshape(tq, heads, dh).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.data.reshape(tk, heads, dh).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.data.reshape(tk, heads, dh).transpose(1, 0, 2))
    off_idx = _offset_index(tq, tk, -past, future) if rel_bias is not None else None
    if _FAST_FORWARD:
        scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
        if rel_bias is not None:
            scores += rel_bias.data[:, off_idx]
        scores += mask.additive()
        attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn /= attn.sum(axis=-1, keepdims=True)
        out_h = np.matmul(attn, vh)
    else:
        bias = rel_bias.data if rel_bias is not None else None
        out_h, attn = kernels.attention_rows(
            qh, kh, vh, mask.allowed, scale, bias, -past, future
        )
    out_data = np.ascontiguousarray(out_h.transpose(1, 0, 2).reshape(tq, d))

    def backward(g):
        gh = g.reshape(tq, heads, dh).transpose(1, 0, 2)
        dq = np.empty_like(qh)
        dk = np.empty_like(kh)
        dv = np.empty_like(vh)
        dbias = (
            np.zeros((heads, past + future + 1))
            if rel_bias is not None and rel_bias.requires_grad
            else None
        )
        for h in range(heads):
            a = attn[h]
            dv[h] = a.T @ gh[h]
            da = gh[h] @ vh[h].T
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
            dq[h] = (ds @ kh[h]) * scale
            dk[h] = (ds.T @ qh[h]) * scale
            if dbias is not None:
                dbias[h] = np.bincount(
                    off_idx.ravel(), weights=ds.ravel(), minlength=past + future + 1
                )
        _accum(q, dq.transpose(1, 0, 2).reshape(tq, d))
        _accum(k, dk.transpose(1, 0, 2).reshape(tk, d))
        _accum(v, dv.transpose(1, 0, 2).reshape(tk, d))
        if dbias is not None:
            _accum(rel_bias, dbias)

    parents = (q, k, v) if rel_bias is None else (q, k, v, rel_bias)
    return _make(out_data, parents, backward)


# ---------------------------------------------------------------------------
# reverse-mode driver
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients land on each reachable tensor's ``.grad``; leaves that do not
    influence the loss keep ``grad=None``.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit child seed from (seed, tag); platform independent."""
    digest = hashlib.sha256(f"{seed}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class RngState:
    """Deterministic random source: identical seed + identical call sequence
    produce identical draws. Children split by tag are independent of the
    parent's draw position."""

    ALGORITHM = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, tag: str) -> "RngState":
        return RngState(derive_seed(self.seed, tag))

    def normal(self, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(shape)

    def uniform(self, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        self.counter += 1
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)
