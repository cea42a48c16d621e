"""Dense float tensors with a reverse-mode gradient tape.

Covers exactly the array operations the cellular-automata forward pass and
its losses need. Grids are laid out channel-first ([C, H, W] in 2-D,
[C, D, H, W] in 3-D), values are float32 by default (float64 is used for
gradient checking only), and tensors are immutable once created. Gradients
are recorded on an explicit :class:`Tape`; operations on tensors that are
not attached to a tape run as plain array math, so inference costs nothing
extra.

Randomness goes through :class:`Rng`, a counter-based generator whose output
is a pure function of (seed, stream, call index). Derived streams are
statistically independent, which keeps every consumer of randomness
reproducible without global state.
"""

from __future__ import annotations

import hashlib
import itertools
import math

import numpy as np

_M64 = (1 << 64) - 1
_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable n-dimensional float array, optionally tracked on a tape."""

    __slots__ = ("data", "_node")

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self._node = None  # (tape, node_id) once recorded or watched

    # -- constructors -------------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)

    @staticmethod
    def full(shape, value, dtype=np.float32) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.full(shape, value, dtype=dtype), dtype=dtype)

    @staticmethod
    def from_values(shape, values, dtype=np.float32) -> "Tensor":
        _check_shape(shape)
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        n = int(np.prod(shape)) if len(shape) else 1
        if flat.size != n:
            raise ValueError(f"expected {n} values for shape {tuple(shape)}, got {flat.size}")
        return Tensor(flat.reshape(shape), dtype=dtype)

    @staticmethod
    def uniform(shape, lo, hi, rng: "Rng", dtype=np.float32) -> "Tensor":
        _check_shape(shape)
        if not lo < hi:
            raise ValueError(f"uniform fill requires lo < hi, got [{lo}, {hi}]")
        return Tensor(rng.uniform(shape, lo, hi).astype(dtype), dtype=dtype)

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"

    # operator sugar, used mostly when composing losses
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)


def _check_shape(shape):
    for e in shape:
        if int(e) < 1:
            raise ValueError(f"tensor extents must be >= 1, got shape {tuple(shape)}")


def _wrap(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.asarray(arr)
    if not arr.flags.owndata and not arr.flags.writeable:
        arr = arr.copy()
    arr.flags.writeable = False
    t.data = arr
    t._node = None
    return t


class Tape:
    """Ordered record of differentiable operations.

    `watch` registers a leaf (a parameter or any tensor gradients are wanted
    for); operations whose inputs live on the tape append records. `backward`
    replays the records in strict reverse order, accumulating gradients
    additively, and returns a gradient for every watched leaf (zero if the
    leaf does not reach the loss).
    """

    def __init__(self):
        self._records = []  # (out_id, input_ids, backward_fn)
        self._next_id = 0
        self._leaves = {}  # node_id -> Tensor
        self._consumed = False

    def watch(self, t: Tensor) -> int:
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        nid = self._next_id
        self._next_id += 1
        t._node = (self, nid)
        self._leaves[nid] = t
        return nid

    def node_of(self, t: Tensor):
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        return None

    def _emit(self, out: Tensor, input_ids, backward_fn):
        nid = self._next_id
        self._next_id += 1
        out._node = (self, nid)
        self._records.append((nid, tuple(input_ids), backward_fn))
        return nid

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar loss w.r.t. every watched leaf, keyed by node id.

        Consumes the tape: saved activations are released as the reverse
        sweep passes them, so each tape supports one backward call.
        """
        if self._consumed:
            raise ValueError("tape already consumed by a previous backward call")
        self._consumed = True
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss_id = self.node_of(loss)
        if loss_id is None:
            raise ValueError("backward on a tensor not recorded on this tape")
        grads = {loss_id: np.ones(loss.shape, dtype=loss.dtype)}
        for i in range(len(self._records) - 1, -1, -1):
            out_id, input_ids, backward_fn = self._records[i]
            self._records[i] = None  # free saved activations as we go
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for nid, gin in zip(input_ids, backward_fn(g)):
                if gin is None or nid is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = gin if acc is None else acc + gin
        out = {}
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros(leaf.shape, dtype=leaf.dtype)
            out[nid] = _wrap(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
            # unbind the leaf: a consumed tape must not capture later ops
            if leaf._node is not None and leaf._node[0] is self:
                leaf._node = None
        self._leaves = {}
        return out


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t is None or t._node is None:
            continue
        if tape is None:
            tape = t._node[0]
        elif tape is not t._node[0]:
            raise ValueError("operands recorded on different tapes")
    return tape


def _ids(tape, *tensors):
    return tuple(None if t is None else tape.node_of(t) for t in tensors)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _wrap(a.data + b.data)
    tape = _tape_of(a, b)
    if tape is not None:
        tape._emit(out, _ids(tape, a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _wrap(a.data - b.data)
    tape = _tape_of(a, b)
    if tape is not None:
        tape._emit(out, _ids(tape, a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also accepts b shaped like a's spatial part.

    The broadcast form (a: [C, *S], b: [*S]) is what the per-cell fire mask
    needs: one multiplier per cell, shared across channels.
    """
    if a.shape == b.shape:
        out = _wrap(a.data * b.data)
        ad, bd = a.data, b.data
        tape = _tape_of(a, b)
        if tape is not None:
            tape._emit(out, _ids(tape, a, b), lambda g: (g * bd, g * ad))
        return out
    if len(b.shape) == len(a.shape) - 1 and a.shape[1:] == b.shape:
        out = _wrap(a.data * b.data[None])
        ad, bd = a.data, b.data
        tape = _tape_of(a, b)
        if tape is not None:
            tape._emit(
                out,
                _ids(tape, a, b),
                lambda g: (g * bd[None], np.sum(g * ad, axis=0)),
            )
        return out
    raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"div: shape mismatch {a.shape} vs {b.shape}")
    out = _wrap(a.data / b.data)
    ad, bd = a.data, b.data
    tape = _tape_of(a, b)
    if tape is not None:
        tape._emit(
            out,
            _ids(tape, a, b),
            lambda g: (g / bd, -g * ad / (bd * bd)),
        )
    return out


def affine(x: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """scale * x + shift with python-float coefficients."""
    out = _wrap(np.asarray(scale * x.data + shift, dtype=x.dtype))
    tape = _tape_of(x)
    if tape is not None:
        tape._emit(out, _ids(tape, x), lambda g: (np.asarray(g * scale, dtype=g.dtype),))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _wrap(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()))
    shape, dtype = x.shape, x.dtype
    tape = _tape_of(x)
    if tape is not None:
        tape._emit(out, _ids(tape, x), lambda g: (np.broadcast_to(g, shape).astype(dtype, copy=False),))
    return out


def relu(x: Tensor) -> Tensor:
    out = _wrap(np.maximum(x.data, 0))
    tape = _tape_of(x)
    if tape is not None:
        xd = x.data  # subgradient 0 at 0
        tape._emit(out, _ids(tape, x), lambda g: (g * (xd > 0),))
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = _wrap(s)
    tape = _tape_of(x)
    if tape is not None:
        tape._emit(out, _ids(tape, x), lambda g: (g * s * (1.0 - s),))
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _wrap(x.data.reshape(shape).copy())
    old = x.shape
    tape = _tape_of(x)
    if tape is not None:
        tape._emit(out, _ids(tape, x), lambda g: (g.reshape(old),))
    return out


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    spatial = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != spatial:
            raise ValueError("concat_channels: spatial shapes differ")
    out = _wrap(np.concatenate([p.data for p in parts], axis=0))
    tape = _tape_of(*parts)
    if tape is not None:
        sizes = [p.shape[0] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=0))

        tape._emit(out, _ids(tape, *parts), bwd)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for {x.shape[0]} channels")
    out = _wrap(x.data[start:stop].copy())
    shape, dtype = x.shape, x.dtype
    tape = _tape_of(x)
    if tape is not None:

        def bwd(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[start:stop] = g
            return (gx,)

        tape._emit(out, _ids(tape, x), bwd)
    return out


def crop_spatial(x: Tensor, extents) -> Tensor:
    """Keep the leading `extents` cells along every spatial axis."""
    extents = tuple(int(e) for e in extents)
    if len(extents) != len(x.shape) - 1:
        raise ValueError("crop_spatial: rank mismatch")
    for e, full in zip(extents, x.shape[1:]):
        if not 1 <= e <= full:
            raise ValueError(f"crop_spatial: extent {e} outside [1, {full}]")
    sl = (slice(None),) + tuple(slice(0, e) for e in extents)
    out = _wrap(x.data[sl].copy())
    shape, dtype = x.shape, x.dtype
    tape = _tape_of(x)
    if tape is not None:

        def bwd(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[sl] = g
            return (gx,)

        tape._emit(out, _ids(tape, x), bwd)
    return out


def pad_replicate_spatial(x: Tensor, extents) -> Tensor:
    """Grow spatial axes to `extents` by repeating the trailing edge."""
    extents = tuple(int(e) for e in extents)
    if len(extents) != len(x.shape) - 1:
        raise ValueError("pad_replicate_spatial: rank mismatch")
    pads = [(0, 0)]
    for e, cur in zip(extents, x.shape[1:]):
        if e < cur:
            raise ValueError(f"pad_replicate_spatial: target {e} smaller than {cur}")
        pads.append((0, e - cur))
    out = _wrap(np.pad(x.data, pads, mode="edge"))
    orig = x.shape
    tape = _tape_of(x)
    if tape is not None:

        def bwd(g):
            # grads of replicated cells fold back onto the edge cell, axis by axis
            g = np.asarray(g)
            for axis in range(1, len(orig)):
                n = orig[axis]
                if g.shape[axis] == n:
                    continue
                keep = np.take(g, range(n), axis=axis).copy()
                extra = np.take(g, range(n, g.shape[axis]), axis=axis).sum(axis=axis)
                idx = [slice(None)] * keep.ndim
                idx[axis] = n - 1
                keep[tuple(idx)] += extra
                g = keep
            return (g,)

        tape._emit(out, _ids(tape, x), bwd)
    return out


# ---------------------------------------------------------------------------
# structured ops


def _tap_offsets(widths, padded_extents):
    """Flat offset of every window tap in a row-major padded array."""
    strides = []
    acc = 1
    for e in reversed(padded_extents):
        strides.append(acc)
        acc *= e
    strides = strides[::-1]
    offsets = []
    for off in itertools.product(*(range(w) for w in widths)):
        offsets.append(sum(o * s for o, s in zip(off, strides)))
    return offsets


def _flat_correlate(flat, kdata, offsets, padded_extents, spatial):
    """Correlation via shifted contiguous slices of the flattened padded
    array; valid outputs live in the leading corner of the padded grid."""
    C, M = flat.shape
    out = np.zeros((C, M), dtype=flat.dtype)
    tmp = np.empty_like(flat)
    for ti, o in enumerate(offsets):
        np.multiply(kdata[:, ti, None], flat[:, o:], out=tmp[:, : M - o])
        out[:, : M - o] += tmp[:, : M - o]
    lead = (slice(None),) + tuple(slice(0, e) for e in spatial)
    return out.reshape((C,) + padded_extents)[lead]


def conv_depthwise(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                   padding: str = "zero", widths=None) -> Tensor:
    """Per-channel spatial cross-correlation with same-size output.

    `kernel` holds the window taps per channel, row-major over the window.
    By default the window is a cube of odd width k with k**d == taps; pass
    `widths` for a per-axis window (a width of 1 leaves that axis uncoupled,
    which is how batched states avoid mixing samples). Borders are zero
    padded, or edge replicated with padding="edge".
    """
    C = x.shape[0]
    spatial = x.shape[1:]
    d = len(spatial)
    if kernel.shape[0] != C:
        raise ValueError(f"conv_depthwise: kernel channels {kernel.shape[0]} != input channels {C}")
    taps = kernel.shape[1]
    if widths is None:
        k = round(taps ** (1.0 / d))
        while k ** d < taps:
            k += 1
        if k ** d != taps:
            raise ValueError(f"conv_depthwise: {taps} taps is not a {d}-d cube")
        widths = (k,) * d
    else:
        widths = tuple(int(w) for w in widths)
        if len(widths) != d or int(np.prod(widths)) != taps:
            raise ValueError(f"conv_depthwise: window {widths} does not match {taps} taps")
    for w in widths:
        if w % 2 == 0:
            raise ValueError(f"conv_depthwise: kernel width must be odd, got {w}")
    if bias is not None and bias.shape != (C,):
        raise ValueError(f"conv_depthwise: bias shape {bias.shape} != ({C},)")
    if padding not in ("zero", "edge"):
        raise ValueError(f"conv_depthwise: unknown padding {padding!r}")

    half = tuple((w - 1) // 2 for w in widths)
    pads = [(0, 0)] + [(p, p) for p in half]
    mode = "constant" if padding == "zero" else "edge"
    xp = np.pad(x.data, pads, mode=mode)
    padded_extents = xp.shape[1:]
    offsets = _tap_offsets(widths, padded_extents)
    flat = xp.reshape(C, -1)
    of = _flat_correlate(flat, kernel.data, offsets, padded_extents, spatial)
    if bias is not None:
        of = of + bias.data.reshape((C,) + (1,) * d)
    out = _wrap(np.asarray(of, dtype=xp.dtype))

    tape = _tape_of(x, kernel, bias)
    if tape is not None:
        kdata = kernel.data
        xshape = x.shape

        def bwd(g):
            M = flat.shape[1]
            # upstream grad embedded at the leading corner of the padded grid
            gfull = np.zeros((C,) + tuple(padded_extents), dtype=g.dtype)
            gfull[(slice(None),) + tuple(slice(0, e) for e in spatial)] = g
            gflat = gfull.reshape(C, M)
            gk = np.empty((C, taps), dtype=g.dtype)
            gxp = np.zeros((C, M), dtype=g.dtype)
            tmp = np.empty_like(gflat)
            for ti, o in enumerate(offsets):
                gk[:, ti] = np.einsum("cm,cm->c", gflat[:, :M - o], flat[:, o:])
                np.multiply(kdata[:, ti, None], gflat[:, : M - o], out=tmp[:, : M - o])
                gxp[:, o:] += tmp[:, : M - o]
            gxp = gxp.reshape((C,) + tuple(padded_extents))
            if padding == "edge":
                gx = _fold_pads(gxp, xshape, half)
            else:
                center = (slice(None),) + tuple(slice(p, p + e) for p, e in zip(half, spatial))
                gx = gxp[center]
            gb = None if bias is None else g.reshape(C, -1).sum(axis=1)
            return (np.ascontiguousarray(gx), gk, gb)

        tape._emit(out, _ids(tape, x, kernel, bias), bwd)
    return out


def _fold_pads(gp, orig_shape, half):
    """Fold gradients of replicated border cells back onto the edge cells."""
    folded = gp
    for axis in range(1, len(orig_shape)):
        p = half[axis - 1]
        if p == 0:
            continue
        n = orig_shape[axis]
        lead = np.take(folded, range(0, p), axis=axis).sum(axis=axis)
        body = np.take(folded, range(p, p + n), axis=axis).copy()
        tail = np.take(folded, range(p + n, folded.shape[axis]), axis=axis).sum(axis=axis)
        first = [slice(None)] * body.ndim
        first[axis] = 0
        last = [slice(None)] * body.ndim
        last[axis] = n - 1
        body[tuple(first)] += lead
        body[tuple(last)] += tail
        folded = body
    return folded


def pointwise_dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-cell linear map across channels (a 1x1 convolution)."""
    cin = x.shape[0]
    spatial = x.shape[1:]
    if weight.shape[1] != cin:
        raise ValueError(f"pointwise_dense: weight expects {weight.shape[1]} channels, input has {cin}")
    cout = weight.shape[0]
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"pointwise_dense: bias shape {bias.shape} != ({cout},)")
    xf = x.data.reshape(cin, -1)
    of = weight.data @ xf
    if bias is not None:
        of = of + bias.data[:, None]
    out = _wrap(np.asarray(of.reshape((cout,) + spatial), dtype=of.dtype))

    tape = _tape_of(x, weight, bias)
    if tape is not None:
        wdata = weight.data

        def bwd(g):
            gf = g.reshape(cout, -1)
            gx = (wdata.T @ gf).reshape((cin,) + spatial)
            gw = gf @ xf.T
            gb = None if bias is None else gf.sum(axis=1)
            return (gx, gw, gb)

        tape._emit(out, _ids(tape, x, weight, bias), bwd)
    return out


def _block_axes(d):
    # [C, e1, f1, e2, f2, ...] -> reduce over the f axes
    return tuple(2 + 2 * i for i in range(d))


def _per_axis_factors(factor, d):
    factors = (factor,) * d if isinstance(factor, int) else tuple(int(f) for f in factor)
    if len(factors) != d:
        raise ValueError(f"expected {d} resample factors, got {factors}")
    for f in factors:
        if f < 1:
            raise ValueError(f"resample factor must be >= 1, got {factors}")
    return factors


def downsample_mean(x: Tensor, factor) -> Tensor:
    """Non-overlapping mean pooling; replicate-pads trailing edges first if
    needed. `factor` may be one integer or one per spatial axis."""
    spatial = x.shape[1:]
    d = len(spatial)
    factors = _per_axis_factors(factor, d)
    if all(f == 1 for f in factors):
        return affine(x, 1.0, 0.0)
    target = tuple(-(-e // f) * f for e, f in zip(spatial, factors))
    if target != spatial:
        x = pad_replicate_spatial(x, target)
    C = x.shape[0]
    split = [C]
    for e, f in zip(target, factors):
        split += [e // f, f]
    out_arr = x.data.reshape(split).mean(axis=_block_axes(d))
    out = _wrap(np.asarray(out_arr, dtype=x.dtype))

    tape = _tape_of(x)
    if tape is not None:
        scale = 1.0 / float(np.prod(factors))
        padded_shape = x.shape

        def bwd(g):
            gx = np.asarray(g * scale, dtype=g.dtype)
            for axis, f in enumerate(factors, start=1):
                if f > 1:
                    gx = np.repeat(gx, f, axis=axis)
            return (gx.reshape(padded_shape),)

        tape._emit(out, _ids(tape, x), bwd)
    return out


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """Nearest-neighbor replication along every spatial axis; `factor` may be
    one integer or one per axis."""
    d = len(x.shape) - 1
    factors = _per_axis_factors(factor, d)
    if all(f == 1 for f in factors):
        return affine(x, 1.0, 0.0)
    arr = x.data
    for axis, f in enumerate(factors, start=1):
        if f > 1:
            arr = np.repeat(arr, f, axis=axis)
    out = _wrap(np.asarray(arr, dtype=x.dtype))

    tape = _tape_of(x)
    if tape is not None:
        C = x.shape[0]
        small = x.shape[1:]

        def bwd(g):
            split = [C]
            for e, f in zip(small, factors):
                split += [e, f]
            return (g.reshape(split).sum(axis=_block_axes(d)),)

        tape._emit(out, _ids(tape, x), bwd)
    return out


def resample(x: Tensor, factor: int, direction: str) -> Tensor:
    if direction == "down":
        return downsample_mean(x, factor)
    if direction == "up":
        return upsample_nearest(x, factor)
    raise ValueError(f"resample direction must be 'down' or 'up', got {direction!r}")


def masked_residual(state: Tensor, update: Tensor, mask: Tensor) -> Tensor:
    """state + update * mask in one pass; the mask broadcasts over the
    channel axis and takes no gradient."""
    if update.shape != state.shape:
        raise ValueError(f"masked_residual: shape mismatch {state.shape} vs {update.shape}")
    if mask.shape == state.shape:
        mb = mask.data
    elif mask.shape == state.shape[1:]:
        mb = mask.data[None]
    else:
        raise ValueError(f"masked_residual: mask shape {mask.shape} does not fit {state.shape}")
    out = _wrap(state.data + update.data * mb)
    tape = _tape_of(state, update)
    if tape is not None:
        tape._emit(out, _ids(tape, state, update), lambda g: (g, g * mb))
    return out


def bernoulli_mask(spatial_shape, p: float, rng: "Rng") -> Tensor:
    """One {0,1} draw per cell (no gradient); channels share the cell's draw."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fire probability must be in [0, 1], got {p}")
    _check_shape(spatial_shape)
    return _wrap(rng.bernoulli(tuple(spatial_shape), p))


def focal_bce_with_logits(logits: Tensor, target: Tensor, gamma: float = 2.0) -> Tensor:
    """Mean binary focal cross-entropy, computed stably from logits.

    The target is treated as a constant; saturated logits stay finite because
    log-probabilities come from softplus rather than from log(sigmoid).
    """
    if logits.shape != target.shape:
        raise ValueError(f"focal loss: shape mismatch {logits.shape} vs {target.shape}")
    x = logits.data
    t = target.data
    logp = -np.logaddexp(0.0, -x)
    log1mp = -np.logaddexp(0.0, x)
    p = _sigmoid(x)
    q = 1.0 - p
    per = -(t * q ** gamma * logp + (1.0 - t) * p ** gamma * log1mp)
    out = _wrap(np.asarray(per.mean(), dtype=x.dtype).reshape(()))

    tape = _tape_of(logits)
    if tape is not None:
        n = x.size

        def bwd(g):
            dldx = t * (gamma * p * q ** gamma * logp - q ** (gamma + 1.0)) + (
                1.0 - t
            ) * (p ** (gamma + 1.0) - gamma * p ** gamma * q * log1mp)
            return (np.asarray(g * dldx / n, dtype=x.dtype),)

        tape._emit(out, _ids(tape, logits), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, params, eps: float = 1e-3, n_coords: int | None = None,
                      rng: "Rng | None" = None) -> float:
    """Max relative disagreement between taped gradients and central differences.

    `f` maps a list of tensors to a scalar tensor and must be deterministic
    (fix any fire masks before calling). Both sides of the comparison run in
    float64. With `n_coords` set, only that many randomly chosen coordinates
    per parameter are probed, which keeps checks over full forward passes
    affordable.
    """
    tape = Tape()
    p64 = [Tensor(p.data, dtype=np.float64) for p in params]
    ids = [tape.watch(p) for p in p64]
    loss = f(p64)
    grads = tape.backward(loss)

    worst = 0.0
    for pi, (p, nid) in enumerate(zip(p64, ids)):
        analytic = grads[nid].data.reshape(-1)
        n = p.size
        if n_coords is None or n_coords >= n:
            coords = range(n)
        else:
            picker = rng if rng is not None else Rng(0)
            coords = sorted(set(int(c) for c in picker.choice(n, n_coords)))
        base = p.data.reshape(-1)
        for c in coords:
            bumped = [q if j != pi else None for j, q in enumerate(p64)]
            plus = base.copy()
            plus[c] += eps
            minus = base.copy()
            minus[c] -= eps
            bumped[pi] = Tensor(plus.reshape(p.shape), dtype=np.float64)
            f_plus = f(bumped).item()
            bumped[pi] = Tensor(minus.reshape(p.shape), dtype=np.float64)
            f_minus = f(bumped).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[c])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# reproducible randomness


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def _label64(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _M64
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Counter-based random stream: output = pure function of (seed, stream, call).

    Each draw uses an isolated counter window, so replaying the same call
    sequence is bitwise reproducible, and `derive` hands out statistically
    independent child streams without any shared mutable state.
    """

    def __init__(self, seed: int, stream: int = 0, calls: int = 0):
        self.seed = int(seed) & _M64
        self.stream = int(stream) & _M64
        self.calls = int(calls)

    def _generator(self) -> np.random.Generator:
        key = self.seed | (self.stream << 64)
        bg = np.random.Philox(counter=self.calls << 128, key=key)
        self.calls += 1
        return np.random.Generator(bg)

    def derive(self, *labels) -> "Rng":
        h = self.stream
        for lab in labels:
            h = _splitmix64(h ^ _label64(lab))
        return Rng(self.seed, h, 0)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0):
        u = self._generator().random(tuple(shape))
        return lo + (hi - lo) * u

    def normal(self, shape, sigma: float = 1.0):
        return sigma * self._generator().standard_normal(tuple(shape))

    def bernoulli(self, shape, p: float):
        u = self._generator().random(tuple(shape))
        return (u < p).astype(np.float32)

    def integers(self, lo: int, hi: int):
        """One integer in [lo, hi] inclusive."""
        return int(self._generator().integers(lo, hi + 1))

    def permutation(self, n: int):
        return self._generator().permutation(n)

    def choice(self, n: int, k: int):
        return self._generator().choice(n, size=k, replace=False)

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "calls": self.calls}

    @staticmethod
    def from_state(state: dict) -> "Rng":
        return Rng(state["seed"], state["stream"], state["calls"])
