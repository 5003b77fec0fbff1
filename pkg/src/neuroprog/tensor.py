"""Reverse-mode automatic differentiation on a flat tape.

Every differentiable primitive the networks need lives here: affine maps,
3D cross-correlation, leaky ReLU, pooling, batch normalization, softmax,
plus the elementwise/reduction glue. All math is float64. Each primitive
records one entry on a Tape; `backward` replays the tape once in reverse.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError


class TapeRecord:
    __slots__ = ("op", "out_id", "in_ids", "needs", "backward_fn")

    def __init__(self, op, out_id, in_ids, needs, backward_fn):
        self.op = op
        self.out_id = out_id
        self.in_ids = in_ids
        self.needs = needs
        self.backward_fn = backward_fn


_id_counter = iter(range(1 << 62)).__next__


class Tape:
    """Ordered record of primitive applications.

    Records are appended in execution order, so the tape is topologically
    sorted by construction; the backward sweep visits each record exactly
    once, in reverse. When an op joins tensors living on different tapes
    (independent branches built separately), the tapes are spliced into
    one, preserving record order.
    """

    def __init__(self):
        self.records = []
        self.tensors = {}
        self.out_ids = set()

    @staticmethod
    def fresh_id():
        return _id_counter()

    def register(self, tensor):
        if tensor.tape is not self:
            tensor.tape = self
            tensor.node_id = self.fresh_id()
            self.tensors[tensor.node_id] = tensor
        return tensor.node_id

    def absorb(self, other):
        """Splice another tape's records in front of future ones; ids are
        globally unique so no remapping is needed."""
        self.records.extend(other.records)
        self.out_ids.update(other.out_ids)
        self.tensors.update(other.tensors)
        for t in other.tensors.values():
            t.tape = self


class Tensor:
    """N-dimensional float64 value with a gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(name, inputs, out_data, backward_fn):
    """Record an arbitrary primitive on the tape.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    input, in order. Used by other modules (losses, gradient reversal) to
    define primitives without touching tape internals.
    """
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if not req:
        return out
    tape = None
    for t in inputs:
        # only graph-produced tensors anchor a tape; a leaf may carry a
        # stale pointer from an earlier step and must not resurrect it
        if t.tape is not None and t.node_id in t.tape.out_ids:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                tape.absorb(t.tape)
    if tape is None:
        tape = Tape()
    for t in inputs:
        if t.tape is not tape or t.node_id not in tape.tensors:
            t.tape = None  # force re-registration onto the active tape
            tape.register(t)
    in_ids = tuple(t.node_id for t in inputs)
    out.tape = tape
    out.node_id = tape.fresh_id()
    tape.tensors[out.node_id] = out
    tape.out_ids.add(out.node_id)
    tape.records.append(
        TapeRecord(name, out.node_id, in_ids,
                   tuple(t.requires_grad for t in inputs), backward_fn)
    )
    return out


def release_graph(tensor):
    """Drop the tape reachable from `tensor`.

    Tapes and their tensors reference each other, and backward closures
    capture activation buffers, so a finished graph is only reclaimed by a
    full gc cycle pass. Training loops build one multi-hundred-megabyte
    graph per step; clearing the cycle by hand returns that memory to
    refcounting immediately. Leaves re-register onto the next tape they
    participate in.
    """
    tape = tensor.tape
    if tape is None:
        return
    for t in tape.tensors.values():
        t.tape = None
        t.node_id = None
    tape.records.clear()
    tape.tensors.clear()
    tape.out_ids.clear()


def backward(root, retain_graph=False):
    """Populate `.grad` of every reachable leaf that requires grad.

    The root must be a scalar (size 1). Gradients accumulate additively
    across fan-out; leaves not touched by the graph are left alone. The
    graph is released afterwards unless `retain_graph` is set.
    """
    if root.size != 1:
        raise ContractError(
            f"backward requires a scalar root, got shape {root.data.shape}")
    if root.tape is None:
        return
    tape = root.tape
    grads = {root.node_id: np.ones_like(root.data)}
    for rec in reversed(tape.records):
        go = grads.pop(rec.out_id, None)
        if go is None:
            continue
        gins = rec.backward_fn(go)
        for in_id, needs, g in zip(rec.in_ids, rec.needs, gins):
            if not needs or g is None:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + g
            else:
                grads[in_id] = g
    for nid, g in grads.items():
        t = tape.tensors.get(nid)
        if t is None or not t.requires_grad or nid in tape.out_ids:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad = t.grad + g
    if not retain_graph:
        release_graph(root)


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b):
    out = a.data + b.data
    return custom_op("add", (a, b), out, lambda go: (
        _sum_to_shape(go, a.data.shape), _sum_to_shape(go, b.data.shape)))


def mul(a, b):
    out = a.data * b.data
    return custom_op("mul", (a, b), out, lambda go: (
        _sum_to_shape(go * b.data, a.data.shape),
        _sum_to_shape(go * a.data, b.data.shape)))


def exp(a):
    out = np.exp(a.data)
    return custom_op("exp", (a,), out, lambda go: (go * out,))


def log(a):
    out = np.log(a.data)
    return custom_op("log", (a,), out, lambda go: (go / a.data,))


def tsum(a):
    out = np.asarray(a.data.sum())
    return custom_op("sum", (a,), out,
                     lambda go: (np.broadcast_to(go, a.data.shape).copy(),))


def tmean(a):
    n = a.data.size
    out = np.asarray(a.data.mean())
    return custom_op("mean", (a,), out, lambda go: (
        np.broadcast_to(go / n, a.data.shape).copy(),))


def mean_axes(a, axes):
    axes = tuple(axes)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    out = a.data.mean(axis=axes)

    def bwd(go):
        g = np.expand_dims(go, axes) / n
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return custom_op("mean_axes", (a,), out, bwd)


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return custom_op("reshape", (a,), out,
                     lambda go: (go.reshape(a.data.shape),))


def concat(tensors, axis=1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(go):
        return tuple(np.split(go, splits, axis=axis))

    return custom_op("concat", tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# network primitives


def affine(x, w, b):
    """out[r, c] = sum_k x[r, k] * w[k, c] + b[c]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(
            f"affine expects 2-D operands, got x{x.data.shape} w{w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"affine inner axes disagree: x axis 1 is {x.data.shape[1]}, "
            f"w axis 0 is {w.data.shape[0]}")
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"affine bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = x.data @ w.data + b.data

    def bwd(go):
        return (go @ w.data.T, x.data.T @ go, go.sum(axis=0))

    return custom_op("affine", (x, w, b), out, bwd)


def _triple(v):
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def conv3d(x, k, stride=1, padding=0):
    """3D cross-correlation over (B, C, D, H, W) with kernel (F, C, kd, kh, kw)."""
    if x.data.ndim != 5 or k.data.ndim != 5:
        raise DimensionError(
            f"conv3d expects 5-D operands, got x{x.data.shape} k{k.data.shape}")
    stride = _triple(stride)
    padding = _triple(padding)
    if min(stride) < 1:
        raise DimensionError(f"conv3d stride must be >= 1, got {stride}")
    B, C, D, H, W = x.data.shape
    F, Ck, kd, kh, kw = k.data.shape
    if Ck != C:
        raise DimensionError(
            f"conv3d channel axes disagree: input has {C}, kernel expects {Ck}")
    pd, ph, pw = padding
    Dp, Hp, Wp = D + 2 * pd, H + 2 * ph, W + 2 * pw
    if kd > Dp or kh > Hp or kw > Wp:
        raise DimensionError(
            f"kernel ({kd},{kh},{kw}) larger than padded input ({Dp},{Hp},{Wp})")
    sd, sh, sw = stride
    od = (Dp - kd) // sd + 1
    oh = (Hp - kh) // sh + 1
    ow = (Wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((B, F, od, oh, ow))
    # accumulate over kernel offsets: each offset is one (F, C) contraction
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                patch = xp[:, :, a:a + od * sd:sd, b:b + oh * sh:sh,
                           c:c + ow * sw:sw]
                out += np.einsum("bcdhw,fc->bfdhw", patch, k.data[:, :, a, b, c],
                                 optimize=True)

    def bwd(go):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    patch = xp[:, :, a:a + od * sd:sd, b:b + oh * sh:sh,
                               c:c + ow * sw:sw]
                    gk[:, :, a, b, c] = np.einsum(
                        "bfdhw,bcdhw->fc", go, patch, optimize=True)
                    gxp[:, :, a:a + od * sd:sd, b:b + oh * sh:sh,
                        c:c + ow * sw:sw] += np.einsum(
                            "bfdhw,fc->bcdhw", go, k.data[:, :, a, b, c],
                            optimize=True)
        gx = gxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W]
        return (gx, gk)

    return custom_op("conv3d", (x, k), out, bwd)


def leaky_relu(x, slope=0.01):
    if not (0.0 < slope < 1.0):
        raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")
    pos = x.data > 0  # derivative at exactly 0 is the slope
    out = np.where(pos, x.data, slope * x.data)
    return custom_op("leaky_relu", (x,), out,
                     lambda go: (go * np.where(pos, 1.0, slope),))


def pool3d(x, kind, window, stride=None):
    """Max or average pooling over the three trailing spatial axes."""
    if kind not in ("max", "avg"):
        raise ContractError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 5:
        raise DimensionError(f"pool3d expects 5-D input, got {x.data.shape}")
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    B, C, D, H, W = x.data.shape
    kd, kh, kw = window
    if kd > D or kh > H or kw > W:
        raise DimensionError(
            f"pool window {window} exceeds input spatial dims ({D},{H},{W})")
    sd, sh, sw = stride
    od = (D - kd) // sd + 1
    oh = (H - kh) // sh + 1
    ow = (W - kw) // sw + 1
    nwin = kd * kh * kw
    # gather windows: (B, C, od, oh, ow, nwin), offset-major ordering
    cols = np.empty((B, C, od, oh, ow, nwin))
    i = 0
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[..., i] = x.data[:, :, a:a + od * sd:sd,
                                      b:b + oh * sh:sh, c:c + ow * sw:sw]
                i += 1
    if kind == "avg":
        out = cols.mean(axis=-1)

        def bwd(go):
            gx = np.zeros_like(x.data)
            share = go / nwin
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gx[:, :, a:a + od * sd:sd, b:b + oh * sh:sh,
                           c:c + ow * sw:sw] += share
            return (gx,)

        return custom_op("avg_pool3d", (x,), out, bwd)

    arg = cols.argmax(axis=-1)  # first index on ties
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]
    oa, rem = np.divmod(arg, kh * kw)
    ob, oc = np.divmod(rem, kw)
    base_d = np.arange(od)[:, None, None] * sd
    base_h = np.arange(oh)[None, :, None] * sh
    base_w = np.arange(ow)[None, None, :] * sw
    src_d = base_d + oa
    src_h = base_h + ob
    src_w = base_w + oc

    def bwd(go):
        gx = np.zeros_like(x.data)
        bi = np.arange(B)[:, None, None, None, None]
        ci = np.arange(C)[None, :, None, None, None]
        np.add.at(gx, (bi, ci, src_d, src_h, src_w), go)
        return (gx,)

    return custom_op("max_pool3d", (x,), out, bwd)


def batchnorm3d(x, gamma, beta, running_mean, running_var, mode,
                eps=1e-5, momentum=0.1):
    """Per-channel normalization over (B, C, D, H, W).

    Train mode uses batch statistics and updates the running buffers in
    place (unbiased variance, like the usual convention); eval mode uses
    the running buffers. Buffers are plain ndarrays, not Tensors.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm mode must be train|eval, got {mode!r}")
    if x.data.ndim != 5:
        raise DimensionError(f"batchnorm3d expects 5-D input, got {x.data.shape}")
    B, C, D, H, W = x.data.shape
    n = B * D * H * W
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError(
                "batchnorm in train mode needs >= 2 elements per channel")
        m = x.data.mean(axis=(0, 2, 3, 4))
        v = x.data.var(axis=(0, 2, 3, 4))
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v * n / max(n - 1, 1)
    else:
        m = running_mean
        v = running_var
    m4 = m.reshape(1, C, 1, 1, 1)
    std = np.sqrt(v + eps).reshape(1, C, 1, 1, 1)
    xhat = (x.data - m4) / std
    out = gamma.data.reshape(1, C, 1, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1, 1)
    g4 = gamma.data.reshape(1, C, 1, 1, 1)

    if mode == "train":
        def bwd(go):
            dxhat = go * g4
            s1 = dxhat.sum(axis=(0, 2, 3, 4), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3, 4), keepdims=True)
            gx = (dxhat - s1 / n - xhat * s2 / n) / std
            ggamma = (go * xhat).sum(axis=(0, 2, 3, 4))
            gbeta = go.sum(axis=(0, 2, 3, 4))
            return (gx, ggamma, gbeta)
    else:
        def bwd(go):
            gx = go * g4 / std
            ggamma = (go * xhat).sum(axis=(0, 2, 3, 4))
            gbeta = go.sum(axis=(0, 2, 3, 4))
            return (gx, ggamma, gbeta)

    return custom_op("batchnorm3d", (x, gamma, beta), out, bwd)


def softmax(x):
    """Row softmax over (B, K) with max-subtraction for stability."""
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise DimensionError(
            f"softmax expects (B, K) with K >= 2, got {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("softmax input must be finite")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(go):
        dot = (go * p).sum(axis=1, keepdims=True)
        return (p * (go - dot),)

    return custom_op("softmax", (x,), p, bwd)
