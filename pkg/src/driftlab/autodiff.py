"""Define-by-run reverse-mode differentiation over grid-valued arrays.

A Tape records operations as they execute; nodes are stored in creation
order, which is a topological order, and backward walks them exactly in
reverse, accumulating gradients additively at fan-out points.  Everything is
float64.  Spatial arrays are channels-last, (..., ny, nx, c): the layout
keeps the nine shifted GEMMs of the periodic 3x3 convolution contiguous,
which is what makes the pure-numpy training loop affordable.  Convolution
weights keep the conventional (c_out, c_in, k, k) layout.
"""

import struct
import weakref

import numpy as np

from .errors import FormatError, NumericalBlowupError
from .grid import TIE_EPS, angle_tables, circular_mean_xy


class Node:
    __slots__ = ("op", "parents", "outputs", "backward", "requires")

    def __init__(self, op, parents, outputs, backward, requires):
        self.op = op
        self.parents = parents
        self.outputs = outputs
        self.backward = backward
        self.requires = requires


class Var:
    """A value on the tape.  requires_grad marks leaves that want gradients;
    interior nodes inherit it from their parents.

    The back-reference to the tape is weak.  Nodes hold their parent Vars,
    so a strong reference here would tie every tape into a cycle that only
    the garbage collector could break, and a few abandoned tapes of
    activations are enough to exhaust memory before it runs."""

    __slots__ = ("_tape_ref", "vid", "value", "requires_grad")

    def __init__(self, tape, vid, value, requires_grad):
        self._tape_ref = weakref.ref(tape)
        self.vid = vid
        self.value = value
        self.requires_grad = requires_grad

    @property
    def tape(self):
        tape = self._tape_ref()
        if tape is None:
            raise RuntimeError("the tape recording this variable has been "
                               "freed")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    def __init__(self):
        self.nodes = []
        self.n_vars = 0

    def _new_var(self, value, requires_grad):
        value = np.asarray(value, dtype=np.float64)
        var = Var(self, self.n_vars, value, requires_grad)
        self.n_vars += 1
        return var

    def leaf(self, value, requires_grad=False):
        var = self._new_var(value, requires_grad)
        self.nodes.append(Node("leaf", (), (var.vid,), None, requires_grad))
        return var

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    def record(self, op, parents, values, backward):
        """Append one operation; values may be a single array or a tuple."""
        requires = any(p.requires_grad for p in parents)
        single = not isinstance(values, tuple)
        if single:
            values = (values,)
        outs = tuple(self._new_var(v, requires) for v in values)
        self.nodes.append(Node(op, tuple(p.vid for p in parents),
                               tuple(o.vid for o in outs),
                               backward, requires))
        return outs[0] if single else outs


def backward(loss, wrt=None):
    """Gradients of a scalar loss with respect to tape leaves.

    Walks the nodes in exact reverse creation order.  Returns a dict-like
    store queried with the Var objects; leaves that never influence the loss
    report zero.  Interior gradients are freed as soon as their node has
    been processed unless the Var is listed in wrt.
    """
    tape = loss.tape
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not np.isfinite(loss.value).all():
        raise NumericalBlowupError("loss is non-finite")
    keep = {v.vid for v in wrt} if wrt else set()
    grads = {loss.vid: np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        gouts = [grads.get(vid) for vid in node.outputs]
        if node.op == "leaf" or node.backward is None:
            continue
        if all(g is None for g in gouts) or not node.requires:
            for vid in node.outputs:
                if vid in grads and vid not in keep:
                    del grads[vid]
            continue
        gparents = node.backward(*gouts)
        for vid, g in zip(node.parents, gparents):
            if g is None:
                continue
            if vid in grads:
                grads[vid] = grads[vid] + g
            else:
                grads[vid] = g
        for vid in node.outputs:
            if vid in grads and vid not in keep:
                del grads[vid]
    return GradStore(grads)


class GradStore:
    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, var):
        g = self._grads.get(var.vid)
        if g is None:
            return np.zeros_like(var.value)
        return g

    def __contains__(self, var):
        return var.vid in self._grads


def _as_var(tape, x):
    if isinstance(x, Var):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the target shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    b = _as_var(a.tape, b)
    def bwd(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))
    return a.tape.record("add", (a, b), a.value + b.value, bwd)


def sub(a, b):
    b = _as_var(a.tape, b)
    def bwd(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))
    return a.tape.record("sub", (a, b), a.value - b.value, bwd)


def mul(a, b):
    b = _as_var(a.tape, b)
    def bwd(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))
    return a.tape.record("mul", (a, b), a.value * b.value, bwd)


def scale(a, c):
    c = float(c)
    return a.tape.record("scale", (a,), c * a.value, lambda g: (c * g,))


def neg(a):
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def sum_op(a, axis=None, keepdims=False):
    val = a.value.sum(axis=axis, keepdims=keepdims)
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)
    return a.tape.record("sum", (a,), val, bwd)


def mean_op(a, axis=None, keepdims=False):
    val = a.value.mean(axis=axis, keepdims=keepdims)
    n = a.value.size / val.size
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.value.shape).copy(),)
    return a.tape.record("mean", (a,), val, bwd)


def reshape(a, shape):
    orig = a.value.shape
    def bwd(g):
        return (g.reshape(orig),)
    return a.tape.record("reshape", (a,), a.value.reshape(shape), bwd)


def moveaxis(a, src, dst):
    def bwd(g):
        return (np.moveaxis(g, dst, src).copy(),)
    return a.tape.record("moveaxis", (a,),
                         np.ascontiguousarray(np.moveaxis(a.value, src, dst)), bwd)


def roll(a, shift, axis):
    def bwd(g):
        return (np.roll(g, tuple(-s for s in np.atleast_1d(shift)), axis),)
    return a.tape.record("roll", (a,), np.roll(a.value, shift, axis), bwd)


def concat(vars_, axis=-1):
    sizes = [v.value.shape[axis] for v in vars_]
    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis))
    val = np.concatenate([v.value for v in vars_], axis=axis)
    return vars_[0].tape.record("concat", tuple(vars_), val, bwd)


def stack(vars_, axis=0):
    def bwd(g):
        return tuple(np.ascontiguousarray(piece.squeeze(axis))
                     for piece in np.split(g, len(vars_), axis=axis))
    val = np.stack([v.value for v in vars_], axis=axis)
    return vars_[0].tape.record("stack", tuple(vars_), val, bwd)


def take_index(a, idx, axis):
    """Select one slice along an axis (the axis is dropped)."""
    def bwd(g):
        out = np.zeros_like(a.value)
        sl = [slice(None)] * a.value.ndim
        sl[axis] = idx
        out[tuple(sl)] = g
        return (out,)
    val = np.ascontiguousarray(np.take(a.value, idx, axis=axis))
    return a.tape.record("take", (a,), val, bwd)


def relu(a):
    mask = a.value > 0.0
    def bwd(g):
        return (np.where(mask, g, 0.0),)
    return a.tape.record("relu", (a,), np.maximum(a.value, 0.0), bwd)


def leaky_relu(a, slope=0.1):
    mask = a.value > 0.0
    def bwd(g):
        return (np.where(mask, g, slope * g),)
    return a.tape.record("leaky_relu", (a,),
                         np.where(mask, a.value, slope * a.value), bwd)


def sigmoid(a):
    with np.errstate(over="ignore"):
        val = 1.0 / (1.0 + np.exp(-a.value))
    def bwd(g):
        return (g * val * (1.0 - val),)
    return a.tape.record("sigmoid", (a,), val, bwd)


def tanh(a):
    val = np.tanh(a.value)
    def bwd(g):
        return (g * (1.0 - val * val),)
    return a.tape.record("tanh", (a,), val, bwd)


def sqrt_safe(a):
    """Square root with a zero subgradient at zero, so exact hits on the
    reference contribute no gradient instead of an infinity."""
    val = np.sqrt(np.maximum(a.value, 0.0))
    def bwd(g):
        return (np.where(val > 0.0, g / (2.0 * np.where(val > 0.0, val, 1.0)), 0.0),)
    return a.tape.record("sqrt", (a,), val, bwd)


def wrap_delta_op(a, ref, periods):
    """Minimal-image difference a - ref; gradient passes straight through.

    ref is a constant array; periods has one period per trailing component.
    """
    periods = np.asarray(periods, dtype=np.float64)
    d = a.value - ref
    val = d - periods * np.round(d / periods)
    def bwd(g):
        return (g,)
    return a.tape.record("wrap_delta", (a,), val, bwd)


def wrap_domain_op(a, origin, periods):
    """Wrap positions into the fundamental domain; gradient passes through."""
    origin = np.asarray(origin, dtype=np.float64)
    periods = np.asarray(periods, dtype=np.float64)
    val = origin + np.mod(a.value - origin, periods)
    def bwd(g):
        return (g,)
    return a.tape.record("wrap_domain", (a,), val, bwd)


# ---------------------------------------------------------------------------
# convolution stack

def conv2d(x, w, b):
    """Periodic 3x3 cross-correlation on channels-last grids.

    x : Var (..., ny, nx, c_in)
    w : Var (c_out, c_in, 3, 3)
    b : Var (c_out,)

    out[i, j] = sum_{dy, dx in -1..1} x[i + dy, j + dx] . w[:, :, dy+1, dx+1]
    with periodic wraparound, evaluated as nine shifted GEMMs.
    """
    xv = x.value
    lead = xv.shape[:-3]
    ny, nx, cin = xv.shape[-3:]
    cout = w.value.shape[0]
    x4 = xv.reshape((-1, ny, nx, cin))
    wt = np.ascontiguousarray(w.value.transpose(2, 3, 1, 0))  # (3, 3, cin, cout)
    acc = None
    for ky in range(3):
        for kx in range(3):
            shifted = np.roll(x4, (1 - ky, 1 - kx), axis=(1, 2)).reshape(-1, cin)
            term = shifted @ wt[ky, kx]
            acc = term if acc is None else acc + term
    out = acc.reshape(lead + (ny, nx, cout)) + b.value

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            # one merged GEMM for all nine taps, then unshift and add
            wt_all = np.ascontiguousarray(
                wt.reshape(9, cin, cout).transpose(2, 0, 1).reshape(cout, 9 * cin))
            big = (g2 @ wt_all).reshape(-1, 9, cin)
            gx4 = np.zeros_like(x4)
            for ky in range(3):
                for kx in range(3):
                    piece = big[:, ky * 3 + kx, :].reshape(x4.shape)
                    gx4 += np.roll(piece, (ky - 1, kx - 1), axis=(1, 2))
            gx = gx4.reshape(xv.shape)
        gw = None
        if w.requires_grad:
            gw = np.empty_like(w.value)
            for ky in range(3):
                for kx in range(3):
                    shifted = np.roll(x4, (1 - ky, 1 - kx), axis=(1, 2)).reshape(-1, cin)
                    gw[:, :, ky, kx] = (shifted.T @ g2).T
        return (gx, gw, gb)

    return x.tape.record("conv2d", (x, w, b), out, bwd)


def conv1d_time(x, w, b):
    """Width-3 correlation along the time axis with replication padding.

    x : Var (..., k, c_in);  w : Var (c_out, c_in, 3);  b : Var (c_out,)
    """
    xv = x.value
    k = xv.shape[-2]
    cin = xv.shape[-1]
    cout = w.value.shape[0]
    xp = np.concatenate([xv[..., :1, :], xv, xv[..., -1:, :]], axis=-2)
    out = np.zeros(xv.shape[:-1] + (cout,))
    for d in range(3):
        out += xp[..., d:d + k, :] @ w.value[:, :, d].T
    out += b.value

    def bwd(g):
        gb = g.reshape(-1, cout).sum(axis=0) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.empty_like(w.value)
            for d in range(3):
                seg = xp[..., d:d + k, :].reshape(-1, cin)
                gw[:, :, d] = g.reshape(-1, cout).T @ seg
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for d in range(3):
                gxp[..., d:d + k, :] += g @ w.value[:, :, d]
            gx = gxp[..., 1:k + 1, :].copy()
            gx[..., 0, :] += gxp[..., 0, :]
            gx[..., -1, :] += gxp[..., -1, :]
        return (gx, gw, gb)

    return x.tape.record("conv1d", (x, w, b), out, bwd)


def lstm_gates(z, c_prev):
    """Fused gate nonlinearity of a convolutional LSTM cell.

    z holds the four stacked gate pre-activations (..., 4c) in i, f, o, g
    order; returns (h, c).
    """
    c4 = z.value.shape[-1]
    if c4 % 4:
        raise ValueError("gate pre-activation channel count must be divisible by 4")
    c = c4 // 4
    zi, zf, zo, zg = (z.value[..., i * c:(i + 1) * c] for i in range(4))
    with np.errstate(over="ignore"):
        gi = 1.0 / (1.0 + np.exp(-zi))
        gf = 1.0 / (1.0 + np.exp(-zf))
        go = 1.0 / (1.0 + np.exp(-zo))
    gg = np.tanh(zg)
    c_new = gf * c_prev.value + gi * gg
    th = np.tanh(c_new)
    h = go * th

    def bwd(gh, gc):
        gc_tot = (gh * go) * (1.0 - th * th) if gh is not None else 0.0
        if gc is not None:
            gc_tot = gc_tot + gc
        gz = np.empty_like(z.value)
        gz[..., 0 * c:1 * c] = gc_tot * gg * gi * (1.0 - gi)
        gz[..., 1 * c:2 * c] = gc_tot * c_prev.value * gf * (1.0 - gf)
        if gh is not None:
            gz[..., 2 * c:3 * c] = gh * th * go * (1.0 - go)
        else:
            gz[..., 2 * c:3 * c] = 0.0
        gz[..., 3 * c:4 * c] = gc_tot * gi * (1.0 - gg * gg)
        gcp = gc_tot * gf if c_prev.requires_grad else None
        return (gz, gcp)

    return z.tape.record("lstm_gates", (z, c_prev), (h, c_new), bwd)


def conv_lstm_cell(x, h_prev, c_prev, w, b):
    """One ConvLSTM step: concat(x, h) -> periodic 3x3 conv -> gates."""
    z = conv2d(concat([x, h_prev], axis=-1), w, b)
    return lstm_gates(z, c_prev)


# ---------------------------------------------------------------------------
# readout ops

def spatial_softmax(x, temperature=1.0):
    """Per-map softmax over the two trailing spatial axes of (..., ny, nx)."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    z = x.value / temperature
    z = z - z.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=(-2, -1), keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=(-2, -1), keepdims=True)
        return ((p * (g - inner)) / temperature,)

    return x.tape.record("spatial_softmax", (x,), p, bwd)


def soft_argmax(p, spec):
    """Wrap-aware expected position of nonnegative maps (..., ny, nx) -> (..., 2).

    The value matches grid.circular_mean_xy exactly, including the tie rule:
    a map whose angular resultant vanishes on an axis returns the domain
    origin there and contributes zero gradient.
    """
    val = circular_mean_xy(p.value, spec)
    sin_x, cos_x, sin_y, cos_y = angle_tables(spec)
    wx = p.value.sum(axis=-2)
    wy = p.value.sum(axis=-1)
    sx = wx @ sin_x
    cx = wx @ cos_x
    sy = wy @ sin_y
    cy = wy @ cos_y

    def bwd(g):
        rx2 = sx * sx + cx * cx
        ry2 = sy * sy + cy * cy
        okx = rx2 > TIE_EPS * TIE_EPS
        oky = ry2 > TIE_EPS * TIE_EPS
        ax = np.where(okx, g[..., 0] * (spec.lx / (2.0 * np.pi)) / np.where(okx, rx2, 1.0), 0.0)
        ay = np.where(oky, g[..., 1] * (spec.ly / (2.0 * np.pi)) / np.where(oky, ry2, 1.0), 0.0)
        # d x / d p[i, j] depends on column j only; rows share it
        gx_cols = ax[..., None] * (cx[..., None] * sin_x - sx[..., None] * cos_x)
        gy_rows = ay[..., None] * (cy[..., None] * sin_y - sy[..., None] * cos_y)
        return (gx_cols[..., None, :] + gy_rows[..., :, None],)

    return p.tape.record("soft_argmax", (p,), val, bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_difference_check(build, arrays, eps=1e-6, subsample=None, seed=0):
    """Compare tape gradients with central finite differences.

    build : callable(tape, *leaf_vars) -> scalar Var
    arrays : list of ndarray leaf values
    Returns the largest relative mismatch over all checked elements, where
    the relative error uses max(1, |g_ad|, |g_fd|) as the scale.  The step
    for each element is eps scaled by its magnitude.  subsample limits how
    many elements per array are probed (None checks all).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
    loss = build(tape, *leaves)
    grads = backward(loss)
    g_ad = [grads[v] for v in leaves]

    def run(mod_arrays):
        t2 = Tape()
        l2 = [t2.leaf(a) for a in mod_arrays]
        return float(build(t2, *l2).value)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for ai, a in enumerate(arrays):
        idxs = np.arange(a.size)
        if subsample is not None and a.size > subsample:
            idxs = rng.choice(a.size, size=subsample, replace=False)
        flat = a.reshape(-1)
        for idx in idxs:
            step = eps * max(1.0, abs(flat[idx]))
            plus = [x.copy() for x in arrays]
            plus[ai].reshape(-1)[idx] += step
            minus = [x.copy() for x in arrays]
            minus[ai].reshape(-1)[idx] -= step
            fd = (run(plus) - run(minus)) / (2.0 * step)
            ad = g_ad[ai].reshape(-1)[idx]
            err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter store

_DPRM_MAGIC = b"DPRM"


def write_params(params, path):
    """Named float64 arrays as ordered (name, shape, data) records."""
    with open(path, "wb") as fh:
        fh.write(_DPRM_MAGIC)
        for name, arr in params.items():
            raw = name.encode("utf-8")
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_params(path):
    params = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _DPRM_MAGIC:
            raise FormatError(f"{path}: not a parameter store")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(f"{path}: truncated record header")
            (nlen,) = struct.unpack("<I", head)
            raw = fh.read(nlen)
            if len(raw) != nlen:
                raise FormatError(f"{path}: truncated record name")
            name = raw.decode("utf-8")
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError(f"{path}: truncated rank for {name}")
            (rank,) = struct.unpack("<I", raw)
            raw = fh.read(4 * rank)
            if len(raw) != 4 * rank:
                raise FormatError(f"{path}: truncated dims for {name}")
            shape = struct.unpack(f"<{rank}I", raw)
            count = int(np.prod(shape)) if rank else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise FormatError(f"{path}: truncated data for {name}")
            params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return params
