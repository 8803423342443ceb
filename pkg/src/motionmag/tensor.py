"""Dense tensors with reverse-mode differentiation over a recorded op graph.

Everything downstream (conv layers, attention blocks, losses, the training
loop) runs on these tensors: rank <= 4 numpy storage, an OpGraph that records
primitive ops in execution order, and gradient accumulation in exact reverse
order.  Training and inference run in float32; ``verification_mode`` switches
to float64 with finite-value checking so finite-difference gradient checks
can use tight tolerances.
"""

from __future__ import annotations

import warnings

import numpy as np

MAX_RANK = 4

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False
_ACTIVE_GRAPH = None


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class FormatError(ValueError):
    """A serialized artifact (fixture, checkpoint, image) is malformed."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite math."""


def default_dtype():
    return _DEFAULT_DTYPE


def finite_checks_enabled():
    return _CHECK_FINITE


class verification_mode:
    """Context: float64 compute plus finite-value checking on every op."""

    def __enter__(self):
        global _DEFAULT_DTYPE, _CHECK_FINITE
        self._saved = (_DEFAULT_DTYPE, _CHECK_FINITE)
        _DEFAULT_DTYPE = np.float64
        _CHECK_FINITE = True
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE, _CHECK_FINITE
        _DEFAULT_DTYPE, _CHECK_FINITE = self._saved
        return False


class Tensor:
    """Rank <= 4 real array, immutable once written except for ``grad``."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite values in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        return _wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _wrap(arr, requires_grad=False):
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = requires_grad
    t.grad = None
    t._node = None
    return t


class _Node:
    __slots__ = ("name", "inputs", "out", "vjp")

    def __init__(self, name, inputs, out, vjp):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class OpGraph:
    """Primitive ops recorded in execution order (already topological).

    One graph is owned by exactly one training step; entering a second graph
    while one is recording is an error.  Running the same computation twice
    against identical inputs reproduces identical node outputs.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_GRAPH
        if _ACTIVE_GRAPH is not None:
            raise RuntimeError("an OpGraph is already recording")
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = None
        return False


def record(name, inputs, out_data, vjp):
    """Wrap an op output; register a node if a graph is recording.

    ``vjp(g)`` returns one cotangent per input (``None`` for inputs that do
    not require grad).  Returned arrays must not be written to afterwards;
    accumulation never mutates them.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        # -inf sentinels from top-k masking are legitimate inputs to softmax.
        if name != "topk_mask" and not np.all(np.isfinite(out_data[np.isfinite(out_data) == False])):
            pass
        if name != "topk_mask":
            raise NumericalError(f"non-finite output of op '{name}'")
    graph = _ACTIVE_GRAPH
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = _wrap(out_data, requires_grad=needs)
    if needs:
        node = _Node(name, inputs, out, vjp)
        out._node = node
        graph.nodes.append(node)
    return out


def backward(graph, loss, params=None):
    """Reverse accumulation through ``graph`` seeded at scalar ``loss``.

    Populates ``.grad`` on every reachable leaf with ``requires_grad``; when
    ``params`` is given, every listed tensor ends up with a grad array
    (zeros if the loss never touched it).  Accumulation order is the exact
    reverse of recording order.
    """
    if loss.data.shape != ():
        raise ShapeError("backward needs a scalar loss")
    if params:
        for p in params:
            if not p.requires_grad:
                warnings.warn("gradient requested for a detached tensor; returning zeros")
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    grads = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.vjp(g)):
            if gt is None:
                continue
            if t._node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gt
            else:
                key = id(t)
                held = grads.get(key)
                # never mutate held cotangents in place: they may be views
                grads[key] = gt if held is None else held + gt


# ---------------------------------------------------------------------------
# constructors

def zeros(shape, requires_grad=False):
    return _wrap(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def full(shape, value, requires_grad=False):
    return _wrap(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad)


def uniform(shape, low, high, seed, requires_grad=False):
    """Seeded uniform init; bitwise reproducible from the 64-bit seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.uniform(low, high, size=shape).astype(_DEFAULT_DTYPE)
    return _wrap(data, requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives

def _binary_check(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _binary_check(a, b, "add")

    def vjp(g):
        return (g if a.requires_grad else None,
                g if b.requires_grad else None)

    return record("add", (a, b), a.data + b.data, vjp)


def sub(a, b):
    _binary_check(a, b, "sub")

    def vjp(g):
        return (g if a.requires_grad else None,
                -g if b.requires_grad else None)

    return record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b):
    _binary_check(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g * bd if a.requires_grad else None,
                g * ad if b.requires_grad else None)

    return record("mul", (a, b), ad * bd, vjp)


def scale(a, c):
    """Multiply by a python-float constant."""
    c = float(c)

    def vjp(g):
        return (g * c,)

    return record("scale", (a,), a.data * c, vjp)


def scale_by(a, s):
    """Multiply by a rank-0 learnable tensor (temperature-style scaling)."""
    if s.data.shape != ():
        raise ShapeError("scale_by needs a rank-0 scalar tensor")
    ad, sd = a.data, s.data

    def vjp(g):
        ga = g * sd if a.requires_grad else None
        gs = np.asarray((g * ad).sum(), dtype=ad.dtype) if s.requires_grad else None
        return (ga, gs)

    return record("scale_by", (a, s), ad * sd, vjp)


def elementwise(op, a, b=None):
    """Dispatcher over the pointwise op family: add, sub, mul, scale."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op '{op}'")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul needs 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents differ "
                         f"({a.data.shape} @ {b.data.shape})")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record("matmul", (a, b), ad @ bd, vjp)


def transpose2d(a):
    if a.data.ndim != 2:
        raise ShapeError("transpose2d needs a 2-D tensor")

    def vjp(g):
        return (g.T,)

    return record("transpose2d", (a,), a.data.T.copy(), vjp)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return record("reshape", (a,), a.data.reshape(shape), vjp)


def sum_all(a):
    ad = a.data

    def vjp(g):
        return (np.full_like(ad, g),)

    return record("sum_all", (a,), np.asarray(ad.sum(), dtype=ad.dtype), vjp)


def mean_all(a):
    ad = a.data
    n = ad.size

    def vjp(g):
        return (np.full_like(ad, g / n),)

    return record("mean_all", (a,), np.asarray(ad.mean(), dtype=ad.dtype), vjp)


def concat_channels(parts):
    """Concatenate along the trailing (channel) axis."""
    datas = [p.data for p in parts]
    base = datas[0].shape[:-1]
    for d in datas[1:]:
        if d.shape[:-1] != base:
            raise ShapeError("concat_channels: leading extents differ")
    widths = [d.shape[-1] for d in datas]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            g[..., offsets[i]:offsets[i + 1]] if parts[i].requires_grad else None
            for i in range(len(parts))
        )

    return record("concat_channels", tuple(parts), np.concatenate(datas, axis=-1), vjp)


def slice_channels(a, lo, hi):
    """View of channels [lo, hi) along the trailing axis."""
    ad = a.data
    if not (0 <= lo < hi <= ad.shape[-1]):
        raise ShapeError(f"slice_channels: [{lo},{hi}) out of range for {ad.shape}")

    def vjp(g):
        full_g = np.zeros_like(ad)
        full_g[..., lo:hi] = g
        return (full_g,)

    return record("slice_channels", (a,), ad[..., lo:hi].copy(), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_grad(f, x, h=1e-4):
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    Runs in 64-bit regardless of the ambient mode; the caller's ``f`` must be
    deterministic.  NaNs produced by ``f`` propagate into the estimate.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad needs h > 0")
    base = x.data.astype(np.float64)
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        flat[i] = _central_diff(f, base, i, h)
    return out


def finite_diff_grad_at(f, x, indices, h=1e-4):
    """Central differences at selected flat indices (sparse oracle)."""
    base = x.data.astype(np.float64)
    return np.array([_central_diff(f, base, int(i), h) for i in indices])


def _central_diff(f, base, i, h):
    bumped = base.copy()
    flat = bumped.reshape(-1)
    orig = flat[i]
    flat[i] = orig + h
    fp = f(_wrap(bumped.astype(base.dtype))).item()
    flat[i] = orig - h
    fm = f(_wrap(bumped.astype(base.dtype))).item()
    return (fp - fm) / (2.0 * h)


def grad_rel_err(got, want):
    """Max-abs error normalized by the larger gradient scale (floor 1e-3)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    num = np.abs(got - want).max() if got.size else 0.0
    den = max(np.abs(got).max() if got.size else 0.0,
              np.abs(want).max() if want.size else 0.0,
              1e-3)
    return float(num / den)


# ---------------------------------------------------------------------------
# fixture format: "TNSR v1 <rank> <d0> ... <dn>" + little-endian float32

def save_tensor(t, path):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    dims = " ".join(str(d) for d in data.shape)
    header = f"TNSR v1 {data.ndim}" + (f" {dims}" if dims else "") + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        header = bytearray()
        while True:
            ch = fh.read(1)
            if not ch:
                raise FormatError("truncated tensor fixture: no header")
            if ch == b"\n":
                break
            header += ch
        fields = header.decode("ascii", errors="replace").split()
        if len(fields) < 3 or fields[0] != "TNSR":
            raise FormatError("bad tensor fixture magic")
        if fields[1] != "v1":
            raise FormatError(f"unsupported tensor fixture version '{fields[1]}'")
        try:
            rank = int(fields[2])
            dims = [int(v) for v in fields[3:]]
        except ValueError as exc:
            raise FormatError("malformed tensor fixture header") from exc
        if len(dims) != rank or rank > MAX_RANK or any(d <= 0 for d in dims):
            raise FormatError("malformed tensor fixture header")
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError("truncated tensor fixture payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return _wrap(data.astype(_DEFAULT_DTYPE))
