"""Dense float64 tensors with reverse-mode autodiff.

Exactly the operator set the shared-trunk architecture needs: conv2d,
bilinear upsampling, relu, 2x2 max pooling, (broadcast) add, elementwise mul,
scaling, reshaping/permuting/concat/row-gather plumbing, and the two losses
(softmax cross-entropy, smooth L1).

Every executed op is recorded on the active Graph: the per-kind op counter
and the schedule (output sizes + consumers) feed the trunk-sharing invariant
and the analytic memory model in trunkshare.bench. Backward closures are
attached only while gradient tracking is enabled (see no_grad).

Data is always C-contiguous float64, row-major, no views.
"""

import threading
from collections import Counter

import numpy as np

from . import kernels
from .errors import ContractError, EmptyReductionError, ShapeError


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "is_param", "_node")

    def __init__(self, data, requires_grad=False, is_param=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.is_param = is_param
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def numel(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


def param(data, rng=None, shape=None):
    """Trainable tensor. Either wraps `data` or He-initialises `shape`."""
    if data is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(data, requires_grad=True, is_param=True)


class Node:
    """One executed op: schedule record plus (optionally) a backward closure."""

    __slots__ = ("kind", "gid", "out_numel", "in_gids", "flops",
                 "inputs", "backward_fn", "saved")

    def __init__(self, kind, gid, out_numel, in_gids, flops):
        self.kind = kind
        self.gid = gid
        self.out_numel = out_numel
        self.in_gids = in_gids
        self.flops = flops
        self.inputs = ()
        self.backward_fn = None
        self.saved = {}


class Graph:
    """Execution log for one forward/backward episode.

    nodes      ops in execution order (the sequential schedule)
    sources    (gid, numel, is_param) for tensors produced outside this graph
    op_counter per-kind tally, incremented exactly once per executed op
    """

    def __init__(self):
        self.nodes = []
        self.sources = []
        self.op_counter = Counter()
        self._gids = {}
        self._keep = []
        self._next_gid = 0

    def _new_gid(self, t):
        gid = self._next_gid
        self._next_gid += 1
        self._gids[id(t)] = gid
        self._keep.append(t)
        return gid

    def gid_of(self, t):
        gid = self._gids.get(id(t))
        if gid is None:
            gid = self._new_gid(t)
            self.sources.append((gid, t.data.size, t.is_param))
        return gid

    def total_ops(self):
        return sum(self.op_counter.values())

    def total_flops(self):
        return sum(n.flops for n in self.nodes)

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False


_state = threading.local()


def _graph_stack():
    if not hasattr(_state, "graphs"):
        _state.graphs = [Graph()]
    return _state.graphs


def active_graph():
    return _graph_stack()[-1]


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops still run and are counted, but record no backward."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _apply(kind, out_data, inputs, backward_fn, saved=None, flops=0):
    g = active_graph()
    g.op_counter[kind] += 1
    in_gids = tuple(g.gid_of(t) for t in inputs)
    out = Tensor(out_data)
    node = Node(kind, g._new_gid(out), out.data.size, in_gids, flops)
    g.nodes.append(node)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node.inputs = inputs
        node.backward_fn = backward_fn
        node.saved = saved or {}
        out._node = node
    return out


def backward(loss):
    """Reverse topological accumulation of gradients from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for t in reversed(topo):
        node = t._node
        if node is None or t.grad is None:
            continue
        grads = node.backward_fn(t.grad, node.saved)
        for parent, g in zip(node.inputs, grads):
            if parent.requires_grad and g is not None:
                parent.accumulate_grad(g)


# ---------------------------------------------------------------------------
# ops


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlate x[N,Cin,H,W] with w[Cout,Cin,kH,kW] and add bias b[Cout]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}/{w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}/{pad}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d output extent not integral for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo}")
    out = kernels.conv_forward(x.data, w.data, stride, pad)
    out += b.data[None, :, None, None]
    flops = 2 * cout * cin * kh * kw * ho * wo * n + cout * ho * wo * n

    def bwd(gy, saved):
        gx = kernels.conv_backward_input(gy, w.data, stride, pad, h, wd) \
            if x.requires_grad else None
        gw = kernels.conv_backward_weight(x.data, gy, stride, pad, kh, kw) \
            if w.requires_grad else None
        gb = gy.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return _apply("conv2d", out, (x, w, b), bwd, flops=flops)


def bilinear_upsample(x, factor):
    """Half-pixel-center bilinear upsampling with edge clamping."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects 4-d input, got {x.shape}")
    if not isinstance(factor, int) or factor < 1:
        raise ShapeError(f"upsample factor must be an integer >= 1, got {factor}")
    n, c, h, w = x.shape
    out = kernels.bilinear_forward(x.data, factor)

    def bwd(gy, saved):
        return (kernels.bilinear_backward(gy, factor, h, w),)

    return _apply("bilinear_upsample", out, (x,), bwd, flops=8 * out.size)


def relu(x):
    out = np.maximum(x.data, 0.0)

    def bwd(gy, saved):
        return (gy * (x.data > 0.0),)

    return _apply("relu", out, (x,), bwd, flops=out.size)


def maxpool2x2(x):
    """2x2 stride-2 max pool; gradient routes to the argmax (ties: lowest index)."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    out, idx = kernels.maxpool2x2_forward(x.data)

    def bwd(gy, saved):
        return (kernels.maxpool2x2_backward(gy, saved["idx"], h, w),)

    return _apply("maxpool2x2", out, (x,), bwd, saved={"idx": idx},
                  flops=3 * out.size)


def add(a, b):
    """a + b for equal shapes, or bias broadcast of b[C] over a[N,C,H,W]."""
    if a.shape == b.shape:
        out = a.data + b.data
        bias_mode = False
    elif a.data.ndim == 4 and b.shape == (a.shape[1],):
        out = a.data + b.data[None, :, None, None]
        bias_mode = True
    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} vs {b.shape}")

    def bwd(gy, saved):
        gb = gy.sum(axis=(0, 2, 3)) if bias_mode else gy
        return gy, gb

    return _apply("add", out, (a, b), bwd, flops=out.size)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(gy, saved):
        return gy * b.data, gy * a.data

    return _apply("mul", out, (a, b), bwd, flops=out.size)


def scale(x, c):
    c = float(c)
    out = x.data * c

    def bwd(gy, saved):
        return (gy * c,)

    return _apply("scale", out, (x,), bwd, flops=out.size)


def sum_all(x):
    out = np.asarray(x.data.sum())

    def bwd(gy, saved):
        return (np.full_like(x.data, float(gy)),)

    return _apply("sum_all", out, (x,), bwd, flops=x.data.size)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = x.data.reshape(shape).copy()

    def bwd(gy, saved):
        return (gy.reshape(x.shape),)

    return _apply("reshape", out, (x,), bwd)


def permute(x, axes):
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(gy, saved):
        return (np.ascontiguousarray(gy.transpose(inv)),)

    return _apply("permute", out, (x,), bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(gy, saved):
        sl = [slice(None)] * gy.ndim
        grads = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(gy[tuple(sl)]))
        return tuple(grads)

    return _apply("concat", out, tensors, bwd)


def gather_rows(x, idx):
    """Select rows x[idx] along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = x.data[idx].copy()

    def bwd(gy, saved):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, gy)
        return (gx,)

    return _apply("gather_rows", out, (x,), bwd)


def softmax_cross_entropy(logits, targets, ignore_label=None):
    """Mean negative log-softmax over non-ignored rows (max-subtraction stabilised).

    targets is a plain int array; rows whose target equals ignore_label are
    excluded from the mean and receive zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross-entropy expects [M,C] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    m, c = logits.shape
    if targets.shape != (m,):
        raise ShapeError(f"targets shape {targets.shape} != ({m},)")
    keep = np.ones(m, dtype=bool) if ignore_label is None else targets != ignore_label
    bad = keep & ((targets < 0) | (targets >= c))
    if bad.any():
        raise ContractError(f"labels out of range [0,{c}): {targets[bad][:5]}")
    k = int(keep.sum())
    if k == 0:
        raise EmptyReductionError("all rows ignored in cross-entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].mean()

    def bwd(gy, saved):
        g = saved["probs"].copy()
        g[rows, targets[rows]] -= 1.0
        g[~keep] = 0.0
        return (g * (float(gy) / k),)

    return _apply("softmax_cross_entropy", np.asarray(loss), (logits,), bwd,
                  saved={"probs": probs, "keep": keep})


def smooth_l1(pred, target):
    """Huber-style loss: sum of 0.5 d^2 (|d|<1) else |d|-0.5, divided by rows."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    m = pred.shape[0]
    if m == 0:
        raise EmptyReductionError("smooth_l1 over zero rows")
    d = pred.data - target.data
    per = np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)
    loss = per.sum() / m

    def bwd(gy, saved):
        g = np.clip(d, -1.0, 1.0) * (float(gy) / m)
        return g, -g

    return _apply("smooth_l1", np.asarray(loss), (pred, target), bwd)


def grad_check(f, inputs, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    f must map the given tensors to a scalar Tensor and be re-evaluable.
    Relative error per coordinate: |a - n| / max(1e-8, |a| + |n|).
    """
    if eps <= 0:
        raise ContractError(f"grad_check needs eps > 0, got {eps}")
    for t in inputs:
        t.zero_grad()
    with Graph():
        out = f(*inputs)
        if out.data.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        backward(out)

    def eval_scalar():
        with Graph(), no_grad():
            return float(f(*inputs).data)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = eval_scalar()
            flat[i] = orig - eps
            lo = eval_scalar()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = aflat[i]
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst
