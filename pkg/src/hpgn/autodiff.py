"""Dense-tensor reverse-mode differentiation engine.

A ``Tape`` records every primitive executed on tensors that live on it, in
execution order; ``backward`` replays the record in exact reverse and
accumulates vector-Jacobian products.  The primitive catalog is deliberately
small: exactly the operations the spatial-graph pyramid, its losses, and the
training loop need.  No general broadcasting is exposed; elementwise ops
broadcast numpy-style internally and un-broadcast their adjoints.

Training runs in float32; gradient checking builds a float64 tape.
"""

from __future__ import annotations

import numpy as np

from .gridgraph import GridGraph

__all__ = ["Tape", "Tensor", "backward"]


class Tape:
    """Ordered record of primitive executions for one forward pass."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._records: list[tuple[int, list]] = []
        self._next_id = 0
        self._param_shapes: dict[int, tuple] = {}

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def parameter(self, data: np.ndarray) -> "Tensor":
        """Register a learnable leaf tensor on this tape."""
        t = Tensor(np.asarray(data, dtype=self.dtype), self, self._new_id())
        self._param_shapes[t.node_id] = t.data.shape
        return t

    def leaf(self, data: np.ndarray) -> "Tensor":
        """Register a non-parameter input whose gradient may still be needed."""
        return Tensor(np.asarray(data, dtype=self.dtype), self, self._new_id())


class Tensor:
    """n-d array, optionally bound to a node on a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"


_kink_margins: list | None = None


class kink_trace:
    """Context manager collecting distances to non-smooth points.

    While active, primitives with kinks (relu, leaky_relu, global_max_pool)
    append how far their inputs sit from the nearest gradient discontinuity.
    Used to certify that a configuration is safe for finite differencing.
    """

    def __enter__(self):
        global _kink_margins
        _kink_margins = []
        return _kink_margins

    def __exit__(self, *exc):
        global _kink_margins
        _kink_margins = None
        return False


def _note_kink(margin: float) -> None:
    if _kink_margins is not None:
        _kink_margins.append(float(margin))


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.tape.dtype if like.tape is not None else like.data.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, pairs) -> Tensor:
    """Create the output tensor; register vjps for every taped input.

    ``pairs`` is a sequence of (tensor, vjp) where vjp maps the output
    adjoint to that input's adjoint contribution.
    """
    tape = None
    for t, _ in pairs:
        if t.tape is not None:
            tape = t.tape
            break
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, tape, tape._new_id())
    tracked = [(t.node_id, vjp) for t, vjp in pairs if t.tape is not None]
    tape._records.append((out.node_id, tracked))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns node-id -> gradient array.

    Every parameter registered on the tape gets an entry; parameters that did
    not participate in the loss receive zeros.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss does not live on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for out_id, tracked in reversed(tape._records):
        g = grads.get(out_id)
        if g is None:
            continue
        for in_id, vjp in tracked:
            contrib = vjp(g)
            if in_id in grads:
                grads[in_id] = grads[in_id] + contrib
            else:
                grads[in_id] = contrib
    for pid, shape in tape._param_shapes.items():
        if pid not in grads:
            grads[pid] = np.zeros(shape, dtype=tape.dtype)
    return grads


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data + b.data
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data - b.data
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(-g, b.data.shape))])


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data * b.data
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * s, [(a, lambda g: g * s)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    return _record(out, [(a, lambda g: g @ np.swapaxes(b.data, -1, -2)),
                         (b, lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(a.data.reshape(shape), [(a, lambda g: g.reshape(a.data.shape))])


def concat(tensors, axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    pairs = []
    start = 0
    for t in tensors:
        n = t.data.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)
        pairs.append((t, lambda g, sl=sl: g[sl]))
        start += n
    return _record(out, pairs)


def sum_all(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum()), [(a, lambda g: np.broadcast_to(g, a.data.shape).copy())])


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _record(np.asarray(a.data.mean()),
                   [(a, lambda g: np.broadcast_to(g / n, a.data.shape).copy())])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_kink(np.abs(a.data).min() if a.data.size else np.inf)
    return _record(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope)
    _note_kink(np.abs(a.data).min() if a.data.size else np.inf)
    return _record(a.data * factor, [(a, lambda g: g * factor)])


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def graph_aggregate(v: Tensor, graph: GridGraph) -> Tensor:
    """(I + S) V for V of shape (d, c) or (batch, d, c)."""
    if v.data.shape[-2] != graph.d:
        raise ValueError(f"expected {graph.d} node rows, got {v.data.shape[-2]}")
    s = graph.dense_s().astype(v.data.dtype)
    if v.data.ndim == 2:
        out = v.data + s @ v.data
        return _record(out, [(v, lambda g: g + s.T @ g)])
    out = v.data + np.einsum("ij,bjc->bic", s, v.data)
    return _record(out, [(v, lambda g: g + np.einsum("ji,bjc->bic", s, g))])


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NHWC input, (kh, kw, cin, cout) filters.

    Padding is symmetric zero padding; output size must come out positive.
    """
    b, h, ww_, cin = x.data.shape
    kh, kw, cin_w, cout = w.data.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, filters {cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (b, oh, ow, cin, kh, kw)
    out = np.einsum("bhwcij,ijco->bhwo", win, w.data)

    def vjp_w(g):
        return np.einsum("bhwcij,bhwo->ijco", win, g)

    def vjp_x(g):
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                piece = np.einsum("bhwo,co->bhwc", g, w.data[i, j])
                dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += piece
        if padding:
            return dxp[:, padding:padding + h, padding:padding + ww_, :]
        return dxp

    return _record(out, [(x, vjp_x), (w, vjp_w)])


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Average pooling, window k, stride k, no padding; k must tile the map."""
    b, h, w, c = x.data.shape
    if k == 1:
        return x
    if h % k or w % k:
        raise ValueError(f"pool window {k} does not divide {h}x{w}")
    out = x.data.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def vjp(g):
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2)
        return up / (k * k)

    return _record(out, [(x, vjp)])


def global_avg_pool(x: Tensor) -> Tensor:
    """(b, h, w, c) -> (b, c) spatial mean."""
    b, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def vjp(g):
        return np.broadcast_to(g[:, None, None, :] / (h * w), x.data.shape).copy()

    return _record(out, [(x, vjp)])


def global_max_pool(x: Tensor) -> Tensor:
    """(b, h, w, c) -> (b, c) spatial max; ties route to the first location."""
    b, h, w, c = x.data.shape
    flat = x.data.reshape(b, h * w, c)
    idx = flat.argmax(axis=1)  # (b, c), first max on ties
    out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    if _kink_margins is not None and h * w > 1:
        top2 = np.partition(flat, -2, axis=1)[:, -2:, :]
        _note_kink((top2[:, 1, :] - top2[:, 0, :]).min())

    def vjp(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[:, None, :], g[:, None, :], axis=1)
        return dflat.reshape(x.data.shape)

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS):
    """Per-channel (last axis) normalization over all leading axes.

    Returns (output, batch_mean, batch_var); the caller owns running-stat
    bookkeeping.  Variance is the biased estimate.
    """
    axes = tuple(range(x.data.ndim - 1))
    n = int(np.prod([x.data.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = gamma.data * xhat + beta.data

    def vjp_x(g):
        dgamma_term = (g * xhat).sum(axis=axes) / n
        dbeta_term = g.sum(axis=axes) / n
        return (gamma.data / std) * (g - dbeta_term - xhat * dgamma_term)

    return (
        _record(out, [(x, vjp_x),
                      (gamma, lambda g: (g * xhat).sum(axis=axes)),
                      (beta, lambda g: g.sum(axis=axes))]),
        mu,
        var,
    )


def batch_norm_infer(x: Tensor, gamma: Tensor, beta: Tensor,
                     running_mean: np.ndarray, running_var: np.ndarray,
                     eps: float = BN_EPS) -> Tensor:
    std = np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) / std
    out = gamma.data * xhat + beta.data
    axes = tuple(range(x.data.ndim - 1))
    return _record(out, [(x, lambda g: g * (gamma.data / std)),
                         (gamma, lambda g: (g * xhat).sum(axis=axes)),
                         (beta, lambda g: g.sum(axis=axes))])


# ---------------------------------------------------------------------------
# metric / loss primitives
# ---------------------------------------------------------------------------

def pairwise_euclidean(x: Tensor) -> Tensor:
    """(b, f) -> (b, b) matrix of Euclidean distances, exact zeros on the diagonal."""
    sq = (x.data ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x.data @ x.data.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    dist = np.sqrt(d2)

    def vjp(g):
        safe = np.where(dist > 0, dist, 1.0)
        m = np.where(dist > 0, (g + g.T) / safe, 0.0)
        return m.sum(axis=1)[:, None] * x.data - m @ x.data

    return _record(dist, [(x, vjp)])


def select_pairs(m: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather m[rows[i], cols[i]] into a vector; adjoint scatter-adds back."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = m.data[rows, cols]

    def vjp(g):
        dm = np.zeros_like(m.data)
        np.add.at(dm, (rows, cols), g)
        return dm

    return _record(out, [(m, vjp)])


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, epsilon: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed targets, log-sum-exp stabilized.

    Targets are (1 - eps + eps/K) on the true class and eps/K elsewhere.
    """
    b, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    targets = np.full((b, k), epsilon / k, dtype=logits.data.dtype)
    targets[np.arange(b), labels] += 1.0 - epsilon
    loss = -(targets * logp).sum() / b

    def vjp(g):
        p = np.exp(logp)
        return g * (p - targets) / b

    return _record(np.asarray(loss), [(logits, vjp)])
