"""Dense tensors with a reverse-mode tape.

The primitive set is deliberately small: exactly the ops needed by the
one-shot attention context, the per-digit MLP heads, the role-MLP encoder,
and their training losses. Everything computes in float64; checkpoints are
stored in float32 (see checkpoint.py).

Ops work in two modes. If any input carries a tape, the output is recorded
on that tape and backward() can reach it. If all inputs are plain constants,
the op computes eagerly and returns an untaped tensor, so the same forward
code serves both training and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

DTYPE = np.float64

# Set False to skip the per-op isfinite sweep (benchmark paths are untaped
# numpy and unaffected either way).
CHECK_FINITE = True


class ShapeMismatch(ValueError):
    """Operands do not conform; message carries the offending dims."""


class NonFiniteError(FloatingPointError):
    """A forward op produced or received NaN/inf."""


class Tensor:
    """A dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape=None, nid=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.nid}"
        return f"Tensor(shape={self.data.shape}, {where})"


def const(data) -> Tensor:
    """Wrap an array as an untaped constant, rejecting non-finite entries."""
    t = Tensor(data)
    if CHECK_FINITE and not np.isfinite(t.data).all():
        raise NonFiniteError("constant tensor contains non-finite entries")
    return t


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents  # tuple of node ids
        self.vjp = vjp          # grad_out -> tuple of parent grads (or None)


class Tape:
    """Ordered forward records plus named trainable parameters.

    Nodes are appended in construction order, which is a valid topological
    order for backward. Parameter gradients accumulate in `grads` across
    backward calls until `reset()`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._param_nids: dict[str, int] = {}
        self._node_grads: dict[int, np.ndarray] = {}

    def _record(self, op, parents, vjp, data) -> Tensor:
        nid = len(self.nodes)
        self.nodes.append(_Node(op, parents, vjp))
        return Tensor(data, self, nid)

    def param(self, name: str, array: np.ndarray) -> Tensor:
        """Register a named trainable leaf (idempotent per tape)."""
        if name in self._param_nids:
            return Tensor(self.params[name], self, self._param_nids[name])
        arr = np.asarray(array, dtype=DTYPE)
        if CHECK_FINITE and not np.isfinite(arr).all():
            raise NonFiniteError(f"parameter {name!r} contains non-finite entries")
        t = self._record(f"param:{name}", (), None, arr)
        self.params[name] = t.data
        self._param_nids[name] = t.nid
        return t

    def watch(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in params.items()}

    def leaf(self, array) -> Tensor:
        """Register an anonymous differentiable leaf (for gradient probes)."""
        arr = np.asarray(array, dtype=DTYPE)
        return self._record("leaf", (), None, arr)

    def grad_of(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() target w.r.t. a leaf tensor."""
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self._node_grads.get(t.nid)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def reset(self):
        self.nodes.clear()
        self.params.clear()
        self.grads.clear()
        self._param_nids.clear()
        self._node_grads.clear()


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns the parameter gradients.

    Gradients for parameters accumulate into `tape.grads`; gradients of
    other leaves are readable through `tape.grad_of` until the next call.
    """
    tape = loss.tape
    if tape is None:
        raise ValueError("loss is a constant; nothing to differentiate")
    if loss.data.shape != ():
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")
    node_grads: dict[int, np.ndarray] = {loss.nid: np.ones((), dtype=DTYPE)}
    for nid in range(loss.nid, -1, -1):
        g = node_grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            if node.op.startswith("param:"):
                name = node.op[6:]
                if name in tape.grads:
                    tape.grads[name] = tape.grads[name] + g
                else:
                    tape.grads[name] = g
            else:
                tape._node_grads[nid] = g
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if pid in node_grads:
                node_grads[pid] = node_grads[pid] + pg
            else:
                node_grads[pid] = pg
    out = dict(tape.grads)
    # leaves swept above already landed in _node_grads; params in grads
    return out


# ---------------------------------------------------------------------------
# op plumbing

def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("inputs live on different tapes")
            tape = t.tape
    return tape


def _emit(op, out_data, inputs, vjps) -> Tensor:
    """Record an op if any input is taped, else return a constant."""
    if CHECK_FINITE and not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out_data)
    parents, fns = [], []
    for t, fn in zip(inputs, vjps):
        if t.tape is not None:
            parents.append(t.nid)
            fns.append(fn)
        else:
            parents.append(None)
            fns.append(None)
    live = [(p, f) for p, f in zip(parents, fns) if p is not None]

    def vjp(g):
        return tuple(f(g) for _, f in live)

    return tape._record(op, tuple(p for p, _ in live), vjp, out_data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast up from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _emit(
        "matmul", out, (a, b),
        (lambda g, bd=b.data: g @ bd.T, lambda g, ad=a.data: ad.T @ g),
    )


def tdot(x: Tensor, w: Tensor) -> Tensor:
    """Batched last-axis matmul: (B, S, k) @ (k, m) -> (B, S, m)."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[0]:
        raise ShapeMismatch(f"tdot: {x.shape} x {w.shape}")
    out = x.data @ w.data
    return _emit(
        "tdot", out, (x, w),
        (lambda g, wd=w.data: g @ wd.T,
         lambda g, xd=x.data: np.einsum("bsk,bsm->km", xd, g)),
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}") from None
    return _emit(
        "add", out, (a, b),
        (lambda g, s=a.shape: _unbroadcast(g, s),
         lambda g, s=b.shape: _unbroadcast(g, s)),
    )


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=DTYPE)
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeMismatch(f"add_const: {x.shape} + {c.shape}")
    return _emit("add_const", out, (x,), (lambda g: g,))


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable scalar or array constant."""
    c = np.asarray(c, dtype=DTYPE)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeMismatch(f"scale: {x.shape} * {c.shape}")
    return _emit("scale", out, (x,), (lambda g, cc=c: _unbroadcast(g * cc, x.shape),))


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ShapeMismatch("concat: empty input list")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(f"concat: leading dims differ {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    offs = np.cumsum([0] + widths)

    def splitter(i):
        return lambda g: g[..., offs[i]:offs[i + 1]]

    return _emit("concat", out, tuple(parts), tuple(splitter(i) for i in range(len(parts))))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeMismatch(f"slice_last: [{start}:{stop}] of {x.shape}")
    out = x.data[..., start:stop]

    def vjp(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[..., start:stop] = g
        return full

    return _emit("slice_last", out, (x,), (vjp,))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), (lambda g, s=x.shape: g.reshape(s),))


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: table (V, d), idx int array of any shape -> idx.shape + (d,)."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding: index out of range for table {table.shape}")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[-1]))
        return gt

    return _emit("embedding", out, (table,), (vjp,))


def masked_mean_rows(x: Tensor, mask=None) -> Tensor:
    """Mean over the row axis: (B, S, d) -> (B, d) or (S, d) -> (d,).

    `mask` is an optional constant (B, S) / (S,) array of 0/1 weights;
    padded rows must be masked out, not zeroed.
    """
    if x.ndim not in (2, 3):
        raise ShapeMismatch(f"masked_mean_rows: rank {x.ndim}")
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != x.shape[:-1]:
        raise ShapeMismatch(f"masked_mean_rows: mask {mask.shape} vs x {x.shape}")
    cnt = mask.sum(axis=-1)
    if np.any(cnt <= 0):
        raise ShapeMismatch("masked_mean_rows: a row group has no unmasked rows")
    w = mask / cnt[..., None]                       # (B, S) or (S,)
    out = np.einsum("...s,...sd->...d", w, x.data)

    def vjp(g):
        return np.einsum("...d,...s->...sd", g, w)

    return _emit("masked_mean_rows", out, (x,), (vjp,))


def expand_rows(g: Tensor, n_rows: int) -> Tensor:
    """Tile (B, d) -> (B, S, d); backward sums over the new axis."""
    if g.ndim != 2:
        raise ShapeMismatch(f"expand_rows: need rank 2, got {g.shape}")
    out = np.broadcast_to(g.data[:, None, :], (g.shape[0], n_rows, g.shape[1])).copy()
    return _emit("expand_rows", out, (g,), (lambda gr: gr.sum(axis=1),))


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor: (N, d), idx (k,) -> (k, d)."""
    idx = np.asarray(idx)
    if x.ndim != 2:
        raise ShapeMismatch(f"take_rows: need rank 2, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeMismatch(f"take_rows: index out of range for {x.shape}")
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(gx, idx, g)
        return gx

    return _emit("take_rows", out, (x,), (vjp,))


def put_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter rows into a zero (n_rows, d) tensor; idx must be unique."""
    idx = np.asarray(idx)
    if values.ndim != 2 or idx.shape != (values.shape[0],):
        raise ShapeMismatch(f"put_rows: values {values.shape} vs idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeMismatch(f"put_rows: index out of range for {n_rows} rows")
    out = np.zeros((n_rows, values.shape[1]), dtype=DTYPE)
    out[idx] = values.data
    return _emit("put_rows", out, (values,), (lambda g: g[idx],))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _emit("relu", out, (x,), (lambda g, xd=x.data: g * (xd > 0),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = xd * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return g * (cdf + xd * pdf)

    return _emit("gelu", out, (x,), (vjp,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (g - dot) * p

    return _emit("softmax", p, (x,), (vjp,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm: gain {gain.shape} bias {bias.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def vjp_x(g):
        gg = g * gain.data
        return (gg - gg.mean(axis=-1, keepdims=True)
                - y * (gg * y).mean(axis=-1, keepdims=True)) * inv

    def vjp_gain(g):
        return (g * y).reshape(-1, d).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _emit("layer_norm", out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


def qk_scores(q: Tensor, k: Tensor) -> Tensor:
    """Single-query attention scores: (B, dk) x (B, S, dk) -> (B, S)."""
    if q.ndim != 2 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[1] != k.shape[2]:
        raise ShapeMismatch(f"qk_scores: {q.shape} x {k.shape}")
    out = np.einsum("bd,bsd->bs", q.data, k.data)
    return _emit(
        "qk_scores", out, (q, k),
        (lambda g, kd=k.data: np.einsum("bs,bsd->bd", g, kd),
         lambda g, qd=q.data: np.einsum("bs,bd->bsd", g, qd)),
    )


def attn_apply(a: Tensor, v: Tensor) -> Tensor:
    """Weighted row sum: (B, S) x (B, S, dk) -> (B, dk)."""
    if a.ndim != 2 or v.ndim != 3 or a.shape != v.shape[:2]:
        raise ShapeMismatch(f"attn_apply: {a.shape} x {v.shape}")
    out = np.einsum("bs,bsd->bd", a.data, v.data)
    return _emit(
        "attn_apply", out, (a, v),
        (lambda g, vd=v.data: np.einsum("bd,bsd->bs", g, vd),
         lambda g, ad=a.data: np.einsum("bs,bd->bsd", ad, g)),
    )


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return _emit("sum_all", out, (x,), (lambda g, s=x.shape: np.broadcast_to(g, s).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())
    return _emit("mean_all", out, (x,), (lambda g, s=x.shape: np.broadcast_to(g / n, s).copy(),))


# ---------------------------------------------------------------------------
# losses

def _masked_log_softmax(logits: np.ndarray, support: np.ndarray | None):
    """Row-wise log softmax restricted to `support` (True = kept)."""
    if support is None:
        z = logits
    else:
        z = np.where(support, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    lse = m + np.log(e.sum(axis=-1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    if support is not None:
        p = np.where(support, p, 0.0)
        logp = np.where(support, logp, 0.0)  # excluded entries contribute nothing
    return logp, p


def cross_entropy_rows(logits: Tensor, targets: np.ndarray,
                       support: np.ndarray | None = None) -> Tensor:
    """Sum over rows of -log softmax(logits)[target], optionally on a support.

    `support` is a constant bool array matching `logits`; entries outside it
    are excluded from the normalization (sentinel positions).
    """
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: targets {targets.shape} for logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ShapeMismatch(f"cross_entropy: target out of range [0, {c})")
    if support is not None and not support[np.arange(n), targets].all():
        raise ShapeMismatch("cross_entropy: a target lies outside its support")
    logp, p = _masked_log_softmax(logits.data, support)
    out = np.asarray(-logp[np.arange(n), targets].sum())

    def vjp(g):
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        if support is not None:
            grad = np.where(support, grad, 0.0)
        return g * grad

    return _emit("cross_entropy", out, (logits,), (vjp,))


def cross_entropy(logits: Tensor, target: int, support: np.ndarray | None = None) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    sup = None if support is None else np.asarray(support).reshape(1, -1)
    return cross_entropy_rows(reshape(logits, (1, logits.shape[-1])),
                              np.asarray([target]), sup)


def kl_divergence_rows(teacher_logits: np.ndarray, student_logits: Tensor,
                       tau: float, support: np.ndarray | None = None) -> Tensor:
    """Sum over rows of tau^2 * KL(softmax(t/tau) || softmax(s/tau)).

    Teacher logits are a plain constant; only the student side receives
    gradients. A boolean `support` restricts both distributions to the
    valid-digit positions.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = np.asarray(teacher_logits, dtype=DTYPE)
    if t.shape != student_logits.shape:
        raise ShapeMismatch(f"kl: teacher {t.shape} vs student {student_logits.shape}")
    _, p = _masked_log_softmax(t / tau, support)
    logq, q = _masked_log_softmax(student_logits.data / tau, support)
    logp, _ = _masked_log_softmax(t / tau, support)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (logp - logq), 0.0)
    out = np.asarray(tau * tau * terms.sum())

    def vjp(g):
        grad = tau * (q - p)
        if support is not None:
            grad = np.where(support, grad, 0.0)
        return g * grad

    return _emit("kl_divergence", out, (student_logits,), (vjp,))


def kl_divergence(teacher_logits, student_logits: Tensor, tau: float,
                  support: np.ndarray | None = None) -> Tensor:
    """tau^2 * KL between tempered teacher and student for one logit vector."""
    t = np.asarray(teacher_logits, dtype=DTYPE).reshape(1, -1)
    sup = None if support is None else np.asarray(support).reshape(1, -1)
    return kl_divergence_rows(t, reshape(student_logits, (1, student_logits.shape[-1])),
                              tau, sup)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over unmasked rows: (B, S, d) vs constant target.

    The mean runs over unmasked (row, dim) entries so padding rows contribute
    exactly zero loss and zero gradient.
    """
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"masked_mse: target {target.shape} vs pred {pred.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != pred.shape[:-1]:
        raise ShapeMismatch(f"masked_mse: mask {mask.shape} vs pred {pred.shape}")
    n = mask.sum() * pred.shape[-1]
    if n <= 0:
        raise ShapeMismatch("masked_mse: empty mask")
    diff = (pred.data - target) * mask[..., None]
    out = np.asarray((diff * diff).sum() / n)
    return _emit("masked_mse", out, (pred,), (lambda g: g * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# the one-shot attention context block

def mha_block(q: Tensor, h: Tensor, params: dict[str, Tensor], n_heads: int,
              key_mask: np.ndarray | None = None, use_ffn: bool = True,
              activation=relu, attn_dropout: np.ndarray | None = None) -> Tensor:
    """Single-query multi-head attention with residual, layernorm and FFN.

    q: (B, d_h) query rows; h: (B, S, d_h) key/value states. Params:
    wq/wk/wv (d_h, d_a), wo (d_a, d_h), ln1_g/ln1_b/ln2_g/ln2_b (d_h,),
    ffn_w1 (d_h, f), ffn_b1, ffn_w2 (f, d_h), ffn_b2. `key_mask` marks valid
    rows (padding excluded from attention); `attn_dropout` is a premade
    inverted-dropout multiplier for the attention weights.
    """
    if h.ndim != 3 or h.shape[1] < 1:
        raise ShapeMismatch(f"mha_block: need (B, S>=1, d), got {h.shape}")
    if q.ndim != 2 or q.shape[0] != h.shape[0] or q.shape[1] != h.shape[2]:
        raise ShapeMismatch(f"mha_block: query {q.shape} vs states {h.shape}")
    d_a = params["wq"].shape[1]
    if d_a % n_heads != 0:
        raise ShapeMismatch(f"mha_block: attention dim {d_a} not divisible by {n_heads} heads")
    d_k = d_a // n_heads

    qp = matmul(q, params["wq"])            # (B, d_a)
    kp = tdot(h, params["wk"])              # (B, S, d_a)
    vp = tdot(h, params["wv"])
    bias = None
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, bool), 0.0, -1e30)
    head_outs = []
    for i in range(n_heads):
        lo, hi = i * d_k, (i + 1) * d_k
        s = qk_scores(slice_last(qp, lo, hi), slice_last(kp, lo, hi))
        s = scale(s, 1.0 / math.sqrt(d_k))
        if bias is not None:
            s = add_const(s, bias)
        a = softmax(s)
        if attn_dropout is not None:
            a = scale(a, attn_dropout)
        head_outs.append(attn_apply(a, slice_last(vp, lo, hi)))
    attn = matmul(concat(head_outs), params["wo"])          # (B, d_h)
    z_tilde = layer_norm(add(q, attn), params["ln1_g"], params["ln1_b"])
    if not use_ffn:
        return z_tilde
    hsz = activation(add(matmul(z_tilde, params["ffn_w1"]), params["ffn_b1"]))
    ffn = add(matmul(hsz, params["ffn_w2"]), params["ffn_b2"])
    return layer_norm(add(z_tilde, ffn), params["ln2_g"], params["ln2_b"])


# ---------------------------------------------------------------------------
# AdamW with cosine schedule

@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the cosine schedule bookkeeping."""

    lr: float
    weight_decay: float
    horizon: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * self.step_count / self.horizon))


def adamw_step(state: OptimizerState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> None:
    """One decoupled-weight-decay Adam update, in place on `params`."""
    if state.step_count >= state.horizon:
        raise ValueError(f"optimizer horizon exhausted at step {state.step_count}")
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient for {name!r} contains NaN/inf; step aborted")
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient shape {g.shape} vs param {params[name].shape} for {name!r}")
    lr = state.current_lr()
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= lr * update
    state.step_count += 1


# ---------------------------------------------------------------------------
# init helpers

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout multiplier: zeros with prob p, survivors scaled."""
    if p <= 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= p
    return keep.astype(DTYPE) / (1.0 - p)
