"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Ops are plain functions; they record themselves on the active Tape (if any) when one of their inputs is a
trainable leaf or was itself recorded. Without an active tape, ops are pure forward computations.
"""

import contextlib
import logging
import math
import os
import threading

import numpy as np
import runez

from prealign import fnv1a_64, PrealignError


LOG = logging.getLogger(__name__)
CHECK_FINITE = runez.to_boolean(os.environ.get("PREALIGN_CHECK_FINITE"))
GELU_C = math.sqrt(2.0 / math.pi)
_STATE = threading.local()


class DimensionError(PrealignError):
    """Raised when operand shapes are incompatible"""


class UndefinedMeanError(PrealignError):
    """Raised when a mean is requested over an empty selection"""


class NonFiniteError(PrealignError):
    """Raised (when finite-checking is enabled) if an op produced NaN or Inf"""


class Tensor:
    """A dense float64 array, optionally participating in differentiation"""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        """
        Args:
            data: Array-like content, converted to float64
            requires_grad (bool): If True, this is a leaf gradients are computed for
            name (str | None): Name under which gradient is reported by Tape.backward()
        """
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}{list(self.data.shape)}"

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        """np.ndarray: Copy of the underlying data"""
        return self.data.copy()


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Append-only computation record, nodes are stored in topological order (inputs always precede their users).
    Must be used as a context manager, and only from the thread that opened it.
    """

    def __init__(self):
        self.nodes = []
        self.tensors = []
        self.consumed = False

    def __repr__(self):
        return f"tape with {runez.plural(self.nodes, 'node')}"

    def __enter__(self):
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []

        stack.append(self)
        return self

    def __exit__(self, *_):
        _STATE.tapes.remove(self)

    def node_of(self, tensor):
        """
        Args:
            tensor (Tensor): Tensor used as op input

        Returns:
            (int | None): Id of the node for 'tensor' (registered as leaf if needed), None if it's a constant
        """
        i = tensor.node_id
        if i is not None and i < len(self.tensors) and self.tensors[i] is tensor:
            return i

        if tensor.requires_grad:
            return self._append(tensor, "leaf", (), None)

    def _append(self, tensor, op, inputs, backward):
        if self.consumed:
            raise PrealignError("Computation record was already consumed by backward()")

        tensor.node_id = len(self.nodes)
        self.nodes.append(_Node(op, inputs, backward))
        self.tensors.append(tensor)
        return tensor.node_id

    def backward(self, loss):
        """
        Args:
            loss (Tensor): Scalar produced under this tape

        Returns:
            (dict): Gradient per trainable leaf name (unnamed leaves are reported as '#<node id>')
        """
        if loss.size != 1 or loss.data.ndim > 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")

        root = self.node_of(loss)
        result = {}
        if root is None:
            self.consumed = True
            return result

        grads = {root: np.ones_like(loss.data)}
        for i in range(root, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue

            node = self.nodes[i]
            if node.op == "leaf":
                tensor = self.tensors[i]
                key = tensor.name or f"#{i}"
                if key in result:
                    result[key] = Tensor(result[key].data + g)

                else:
                    result[key] = Tensor(g)

                continue

            for j, gj in zip(node.inputs, node.backward(g)):
                if j is not None and gj is not None:
                    if j in grads:
                        grads[j] = grads[j] + gj

                    else:
                        grads[j] = gj

        self.nodes = []
        self.tensors = []
        self.consumed = True
        return result


def active_tape():
    stack = getattr(_STATE, "tapes", None)
    return stack[-1] if stack else None


def recorded(data, op, inputs, backward):
    """
    Args:
        data (np.ndarray): Forward result
        op (str): Op name
        inputs (list[Tensor]): Op inputs
        backward (callable): g -> list of gradients (one per input, None for non-differentiable inputs)

    Returns:
        (Tensor): Result, recorded on active tape if any input participates in differentiation
    """
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")

    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        ids = [tape.node_of(t) for t in inputs]
        if any(i is not None for i in ids):
            out.requires_grad = True
            tape._append(out, op, ids, backward)

    return out


class OpCounter:
    """Tallies FLOPs of matmul and attention ops, per scope label"""

    def __init__(self):
        self.by_scope = {}
        self.scopes = []

    def __repr__(self):
        return f"{self.total} flops"

    def __enter__(self):
        stack = getattr(_STATE, "counters", None)
        if stack is None:
            stack = _STATE.counters = []

        stack.append(self)
        return self

    def __exit__(self, *_):
        _STATE.counters.remove(self)

    @property
    def total(self):
        return sum(self.by_scope.values())

    def add(self, flops):
        label = self.scopes[-1] if self.scopes else "other"
        self.by_scope[label] = self.by_scope.get(label, 0) + int(flops)


@contextlib.contextmanager
def flops_scope(label):
    """Attribute FLOPs counted within this context to 'label'"""
    stack = getattr(_STATE, "counters", None)
    counter = stack[-1] if stack else None
    if counter is not None:
        counter.scopes.append(label)

    try:
        yield

    finally:
        if counter is not None:
            counter.scopes.pop()


def _count(flops):
    stack = getattr(_STATE, "counters", None)
    if stack:
        stack[-1].add(flops)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: can't multiply {a.shape} by {b.shape}")

    x, y = a.data, b.data
    _count(2 * x.shape[0] * x.shape[1] * y.shape[1])

    def backward(g):
        return [g @ y.T, x.T @ g]

    return recorded(x @ y, "matmul", [a, b], backward)


def add(a, b):
    """Elementwise sum, 'b' may also be a bias vector matching the last dimension of 'a'"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape == b.data.shape:
        return recorded(a.data + b.data, "add", [a, b], lambda g: [g, g])

    if b.data.ndim != 1 or not a.data.ndim or a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"add: can't add {b.shape} to {a.shape}")

    n = b.data.shape[0]
    return recorded(a.data + b.data, "add_bias", [a, b], lambda g: [g, g.reshape(-1, n).sum(axis=0)])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    x, y = a.data, b.data
    return recorded(x * y, "mul", [a, b], lambda g: [g * y, g * x])


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return recorded(a.data * c, "scale", [a], lambda g: [g * c])


def total(a):
    """Sum of all entries, as a scalar tensor"""
    a = as_tensor(a)
    shape = a.data.shape
    return recorded(np.asarray(a.data.sum()), "sum", [a], lambda g: [np.full(shape, float(g))])


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expecting a matrix, got {a.shape}")

    return recorded(a.data.T.copy(), "transpose", [a], lambda g: [g.T])


def reshape(a, shape):
    a = as_tensor(a)
    original = a.data.shape
    try:
        data = a.data.reshape(shape)

    except ValueError:
        raise DimensionError(f"reshape: can't reshape {a.shape} into {list(shape)}")

    return recorded(data, "reshape", [a], lambda g: [g.reshape(original)])


def take(a, start, stop, axis=0):
    """Slice [start:stop) of 'a' along 'axis'"""
    a = as_tensor(a)
    n = a.data.shape[axis]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"take: range [{start}:{stop}) out of bounds for axis {axis} of {a.shape}")

    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.data.shape

    def backward(g):
        result = np.zeros(shape)
        result[index] = g
        return [result]

    return recorded(a.data[index].copy(), "take", [a], backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)

    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")

    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    return recorded(data, "concat", tensors, lambda g: np.split(g, bounds, axis=axis))


def embedding(table, ids):
    """Rows of 'table' for token 'ids'"""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise DimensionError(f"embedding: ids must be in [0, {rows}), got {ids.min()}..{ids.max()}")

    shape = table.data.shape

    def backward(g):
        result = np.zeros(shape)
        np.add.at(result, ids, g)
        return [result]

    return recorded(table.data[ids], "embedding", [table], backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over last dimension, then apply learnable gain and bias"""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} don't match {x.shape}")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    g_ = gain.data

    def backward(g):
        gx_hat = g * g_
        gx = rstd / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return [gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)]

    return recorded(xhat * g_ + bias.data, "layer_norm", [x, gain, bias], backward)


def gelu(x):
    """GELU, tanh approximation"""
    x = as_tensor(x)
    v = x.data
    t = np.tanh(GELU_C * (v + 0.044715 * v ** 3))

    def backward(g):
        return [g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v))]

    return recorded(0.5 * v * (1.0 + t), "gelu", [x], backward)


def _softmax(values):
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_row(x):
    """Softmax over the last dimension"""
    x = as_tensor(x)
    y = _softmax(x.data)

    def backward(g):
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]

    return recorded(y, "softmax", [x], backward)


def attention(q, k, v, heads, causal, offset=0):
    """
    Multi-head scaled dot-product attention.

    Args:
        q (Tensor): Queries [Tq, d]
        k (Tensor): Keys [Tk, d]
        v (Tensor): Values [Tk, d]
        heads (int): Number of heads, must divide d
        causal (bool): If True, query i (at absolute position offset + i) only sees keys 0..offset+i
        offset (int): Absolute position of first query (non-zero when decoding against a cache)

    Returns:
        (Tensor): [Tq, d]
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    tq, d = q.data.shape
    tk = k.data.shape[0]
    if k.data.shape != (tk, d) or v.data.shape != (tk, d) or d % heads:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape} with {heads} heads")

    _count(2 * tq * tk * d)
    dh = d // heads
    factor = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(tq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(tk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(tk, heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * factor
    if causal:
        hidden = np.arange(tk)[None, :] > (offset + np.arange(tq))[:, None]
        scores = np.where(hidden, -np.inf, scores)

    p = _softmax(scores)
    out = (p @ vh).transpose(1, 0, 2).reshape(tq, d)

    def merged(x, t):
        return x.transpose(1, 0, 2).reshape(t, d)

    def backward(g):
        go = g.reshape(tq, heads, dh).transpose(1, 0, 2)
        gp = go @ vh.transpose(0, 2, 1)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * factor
        return [merged(gs @ kh, tq), merged(gs.transpose(0, 2, 1) @ qh, tk), merged(p.transpose(0, 2, 1) @ go, tk)]

    return recorded(out, "attention", [q, k, v], backward)


def cross_entropy(logits, targets, mask=None):
    """
    Args:
        logits (Tensor): [T, V]
        targets: Token ids, length T
        mask: Booleans, length T (all positions when None)

    Returns:
        (Tensor): Mean over masked-in positions of -log softmax(logits)[t, target_t]
    """
    logits = as_tensor(logits)
    t, vocab = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(t, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (t,) or mask.shape != (t,):
        raise DimensionError(f"cross_entropy: {len(targets)} targets / {len(mask)} mask entries for logits {logits.shape}")

    rows = np.flatnonzero(mask)
    if not len(rows):
        raise UndefinedMeanError("cross_entropy: mask selects no position")

    chosen = targets[rows]
    if chosen.min() < 0 or chosen.max() >= vocab:
        raise DimensionError(f"cross_entropy: targets must be in [0, {vocab})")

    x = logits.data[rows]
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    loss = (lse - x[np.arange(len(rows)), chosen]).mean()

    def backward(g):
        p = _softmax(x)
        p[np.arange(len(rows)), chosen] -= 1.0
        result = np.zeros((t, vocab))
        result[rows] = p * (float(g) / len(rows))
        return [result]

    return recorded(np.asarray(loss), "cross_entropy", [logits], backward)


def gradient_check(f, inputs, eps=1e-5):
    """
    Compare analytic gradients of scalar function 'f' against central finite differences.

    Args:
        f (callable): Takes Tensors (one per input), returns a scalar Tensor
        inputs (list): Arrays to evaluate 'f' at
        eps (float): Finite-difference step

    Returns:
        (float): max over all coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True, name=f"x{i}") for i, x in enumerate(arrays)]
    with Tape() as tape:
        grads = tape.backward(f(*leaves))

    worst = 0.0
    for i, x in enumerate(arrays):
        analytic = grads[f"x{i}"].data if f"x{i}" in grads else np.zeros_like(x)
        for index in np.ndindex(*x.shape):
            bumped = [a.copy() for a in arrays]
            bumped[i][index] = x[index] + eps
            high = f(*[Tensor(a) for a in bumped]).item()
            bumped[i][index] = x[index] - eps
            low = f(*[Tensor(a) for a in bumped]).item()
            numeric = (high - low) / (2 * eps)
            a = analytic[index]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))

    return worst


class ParamStore:
    """Named trainable parameters, iterated in lexicographic name order"""

    def __init__(self):
        self.entries = {}  # type: dict[str, Tensor]
        self.trainable_mask = {}  # type: dict[str, bool]

    def __repr__(self):
        return f"{runez.plural(self.entries, 'param')} ({self.tally()} scalars)"

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        yield from self.names()

    def __len__(self):
        return len(self.entries)

    def names(self, prefix=None):
        return [n for n in sorted(self.entries) if prefix is None or n.startswith(prefix)]

    def add(self, name, data, trainable=True):
        if name in self.entries:
            raise DimensionError(f"Parameter '{name}' defined twice")

        self.entries[name] = Tensor(data, requires_grad=True, name=name)
        self.trainable_mask[name] = trainable

    def assign(self, name, data):
        """Replace values of existing parameter 'name' (shape must match)"""
        data = np.asarray(data, dtype=np.float64)
        current = self.entries[name]
        if data.shape != current.data.shape:
            raise DimensionError(f"Parameter '{name}': expecting shape {current.shape}, got {list(data.shape)}")

        current.data = data.copy()

    def set_trainable(self, prefixes, trainable):
        for name in self.entries:
            if any(name.startswith(p) for p in runez.flattened(prefixes)):
                self.trainable_mask[name] = trainable

    def trainable_names(self):
        return [n for n in self.names() if self.trainable_mask[n]]

    def tally(self, prefix=None):
        """int: Total number of scalars (under 'prefix', if given)"""
        return sum(self.entries[n].size for n in self.names(prefix))

    def snapshot(self):
        """dict: Copy of all values, by name"""
        return {n: self.entries[n].data.copy() for n in self.names()}

    def fingerprint(self, prefix=None):
        """int: FNV-1a hash of names and raw values (under 'prefix', if given)"""
        value = None
        for name in self.names(prefix):
            chunk = name.encode("utf-8") + np.ascontiguousarray(self.entries[name].data, dtype="<f8").tobytes()
            value = fnv1a_64(chunk) if value is None else fnv1a_64(chunk, value)

        return value or 0


class Rng:
    """
    Named counter-based random stream: the same (seed, names) always yields the same draws,
    independently of what other streams were used for.
    """

    def __init__(self, seed, *names):
        """
        Args:
            seed (int): Seed (up to 64 bits)
            *names: Stream name components, hashed into the generator key
        """
        self.seed = int(seed)
        self.label = "/".join(str(n) for n in names)
        key = (fnv1a_64(self.label) << 64) | (self.seed & 0xFFFFFFFFFFFFFFFF)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"rng {self.label}#{self.seed}"

    def normal(self, shape, std=1.0):
        return self.generator.standard_normal(shape) * std

    def integers(self, low, high, size=None):
        """Uniform ints in [low, high)"""
        return self.generator.integers(low, high, size=size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)
