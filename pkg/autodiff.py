"""
Reverse-Mode Autodiff
Dense float64 tensors, a recording tape, the op set the model is built from,
Adam, gradient checking and a counter-based noise source
"""

import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from errors import BatchNormError, InvalidTarget, MaskAllFalse, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """float64 array plus gradient slot; the constructor copies its input"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def to_float32(self) -> np.ndarray:
        return self.data.astype(np.float32)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f' {self.name}' if self.name else ''
        return f'Tensor{label}(shape={self.shape})'


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    forward: Callable
    backward: Callable
    cache: object


_local = threading.local()


def _active_tape() -> Optional['Tape']:
    stack = getattr(_local, 'tapes', None)
    return stack[-1] if stack else None


class Tape:
    """
    Records every op run inside `with Tape() as tape:`
    Ops run outside a tape compute values only.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> 'Tape':
        if not hasattr(_local, 'tapes'):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tapes.pop()
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into .grad of every leaf that requires it"""
        if loss.data.size != 1:
            raise ShapeMismatch(f'backward needs a scalar loss, got shape {loss.shape}')
        grads = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self.nodes}
        leaves = {}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            values = [t.data for t in node.inputs]
            input_grads = node.backward(g, node.cache, *values)
            for tensor, gi in zip(node.inputs, input_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g

    def replay_matches(self) -> bool:
        """Recompute every recorded op in order; True when all outputs are bit-identical"""
        replayed = {}
        for node in self.nodes:
            values = [replayed.get(id(t), t.data) for t in node.inputs]
            out, _ = node.forward(*values)
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                return False
            replayed[id(node.output)] = out
        return True


def _op(name: str, inputs: Sequence[Tensor], forward: Callable, backward: Callable) -> Tensor:
    out_data, cache = forward(*[t.data for t in inputs])
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires_grad
    out.grad = None
    out.name = None
    tape = _active_tape()
    if tape is not None and requires_grad:
        tape.nodes.append(Node(name, tuple(inputs), out, forward, backward, cache))
    elif tape is not None:
        # constants still replay
        tape.nodes.append(Node(name, tuple(inputs), out, forward, lambda g, c, *v: [None] * len(v), cache))
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f'{name}: shapes {a.shape} and {b.shape} do not broadcast') from None


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast('add', a.data, b.data)
    return _op('add', (a, b),
               lambda x, y: (x + y, None),
               lambda g, c, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast('sub', a.data, b.data)
    return _op('sub', (a, b),
               lambda x, y: (x - y, None),
               lambda g, c, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast('mul', a.data, b.data)
    return _op('mul', (a, b),
               lambda x, y: (x * y, None),
               lambda g, c, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _op('scale', (a,), lambda x: (x * factor, None), lambda g, c, x: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _op('add_scalar', (a,), lambda x: (x + value, None), lambda g, c, x: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f'matmul: {a.shape} @ {b.shape}')
    return _op('matmul', (a, b),
               lambda x, y: (x @ y, None),
               lambda g, c, x, y: (g @ y.T, x.T @ g))


def linear_map(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (n, in) @ weight (in, out) + bias (out,)"""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f'linear_map: input {x.shape} against weight {weight.shape}')
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f'linear_map: bias {bias.shape} for {weight.shape[1]} outputs')
        out = add(out, bias)
    return out


def relu(a: Tensor) -> Tensor:
    return _op('relu', (a,),
               lambda x: (np.maximum(x, 0.0), None),
               lambda g, c, x: (g * (x > 0),))


def tanh(a: Tensor) -> Tensor:
    def forward(x):
        y = np.tanh(x)
        return y, y
    return _op('tanh', (a,), forward, lambda g, y, x: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    def forward(x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y
    return _op('sigmoid', (a,), forward, lambda g, y, x: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    def forward(x):
        y = np.exp(x)
        return y, y
    return _op('exp', (a,), forward, lambda g, y, x: (g * y,))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    def backward(g, c, x):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return _op('sum', (a,), lambda x: (np.asarray(x.sum(axis=axis)), None), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum(a), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatch('concat of nothing')
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)):
            raise ShapeMismatch(f'concat: {p.shape} against {ref} on axis {axis}')
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g, c, *xs):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))
    return _op('concat', tuple(parts), lambda *xs: (np.concatenate(xs, axis=axis), None), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g, c, x):
        full = np.zeros_like(x)
        full[:, start:stop] = g
        return (full,)
    return _op('slice_cols', (a,), lambda x: (x[:, start:stop].copy(), None), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeMismatch(f'gather_rows: index out of range for {a.shape[0]} rows')

    def backward(g, c, x):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)
    return _op('gather_rows', (a,), lambda x: (x[index], None), backward)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of a into num_segments buckets"""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if len(segment_ids) != a.shape[0]:
        raise ShapeMismatch(f'segment_sum: {len(segment_ids)} ids for {a.shape[0]} rows')

    def forward(x):
        out = np.zeros((num_segments,) + x.shape[1:])
        np.add.at(out, segment_ids, x)
        return out, None
    return _op('segment_sum', (a,), forward, lambda g, c, x: (g[segment_ids],))


scatter_add_rows = segment_sum


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeMismatch(
            f'embedding_lookup: index out of range for a table of {table.shape[0]} rows')
    return gather_rows(table, indices)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    batches_tracked: int = 0

    @classmethod
    def fresh(cls, dim: int) -> 'BatchNormStats':
        return cls(np.zeros(dim), np.ones(dim))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: Optional[BatchNormStats],
               training: bool) -> Tensor:
    """
    Normalize each feature over the batch (training) or with running statistics (eval)
    Training mode updates stats with momentum 0.1 using the unbiased variance.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f'batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}')

    if training:
        n = x.shape[0]
        if n < 2:
            raise BatchNormError(f'batch_norm in training mode needs at least 2 rows, got {n}')

        def forward(xv, gv, bv):
            mu = xv.mean(axis=0)
            var = xv.var(axis=0)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (xv - mu) * inv
            return xhat * gv + bv, (xhat, inv)

        def backward(g, cache, xv, gv, bv):
            xhat, inv = cache
            dxhat = g * gv
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        out = _op('batch_norm', (x, gamma, beta), forward, backward)
        if stats is not None:
            stats.running_mean = (1 - BN_MOMENTUM) * stats.running_mean + BN_MOMENTUM * x.data.mean(axis=0)
            stats.running_var = (1 - BN_MOMENTUM) * stats.running_var + BN_MOMENTUM * x.data.var(axis=0, ddof=1)
            stats.batches_tracked += 1
        return out

    if stats is None:
        raise BatchNormError('batch_norm in eval mode needs running statistics')
    if stats.running_mean.shape != (x.shape[1],):
        raise ShapeMismatch(f'batch_norm: running stats {stats.running_mean.shape} for {x.shape}')
    mu = stats.running_mean.copy()
    inv = 1.0 / np.sqrt(stats.running_var + BN_EPS)

    def eval_forward(xv, gv, bv):
        xhat = (xv - mu) * inv
        return xhat * gv + bv, xhat

    def eval_backward(g, xhat, xv, gv, bv):
        return g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _op('batch_norm', (x, gamma, beta), eval_forward, eval_backward)


def dropout(x: Tensor, rate: float, training: bool, uniform: Optional[np.ndarray] = None) -> Tensor:
    """Inverted dropout; `uniform` holds one draw in [0, 1) per entry"""
    if not training or rate <= 0.0:
        return x
    if uniform is None or uniform.shape != x.shape:
        raise ShapeMismatch(f'dropout: noise shape does not match {x.shape}')
    keep = (uniform >= rate) / (1.0 - rate)
    return _op('dropout', (x,), lambda v: (v * keep, None), lambda g, c, v: (g * keep,))


@dataclass
class GruWeights:
    """One GRU layer, gates ordered (reset, update, new) along the 3H axis"""
    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]


def gru_cell(x: Tensor, h: Tensor, w: GruWeights) -> Tensor:
    """
    r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = n + z * (h - n)
    """
    hidden = w.hidden
    if h.data.ndim != 2 or h.shape[1] != hidden:
        raise ShapeMismatch(f'gru_cell: hidden state {h.shape} for width {hidden}')
    gi = linear_map(x, w.w_ih, w.b_ih)
    gh = linear_map(h, w.w_hh, w.b_hh)
    r = sigmoid(add(slice_cols(gi, 0, hidden), slice_cols(gh, 0, hidden)))
    z = sigmoid(add(slice_cols(gi, hidden, 2 * hidden), slice_cols(gh, hidden, 2 * hidden)))
    n = tanh(add(slice_cols(gi, 2 * hidden, 3 * hidden), mul(r, slice_cols(gh, 2 * hidden, 3 * hidden))))
    return add(n, mul(z, sub(h, n)))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def masked_softmax_cross_entropy(logits: Tensor, mask: np.ndarray, targets: np.ndarray) -> Tensor:
    """
    Summed cross-entropy of targets under a softmax restricted to mask
    Masked-out classes get a -inf logit; a row with no allowed class is MaskAllFalse.
    """
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or mask.shape != logits.shape or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(
            f'masked_softmax_cross_entropy: logits {logits.shape}, mask {mask.shape}, targets {targets.shape}')
    if not mask.any(axis=1).all():
        raise MaskAllFalse(f'rows {np.flatnonzero(~mask.any(axis=1)).tolist()} allow no class')
    rows = np.arange(len(targets))
    if not mask[rows, targets].all():
        raise InvalidTarget(f'target masked out at steps {np.flatnonzero(~mask[rows, targets]).tolist()}')

    def forward(z):
        masked = np.where(mask, z, -np.inf)
        top = masked.max(axis=1, keepdims=True)
        shifted = np.exp(masked - top)
        total = shifted.sum(axis=1, keepdims=True)
        probs = shifted / total
        lse = (np.log(total) + top)[:, 0]
        return np.asarray((lse - z[rows, targets]).sum()), probs

    def backward(g, probs, z):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return (grad * g,)

    return _op('masked_softmax_cross_entropy', (logits,), forward, backward)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Probabilities with exact zeros on masked classes (inference helper)"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise MaskAllFalse('no class allowed')
    masked = np.where(mask, logits, -np.inf)
    shifted = np.exp(masked - masked.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """-1/2 * sum(1 + logvar - mu^2 - exp(logvar)) over every entry"""
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f'gaussian_kl: mu {mu.shape} against logvar {logvar.shape}')

    def forward(m, lv):
        return np.asarray(-0.5 * (1.0 + lv - m * m - np.exp(lv)).sum()), None

    def backward(g, c, m, lv):
        return g * m, g * 0.5 * (np.exp(lv) - 1.0)

    return _op('gaussian_kl', (mu, logvar), forward, backward)


# ---------------------------------------------------------------------------
# Optimizer and gradient checking
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> 'AdamState':
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, betas: Tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
              eps: float = 1e-8) -> Tuple[List[np.ndarray], AdamState]:
    """
    Classic Adam with bias correction
    Weight decay is added to the gradient before the moment updates.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeMismatch('adam_step: params, grads and state lengths differ')
    beta1, beta2 = betas
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise ShapeMismatch(f'adam_step: parameter {p.shape} against gradient {g.shape}')
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)


class Adam:
    """Applies adam_step in place to a list of tensors"""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        updated, self.state = adam_step([p.data for p in self.params], grads, self.state,
                                        self.lr, self.betas, self.weight_decay)
        for p, value in zip(self.params, updated):
            p.data = value


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the norm before clipping"""
    total = float(np.sqrt(np.sum([np.sum(p.grad ** 2) for p in params if p.grad is not None])))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               floor: float = 1e-8) -> float:
    """
    Max relative error between tape gradients and central finite differences
    Gradients smaller than `floor` are compared in absolute terms.

    f must rebuild its scalar output from the current parameter values on every
    call and be deterministic (fixed noise keys).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        grad_flat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = f().item()
            flat[i] = original - step
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            denom = max(abs(grad_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(grad_flat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

class NoiseSource:
    """Philox streams keyed by (seed, stream name, step); draws never depend on call order"""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, stream: str, step: int) -> np.random.Generator:
        key = np.array([self.seed % 2 ** 64, zlib.crc32(stream.encode('utf-8'))], dtype=np.uint64)
        counter = np.array([0, 0, 0, int(step) % 2 ** 64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normal(self, stream: str, step: int, shape) -> np.ndarray:
        return self.generator(stream, step).standard_normal(shape)

    def uniform(self, stream: str, step: int, shape) -> np.ndarray:
        return self.generator(stream, step).random(shape)
