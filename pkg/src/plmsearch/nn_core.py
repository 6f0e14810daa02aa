"""Dense numerics with tape-based reverse-mode differentiation.

Values flowing through a :class:`Tape` are float64 numpy arrays regardless of
how the parameters are stored, so every reduction accumulates in 64 bits.
Parameters themselves are usually kept as float32 and are only upcast when
they enter a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, DimensionError, NumericError, OracleError

IGNORE_INDEX = -100


class Node:
    __slots__ = ("value", "index")

    def __init__(self, value: np.ndarray, index: int):
        self.value = value
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops with what each needs for its gradient.

    ``record=False`` gives an inference-only tape: ops still produce nodes but
    nothing is retained for backward.
    """

    def __init__(self, record: bool = True, trace_relu: bool = False):
        self.record = record
        self.trace_relu = trace_relu
        self.relu_masks: list[np.ndarray] = []
        self._ops: list[tuple[int, tuple, Callable]] = []
        self._count = 0
        self._params: dict[str, Node] = {}

    def __len__(self):
        return len(self._ops)

    def _new(self, value: np.ndarray, parents=(), backward=None) -> Node:
        node = Node(value, self._count)
        self._count += 1
        if self.record and backward is not None and any(p is not None for p in parents):
            self._ops.append((node.index, parents, backward))
        return node

    def param(self, name: str, array) -> Node:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        node = self._new(np.array(array, dtype=np.float64))
        self._params[name] = node
        return node

    def constant(self, array) -> Node:
        return self._new(np.asarray(array, dtype=np.float64))

    @property
    def params(self) -> dict[str, Node]:
        return dict(self._params)


def _value(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _index(x):
    return x.index if isinstance(x, Node) else None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(tape: Tape, a, b) -> Node:
    """Batched matrix product ``a @ b`` (the last two axes are the matrix)."""
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return tape._new(out, (_index(a), _index(b)), backward)


def add(tape: Tape, a, b) -> Node:
    av, bv = _value(a), _value(b)
    try:
        out = av + bv
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {av.shape} + {bv.shape}") from exc

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._new(out, (_index(a), _index(b)), backward)


def sub(tape: Tape, a, b) -> Node:
    av, bv = _value(a), _value(b)
    out = av - bv

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._new(out, (_index(a), _index(b)), backward)


def mul(tape: Tape, a, b) -> Node:
    av, bv = _value(a), _value(b)
    out = av * bv

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._new(out, (_index(a), _index(b)), backward)


def scale(tape: Tape, a, c: float) -> Node:
    out = _value(a) * c
    return tape._new(out, (_index(a),), lambda g: (g * c,))


def relu(tape: Tape, a) -> Node:
    av = _value(a)
    mask = av > 0
    if tape.trace_relu:
        tape.relu_masks.append(mask)
    return tape._new(np.where(mask, av, 0.0), (_index(a),), lambda g: (g * mask,))


def reshape(tape: Tape, a, shape) -> Node:
    av = _value(a)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {av.shape} to {tuple(shape)}") from exc
    return tape._new(out, (_index(a),), lambda g: (g.reshape(av.shape),))


def transpose(tape: Tape, a, axes) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(_value(a), axes)
    return tape._new(out, (_index(a),), lambda g: (np.transpose(g, inverse),))


def mean(tape: Tape, a, axis) -> Node:
    """Mean over one axis (used for pooling)."""
    av = _value(a)
    n = av.shape[axis]
    out = av.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape) / n,)

    return tape._new(out, (_index(a),), backward)


def embedding(tape: Tape, table, ids) -> Node:
    tv = _value(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise IndexError(f"token id out of range [0, {tv.shape[0]})")
    out = tv[ids]

    def backward(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return tape._new(out, (_index(table),), backward)


def softmax_rows(tape: Tape, x) -> Node:
    """Softmax along the last axis, computed with max subtraction."""
    xv = _value(x)
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return tape._new(y, (_index(x),), backward)


def layer_norm(tape: Tape, x, gamma, beta, eps: float = 1e-12) -> Node:
    """Normalise the last axis with the biased (divide-by-d) variance."""
    xv, gv, bv = _value(x), _value(gamma), _value(beta)
    d = xv.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last axis of at least 2, got {xv.shape}")
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gv.shape}, {bv.shape} do not match {xv.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gx_hat = g * gv
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return tape._new(out, (_index(x), _index(gamma), _index(beta)), backward)


def cross_entropy_mean(tape: Tape, logits, targets, ignore_index: int = IGNORE_INDEX) -> Node:
    """Mean of ``-log softmax(logits)[target]`` over non-ignored positions.

    Returns an exact zero when every position is ignored.
    """
    lv = _value(logits)
    V = lv.shape[-1]
    flat = lv.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets shape {np.shape(targets)} does not match logits {lv.shape}")
    keep = t != ignore_index
    tk = t[keep]
    if tk.size and (tk.min() < 0 or tk.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    count = int(keep.sum())
    if count == 0:
        return tape._new(np.array(0.0), (_index(logits),), lambda g: (np.zeros_like(lv),))
    rows = flat[keep]
    m = rows.max(axis=-1, keepdims=True)
    e = np.exp(rows - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (np.log(s) + m)[:, 0]
    picked = rows[np.arange(count), tk]
    loss = np.array(float(np.sum(lse - picked)) / count)

    def backward(g):
        p = e / s
        p[np.arange(count), tk] -= 1.0
        full = np.zeros_like(flat)
        full[keep] = p * (float(g) / count)
        return (full.reshape(lv.shape),)

    return tape._new(loss, (_index(logits),), backward)


def mse(tape: Tape, a, b) -> Node:
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"mse shape mismatch: {av.shape} vs {bv.shape}")
    diff = av - bv
    n = diff.size
    out = np.array(float(np.sum(diff * diff)) / n)

    def backward(g):
        ga = diff * (2.0 * float(g) / n)
        return ga, -ga

    return tape._new(out, (_index(a), _index(b)), backward)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter on ``tape``.

    Parameters the loss does not reach get exact zeros.
    """
    if not isinstance(loss, Node) or loss.value.size != 1:
        raise ContractError("backward needs a scalar node produced on this tape")
    if not tape.record:
        raise ContractError("tape was created with record=False")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for out_index, parents, fn in reversed(tape._ops):
        g = grads.pop(out_index, None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if parent is None or pg is None:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    result = {}
    for name, node in tape._params.items():
        g = grads.get(node.index)
        result[name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    refined: int
    skipped: int
    worst: tuple | None = None

    @property
    def passed(self):
        return self.skipped == 0


def finite_diff_report(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    epsilon: float,
    analytic: Mapping[str, np.ndarray],
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    region: Callable[[Mapping[str, np.ndarray]], object] | None = None,
    max_refine: int = 12,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``max_coords`` limits how many coordinates per parameter are probed
    (sampled with ``rng``); by default every coordinate is checked.

    ``region`` maps parameters to a signature of the piecewise-smooth piece
    the point lies in (e.g. the rectifier on/off pattern). When either probe
    point leaves the piece of the base point, the step is halved for that
    coordinate until both stay inside; coordinates that never settle are
    counted as skipped and make the report fail.
    """
    if not 1e-4 <= epsilon <= 1e-2:
        raise ContractError(f"epsilon must lie in [1e-4, 1e-2], got {epsilon}")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base = float(f(work))
    if float(f(work)) != base:
        raise OracleError("objective is not deterministic: repeated evaluation differs")
    base_region = region(work) if region is not None else None
    rng = rng if rng is not None else np.random.default_rng(0)
    worst, worst_at = 0.0, None
    checked = refined = skipped = 0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in coords:
            orig = flat[i]
            eps = epsilon
            for attempt in range(max_refine + 1):
                flat[i] = orig + eps
                fp = float(f(work))
                same = region is None or region(work) == base_region
                flat[i] = orig - eps
                fm = float(f(work))
                same = same and (region is None or region(work) == base_region)
                flat[i] = orig
                if same:
                    break
                eps /= 2.0
            else:
                skipped += 1
                continue
            refined += attempt > 0
            checked += 1
            num = (fp - fm) / (2.0 * eps)
            ana = a_flat[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if rel > worst:
                worst, worst_at = rel, (name, int(i), float(ana), float(num))
    return GradCheckReport(worst, checked, refined, skipped, worst_at)


def finite_diff_check(f, params, epsilon, analytic, **kwargs) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    report = finite_diff_report(f, params, epsilon, analytic, **kwargs)
    if report.skipped:
        return math.inf
    return report.max_rel_error


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: dict, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0):
    """Apply one SGD or Adam update; ``params`` is updated and returned.

    Arrays are replaced, not written into, so callers holding the old arrays
    keep the old values. Updates are computed in float64 and stored back in
    each parameter's own dtype.
    """
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise DimensionError(f"gradient {name}: {np.shape(g)} vs parameter {np.shape(params[name])}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        p64 = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if state.kind == "sgd":
            upd = g
        else:
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
            v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
            state.m[name], state.v[name] = m, v
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            upd = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            upd = upd + weight_decay * p64
        params[name] = (p64 - lr * upd).astype(np.asarray(p).dtype)
    return params, state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
