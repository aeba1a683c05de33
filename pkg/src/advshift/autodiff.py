"""Reverse-mode automatic differentiation on dense float64 arrays.

Every primitive records its parents and a backward rule written in terms of
other primitives, so a gradient computed with ``create_graph=True`` is itself
a differentiable expression (grad-of-grad, unrolled inner loops).

Nodes carry a monotonically increasing id; since parents are always created
before their children, sorting reachable nodes by id gives a valid reverse
topological order without an explicit tape object.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import logging
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_ids = itertools.count()
_grad_enabled = True
_debug_checks = False

ParamSet = Dict[str, "Tensor"]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug_checks(enabled: bool) -> None:
    """Check every recorded op for NaN/Inf (slow; off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def grad_mode(enabled: bool) -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward", "id", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: Tuple[Tensor, ...] = ()
        self.backward: Optional[Callable] = None
        self.id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.id = next(_ids)
    out.op = op
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward = None
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def sum_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape
    return _make(data, "sum_to", (x,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src_shape = x.shape
    return _make(data, "broadcast_to", (x,), lambda g: (sum_to(g, src_shape),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (sum_to(g, sa) if a.requires_grad else None, sum_to(g, sb) if b.requires_grad else None),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (sum_to(g, sa) if a.requires_grad else None, neg(sum_to(g, sb)) if b.requires_grad else None),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (mul(g, mul(a, 2.0)),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    src = a.shape
    return _make(data, "reshape", (a,), lambda g: (reshape(g, src),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape
    kept = a.data.sum(axis=axis, keepdims=True).shape

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.asarray(data, dtype=np.float64), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ShapeError(f"mean over an empty extent (shape {a.shape})")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, "relu", (a,), lambda g: (mul(g, Tensor(mask)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), "exp", (a,), None)
    if out.requires_grad:
        out.backward = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, "log", (a,), lambda g: (div(g, a),))


def solve(a, b) -> Tensor:
    """Solve ``a @ x = b`` for square ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"solve: singular system of shape {a.shape}") from exc
    out = _make(data, "solve", (a, b), None)
    if out.requires_grad:
        def backward(g):
            gb = solve(transpose(a), g)
            return (neg(matmul(gb, transpose(out))) if a.requires_grad else None), (gb if b.requires_grad else None)
        out.backward = backward
    return out


# ---------------------------------------------------------------------------
# Composite losses
# ---------------------------------------------------------------------------

def log_softmax(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = sub(logits, shift)
    return sub(shifted, log(tsum(exp(shifted), axis=-1, keepdims=True)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return neg(mean(tsum(mul(log_softmax(logits), Tensor(onehot)), axis=-1)))


def squared_error(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error: prediction {pred.shape} vs target {target.shape}")
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def _relevant_nodes(output: Tensor, targets: set) -> List[Tensor]:
    """Nodes on some path from a target to ``output``, newest first."""
    relevant: Dict[int, bool] = {}
    nodes: Dict[int, Tensor] = {}
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if node.id in relevant:
            continue
        if expanded:
            hit = node.id in targets or any(relevant.get(p.id, False) for p in node.parents)
            relevant[node.id] = hit
            if hit:
                nodes[node.id] = node
            continue
        stack.append((node, True))
        for p in node.parents:
            if p.id not in relevant and p.requires_grad:
                stack.append((p, False))
    return [nodes[i] for i in sorted(nodes, reverse=True)]


def grad(
    output: Tensor,
    wrt: Mapping[str, Tensor] | Sequence[Tensor],
    create_graph: bool = False,
    unreachable: Optional[List[str]] = None,
):
    """Gradients of scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be a ParamSet (returns a ParamSet with the same keys) or a
    sequence of tensors (returns a list). Parameters that do not influence
    ``output`` get a zero gradient; their names are appended to
    ``unreachable`` when a list is supplied.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    named = isinstance(wrt, Mapping)
    items = list(wrt.items()) if named else list(enumerate(wrt))
    targets = {t.id for _, t in items if t.requires_grad}
    grads: Dict[int, Tensor] = {}
    if output.requires_grad and targets:
        order = _relevant_nodes(output, targets)
        grads[output.id] = Tensor(np.ones_like(output.data))
        with grad_mode(create_graph):
            for node in order:
                g = grads.get(node.id)
                if g is None or node.backward is None:
                    continue
                if node.id not in targets:
                    # interior node: its gradient is consumed here
                    del grads[node.id]
                for p, pg in zip(node.parents, node.backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(p.id)
                    grads[p.id] = pg if prev is None else add(prev, pg)
    result = []
    missing = []
    for key, t in items:
        g = grads.get(t.id)
        if g is None:
            missing.append(str(key))
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = g.detach()
        result.append((key, g))
    if missing:
        logger.debug("gradient: unreachable parameters %s", missing)
        if unreachable is not None:
            unreachable.extend(missing)
    return dict(result) if named else [g for _, g in result]


def check_grad(
    fn: Callable[[ParamSet], Tensor],
    point: Mapping[str, Tensor],
    eps: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Worst per-coordinate relative error of ``grad`` against central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps coordinates whose true gradient is (near) zero from
    dominating through rounding noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: Tensor(v.data, requires_grad=True) for k, v in point.items()}
    analytic = grad(fn(params), params)
    worst = 0.0
    # fn may itself differentiate, so perturbed evaluations keep grad mode on
    with grad_mode(True):
        for name, p in params.items():
            base = p.data.copy()
            flat = p.data.reshape(-1)
            a_flat = analytic[name].data.reshape(-1)
            for i in range(flat.size):
                flat[i] = base.reshape(-1)[i] + eps
                f_plus = fn(params).item()
                flat[i] = base.reshape(-1)[i] - eps
                f_minus = fn(params).item()
                flat[i] = base.reshape(-1)[i]
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NonFiniteError(f"check_grad: non-finite value perturbing {name}[{i}]")
                numeric = (f_plus - f_minus) / (2 * eps)
                a = a_flat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# ParamSet helpers and serialization
# ---------------------------------------------------------------------------

def param_leaves(params: Mapping[str, Tensor]) -> ParamSet:
    """Fresh leaf tensors (requires_grad) holding copies of ``params``."""
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def detach_params(params: Mapping[str, Tensor]) -> ParamSet:
    return {k: v.detach() for k, v in params.items()}


def params_to_json(params: Mapping[str, Tensor]) -> dict:
    # float repr is the shortest decimal that round-trips exactly
    return {
        k: {"shape": list(v.shape), "values": [float(x) for x in v.data.reshape(-1)]}
        for k, v in params.items()
    }


def params_from_json(doc: Mapping[str, dict]) -> ParamSet:
    out = {}
    for k, entry in doc.items():
        shape = tuple(int(n) for n in entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ShapeError(f"parameter '{k}': {values.size} values for shape {shape}")
        out[k] = Tensor(values.reshape(shape))
    return out


def save_params(params: Mapping[str, Tensor], path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path: str | Path) -> ParamSet:
    return params_from_json(json.loads(Path(path).read_text()))


def all_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
