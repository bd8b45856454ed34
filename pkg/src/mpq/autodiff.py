"""Small reverse-mode autodiff engine and a toy-model executor.

The engine is a numpy-backed :class:`Tensor` with a tape built implicitly by
the operations below. It is only as general as the toy networks need: every
op broadcasts over leading axes so that a whole batch of perturbed forward
passes (noise trials, finite-difference probes) runs as one call.

The executor runs a :class:`~mpq.graphir.CompGraph` forward for one
calibration sample. Every quantizable layer reads its operands through a
*tap*, a private copy of the operand, so the gradient recorded for layer
``l`` is the derivative with respect to that layer's extended input only,
not with respect to a tensor it may share with sibling layers.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import MPQError, NumericOverflow, ShapeMismatch
from .graphir import Bgemm, CompGraph, Linear, Opaque

_GELU_C = np.sqrt(2.0 / np.pi)


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericOverflow(f"non-finite values produced by {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accum(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, seed: np.ndarray | None = None) -> None:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=tuple(parents) if rg else (), op=op)


def identity(a: Tensor) -> Tensor:
    out = _node(a.data.copy(), (a,), "identity")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g)
    return out


def add(*xs: Tensor) -> Tensor:
    data = xs[0].data
    for x in xs[1:]:
        data = data + x.data
    out = _node(data, xs, "add")
    if out.requires_grad:
        def bw(g):
            for x in xs:
                if x.requires_grad:
                    x._accum(g)
        out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)
        out._backward = bw
    return out


def scale(a: Tensor, k: float) -> Tensor:
    out = _node(a.data * k, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * k)
    return out


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T`` over the last two axes), broadcasting leading axes."""
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.data.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims {a.data.shape} x {bd.shape}")
    out = _node(np.matmul(a.data, bd), (a, b), "matmul")
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accum(np.matmul(g, np.swapaxes(bd, -1, -2)))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(np.swapaxes(gb, -1, -2) if transpose_b else gb)
        out._backward = bw
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _node(a.data * mask, (a,), "relu")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g * mask)
    return out


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = _node(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        out._backward = lambda g: a._accum(g * d)
    return out


def softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _node(y, (a,), "softmax")
    if out.requires_grad:
        def bw(g):
            a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))
        out._backward = bw
    return out


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Affine-free layer normalization over the last axis."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    out = _node(y, (a,), "layernorm")
    if out.requires_grad:
        def bw(g):
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a._accum(inv * (g - gm - y * gym))
        out._backward = bw
    return out


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean token cross-entropy over the last two axes (rows x classes).

    ``target`` holds class indices with shape ``logits.shape[-2:-1]``.
    """
    z = logits.data
    target = np.asarray(target, dtype=np.int64)
    if target.shape != z.shape[-2:-1]:
        raise ShapeMismatch(f"targets {target.shape} do not match logits {z.shape}")
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = np.take_along_axis(z, np.broadcast_to(target[:, None], z.shape[:-1] + (1,)), axis=-1)[..., 0]
    n_rows = z.shape[-2]
    loss = (lse - picked).sum(axis=-1) / n_rows
    out = _node(loss, (logits,), "cross_entropy")
    if out.requires_grad:
        def bw(g):
            p = np.exp(z - lse[..., None])
            onehot = np.zeros_like(z)
            np.put_along_axis(onehot, np.broadcast_to(target[:, None], z.shape[:-1] + (1,)), 1.0, axis=-1)
            logits._accum((p - onehot) * (np.asarray(g)[..., None, None] / n_rows))
        out._backward = bw
    return out


def mse(y: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over the last two axes."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != y.data.shape[-2:]:
        raise ShapeMismatch(f"targets {t.shape} do not match outputs {y.data.shape}")
    diff = y.data - t
    n = diff.shape[-1] * diff.shape[-2]
    out = _node((diff**2).sum(axis=(-1, -2)) / n, (y,), "mse")
    if out.requires_grad:
        out._backward = lambda g: y._accum(diff * (2.0 / n) * np.asarray(g)[..., None, None])
    return out


def linear_forward(x, w, b=None) -> Tensor:
    """``Y = X W^T (+ 1 b^T)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} != weight width {w.shape[-1]}")
    y = matmul(x, w, transpose_b=True)
    if b is not None:
        b = _as_tensor(b)
        if b.shape[-1] != w.shape[-2]:
            raise ShapeMismatch(f"linear: bias length {b.shape[-1]} != out features {w.shape[-2]}")
        y = add(y, b)
    return y


def bgemm_forward(x0, x1) -> Tensor:
    """Row-wise dot products: ``Y[n, 0] = X0[n] . X1[n]``."""
    x0, x1 = _as_tensor(x0), _as_tensor(x1)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"bgemm operands differ in shape: {x0.shape} vs {x1.shape}")
    prod = mul(x0, x1)
    out = _node(prod.data.sum(axis=-1, keepdims=True), (prod,), "rowsum")
    if out.requires_grad:
        out._backward = lambda g: prod._accum(np.broadcast_to(g, prod.data.shape))
    return out


# ---------------------------------------------------------------------------
# toy models

UNARY_OPS: dict[str, Callable[..., Tensor]] = {
    "identity": identity,
    "softmax": softmax,
    "gelu": gelu,
    "relu": relu,
    "layernorm": layernorm,
}
BINARY_OPS = {"add", "mul"}
LOSS_KINDS = ("cross_entropy", "mse")


@dataclass(frozen=True)
class OpBinding:
    op: str
    value: float = 1.0

    def __post_init__(self):
        if self.op not in UNARY_OPS and self.op not in BINARY_OPS and self.op != "scale":
            raise MPQError(f"unknown opaque op {self.op!r}")


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray | None = None


@dataclass
class ToyModel:
    graph: CompGraph
    params: dict[int, LayerParams]
    bindings: dict[int, OpBinding]
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise MPQError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        g = self.graph
        for vid in g.vertex_ids:
            kind = g.kind(vid)
            npred = len(g.predecessors(vid))
            if isinstance(kind, Linear):
                p = self.params.get(vid)
                if p is None:
                    raise MPQError(f"linear vertex {g.name(vid)} has no parameters")
                if p.weight.shape != (kind.out_features, kind.in_features):
                    raise ShapeMismatch(
                        f"{g.name(vid)}: weight {p.weight.shape} != ({kind.out_features}, {kind.in_features})"
                    )
                if kind.has_bias != (p.bias is not None):
                    raise MPQError(f"{g.name(vid)}: bias presence disagrees with the graph")
                if p.bias is not None and p.bias.shape != (kind.out_features,):
                    raise ShapeMismatch(f"{g.name(vid)}: bias shape {p.bias.shape}")
                if npred > 1:
                    raise MPQError(f"linear vertex {g.name(vid)} has {npred} inputs")
            elif isinstance(kind, Bgemm):
                if npred != 2:
                    raise MPQError(f"bgemm vertex {g.name(vid)} needs exactly 2 inputs, has {npred}")
            else:
                b = self.bindings.get(vid)
                if b is None:
                    raise MPQError(f"opaque vertex {g.name(vid)} has no op binding")
                if b.op in BINARY_OPS:
                    if npred < 2 or (b.op == "mul" and npred != 2):
                        raise MPQError(f"{g.name(vid)}: {b.op} needs two inputs, has {npred}")
                elif npred > 1:
                    raise MPQError(f"{g.name(vid)}: {b.op} takes one input, has {npred}")

    @property
    def layers(self) -> list[int]:
        return self.graph.quantizable()


@dataclass
class CalibBatch:
    """Calibration samples. ``inputs`` is ``(R, T, C_in)``; a 2-D array is read as ``T = 1``.

    ``targets`` is ``(R, T)`` class indices for cross-entropy or ``(R, T, K)``
    reals for mean-squared error.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[0] < 1:
            raise ShapeMismatch(f"inputs must be (R, T, C), got {np.shape(self.inputs)}")
        _check_finite(x, "calibration inputs")
        t = np.asarray(self.targets)
        if t.shape[0] != x.shape[0]:
            raise ShapeMismatch(f"{t.shape[0]} targets for {x.shape[0]} samples")
        if np.issubdtype(t.dtype, np.integer):
            if t.ndim == 1:
                t = t[:, None]
        else:
            t = t.astype(np.float64)
            if t.ndim == 2:
                t = t[:, None, :]
        self.inputs = x
        self.targets = t

    def __len__(self) -> int:
        return self.inputs.shape[0]


#: ``perturb(layer_id, operand, value) -> value`` rewrites a layer operand;
#: operand 0 is the activation (x or x0), operand 1 the weight (or x1).
Perturb = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass
class Tape:
    loss: Tensor
    sample: int = 0
    taps: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)


@dataclass
class ExtendedInput:
    """Extended input ``z = [vec(x); vec(w)]`` (or ``[vec(x0); vec(x1)]``) and its gradient."""

    layer: int
    sample: int
    z: np.ndarray
    grad: np.ndarray


def _tap_node(t: Tensor) -> Tensor:
    out = Tensor(t.data, requires_grad=True, _parents=(t,) if t.requires_grad else (), op="tap")
    if t.requires_grad:
        out._backward = lambda g: t._accum(g)
    return out


def _run(model: ToyModel, x: np.ndarray, target: np.ndarray, perturb: Perturb | None, record: bool) -> Tape:
    g = model.graph
    out: dict[int, Tensor] = {}
    taps: dict[int, tuple[Tensor, Tensor]] = {}
    inp = Tensor(x)

    def tap(vid: int, k: int, t: Tensor) -> Tensor:
        if perturb is not None:
            return Tensor(perturb(vid, k, t.data), op="perturbed")
        if record:
            return _tap_node(t)
        return t

    for vid in g.topo_order:
        kind = g.kind(vid)
        args = [out[p] for p in g.predecessors(vid)] or [inp]
        if isinstance(kind, Linear):
            p = model.params[vid]
            xs = tap(vid, 0, args[0])
            w = tap(vid, 1, Tensor(p.weight))
            y = linear_forward(xs, w, p.bias)
            taps[vid] = (xs, w)
        elif isinstance(kind, Bgemm):
            a = tap(vid, 0, args[0])
            b = tap(vid, 1, args[1])
            y = matmul(a, b, transpose_b=kind.transpose_rhs)
            taps[vid] = (a, b)
        else:
            bnd = model.bindings[vid]
            if bnd.op == "add":
                y = add(*args)
            elif bnd.op == "mul":
                y = mul(args[0], args[1])
            elif bnd.op == "scale":
                y = scale(args[0], bnd.value)
            else:
                y = UNARY_OPS[bnd.op](args[0])
        out[vid] = y

    final = out[g.sink]
    loss = cross_entropy(final, target) if model.loss == "cross_entropy" else mse(final, target)
    return Tape(loss=loss, taps=taps if record else {})


def sample_losses(
    model: ToyModel, batch: CalibBatch, r: int, perturb: Perturb | None = None, batch_size: int | None = None
) -> np.ndarray:
    """Loss of sample ``r``.

    A perturbation that adds a leading axis yields one loss per entry along
    it. ``batch_size`` broadcasts the input to ``(batch_size, T, C)`` first,
    so every activation carries that axis.
    """
    x = batch.inputs[r]
    if batch_size is not None:
        x = np.broadcast_to(x, (batch_size,) + x.shape)
    return _run(model, x, batch.targets[r], perturb, record=False).loss.data


def forward_loss(model: ToyModel, batch: CalibBatch) -> tuple[np.ndarray, list[Tape]]:
    """Per-sample losses and one tape per sample for :func:`backward_extended`."""
    tapes = []
    for r in range(len(batch)):
        t = _run(model, batch.inputs[r], batch.targets[r], None, record=True)
        t.sample = r
        tapes.append(t)
    return np.array([float(t.loss.data) for t in tapes]), tapes


def backward_extended(tape: Tape) -> dict[int, ExtendedInput]:
    """Gradients of the sample loss with respect to every layer's extended input."""
    tape.loss.backward()
    recs = {}
    for vid, (a, b) in tape.taps.items():
        ga = a.grad if a.grad is not None else np.zeros_like(a.data)
        gb = b.grad if b.grad is not None else np.zeros_like(b.data)
        recs[vid] = ExtendedInput(
            layer=vid,
            sample=tape.sample,
            z=np.concatenate([a.data.ravel(), b.data.ravel()]),
            grad=np.concatenate([ga.ravel(), gb.ravel()]),
        )
    return recs


def extended_inputs(model: ToyModel, batch: CalibBatch) -> tuple[np.ndarray, list[dict[int, ExtendedInput]]]:
    losses, tapes = forward_loss(model, batch)
    return losses, [backward_extended(t) for t in tapes]


def finite_diff_errors(
    model: ToyModel,
    batch: CalibBatch,
    h: float = 1e-5,
    floor: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    chunk: int = 256,
) -> dict[int, float]:
    """Per-layer max relative error between tape gradients and central differences.

    Every coordinate of every extended input is probed unless ``max_coords``
    caps the count per layer operand (coordinates are then sampled with
    ``seed``). Relative error is ``|a - n| / (|a| + floor)``.
    """
    rng = np.random.default_rng(seed)
    worst: dict[int, float] = {vid: 0.0 for vid in model.layers}
    for r in range(len(batch)):
        tape = _run(model, batch.inputs[r], batch.targets[r], None, record=True)
        tape.loss.backward()
        for vid, operands in tape.taps.items():
            for k, t in enumerate(operands):
                base = t.data
                grad = t.grad if t.grad is not None else np.zeros_like(base)
                n = base.size
                coords = np.arange(n)
                if max_coords is not None and n > max_coords:
                    coords = np.sort(rng.choice(n, size=max_coords, replace=False))
                for start in range(0, len(coords), chunk):
                    idx = coords[start : start + chunk]
                    delta = np.zeros((len(idx), n))
                    delta[np.arange(len(idx)), idx] = h
                    delta = delta.reshape((len(idx),) + base.shape)

                    def probe(sign: float) -> np.ndarray:
                        def pert(lv: int, lk: int, value: np.ndarray) -> np.ndarray:
                            if lv == vid and lk == k:
                                return value + sign * delta
                            return value

                        return sample_losses(model, batch, r, pert)

                    num = (probe(1.0) - probe(-1.0)) / (2 * h)
                    ana = grad.ravel()[idx]
                    err = np.abs(ana - num) / (np.abs(ana) + floor)
                    worst[vid] = max(worst[vid], float(err.max()))
    return worst


def finite_diff_check(model: ToyModel, batch: CalibBatch, h: float = 1e-5, **kw: Any) -> float:
    """Max relative gradient error over all layers; see :func:`finite_diff_errors`."""
    return max(finite_diff_errors(model, batch, h=h, **kw).values(), default=0.0)


# ---------------------------------------------------------------------------
# model files


def _init_array(spec: Any, shape: tuple[int, ...]) -> np.ndarray:
    if isinstance(spec, Mapping):
        if spec.get("kind") == "gaussian":
            rng = np.random.default_rng(int(spec["seed"]))
            return rng.normal(0.0, float(spec["std"]), size=shape)
        if spec.get("kind") == "zeros":
            return np.zeros(shape)
        raise MPQError(f"unknown init spec {spec!r}")
    arr = np.asarray(spec, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeMismatch(f"inline array shape {arr.shape} != {shape}")
    return arr


def model_from_dict(graph: CompGraph, d: Mapping[str, Any]) -> ToyModel:
    """Build a :class:`ToyModel` from the ``layers``/``ops``/``loss`` sections of a model file.

    ``layers`` maps vertex names to ``{"weight": init, "bias": init}`` where
    ``init`` is an inline nested list or ``{"kind": "gaussian", "std", "seed"}``.
    ``ops`` maps opaque vertex names to ``{"op": name, "value": float}``.
    """
    params: dict[int, LayerParams] = {}
    layers = d.get("layers", {})
    for vid in graph.vertex_ids:
        kind = graph.kind(vid)
        if not isinstance(kind, Linear):
            continue
        name = graph.name(vid)
        if name not in layers:
            raise MPQError(f"model file has no parameters for linear layer {name!r}")
        spec = layers[name]
        w = _init_array(spec["weight"], (kind.out_features, kind.in_features))
        b = _init_array(spec["bias"], (kind.out_features,)) if kind.has_bias else None
        params[vid] = LayerParams(w, b)
    bindings = {}
    ops = d.get("ops", {})
    for vid in graph.vertex_ids:
        if isinstance(graph.kind(vid), Opaque):
            name = graph.name(vid)
            if name not in ops:
                raise MPQError(f"model file has no op binding for opaque vertex {name!r}")
            raw = ops[name]
            raw = {"op": raw} if isinstance(raw, str) else raw
            bindings[vid] = OpBinding(str(raw["op"]), float(raw.get("value", 1.0)))
    return ToyModel(graph, params, bindings, str(d.get("loss", "cross_entropy")))
