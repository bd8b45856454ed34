"""Synthetic graphs, toy models and calibration data.

:func:`llama_graph` builds the decoder-block topology used throughout the
tests: single-head attention (q/k/v projections, score and value BGEMMs,
output projection) followed by a gated MLP, repeated ``n_blocks`` times, then
a final norm and an LM head.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from .autodiff import CalibBatch, ToyModel, model_from_dict
from .graphir import SCHEMA_VERSION, CompGraph, build_graph


class _Builder:
    def __init__(self):
        self.vertices: list[dict[str, Any]] = []
        self.edges: list[list[int]] = []
        self.ops: dict[str, Any] = {}

    def add(self, name: str, kind: str, inputs=(), op=None, **attrs) -> int:
        vid = len(self.vertices)
        self.vertices.append({"id": vid, "name": name, "kind": kind, **attrs})
        for src in inputs:
            self.edges.append([src, vid])
        if op is not None:
            self.ops[name] = op
        return vid

    def linear(self, name, src, c_in, c_out, bias=False):
        return self.add(name, "linear", [src], in_features=c_in, out_features=c_out, has_bias=bias)

    def opaque(self, name, inputs, op, value=None):
        binding = op if value is None else {"op": op, "value": value}
        return self.add(name, "opaque", inputs, op=binding, tag=op)


def llama_graph(
    n_blocks: int = 1,
    d_model: int = 16,
    d_ff: int = 32,
    vocab: int = 16,
    residual: bool = False,
    bias: bool = False,
    activation: str = "gelu",
) -> tuple[dict[str, Any], dict[str, Any]]:
    """Graph JSON and the matching opaque-op bindings.

    ``residual=False`` drops the skip connections, as in the usual drawing of
    the block; with them, the skip edge spans each attention and MLP block
    and the partition cannot split them further.
    """
    b = _Builder()
    h = b.opaque("embed", [], "identity")
    for i in range(n_blocks):
        p = f"blocks.{i}."
        n1 = b.opaque(p + "attn_norm", [h], "layernorm")
        q = b.linear(p + "q_proj", n1, d_model, d_model, bias)
        k = b.linear(p + "k_proj", n1, d_model, d_model, bias)
        v = b.linear(p + "v_proj", n1, d_model, d_model, bias)
        qk = b.add(p + "qk_matmul", "bgemm", [q, k], dim=d_model)
        sc = b.opaque(p + "attn_scale", [qk], "scale", 1.0 / math.sqrt(d_model))
        sm = b.opaque(p + "softmax", [sc], "softmax")
        av = b.add(p + "av_matmul", "bgemm", [sm, v], dim=d_model, transpose_rhs=False)
        o = b.linear(p + "o_proj", av, d_model, d_model, bias)
        if residual:
            o = b.opaque(p + "attn_residual", [o, h], "add")
        n2 = b.opaque(p + "mlp_norm", [o], "layernorm")
        gate = b.linear(p + "gate_proj", n2, d_model, d_ff, bias)
        up = b.linear(p + "up_proj", n2, d_model, d_ff, bias)
        act = b.opaque(p + "act", [gate], activation)
        mul = b.opaque(p + "mlp_mul", [act, up], "mul")
        down = b.linear(p + "down_proj", mul, d_ff, d_model, bias)
        if residual:
            down = b.opaque(p + "mlp_residual", [down, o], "add")
        h = down
    fn = b.opaque("final_norm", [h], "layernorm")
    b.linear("lm_head", fn, d_model, vocab, bias)
    graph = {"schema_version": SCHEMA_VERSION, "vertices": b.vertices, "edges": b.edges}
    return graph, b.ops


def model_spec(
    graph: dict[str, Any], ops: dict[str, Any], seed: int, loss: str = "cross_entropy", gain: float = 1.0
) -> dict[str, Any]:
    """Model-file dict with seeded Gaussian weights of std ``gain / sqrt(fan_in)``."""
    layers = {}
    for i, v in enumerate(graph["vertices"]):
        if v["kind"] != "linear":
            continue
        std = gain / math.sqrt(v["in_features"])
        entry: dict[str, Any] = {"weight": {"kind": "gaussian", "std": std, "seed": seed * 1000 + i}}
        if v.get("has_bias"):
            entry["bias"] = {"kind": "gaussian", "std": 0.1, "seed": seed * 1000 + 500 + i}
        layers[v["name"]] = entry
    return {"schema_version": SCHEMA_VERSION, "loss": loss, "layers": layers, "ops": ops}


def calib_batch(
    n_samples: int, seq_len: int, d_in: int, n_out: int, seed: int, loss: str = "cross_entropy"
) -> CalibBatch:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_samples, seq_len, d_in))
    if loss == "cross_entropy":
        t = rng.integers(0, n_out, size=(n_samples, seq_len))
    else:
        t = rng.normal(size=(n_samples, seq_len, n_out))
    return CalibBatch(x, t)


def batch_to_dict(batch: CalibBatch) -> dict[str, Any]:
    t = batch.targets
    return {
        "schema_version": SCHEMA_VERSION,
        "inputs": {"shape": list(batch.inputs.shape), "data": batch.inputs.ravel().tolist()},
        "targets": {
            "shape": list(t.shape),
            "dtype": "int" if np.issubdtype(t.dtype, np.integer) else "float",
            "data": t.ravel().tolist(),
        },
    }


def batch_from_dict(d: dict[str, Any]) -> CalibBatch:
    x = np.asarray(d["inputs"]["data"], dtype=np.float64).reshape(d["inputs"]["shape"])
    td = d["targets"]
    dtype = np.int64 if td.get("dtype", "float") == "int" else np.float64
    t = np.asarray(td["data"], dtype=dtype).reshape(td["shape"])
    return CalibBatch(x, t)


def toy_transformer(
    n_blocks: int = 2,
    d_model: int = 16,
    d_ff: int = 32,
    vocab: int = 16,
    seq_len: int = 8,
    n_samples: int = 4,
    seed: int = 0,
    loss: str = "cross_entropy",
    residual: bool = False,
    bias: bool = False,
    activation: str = "gelu",
) -> tuple[ToyModel, CalibBatch]:
    graph, ops = llama_graph(n_blocks, d_model, d_ff, vocab, residual, bias, activation)
    g = build_graph(graph)
    model = model_from_dict(g, model_spec(graph, ops, seed, loss))
    return model, calib_batch(n_samples, seq_len, d_model, vocab, seed + 7919, loss)


def random_toy_net(seed: int) -> tuple[ToyModel, CalibBatch]:
    """Small random decoder stack (1-3 blocks, widths <= 16) for gradient checks."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 17))
    return toy_transformer(
        n_blocks=int(rng.integers(1, 4)),
        d_model=d,
        d_ff=int(rng.integers(2, 17)),
        vocab=int(rng.integers(2, 17)),
        seq_len=int(rng.integers(1, 5)),
        n_samples=int(rng.integers(1, 3)),
        seed=seed,
        loss=str(rng.choice(["cross_entropy", "mse"])),
        residual=bool(rng.integers(0, 2)),
        bias=bool(rng.integers(0, 2)),
    )


def chain_graph(kinds: list[str], width: int = 4) -> CompGraph:
    """Linear chain; ``kinds`` entries are ``"linear"`` or an opaque op name."""
    b = _Builder()
    prev = None
    for i, k in enumerate(kinds):
        inputs = [] if prev is None else [prev]
        if k == "linear":
            prev = b.add(f"v{i}", "linear", inputs, in_features=width, out_features=width)
        else:
            prev = b.opaque(f"v{i}", inputs, k)
    return build_graph({"vertices": b.vertices, "edges": b.edges})
