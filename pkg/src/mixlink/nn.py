"""Minimal float64 neural-net layers with explicit backprop.

Everything here is deterministic: parameters are created from an explicit
``numpy.random.Generator`` and updated in place by :class:`Sgd`. Layers cache
their forward inputs and accumulate gradients on ``backward``, so a single
optimizer step may combine several forward/backward passes (needed by the
two-step adversarial pretraining, which mixes source and target batches).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def sigmoid(x: Array) -> Array:
    # piecewise form avoids overflow for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: Array, dprobs: Array) -> Array:
    """Gradient w.r.t. logits given gradient w.r.t. softmax outputs."""
    return probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))


def cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy over rows and its gradient w.r.t. logits.

    ``labels`` are integer class indices.
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def binary_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean BCE of sigmoid(logits) against 0/1 labels, with logit gradient.

    Uses the softplus form, stable for large |logit|.
    """
    n = logits.shape[0]
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    loss = float((softplus - labels * logits).mean())
    dlogits = (sigmoid(logits) - labels) / n
    return loss, dlogits


class Linear:
    """Affine map ``y = x @ w + b``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 scale: float | None = None):
        std = scale if scale is not None else np.sqrt(2.0 / d_in)
        self.params = {
            "w": rng.normal(0.0, std, size=(d_in, d_out)),
            "b": np.zeros(d_out),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x: Array | None = None

    def forward(self, x: Array, train: bool = False) -> Array:
        if train:
            self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy: Array) -> Array:
        assert self._x is not None, "backward() without a train-mode forward()"
        self.grads["w"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["w"].T


class Relu:
    params: dict[str, Array] = {}
    grads: dict[str, Array] = {}

    def __init__(self):
        self._mask: Array | None = None

    def forward(self, x: Array, train: bool = False) -> Array:
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy: Array) -> Array:
        return dy * self._mask


class LayerNorm:
    """Per-row normalization over the last axis with learnable scale/shift."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.params = {"g": np.ones(dim), "b": np.zeros(dim)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache: tuple | None = None

    def forward(self, x: Array, train: bool = False) -> Array:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if train:
            self._cache = (xhat, inv)
        return self.params["g"] * xhat + self.params["b"]

    def backward(self, dy: Array) -> Array:
        xhat, inv = self._cache
        d = xhat.shape[-1]
        self.grads["g"] += (dy * xhat).sum(axis=0)
        self.grads["b"] += dy.sum(axis=0)
        dxhat = dy * self.params["g"]
        # standard layernorm backward, fused
        return inv / d * (d * dxhat
                          - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))


class FrozenBatchNorm:
    """Batch normalization with externally calibrated statistics.

    The stats default to (0, 1) so an uncalibrated layer is a plain affine
    map; :meth:`calibrate` pins them to a reference dataset once, after which
    every forward is per-sample deterministic (no dependence on batch
    composition).  Only the stats are frozen: the scale/shift pair stays a
    regular trainable parameter.
    """

    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.params = {"g": np.ones(dim), "b": np.zeros(dim)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self._cache: Array | None = None

    def calibrate(self, x: Array) -> None:
        self.mean = x.mean(axis=0)
        self.var = x.var(axis=0)

    def forward(self, x: Array, train: bool = False) -> Array:
        xhat = (x - self.mean) / np.sqrt(self.var + self.eps)
        if train:
            self._cache = xhat
        return self.params["g"] * xhat + self.params["b"]

    def backward(self, dy: Array) -> Array:
        self.grads["g"] += (dy * self._cache).sum(axis=0)
        self.grads["b"] += dy.sum(axis=0)
        return dy * self.params["g"] / np.sqrt(self.var + self.eps)


class SingleTokenAttention:
    """Multi-head self-attention specialized to length-1 token sequences.

    With a single token the softmax over keys is identically 1 for every
    head, so the block reduces to the value/output projections; the query
    and key projections are kept as parameters for architectural and
    checkpoint completeness but cannot affect the output.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        std = np.sqrt(1.0 / d_model)
        self.params = {
            "wq": rng.normal(0.0, std, size=(d_model, d_model)),
            "wk": rng.normal(0.0, std, size=(d_model, d_model)),
            "wv": rng.normal(0.0, std, size=(d_model, d_model)),
            "wo": rng.normal(0.0, std, size=(d_model, d_model)),
            "bo": np.zeros(d_model),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache: tuple | None = None

    def forward(self, x: Array, train: bool = False) -> Array:
        v = x @ self.params["wv"]
        if train:
            self._cache = (x, v)
        return v @ self.params["wo"] + self.params["bo"]

    def backward(self, dy: Array) -> Array:
        x, v = self._cache
        self.grads["wo"] += v.T @ dy
        self.grads["bo"] += dy.sum(axis=0)
        dv = dy @ self.params["wo"].T
        self.grads["wv"] += x.T @ dv
        return dv @ self.params["wv"].T


class Chain:
    """Ordered composition of layers with namespaced parameters."""

    def __init__(self, named_layers: list[tuple[str, object]]):
        self.named_layers = named_layers

    def forward(self, x: Array, train: bool = False) -> Array:
        for _, layer in self.named_layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy: Array) -> Array:
        for _, layer in reversed(self.named_layers):
            dy = layer.backward(dy)
        return dy

    def params(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for name, layer in self.named_layers:
            child = layer.params() if isinstance(layer, Chain) else layer.params
            for key, val in child.items():
                out[f"{name}.{key}"] = val
        return out

    def grads(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for name, layer in self.named_layers:
            child = layer.grads() if isinstance(layer, Chain) else layer.grads
            for key, val in child.items():
                out[f"{name}.{key}"] = val
        return out

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0


def residual_block_forward(block: Chain, norm: LayerNorm, x: Array,
                           train: bool) -> Array:
    return norm.forward(x + block.forward(x, train=train), train=train)


class TransformerBlock(Chain):
    """Pre-activation-free encoder block: attn + residual + LN, FFN + residual + LN."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator):
        self.attn = SingleTokenAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = Chain([
            ("lin1", Linear(d_model, d_ff, rng)),
            ("act", Relu()),
            ("lin2", Linear(d_ff, d_model, rng, scale=np.sqrt(1.0 / d_ff))),
        ])
        self.norm2 = LayerNorm(d_model)
        super().__init__([("attn", self.attn), ("norm1", self.norm1),
                          ("ffn", self.ffn), ("norm2", self.norm2)])

    def forward(self, x: Array, train: bool = False) -> Array:
        h = self.norm1.forward(x + self.attn.forward(x, train=train), train=train)
        return self.norm2.forward(h + self.ffn.forward(h, train=train), train=train)

    def backward(self, dy: Array) -> Array:
        dh = self.norm2.backward(dy)
        dh = dh + self.ffn.backward(dh)
        dx = self.norm1.backward(dh)
        return dx + self.attn.backward(dx)


def mlp(dims: list[int], rng: np.random.Generator) -> Chain:
    """ReLU MLP emitting raw outputs (no final activation)."""
    layers: list[tuple[str, object]] = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        scale = np.sqrt(1.0 / dims[i]) if last else None
        layers.append((f"lin{i}", Linear(dims[i], dims[i + 1], rng, scale=scale)))
        if not last:
            layers.append((f"act{i}", Relu()))
    return Chain(layers)


def transformer_stack(d_model: int, n_layers: int, n_heads: int, d_ff: int,
                      rng: np.random.Generator) -> Chain:
    return Chain([(f"block{i}", TransformerBlock(d_model, n_heads, d_ff, rng))
                  for i in range(n_layers)])


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4


class Sgd:
    """SGD with momentum and decoupled-from-nothing (classic L2) weight decay.

    Update rule: ``v = momentum*v + grad + weight_decay*param`` then
    ``param -= lr*v``, applied in place.
    """

    def __init__(self, params: dict[str, Array], cfg: SgdConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, Array]) -> None:
        for name, p in self.params.items():
            g = grads[name] + self.cfg.weight_decay * p
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            p -= self.cfg.lr * v


def params_digest(params: dict[str, Array]) -> str:
    """SHA-256 over parameter names, shapes and raw little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def params_l2_delta(before: dict[str, Array], after: dict[str, Array]) -> float:
    """L2 norm of the concatenated parameter change."""
    total = 0.0
    for name, prev in before.items():
        diff = after[name] - prev
        total += float(np.dot(diff.ravel(), diff.ravel()))
    return float(np.sqrt(total))


def snapshot(params: dict[str, Array]) -> dict[str, Array]:
    return {k: v.copy() for k, v in params.items()}
