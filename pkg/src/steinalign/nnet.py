"""Small feedforward networks with hand-written reverse-mode gradients.

Weights are stored as ``(fan_in, fan_out)`` so a layer is ``h @ W + b``.
Two forward passes exist: the plain one (``mlp_forward``) and one that also
carries the input Jacobian (``mlp_divergence``), which the Stein operator needs
for the divergence term and its parameter gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, LabelOutOfRange, NonFiniteActivation, TapeReuse

ACTIVATIONS = ("tanh", "relu", "identity")


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _dact(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


def _ddact(name, a, h):
    if name == "tanh":
        return -2.0 * h * (1.0 - h * h)
    return np.zeros_like(a)


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acts: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.acts)):
            raise DimMismatch("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.acts)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if b.shape != (w.shape[1],):
                raise DimMismatch(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimMismatch(f"layer {i}: input dim {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params) -> "Mlp":
        return Mlp([np.array(p) for p in params[0::2]], [np.array(p) for p in params[1::2]], list(self.acts))

    def copy(self) -> "Mlp":
        return self.with_params(self.params())

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self, x)[0]

    def to_dict(self) -> dict:
        layers = []
        for w, b, act in zip(self.weights, self.biases, self.acts):
            layers.append({
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "w": [float(v) for v in w.ravel()],
                "b": [float(v) for v in b],
                "act": act,
            })
        return {"layers": layers}

    @classmethod
    def from_dict(cls, doc) -> "Mlp":
        ws, bs, acts = [], [], []
        for layer in doc["layers"]:
            r, c = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["w"], dtype=np.float64)
            if w.size != r * c:
                raise DimMismatch(f"layer declares {r}x{c} but holds {w.size} weights")
            ws.append(w.reshape(r, c))
            bs.append(np.asarray(layer["b"], dtype=np.float64))
            acts.append(layer["act"])
        return cls(ws, bs, acts)


def dumps_checkpoint(net: Mlp) -> str:
    """JSON checkpoint with 17 significant digits per float."""
    parts = []
    for layer in net.to_dict()["layers"]:
        w = ",".join(format(v, ".17g") for v in layer["w"])
        b = ",".join(format(v, ".17g") for v in layer["b"])
        parts.append(
            f'{{"rows":{layer["rows"]},"cols":{layer["cols"]},"w":[{w}],"b":[{b}],"act":"{layer["act"]}"}}'
        )
    return '{"layers":[' + ",".join(parts) + "]}"


def loads_checkpoint(text: str) -> Mlp:
    return Mlp.from_dict(json.loads(text))


def init_mlp(dims, acts, rng: np.random.Generator) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    dims = list(dims)
    if isinstance(acts, str):
        acts = [acts] * (len(dims) - 2) + ["identity"]
    if len(acts) != len(dims) - 1:
        raise DimMismatch("need one activation per layer")
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return Mlp(ws, bs, list(acts))


def zeros_like_net(net: Mlp) -> Mlp:
    return net.with_params([np.zeros_like(p) for p in net.params()])


@dataclass
class GradTape:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    tangents: list[np.ndarray] | None = None
    pre_tangents: list[np.ndarray] | None = None
    used: bool = False

    def consume(self):
        if self.used:
            raise TapeReuse("gradient tape already consumed by a backward pass")
        self.used = True


def _check_input(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimMismatch(f"input shape {x.shape} does not match network input dim {net.in_dim}")
    return x


def mlp_forward(net: Mlp, x) -> tuple[np.ndarray, GradTape]:
    h = _check_input(net, x)
    inputs, pre, post = [], [], []
    for w, b, act in zip(net.weights, net.biases, net.acts):
        inputs.append(h)
        a = h @ w + b
        h = _act(act, a)
        pre.append(a)
        post.append(h)
    if not np.all(np.isfinite(h)):
        raise NonFiniteActivation("network produced non-finite outputs")
    return h, GradTape(inputs, pre, post)


def mlp_backward(net: Mlp, tape: GradTape, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Parameter gradients (flat ``[dW0, db0, ...]``) and input gradients."""
    tape.consume()
    hbar = np.asarray(upstream, dtype=np.float64)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in reversed(range(len(net.weights))):
        abar = hbar * _dact(net.acts[i], tape.pre[i], tape.post[i])
        grads[2 * i] = tape.inputs[i].T @ abar
        grads[2 * i + 1] = abar.sum(axis=0)
        hbar = abar @ net.weights[i].T
    return grads, hbar


def mlp_divergence(net: Mlp, x) -> tuple[np.ndarray, np.ndarray, GradTape]:
    """Outputs and the divergence ``trace(d out / d x)`` per row.

    Propagates the full input Jacobian forward; requires ``out_dim == in_dim``.
    """
    h = _check_input(net, x)
    if net.out_dim != net.in_dim:
        raise DimMismatch(f"divergence needs out_dim == in_dim, got {net.out_dim} vs {net.in_dim}")
    n, d = h.shape
    t = np.broadcast_to(np.eye(d), (n, d, d))
    inputs, pre, post, tans, pre_tans = [], [], [], [], []
    for w, b, act in zip(net.weights, net.biases, net.acts):
        inputs.append(h)
        tans.append(t)
        a = h @ w + b
        ta = np.einsum("nid,io->nod", t, w)
        h = _act(act, a)
        t = _dact(act, a, h)[:, :, None] * ta
        pre.append(a)
        post.append(h)
        pre_tans.append(ta)
    if not np.all(np.isfinite(h)):
        raise NonFiniteActivation("network produced non-finite outputs")
    div = np.trace(t, axis1=1, axis2=2)
    return h, div, GradTape(inputs, pre, post, tans, pre_tans)


def mlp_divergence_backward(net: Mlp, tape: GradTape, up_out, up_div) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass through ``mlp_divergence`` for the loss ``<up_out, out> + <up_div, div>``."""
    tape.consume()
    hbar = np.asarray(up_out, dtype=np.float64)
    up_div = np.asarray(up_div, dtype=np.float64)
    n, d = tape.inputs[0].shape
    tbar = up_div[:, None, None] * np.eye(d)[None, :, :]
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for i in reversed(range(len(net.weights))):
        act, a, h = net.acts[i], tape.pre[i], tape.post[i]
        dphi = _dact(act, a, h)
        tabar = dphi[:, :, None] * tbar
        abar = hbar * dphi + _ddact(act, a, h) * np.einsum("nod,nod->no", tbar, tape.pre_tangents[i])
        w = net.weights[i]
        grads[2 * i] = tape.inputs[i].T @ abar + np.einsum("nid,nod->io", tape.tangents[i], tabar)
        grads[2 * i + 1] = abar.sum(axis=0)
        hbar = abar @ w.T
        tbar = np.einsum("nod,io->nid", tabar, w)
    return grads, hbar


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimMismatch("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list[np.ndarray] | None = field(default=None)


def sgd_step(state: SgdState, params, grads) -> list[np.ndarray]:
    """Heavy-ball SGD: ``v = mu*v - lr*(g + decay*w)``, ``w = w + v``."""
    if len(params) != len(grads):
        raise DimMismatch("params and grads differ in length")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape or state.velocity[i].shape != w.shape:
            raise DimMismatch(f"parameter {i}: shape {w.shape} vs gradient {g.shape}")
        step = g + state.weight_decay * w if state.weight_decay else g
        v = state.momentum * state.velocity[i] - state.lr * step
        state.velocity[i] = v
        out.append(w + v)
    return out


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads, max_norm: float) -> list[np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)
