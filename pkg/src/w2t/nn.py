"""Minimal reverse-mode tensor engine for the weight-token encoder.

Covers exactly the ops the encoder needs: dense matmul with batched
leading dimensions, elementwise arithmetic, softmax, layer norm, GELU,
embedding lookup, reductions, and two fused losses. Training and
gradient-check paths run in float64; inference and export use float32.

Graphs are built dynamically; `backward` runs a topological sweep and
returns a gradient map over the requested parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import DetachedGraph, NonFiniteActivation, ShapeMismatch

_DEBUG_CHECKS = False


def set_debug_checks(flag: bool) -> None:
    """When on, every op validates finiteness of its output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _result(data, parents, backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.isfinite(data).all():
        raise NonFiniteActivation("op produced NaN or Inf")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    # N-D activations against a 2-D weight run as one flat GEMM, both ways
    flat_weight = bd.ndim == 2 and ad.ndim >= 2
    try:
        if flat_weight:
            a2 = ad.reshape(-1, ad.shape[-1])
            data = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
        else:
            data = ad @ bd
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if flat_weight:
            g2 = g.reshape(-1, g.shape[-1])
            a2 = ad.reshape(-1, ad.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = a2.T @ g2
            return ga, gb
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            axes = tuple(range(g.ndim))
            return g[..., None] * bd, np.tensordot(g, ad, axes=(axes, axes))
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(data, tensors, backward)


def narrow(x, start: int, length: int, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _result(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _result(data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _result(data, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gbeta = g.sum(axis=reduce_axes) if reduce_axes else g
        return gx, ggamma.reshape(gamma.shape), gbeta.reshape(beta.shape)

    return _result(data, (x, gamma, beta), backward)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    data = x.data * cdf
    cache = {}

    def backward(g):
        if "d" not in cache:
            cache["d"] = cdf + x.data * (np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI)
        return (g * cache["d"],)

    return _result(data, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _result(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                    np.exp(x.data) / (1.0 + np.exp(x.data)))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), backward)


def log1p(x) -> Tensor:
    x = as_tensor(x)
    data = np.log1p(x.data)

    def backward(g):
        return (g / (1.0 + x.data),)

    return _result(data, (x,), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _result(data, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.data.shape).copy(),)

    return _result(data, (x,), backward)


def embedding(table, indices) -> Tensor:
    """Row lookup; gradients scatter-add into the table."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    data = table.data[indices]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _result(data, (table,), backward)


def normalize_weights(sigma) -> Tensor:
    """Sum-normalize over the last axis; all-zero rows fall back to uniform."""
    sigma = as_tensor(sigma)
    s = sigma.data.sum(axis=-1, keepdims=True)
    n = sigma.data.shape[-1]
    ok = s > 0
    safe = np.where(ok, s, 1.0)
    data = np.where(ok, sigma.data / safe, 1.0 / n)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        gs = np.where(ok, (g - dot) / safe, 0.0)
        return (gs,)

    return _result(data, (sigma,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, numerically stable."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    if x.shape != t.shape:
        raise ShapeMismatch(f"bce: logits {x.shape} vs targets {t.shape}")
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    data = loss.mean()

    def backward(g):
        p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return (g * (p - t) / x.size,)

    return _result(data, (logits,), backward)


def mse(pred, targets) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(targets, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ShapeMismatch(f"mse: preds {pred.data.shape} vs targets {t.shape}")
    diff = pred.data - t
    data = (diff * diff).mean()

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return _result(data, (pred,), backward)


def backward(loss: Tensor, params=None) -> dict:
    """Reverse sweep from a scalar loss.

    Returns a gradient map keyed by tensor. With `params` given, the map
    holds one entry per requested tensor, zero-filled when the loss does
    not depend on it; otherwise it holds every reached leaf that
    requires gradients.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise DetachedGraph("loss does not depend on any tensor requiring gradients")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        tensors.setdefault(id(node), node)
        if g is None or node._backward is None:
            if g is not None and node._backward is None:
                grads[id(node)] = g  # leaf: keep
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            tensors.setdefault(id(parent), parent)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    leaf_grads = {
        tensors[k]: v for k, v in grads.items() if tensors[k]._backward is None
    }
    if params is None:
        return leaf_grads
    out = {}
    for p in params:
        out[p] = leaf_grads.get(p, np.zeros_like(p.data))
    return out


@dataclass
class ParamGroup:
    """Named set of parameters toggled together by the training stage."""

    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        for t in self.tensors.values():
            t.requires_grad = self.trainable

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {self.name}.{name}")
        tensor.requires_grad = self.trainable
        self.tensors[name] = tensor
        return tensor


def all_params(groups) -> list[Tensor]:
    out = []
    for g in groups.values() if isinstance(groups, dict) else groups:
        out.extend(g.tensors.values())
    return out


def trainable_params(groups) -> list[Tensor]:
    out = []
    for g in groups.values() if isinstance(groups, dict) else groups:
        if g.trainable:
            out.extend(g.tensors.values())
    return out


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Parameters absent from a step's gradient map are left untouched,
    including their moment state and step counters; a zero gradient
    still applies weight decay.

    `update_ramp_steps` linearly ramps each parameter's update magnitude
    over its own first steps. Bias-corrected Adam takes full-lr
    sign-steps while second-moment estimates are fresh, which destabilizes
    parameters that join training late (stage un-freezing); the per-param
    ramp suppresses that transient.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 update_ramp_steps=0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.update_ramp_steps = int(update_ramp_steps)
        self.state: dict[int, dict] = {}

    def step(self, grads: dict) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.data.shape}")
            st = self.state.get(id(p))
            if st is None:
                st = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                self.state[id(p)] = st
            st["step"] += 1
            t = st["step"]
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * (g * g)
            mhat = st["m"] / (1 - self.beta1**t)
            vhat = st["v"] / (1 - self.beta2**t)
            lr_t = self.lr
            if self.update_ramp_steps > 0:
                lr_t *= min(1.0, t / self.update_ramp_steps)
            p.data = p.data - lr_t * (mhat / (np.sqrt(vhat) + self.eps)
                                      + self.weight_decay * p.data)


def lr_schedule(epoch: int, total: int, base_lr: float, warmup_epochs: int):
    """Constant warmup stage, then cosine annealing from base_lr to zero."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch < warmup_epochs:
        return base_lr, "warmup"
    span = max(total - warmup_epochs, 1)
    t = epoch - warmup_epochs
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / span)), "full"


def seeded_init(shape, scheme, rng) -> Tensor:
    """Deterministic initialization: 'zeros', 'xavier_uniform', or ('normal', std)."""
    shape = tuple(shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "xavier_uniform":
        fan_in = shape[0] if shape else 1
        fan_out = shape[-1] if shape else 1
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    elif isinstance(scheme, tuple) and scheme[0] == "normal":
        data = rng.normal(0.0, scheme[1], size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(np.float64))


SNAPSHOT_VERSION = 1


def save_param_groups(directory, groups: dict, meta: dict | None = None) -> None:
    """Write a parameter snapshot: params.json plus one float32 blob per group."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": SNAPSHOT_VERSION, "meta": meta or {}, "groups": []}
    for gname, group in groups.items():
        entry = {"name": gname, "trainable": group.trainable, "tensors": []}
        blob = []
        for tname, tensor in group.tensors.items():
            entry["tensors"].append({"name": tname, "shape": list(tensor.data.shape)})
            blob.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
        (directory / f"{gname}.bin").write_bytes(b"".join(blob))
        doc["groups"].append(entry)
    (directory / "params.json").write_text(json.dumps(doc, indent=1) + "\n")


def load_param_groups(directory, dtype=np.float64) -> tuple[dict, dict]:
    """Read a snapshot back into ParamGroups (upcast to `dtype`)."""
    directory = Path(directory)
    doc = json.loads((directory / "params.json").read_text())
    if doc.get("format_version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('format_version')}")
    groups: dict[str, ParamGroup] = {}
    for entry in doc["groups"]:
        group = ParamGroup(entry["name"], trainable=entry["trainable"])
        raw = (directory / f"{entry['name']}.bin").read_bytes()
        off = 0
        for tinfo in entry["tensors"]:
            shape = tuple(tinfo["shape"])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
            off += n * 4
            group.add(tinfo["name"], Tensor(arr.astype(dtype)))
        group.set_trainable(entry["trainable"])
        groups[entry["name"]] = group
    return groups, doc["meta"]
