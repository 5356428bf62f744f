"""Dense float64 numerics with reverse-mode differentiation for small classifiers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
A :class:`Model` is an ordered list of layers; :func:`run` records a tape
during the forward pass and :func:`backprop` walks it backwards, producing the
input gradient, per-parameter gradients and the gradients of learnable noise
scales in one sweep.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError


# -- layers ----------------------------------------------------------------

class Layer:
    kind = "Layer"
    params: list

    def __init__(self):
        self.params = []

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, weight=None):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    def _check(self, x, in_shape):
        if x.shape[1:] != tuple(in_shape):
            raise ConfigError(f"{self.kind} expects per-example shape {tuple(in_shape)}, "
                              f"got {x.shape[1:]}")


class Dense(Layer):
    kind = "Dense"

    def __init__(self, n_in: int, n_out: int, rng=None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ConfigError("Dense dimensions must be positive")
        self.n_in, self.n_out = int(n_in), int(n_out)
        rng = np.random.default_rng(0) if rng is None else rng
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        self.params = [w, np.zeros(n_out)]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ConfigError(f"Dense({self.n_in},{self.n_out}) cannot take input shape {in_shape}")
        return (self.n_out,)

    def forward(self, x, weight=None):
        self._check(x, (self.n_in,))
        w = self.params[0] if weight is None else weight
        return x @ w.T + self.params[1], (x, w)

    def backward(self, dout, cache):
        x, w = cache
        return dout @ w, [dout.T @ x, dout.sum(axis=0)]

    def spec(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class Conv2D(Layer):
    """Cross-correlation over NCHW inputs with square kernels."""

    kind = "Conv2D"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0, rng=None):
        super().__init__()
        if min(in_ch, out_ch, kernel, stride) < 1 or pad < 0:
            raise ConfigError("invalid Conv2D geometry")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.pad = int(kernel), int(stride), int(pad)
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.params = [w, np.zeros(out_ch)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ConfigError(f"Conv2D expects ({self.in_ch}, H, W) input, got {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"Conv2D kernel {self.kernel} larger than padded input {in_shape}")
        return (self.out_ch, ho, wo)

    def _windows(self, ho, wo):
        s = self.stride
        for u in range(self.kernel):
            for v in range(self.kernel):
                yield u, v, (slice(None), slice(None), slice(u, u + s * (ho - 1) + 1, s),
                             slice(v, v + s * (wo - 1) + 1, s))

    def forward(self, x, weight=None):
        _, ho, wo = self.out_shape(x.shape[1:])
        w = self.params[0] if weight is None else weight
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.zeros((x.shape[0], self.out_ch, ho, wo))
        for u, v, idx in self._windows(ho, wo):
            out += np.einsum("nchw,oc->nohw", xp[idx], w[:, :, u, v], optimize=True)
        out += self.params[1][None, :, None, None]
        return out, (xp, w, x.shape)

    def backward(self, dout, cache):
        xp, w, in_shape = cache
        ho, wo = dout.shape[2:]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for u, v, idx in self._windows(ho, wo):
            dw[:, :, u, v] = np.einsum("nohw,nchw->oc", dout, xp[idx], optimize=True)
            dxp[idx] += np.einsum("nohw,oc->nchw", dout, w[:, :, u, v], optimize=True)
        p = self.pad
        dx = dxp[:, :, p:p + in_shape[2], p:p + in_shape[3]] if p else dxp
        return dx, [dw, dout.sum(axis=(0, 2, 3))]

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, weight=None):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask):
        # subgradient 0 at the kink
        return np.where(mask, dout, 0.0), []


class Flatten(Layer):
    kind = "Flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, weight=None):
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:]))), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), []


class AvgPool(Layer):
    """Non-overlapping average pooling with stride equal to the window."""

    kind = "AvgPool"

    def __init__(self, window: int):
        super().__init__()
        if window < 1:
            raise ConfigError("pool window must be positive")
        self.window = int(window)

    def out_shape(self, in_shape):
        k = self.window
        if len(in_shape) != 3 or in_shape[1] % k or in_shape[2] % k:
            raise ConfigError(f"AvgPool({k}) needs (C, H, W) with H, W divisible by {k}, got {in_shape}")
        return (in_shape[0], in_shape[1] // k, in_shape[2] // k)

    def forward(self, x, weight=None):
        n, c, h, w = x.shape
        k = self.window
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)), None

    def backward(self, dout, cache):
        k = self.window
        dx = np.repeat(np.repeat(dout, k, axis=2), k, axis=3) / (k * k)
        return dx, []

    def spec(self):
        return {"kind": self.kind, "window": self.window}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Flatten, AvgPool)}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("kind")
    if kind == "Dense":
        return Dense(spec["in"], spec["out"])
    if kind == "Conv2D":
        return Conv2D(spec["in_ch"], spec["out_ch"], spec["kernel"], spec["stride"], spec["pad"])
    if kind == "AvgPool":
        return AvgPool(spec["window"])
    if kind in ("ReLU", "Flatten"):
        return LAYER_KINDS[kind]()
    raise ConfigError(f"unknown layer kind {kind!r}")


# -- model -----------------------------------------------------------------

@dataclass
class Model:
    """Feed-forward classifier: layers, optional per-layer noise, input box."""

    layers: list
    input_shape: tuple
    noise: list = field(default=None)
    input_domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.noise is None:
            self.noise = [None] * len(self.layers)
        if len(self.noise) != len(self.layers):
            raise ConfigError("one noise entry (or None) is required per layer")
        lo, hi = self.input_domain
        if not lo < hi:
            raise ConfigError("input_domain must satisfy lo < hi")
        shape = self.input_shape
        for layer, spec in zip(self.layers, self.noise):
            shape = layer.out_shape(shape)
            if spec is not None and spec.target == "weight" and not layer.params:
                raise ConfigError(f"weight noise on parameter-free layer {layer.kind}")
        if len(shape) != 1:
            raise ConfigError(f"model must end in a flat logit vector, ends in {shape}")
        self.num_classes = shape[0]

    @property
    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    @property
    def has_layer_noise(self) -> bool:
        return any(s is not None and s.enabled for s in self.noise)

    def alphas(self) -> dict[int, float]:
        return {l: s.alpha for l, s in enumerate(self.noise) if s is not None}

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def set_params(self, params: Sequence[np.ndarray]):
        own = self.params
        if len(params) != len(own):
            raise ConfigError(f"expected {len(own)} parameter arrays, got {len(params)}")
        i = 0
        for layer in self.layers:
            for j in range(len(layer.params)):
                if params[i].shape != layer.params[j].shape:
                    raise ConfigError(f"parameter {i} shape {params[i].shape} != {layer.params[j].shape}")
                layer.params[j] = np.array(params[i], dtype=np.float64)
                i += 1


def _active(spec, draw):
    return spec is not None and spec.enabled and draw is not None


def _weight_noise(spec, w, xi):
    std = float(w.std()) if spec.relative else 1.0
    return w + (spec.alpha * spec.base_sigma * std) * xi, std


def run(model: Model, batch, draw=None):
    """Forward pass returning ``(logits, tape)``.

    Layer noise is applied only when ``draw`` is given; without a draw the
    model is evaluated deterministically with all noise off.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or x.shape[1:] != model.input_shape:
        raise ConfigError(f"batch per-example shape {x.shape[1:]} does not match model input "
                          f"{model.input_shape}")
    tape = []
    h = x
    for l, (layer, spec) in enumerate(zip(model.layers, model.noise)):
        rec = {}
        weight = None
        if _active(spec, draw):
            if spec.target == "input":
                rec["xi"] = draw.normal(l + 1, h.shape)
                h = h + spec.scale * rec["xi"]
            elif spec.target == "weight":
                rec["xi"] = draw.normal(l + 1, layer.params[0].shape)
                weight, rec["std"] = _weight_noise(spec, layer.params[0], rec["xi"])
        out, rec["cache"] = layer.forward(h, weight)
        if _active(spec, draw) and spec.target == "activation":
            rec["xi"] = draw.normal(l + 1, out.shape)
            out = out + spec.scale * rec["xi"]
        if out.size and not np.isfinite(out).all():
            raise NumericError(f"non-finite output in layer {l} ({layer.kind})")
        tape.append(rec)
        h = out
    return h, tape


def backprop(model: Model, tape, dlogits):
    """Reverse sweep: returns ``(d_input, d_params, d_alpha)``."""
    grads = []
    dalpha = {}
    d = np.asarray(dlogits, dtype=np.float64)
    for l in range(len(model.layers) - 1, -1, -1):
        layer, spec, rec = model.layers[l], model.noise[l], tape[l]
        xi = rec.get("xi")
        if xi is not None and spec.target == "activation":
            dalpha[l] = float(np.sum(d * xi)) * spec.base_sigma
        d, dps = layer.backward(d, rec["cache"])
        if xi is not None and spec.target == "weight":
            w, dw_eff, std = layer.params[0], dps[0], rec["std"]
            inner = float(np.sum(dw_eff * xi))
            dalpha[l] = inner * spec.base_sigma * std
            if spec.relative and std > 0:
                # d std / dW for the population standard deviation
                dstd = (w - w.mean()) / (w.size * std)
                dps[0] = dw_eff + (spec.alpha * spec.base_sigma * inner) * dstd
        elif xi is not None and spec.target == "input":
            dalpha[l] = float(np.sum(d * xi)) * spec.base_sigma
        grads.append(dps)
    dparams = [g for dps in reversed(grads) for g in dps]
    return d, dparams, dalpha


def forward(model: Model, batch, noise_draw=None) -> np.ndarray:
    return run(model, batch, noise_draw)[0]


def predict(model: Model, batch, noise_draw=None) -> np.ndarray:
    return np.argmax(forward(model, batch, noise_draw), axis=-1)


# -- losses ----------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(labels, n, num_classes):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def cross_entropy(logits, labels) -> float:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, z.shape[0], z.shape[1])
    if z.shape[0] == 0:
        return 0.0
    return float(-log_softmax(z)[np.arange(len(y)), y].mean())


def soft_cross_entropy(logits, targets) -> float:
    """Mean cross-entropy against probability targets."""
    z = np.asarray(logits, dtype=np.float64)
    return float(-(targets * log_softmax(z)).sum(axis=1).mean())


def one_hot(labels, num_classes) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy_grad(logits, labels) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, z.shape[0], z.shape[1])
    return (softmax(z) - one_hot(y, z.shape[1])) / max(len(y), 1)


def grad_params(model: Model, batch, labels, noise_draw=None) -> list:
    """Gradients of the mean cross-entropy w.r.t. ``model.params``."""
    logits, tape = run(model, batch, noise_draw)
    return backprop(model, tape, cross_entropy_grad(logits, labels))[1]


def grad_input(model: Model, batch, labels, noise_draw=None) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the input batch."""
    logits, tape = run(model, batch, noise_draw)
    return backprop(model, tape, cross_entropy_grad(logits, labels))[0]


def loss_and_grads(model: Model, batch, labels, noise_draw=None):
    logits, tape = run(model, batch, noise_draw)
    loss = cross_entropy(logits, labels)
    dx, dparams, dalpha = backprop(model, tape, cross_entropy_grad(logits, labels))
    return loss, dx, dparams, dalpha


# -- optimisation ----------------------------------------------------------

def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """One SGD step. Returns ``(new_params, new_velocity)``.

    ``v = momentum * v + (g + weight_decay * p)`` and ``p = p - lr * v``; with
    ``momentum = weight_decay = 0`` this is exactly ``p - lr * g``.
    """
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if momentum < 0 or weight_decay < 0:
        raise ConfigError("momentum and weight_decay must be non-negative")
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    new_p, new_v = [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            d = momentum * velocity[i] + d if velocity is not None else d
        new_v.append(d)
        new_p.append(p - lr * d)
    return new_p, new_v


class SGD:
    """Stateful momentum SGD over a model's parameters and learnable noise scales."""

    def __init__(self, model: Model, lr: float, momentum=0.0, weight_decay=0.0):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.model = model
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = None
        self.alpha_velocity = {}

    def step(self, dparams, dalpha=None):
        params, self.velocity = sgd_step(self.model.params, dparams, self.lr, self.momentum,
                                         self.weight_decay, self.velocity)
        self.model.set_params(params)
        for l, g in (dalpha or {}).items():
            spec = self.model.noise[l]
            if spec is None or not spec.learnable:
                continue
            v = self.momentum * self.alpha_velocity.get(l, 0.0) + g
            self.alpha_velocity[l] = v
            # noise scales are kept non-negative and free of weight decay
            spec.alpha = max(0.0, spec.alpha - self.lr * v)


# -- builders --------------------------------------------------------------

def mlp(input_shape, hidden: Sequence[int], num_classes: int, seed=0, noise=None) -> Model:
    """Flatten -> [Dense -> ReLU]* -> Dense. ``noise`` (a NoiseSpec) goes on every Dense."""
    rng = np.random.default_rng(seed)
    layers = [Flatten()]
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [Dense(width, h, rng), ReLU()]
        width = h
    layers.append(Dense(width, num_classes, rng))
    specs = [copy.copy(noise) if noise is not None and isinstance(layer, Dense) else None
             for layer in layers]
    return Model(layers, tuple(input_shape), specs)


def cnn(input_shape, channels: int, num_classes: int, seed=0, noise=None) -> Model:
    """Conv3x3 -> ReLU -> AvgPool(2) -> Flatten -> Dense on (C, H, W) inputs."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = [Conv2D(c, channels, 3, 1, 1, rng), ReLU(), AvgPool(2), Flatten(),
              Dense(channels * (h // 2) * (w // 2), num_classes, rng)]
    specs = [copy.copy(noise) if noise is not None and layer.params else None for layer in layers]
    return Model(layers, tuple(input_shape), specs)
