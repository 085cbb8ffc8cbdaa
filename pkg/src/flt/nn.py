"""Small numpy neural-network engine with manual backpropagation.

Everything runs in float64. Convolutions use an im2col layout built from
kernel-offset slicing, so the same two helpers serve convolution, its
transpose and max pooling.

Tensors are plain ``numpy.ndarray`` objects, batch-first, channels-first
for image layers (N, C, H, W).
"""
from __future__ import annotations

import copy
import json
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "EmptyDatasetError",
    "Layer",
    "Dense",
    "Conv2D",
    "ConvTranspose2D",
    "MaxPool2D",
    "Activation",
    "Dropout",
    "Flatten",
    "Reshape",
    "Model",
    "EncoderHandle",
    "softmax",
    "forward",
    "predict_proba",
    "loss_and_gradient",
    "sgd_step",
    "train_local",
    "encode",
    "finetune_autoencoder",
    "flatten_params",
    "unflatten_params",
    "mlp",
    "small_cnn",
    "conv_autoencoder",
    "dense_autoencoder",
    "identity_encoder",
    "encoder_from_autoencoder",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Input does not match what a layer expects."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during training."""

    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class EmptyDatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# im2col helpers


def _out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, k, k, OH, OW) patch tensor."""
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, s, p), _out_size(w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + s * oh : s, j : j + s * ow : s]
    return cols


def _col2im(cols: np.ndarray, x_shape: Sequence[int], k: int, s: int, p: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: overlapping patches are summed."""
    n, c, h, w = x_shape
    oh, ow = cols.shape[4], cols.shape[5]
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * oh : s, j : j + s * ow : s] += cols[:, :, i, j]
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return out


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer. Subclasses with parameters keep them in ``self.params``."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache: Any = None

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"type": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "type")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out, self.bias = int(n_in), int(n_out), bool(bias)
        self.params["W"] = np.zeros((self.n_in, self.n_out))
        if self.bias:
            self.params["b"] = np.zeros(self.n_out)

    def init_params(self, rng):
        self.params["W"] = _glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out)
        if self.bias:
            self.params["b"] = np.zeros(self.n_out)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.n_in,):
            raise ShapeError(f"dense expects ({self.n_in},), got {tuple(input_shape)}")
        return (self.n_out,)

    def forward(self, x, train=False, rng=None):
        self._cache = x
        y = x @ self.params["W"]
        if self.bias:
            y = y + self.params["b"]
        return y

    def backward(self, grad):
        x = self._cache
        self.grads["W"] = x.T @ grad
        if self.bias:
            self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T

    def config(self):
        return {"type": self.kind, "in": self.n_in, "out": self.n_out, "bias": self.bias}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.k, self.s, self.p = int(kernel), int(stride), int(padding)
        self.params["W"] = np.zeros((self.out_ch, self.in_ch, self.k, self.k))
        self.params["b"] = np.zeros(self.out_ch)

    def init_params(self, rng):
        rf = self.k * self.k
        self.params["W"] = _glorot(rng, self.params["W"].shape, self.in_ch * rf, self.out_ch * rf)
        self.params["b"] = np.zeros(self.out_ch)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_ch:
            raise ShapeError(f"conv2d expects ({self.in_ch}, H, W), got {tuple(input_shape)}")
        _, h, w = input_shape
        oh, ow = _out_size(h, self.k, self.s, self.p), _out_size(w, self.k, self.s, self.p)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {self.k} does not fit input {tuple(input_shape)}")
        return (self.out_ch, oh, ow)

    def forward(self, x, train=False, rng=None):
        cols = _im2col(x, self.k, self.s, self.p)
        self._cache = (x.shape, cols)
        y = np.tensordot(cols, self.params["W"], axes=([1, 2, 3], [1, 2, 3]))
        return y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]

    def backward(self, grad):
        x_shape, cols = self._cache
        self.grads["W"] = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        dcols = np.tensordot(grad, self.params["W"], axes=([1], [0]))  # N,OH,OW,C,k,k
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        return _col2im(dcols, x_shape, self.k, self.s, self.p)

    def config(self):
        return {
            "type": self.kind,
            "in": self.in_ch,
            "out": self.out_ch,
            "kernel": self.k,
            "stride": self.s,
            "padding": self.p,
        }


class ConvTranspose2D(Layer):
    """Transposed convolution; weight layout (in, out, k, k)."""

    kind = "conv_transpose2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.k, self.s, self.p = int(kernel), int(stride), int(padding)
        self.params["W"] = np.zeros((self.in_ch, self.out_ch, self.k, self.k))
        self.params["b"] = np.zeros(self.out_ch)

    def init_params(self, rng):
        rf = self.k * self.k
        self.params["W"] = _glorot(rng, self.params["W"].shape, self.in_ch * rf, self.out_ch * rf)
        self.params["b"] = np.zeros(self.out_ch)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_ch:
            raise ShapeError(
                f"conv_transpose2d expects ({self.in_ch}, H, W), got {tuple(input_shape)}"
            )
        _, h, w = input_shape
        oh = (h - 1) * self.s - 2 * self.p + self.k
        ow = (w - 1) * self.s - 2 * self.p + self.k
        return (self.out_ch, oh, ow)

    def forward(self, x, train=False, rng=None):
        n, _, h, w = x.shape
        _, oh, ow = self.output_shape(x.shape[1:])
        cols = np.tensordot(x, self.params["W"], axes=([1], [0]))  # N,H,W,out,k,k
        cols = cols.transpose(0, 3, 4, 5, 1, 2)
        self._cache = x
        y = _col2im(cols, (n, self.out_ch, oh, ow), self.k, self.s, self.p)
        return y + self.params["b"][None, :, None, None]

    def backward(self, grad):
        x = self._cache
        gcols = _im2col(grad, self.k, self.s, self.p)  # N,out,k,k,H,W
        self.grads["W"] = np.tensordot(x, gcols, axes=([0, 2, 3], [0, 4, 5]))
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        dx = np.tensordot(gcols, self.params["W"], axes=([1, 2, 3], [1, 2, 3]))
        return dx.transpose(0, 3, 1, 2)

    def config(self):
        return {
            "type": self.kind,
            "in": self.in_ch,
            "out": self.out_ch,
            "kernel": self.k,
            "stride": self.s,
            "padding": self.p,
        }


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel: int = 2, stride: int | None = None):
        super().__init__()
        self.k = int(kernel)
        self.s = int(stride if stride is not None else kernel)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        oh, ow = _out_size(h, self.k, self.s, 0), _out_size(w, self.k, self.s, 0)
        if oh < 1 or ow < 1:
            raise ShapeError(f"maxpool2d window {self.k} does not fit input {tuple(input_shape)}")
        return (c, oh, ow)

    def forward(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        cols = _im2col(x, self.k, self.s, 0)
        oh, ow = cols.shape[4], cols.shape[5]
        flat = cols.reshape(n, c, self.k * self.k, oh, ow)
        idx = flat.argmax(axis=2)
        self._cache = (x.shape, idx)
        return np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(self, grad):
        x_shape, idx = self._cache
        n, c = x_shape[:2]
        oh, ow = idx.shape[2], idx.shape[3]
        dcols = np.zeros((n, c, self.k * self.k, oh, ow))
        np.put_along_axis(dcols, idx[:, :, None], grad[:, :, None], axis=2)
        dcols = dcols.reshape(n, c, self.k, self.k, oh, ow)
        return _col2im(dcols, x_shape, self.k, self.s, 0)

    def config(self):
        return {"type": self.kind, "kernel": self.k, "stride": self.s}


class Activation(Layer):
    kind = "activation"
    FUNCTIONS = ("relu", "sigmoid", "tanh", "identity")

    def __init__(self, fn: str = "relu"):
        super().__init__()
        if fn not in self.FUNCTIONS:
            raise ValueError(f"unknown activation {fn!r}; choose from {self.FUNCTIONS}")
        self.fn = fn

    def forward(self, x, train=False, rng=None):
        if self.fn == "relu":
            y = np.maximum(x, 0.0)
            self._cache = x > 0
        elif self.fn == "sigmoid":
            y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
            self._cache = y
        elif self.fn == "tanh":
            y = np.tanh(x)
            self._cache = y
        else:
            y = x
        return y

    def backward(self, grad):
        if self.fn == "relu":
            return grad * self._cache
        if self.fn == "sigmoid":
            y = self._cache
            return grad * y * (1.0 - y)
        if self.fn == "tanh":
            return grad * (1.0 - self._cache**2)
        return grad

    def config(self):
        return {"type": self.kind, "fn": self.fn}


class Dropout(Layer):
    """Inverted dropout; a no-op in eval mode."""

    kind = "dropout"

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = float(p)

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._cache = None
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache

    def config(self):
        return {"type": self.kind, "p": self.p}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(input_shape)} to {self.shape}")
        return self.shape

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._cache)

    def config(self):
        return {"type": self.kind, "shape": list(self.shape)}


_ACTIVATION_ALIASES = {"relu", "sigmoid", "tanh", "identity"}


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg["type"]
    if kind == "dense":
        return Dense(cfg["in"], cfg["out"], cfg.get("bias", True))
    if kind == "conv2d":
        return Conv2D(cfg["in"], cfg["out"], cfg["kernel"], cfg.get("stride", 1), cfg.get("padding", 0))
    if kind == "conv_transpose2d":
        return ConvTranspose2D(
            cfg["in"], cfg["out"], cfg["kernel"], cfg.get("stride", 1), cfg.get("padding", 0)
        )
    if kind == "maxpool2d":
        return MaxPool2D(cfg.get("kernel", 2), cfg.get("stride"))
    if kind == "activation":
        return Activation(cfg["fn"])
    if kind in _ACTIVATION_ALIASES:
        return Activation(kind)
    if kind == "dropout":
        return Dropout(cfg.get("p", 0.5))
    if kind == "flatten":
        return Flatten()
    if kind == "reshape":
        return Reshape(cfg["shape"])
    raise ValueError(f"unknown layer type {kind!r}")


# ---------------------------------------------------------------------------
# model


class Model:
    """A sequential stack of layers with a fixed per-sample input shape.

    Parameters
    ----------
    layers : list of Layer
    input_shape : tuple of int
        Shape of one sample (without the batch dimension).
    seed : int or None
        If given, parameters are Glorot-initialised from this seed.
    """

    def __init__(self, layers: Iterable[Layer], input_shape: Sequence[int], seed: int | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        if seed is not None:
            rng = np.random.default_rng(seed)
            for layer in self.layers:
                layer.init_params(rng)

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    @property
    def num_params(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def param_arrays(self) -> list[np.ndarray]:
        return [layer.params[name] for layer in self.layers for name in sorted(layer.params)]

    def copy(self) -> "Model":
        new = copy.copy(self)
        new.layers = []
        for layer in self.layers:
            clone = copy.copy(layer)
            clone.params = {k: v.copy() for k, v in layer.params.items()}
            clone.grads = {}
            clone._cache = None
            new.layers.append(clone)
        return new

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            first = self.layers[0].kind if self.layers else "input"
            raise ShapeError(
                f"layer 0 ({first}) expects samples of shape {self.input_shape}, "
                f"got batch of shape {x.shape}"
            )
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def config(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.config() for l in self.layers]}

    @classmethod
    def from_config(cls, cfg: dict, seed: int | None = 0) -> "Model":
        return cls([layer_from_config(c) for c in cfg["layers"]], cfg["input_shape"], seed=seed)

    def is_autoencoder(self) -> bool:
        return self.output_shape == self.input_shape

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Model(input_shape={self.input_shape}, layers=[{inner}])"


class EncoderHandle:
    """Encoder half of an autoencoder, plus the autoencoder it came from.

    ``autoencoder`` is kept so clients can fine-tune the whole network and
    re-extract the encoder; it is None for fixed encoders such as identity.
    """

    def __init__(self, model: Model, autoencoder: Model | None = None, depth: int | None = None):
        if len(model.output_shape) != 1:
            raise ShapeError(f"encoder must output a flat vector, got {model.output_shape}")
        self.model = model
        self.autoencoder = autoencoder
        self.depth = depth
        self.latent_dim = model.output_shape[0]

    def __repr__(self):
        return f"EncoderHandle(latent_dim={self.latent_dim}, depth={self.depth})"


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _loss(out: np.ndarray, target: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    if kind == "cross_entropy":
        labels = np.asarray(target)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("cross-entropy needs a 1-D array of integer labels")
        n, n_classes = out.shape
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
        z = out - out.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        logp = z[np.arange(n), labels] - logsum
        grad = np.exp(z - logsum[:, None])
        grad[np.arange(n), labels] -= 1.0
        return float(-logp.mean()), grad / n
    if kind == "mse":
        target = np.asarray(target, dtype=np.float64).reshape(out.shape)
        diff = out - target
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    raise ValueError(f"unknown loss {kind!r}")


def _check_finite(model: Model, loss: float) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite", layer_index=None)
    for i, layer in enumerate(model.layers):
        for name, g in layer.grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient {name!r} in layer {i} ({layer.kind})", i)


# ---------------------------------------------------------------------------
# operations


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass (logits for classifiers, reconstructions for autoencoders)."""
    return model.forward(batch, train=False)


def predict_proba(model: Model, batch: np.ndarray) -> np.ndarray:
    return softmax(forward(model, batch))


def loss_and_gradient(
    model: Model, x: np.ndarray, y: np.ndarray, loss: str = "cross_entropy", train: bool = False, rng=None
) -> tuple[float, np.ndarray]:
    """Loss and flattened parameter gradient over one batch.

    The model's internal gradient buffers are overwritten; parameters are not.
    """
    out = model.forward(x, train=train, rng=rng)
    value, g = _loss(out, y, loss)
    model.backward(g)
    flat = [layer.grads[name].ravel() for layer in model.layers for name in sorted(layer.params)]
    return value, np.concatenate(flat) if flat else np.zeros(0)


def _step_inplace(model: Model, x, y, lr: float, loss: str, rng) -> float:
    out = model.forward(x, train=True, rng=rng)
    value, g = _loss(out, y, loss)
    model.backward(g)
    _check_finite(model, value)
    if lr != 0.0:
        for layer in model.layers:
            for name, p in layer.params.items():
                p -= lr * layer.grads[name]
    return value


def sgd_step(
    model: Model, x: np.ndarray, y: np.ndarray, lr: float, loss: str = "cross_entropy", rng=None
) -> tuple[Model, float]:
    """One full-batch gradient step. Returns the updated copy and the pre-step loss."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    new = model.copy()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    value = _step_inplace(new, np.asarray(x, dtype=np.float64), y, lr, loss, rng)
    return new, value


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "train"):
        data = data.train
    if hasattr(data, "X"):
        return data.X, data.y
    x, y = data
    return np.asarray(x), np.asarray(y)


def train_local(
    model: Model,
    data,
    epochs: int = 5,
    batch_size: int = 10,
    lr: float = 0.01,
    rng=0,
    loss: str = "cross_entropy",
    history: list | None = None,
) -> Model:
    """Mini-batch SGD for ``epochs`` passes over the client's training data.

    ``data`` may be a ClientDataset (its train split is used), a Dataset or
    an ``(X, y)`` pair. Shuffling and dropout draw from ``rng`` (seed or
    Generator). When ``history`` is a list, per-batch losses are appended.
    """
    x, y = _arrays(data)
    if len(x) == 0:
        raise EmptyDatasetError("client has no training samples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    new = model.copy()
    if epochs <= 0:
        return new
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            value = _step_inplace(new, x[idx], y[idx], lr, loss, rng)
            if history is not None:
                history.append(value)
    return new


def encode(enc: EncoderHandle, data, batch_size: int = 512) -> np.ndarray:
    """Latent vectors for every sample, shape (n, latent_dim)."""
    x, _ = _arrays(data) if not isinstance(data, np.ndarray) else (data, None)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != enc.model.input_shape:
        raise ShapeError(
            f"encoder expects samples of shape {enc.model.input_shape}, got {x.shape[1:]}"
        )
    if len(x) == 0:
        return np.zeros((0, enc.latent_dim))
    parts = [enc.model.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)


def finetune_autoencoder(
    ae: Model,
    data,
    epochs: int = 5,
    lr: float = 0.01,
    batch_size: int = 10,
    rng=0,
    history: list | None = None,
) -> Model:
    """Unsupervised MSE reconstruction training; labels are ignored."""
    if not ae.is_autoencoder():
        raise ShapeError(
            f"finetune_autoencoder needs output shape == input shape, got "
            f"{ae.input_shape} -> {ae.output_shape}"
        )
    x, _ = _arrays(data)
    return train_local(ae, (x, x), epochs=epochs, batch_size=batch_size, lr=lr, rng=rng,
                       loss="mse", history=history)


def flatten_params(model: Model) -> np.ndarray:
    arrays = model.param_arrays()
    if not arrays:
        return np.zeros(0)
    return np.concatenate([a.ravel() for a in arrays])


def unflatten_params(model: Model, vector: np.ndarray) -> Model:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != model.num_params:
        raise ValueError(f"expected a vector of length {model.num_params}, got shape {vector.shape}")
    new = model.copy()
    offset = 0
    for layer in new.layers:
        for name in sorted(layer.params):
            p = layer.params[name]
            layer.params[name] = vector[offset : offset + p.size].reshape(p.shape).copy()
            offset += p.size
    return new


# ---------------------------------------------------------------------------
# architectures


def mlp(input_shape: Sequence[int] = (28, 28), num_classes: int = 10, hidden: int = 200,
        dropout: float = 0.5, seed: int = 0) -> Model:
    """Single-hidden-layer ReLU perceptron with dropout before the output layer."""
    d = int(np.prod(input_shape))
    layers = [Flatten(), Dense(d, hidden), Activation("relu")]
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(Dense(hidden, num_classes))
    return Model(layers, input_shape, seed=seed)


def small_cnn(input_hw: int = 28, num_classes: int = 10, channels: tuple[int, int] = (8, 16),
              hidden: int = 64, seed: int = 0) -> Model:
    """Two 5x5 conv/pool stages followed by two dense layers."""
    c1, c2 = channels
    hw = input_hw // 4
    layers = [
        Reshape((1, input_hw, input_hw)),
        Conv2D(1, c1, 5, padding=2), Activation("relu"), MaxPool2D(2),
        Conv2D(c1, c2, 5, padding=2), Activation("relu"), MaxPool2D(2),
        Flatten(), Dense(c2 * hw * hw, hidden), Activation("relu"),
        Dense(hidden, num_classes),
    ]
    return Model(layers, (input_hw, input_hw), seed=seed)


def conv_autoencoder(input_hw: int = 28, latent_dim: int = 128, seed: int = 0) -> Model:
    """ConvAE: two conv/pool stages, a dense bottleneck, two stride-2 transposed convs.

    For 28x28 inputs and a 128-dim latent the network has 51,577 parameters.
    The encoder is the first :data:`CONV_AE_ENCODER_DEPTH` layers.
    """
    q = input_hw // 4
    layers = [
        Reshape((1, input_hw, input_hw)),
        Conv2D(1, 16, 3, padding=1), Activation("relu"), MaxPool2D(2),
        Conv2D(16, 4, 3, padding=1), Activation("relu"), MaxPool2D(2),
        Flatten(), Dense(4 * q * q, latent_dim),
        # decoder
        Dense(latent_dim, 4 * q * q), Activation("relu"), Reshape((4, q, q)),
        ConvTranspose2D(4, 16, 2, stride=2), Activation("relu"),
        ConvTranspose2D(16, 1, 2, stride=2), Activation("sigmoid"),
        Reshape((input_hw, input_hw)),
    ]
    return Model(layers, (input_hw, input_hw), seed=seed)


CONV_AE_ENCODER_DEPTH = 9


def dense_autoencoder(input_dim: int, latent_dim: int, hidden: int = 32, seed: int = 0) -> Model:
    """Fully-connected autoencoder; the encoder is the first 3 layers."""
    layers = [
        Dense(input_dim, hidden), Activation("tanh"), Dense(hidden, latent_dim),
        Dense(latent_dim, hidden), Activation("tanh"), Dense(hidden, input_dim),
    ]
    return Model(layers, (input_dim,), seed=seed)


DENSE_AE_ENCODER_DEPTH = 3


def encoder_from_autoencoder(ae: Model, depth: int) -> EncoderHandle:
    """Take the first ``depth`` layers of ``ae`` as the encoder (parameters are copied)."""
    ae = ae.copy()
    enc = Model.__new__(Model)
    enc.layers = ae.layers[:depth]
    enc.input_shape = ae.input_shape
    enc.shapes = ae.shapes[: depth + 1]
    if len(enc.output_shape) != 1:
        enc.layers.append(Flatten())
        enc.shapes.append((int(np.prod(enc.output_shape)),))
    return EncoderHandle(enc.copy(), autoencoder=ae, depth=depth)


def identity_encoder(input_shape: Sequence[int]) -> EncoderHandle:
    """Flatten followed by an identity dense map (latent_dim = prod(input_shape))."""
    d = int(np.prod(input_shape))
    dense = Dense(d, d)
    dense.params["W"] = np.eye(d)
    model = Model([Flatten(), dense], input_shape)
    return EncoderHandle(model)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"FLTCKPT1"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: {"architecture": ..., "shape": [...], ...}
#   rest      float64 little-endian values, row-major in ``shape``

_CKPT_MAGIC = b"FLTCKPT1"


def save_checkpoint(path, params: np.ndarray | Model, architecture: dict | None = None,
                    extra: dict | None = None) -> Path:
    if isinstance(params, Model):
        architecture = params.config() if architecture is None else architecture
        params = flatten_params(params)
    arr = np.ascontiguousarray(params, dtype="<f8")
    header = {"architecture": architecture, "shape": list(arr.shape), "dtype": "<f8"}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes())
    return path


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, values)``; use :func:`unflatten_params` to rebuild a model."""
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    expected = int(np.prod(header["shape"])) if header["shape"] else 1
    if values.size != expected:
        raise ValueError(f"{path}: truncated checkpoint ({values.size} of {expected} values)")
    return header, values.reshape(header["shape"])
