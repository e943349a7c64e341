"""
Minimal dense-tensor network engine: layer specs, layers with reverse-mode
gradients, smoothed binary cross-entropy and the Adam family of update rules.

Activations flow as (batch, channels, time) numpy arrays; trainable values
live in `Tensor` objects that carry their own gradient buffer. Every layer
caches what its backward pass needs during a training-mode forward call.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DegenerateBatch, MissingForwardContext, ShapeMismatch

PROB_CLAMP = 1e-7


# ---------------------------------------------------
# TENSOR
# ---------------------------------------------------
class Tensor:
    """Trainable array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "name", "trainable")

    def __init__(self, data: np.ndarray, name: str = "", trainable: bool = True):
        self.data = np.ascontiguousarray(data)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self):
        return f"Tensor({self.name}, shape={self.shape}, dtype={self.data.dtype})"


# ---------------------------------------------------
# LAYER SPECS (serializable, declarative)
# ---------------------------------------------------
@dataclass(frozen=True)
class DepthwiseConv1d:
    channels: int
    kernel: int
    kind: ClassVar[str] = "DepthwiseConv1d"


@dataclass(frozen=True)
class PointwiseConv1d:
    in_ch: int
    out_ch: int
    kind: ClassVar[str] = "PointwiseConv1d"


@dataclass(frozen=True)
class Conv1d:
    in_ch: int
    out_ch: int
    kernel: int
    kind: ClassVar[str] = "Conv1d"


@dataclass(frozen=True)
class BatchNorm1d:
    channels: int
    momentum: float = 0.9
    epsilon: float = 1e-3
    kind: ClassVar[str] = "BatchNorm1d"


@dataclass(frozen=True)
class Activation:
    fn: str
    kind: ClassVar[str] = "Activation"


@dataclass(frozen=True)
class MaxPool1d:
    width: int
    kind: ClassVar[str] = "MaxPool1d"


@dataclass(frozen=True)
class GlobalAvgPool1d:
    kind: ClassVar[str] = "GlobalAvgPool1d"


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: ClassVar[str] = "Dense"


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind: ClassVar[str] = "Dropout"


@dataclass(frozen=True)
class SpatialDropout:
    rate: float
    kind: ClassVar[str] = "SpatialDropout"


LAYER_SPECS = {cls.kind: cls for cls in (
    DepthwiseConv1d, PointwiseConv1d, Conv1d, BatchNorm1d, Activation,
    MaxPool1d, GlobalAvgPool1d, Dense, Dropout, SpatialDropout,
)}
ACTIVATIONS = ("ELU", "ReLU", "Sigmoid")


def validate_spec(spec) -> None:
    values = asdict(spec)
    for key, value in values.items():
        if key in ("rate",):
            if not 0.0 <= value < 1.0:
                raise ShapeMismatch(f"{spec.kind}.{key} must lie in [0, 1), got {value}")
        elif key == "fn":
            if value not in ACTIVATIONS:
                raise ShapeMismatch(f"Unknown activation {value}")
        elif key == "momentum":
            if not 0.0 <= value < 1.0:
                raise ShapeMismatch(f"BatchNorm1d.momentum must lie in [0, 1), got {value}")
        elif key == "epsilon":
            if value <= 0:
                raise ShapeMismatch("BatchNorm1d.epsilon must be positive")
        elif int(value) < 1:
            raise ShapeMismatch(f"{spec.kind}.{key} must be positive, got {value}")


def spec_to_dict(spec) -> Dict[str, Any]:
    return {"type": spec.kind, **asdict(spec)}


def spec_from_dict(data: Dict[str, Any]):
    values = dict(data)
    kind = values.pop("type", None)
    if kind not in LAYER_SPECS:
        raise ShapeMismatch(f"Unknown layer type: {kind}")
    spec = LAYER_SPECS[kind](**values)
    validate_spec(spec)
    return spec


def param_count(spec) -> int:
    """Closed-form trainable parameter count of one layer."""
    if isinstance(spec, DepthwiseConv1d):
        return spec.channels * spec.kernel + spec.channels
    if isinstance(spec, PointwiseConv1d):
        return spec.in_ch * spec.out_ch + spec.out_ch
    if isinstance(spec, Conv1d):
        return spec.in_ch * spec.out_ch * spec.kernel + spec.out_ch
    if isinstance(spec, BatchNorm1d):
        return 2 * spec.channels
    if isinstance(spec, Dense):
        return spec.in_features * spec.out_features + spec.out_features
    return 0


FLAT = -1  # length marker for (batch, features) activations after global pooling


def output_shape(spec, channels: int, length: int) -> Tuple[int, int]:
    """(channels, length) produced by one layer; raises ShapeMismatch on incompatible input."""
    kind = spec.kind
    if isinstance(spec, (Conv1d, DepthwiseConv1d, MaxPool1d)):
        needed = spec.width if isinstance(spec, MaxPool1d) else spec.kernel
        if length < needed:
            raise ShapeMismatch(f"{kind} needs at least {needed} time steps, got {length}")
    if isinstance(spec, Conv1d):
        if channels != spec.in_ch:
            raise ShapeMismatch(f"Conv1d expects {spec.in_ch} channels, got {channels}")
        return spec.out_ch, length - spec.kernel + 1
    if isinstance(spec, DepthwiseConv1d):
        if channels != spec.channels:
            raise ShapeMismatch(f"DepthwiseConv1d expects {spec.channels} channels, got {channels}")
        return channels, length - spec.kernel + 1
    if isinstance(spec, PointwiseConv1d):
        if channels != spec.in_ch or length == FLAT:
            raise ShapeMismatch(f"PointwiseConv1d expects {spec.in_ch} channels over time")
        return spec.out_ch, length
    if isinstance(spec, BatchNorm1d):
        if channels != spec.channels or length == FLAT:
            raise ShapeMismatch(f"BatchNorm1d expects {spec.channels} channels over time")
        return channels, length
    if isinstance(spec, MaxPool1d):
        return channels, length // spec.width
    if isinstance(spec, GlobalAvgPool1d):
        if length == FLAT or length < 1:
            raise ShapeMismatch("GlobalAvgPool1d needs a non-empty time axis")
        return channels, FLAT
    if isinstance(spec, Dense):
        if channels != spec.in_features or length != FLAT:
            raise ShapeMismatch(f"Dense expects a flat {spec.in_features}-vector")
        return spec.out_features, FLAT
    if isinstance(spec, SpatialDropout) and length == FLAT:
        raise ShapeMismatch("SpatialDropout expects a time axis")
    return channels, length


# ---------------------------------------------------
# LAYERS
# ---------------------------------------------------
def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    spec: Any

    def __init__(self, spec):
        self.spec = spec
        self._cache = None

    def parameters(self) -> List[Tensor]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _context(self):
        if self._cache is None:
            raise MissingForwardContext(self.spec.kind)
        return self._cache

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None


def _check_3d(x: np.ndarray, channels: int, kind: str, min_length: int = 1):
    if x.ndim != 3:
        raise ShapeMismatch(f"{kind} expects (batch, channels, time), got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeMismatch(f"{kind} expects {channels} channels, got {x.shape[1]}")
    if x.shape[2] < min_length:
        raise ShapeMismatch(f"{kind} needs at least {min_length} time steps, got {x.shape[2]}")


class Conv1dLayer(Layer):
    def __init__(self, spec: Conv1d, rng, dtype=np.float32):
        super().__init__(spec)
        fan_in, fan_out = spec.in_ch * spec.kernel, spec.out_ch * spec.kernel
        self.weight = Tensor(_glorot(rng, (spec.out_ch, spec.in_ch, spec.kernel), fan_in, fan_out, dtype), "weight")
        self.bias = Tensor(np.zeros(spec.out_ch, dtype=dtype), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        _check_3d(x, self.spec.in_ch, "Conv1d", self.spec.kernel)
        win = sliding_window_view(x, self.spec.kernel, axis=2)
        out = np.einsum("bclk,ock->bol", win, self.weight.data, optimize=True)
        out += self.bias.data[None, :, None]
        self._cache = x if training else None
        return out

    def backward(self, grad):
        x = self._context()
        k = self.spec.kernel
        win = sliding_window_view(x, k, axis=2)
        self.weight.accumulate(np.einsum("bclk,bol->ock", win, grad, optimize=True))
        self.bias.accumulate(grad.sum(axis=(0, 2)))
        dx = np.zeros_like(x)
        n_out = grad.shape[2]
        for j in range(k):
            dx[:, :, j:j + n_out] += np.einsum("bol,oc->bcl", grad, self.weight.data[:, :, j], optimize=True)
        return dx


class DepthwiseConv1dLayer(Layer):
    def __init__(self, spec: DepthwiseConv1d, rng, dtype=np.float32):
        super().__init__(spec)
        self.weight = Tensor(_glorot(rng, (spec.channels, spec.kernel), spec.kernel, spec.kernel, dtype), "weight")
        self.bias = Tensor(np.zeros(spec.channels, dtype=dtype), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        _check_3d(x, self.spec.channels, "DepthwiseConv1d", self.spec.kernel)
        win = sliding_window_view(x, self.spec.kernel, axis=2)
        out = np.einsum("bclk,ck->bcl", win, self.weight.data, optimize=True)
        out += self.bias.data[None, :, None]
        self._cache = x if training else None
        return out

    def backward(self, grad):
        x = self._context()
        k = self.spec.kernel
        win = sliding_window_view(x, k, axis=2)
        self.weight.accumulate(np.einsum("bclk,bcl->ck", win, grad, optimize=True))
        self.bias.accumulate(grad.sum(axis=(0, 2)))
        dx = np.zeros_like(x)
        n_out = grad.shape[2]
        for j in range(k):
            dx[:, :, j:j + n_out] += grad * self.weight.data[None, :, j, None]
        return dx


class PointwiseConv1dLayer(Layer):
    def __init__(self, spec: PointwiseConv1d, rng, dtype=np.float32):
        super().__init__(spec)
        self.weight = Tensor(_glorot(rng, (spec.out_ch, spec.in_ch), spec.in_ch, spec.out_ch, dtype), "weight")
        self.bias = Tensor(np.zeros(spec.out_ch, dtype=dtype), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        _check_3d(x, self.spec.in_ch, "PointwiseConv1d")
        out = np.einsum("oc,bcl->bol", self.weight.data, x, optimize=True)
        out += self.bias.data[None, :, None]
        self._cache = x if training else None
        return out

    def backward(self, grad):
        x = self._context()
        self.weight.accumulate(np.einsum("bol,bcl->oc", grad, x, optimize=True))
        self.bias.accumulate(grad.sum(axis=(0, 2)))
        return np.einsum("oc,bol->bcl", self.weight.data, grad, optimize=True)


class BatchNorm1dLayer(Layer):
    """Per-channel normalization over batch and time jointly."""

    def __init__(self, spec: BatchNorm1d, rng=None, dtype=np.float32):
        super().__init__(spec)
        self.gamma = Tensor(np.ones(spec.channels, dtype=dtype), "gamma")
        self.beta = Tensor(np.zeros(spec.channels, dtype=dtype), "beta")
        self.running_mean = np.zeros(spec.channels, dtype=dtype)
        self.running_var = np.ones(spec.channels, dtype=dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x, training=False):
        _check_3d(x, self.spec.channels, "BatchNorm1d")
        dtype = x.dtype
        if training:
            n = x.shape[0] * x.shape[2]
            if n < 2:
                raise DegenerateBatch(f"BatchNorm1d needs batch*time >= 2 in training mode, got {n}")
            mean = x.mean(axis=(0, 2), dtype=np.float64)
            var = x.var(axis=(0, 2), dtype=np.float64)
            m = self.spec.momentum
            self.running_mean = (m * self.running_mean + (1.0 - m) * mean).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1.0 - m) * var).astype(self.running_var.dtype)
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.spec.epsilon)
        x_hat = ((x - mean[None, :, None]) * inv_std[None, :, None]).astype(dtype)
        self._cache = (x_hat, inv_std, training) if training else None
        return self.gamma.data[None, :, None] * x_hat + self.beta.data[None, :, None]

    def backward(self, grad):
        x_hat, inv_std, training = self._context()
        self.gamma.accumulate(np.sum(grad * x_hat, axis=(0, 2), dtype=np.float64))
        self.beta.accumulate(np.sum(grad, axis=(0, 2), dtype=np.float64))
        d_hat = grad * self.gamma.data[None, :, None]
        n = grad.shape[0] * grad.shape[2]
        sum_d = d_hat.sum(axis=(0, 2), dtype=np.float64)[None, :, None]
        sum_dx = np.sum(d_hat * x_hat, axis=(0, 2), dtype=np.float64)[None, :, None]
        dx = (inv_std[None, :, None] / n) * (n * d_hat - sum_d - x_hat * sum_dx)
        return dx.astype(grad.dtype)


class ActivationLayer(Layer):
    def __init__(self, spec: Activation, rng=None, dtype=np.float32):
        super().__init__(spec)

    def forward(self, x, training=False):
        fn = self.spec.fn
        if fn == "ReLU":
            y = np.maximum(x, 0)
        elif fn == "ELU":
            y = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
        else:
            y = sigmoid(x)
        self._cache = (x, y) if training else None
        return y

    def backward(self, grad):
        x, y = self._context()
        fn = self.spec.fn
        if fn == "ReLU":
            return grad * (x > 0)
        if fn == "ELU":
            return grad * np.where(x > 0, 1.0, y + 1.0).astype(grad.dtype)
        return grad * y * (1 - y)


class MaxPool1dLayer(Layer):
    """Non-overlapping max pooling; a trailing partial window is dropped."""

    def __init__(self, spec: MaxPool1d, rng=None, dtype=np.float32):
        super().__init__(spec)

    def forward(self, x, training=False):
        w = self.spec.width
        if x.ndim != 3 or x.shape[2] < w:
            raise ShapeMismatch(f"MaxPool1d width {w} needs a (batch, channels, >= {w}) input, got {x.shape}")
        b, c, length = x.shape
        n_out = length // w
        blocks = x[:, :, :n_out * w].reshape(b, c, n_out, w)
        idx = blocks.argmax(axis=3)
        out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
        self._cache = (x.shape, idx) if training else None
        return out

    def backward(self, grad):
        shape, idx = self._context()
        b, c, length = shape
        w = self.spec.width
        n_out = idx.shape[2]
        blocks = np.zeros((b, c, n_out, w), dtype=grad.dtype)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=3)
        dx = np.zeros(shape, dtype=grad.dtype)
        dx[:, :, :n_out * w] = blocks.reshape(b, c, n_out * w)
        return dx


class GlobalAvgPool1dLayer(Layer):
    def __init__(self, spec: GlobalAvgPool1d, rng=None, dtype=np.float32):
        super().__init__(spec)

    def forward(self, x, training=False):
        if x.ndim != 3:
            raise ShapeMismatch(f"GlobalAvgPool1d expects (batch, channels, time), got {x.shape}")
        self._cache = x.shape if training else None
        return x.mean(axis=2, dtype=np.float64).astype(x.dtype)

    def backward(self, grad):
        shape = self._context()
        return np.broadcast_to(grad[:, :, None] / shape[2], shape).astype(grad.dtype)


class DenseLayer(Layer):
    def __init__(self, spec: Dense, rng, dtype=np.float32):
        super().__init__(spec)
        self.weight = Tensor(_glorot(rng, (spec.out_features, spec.in_features),
                                     spec.in_features, spec.out_features, dtype), "weight")
        self.bias = Tensor(np.zeros(spec.out_features, dtype=dtype), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.spec.in_features:
            raise ShapeMismatch(f"Dense expects (batch, {self.spec.in_features}), got {x.shape}")
        self._cache = x if training else None
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        x = self._context()
        self.weight.accumulate(grad.T @ x)
        self.bias.accumulate(grad.sum(axis=0))
        return grad @ self.weight.data


class DropoutLayer(Layer):
    """Inverted dropout; SpatialDropout shares one draw across the time axis."""

    def __init__(self, spec, rng, dtype=np.float32):
        super().__init__(spec)
        self.rng = rng
        self.spatial = isinstance(spec, SpatialDropout)

    def forward(self, x, training=False):
        rate = self.spec.rate
        if not training or rate == 0.0:
            self._cache = None if not training else np.ones((1,) * x.ndim, dtype=x.dtype)
            return x
        if self.spatial:
            if x.ndim != 3:
                raise ShapeMismatch(f"SpatialDropout expects (batch, channels, time), got {x.shape}")
            mask_shape = (x.shape[0], x.shape[1], 1)
        else:
            mask_shape = x.shape
        mask = (self.rng.random(mask_shape) >= rate).astype(x.dtype) / (1.0 - rate)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        mask = self._context()
        return grad * mask


LAYER_TYPES = {
    Conv1d: Conv1dLayer,
    DepthwiseConv1d: DepthwiseConv1dLayer,
    PointwiseConv1d: PointwiseConv1dLayer,
    BatchNorm1d: BatchNorm1dLayer,
    Activation: ActivationLayer,
    MaxPool1d: MaxPool1dLayer,
    GlobalAvgPool1d: GlobalAvgPool1dLayer,
    Dense: DenseLayer,
    Dropout: DropoutLayer,
    SpatialDropout: DropoutLayer,
}


def build_layer(spec, rng: np.random.Generator, dtype=np.float32) -> Layer:
    validate_spec(spec)
    return LAYER_TYPES[type(spec)](spec, rng, dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------
# NETWORK
# ---------------------------------------------------
class Network:
    """Ordered stack of layers with a shared forward/backward pass."""

    def __init__(self, specs: Sequence, seed: int = 0, dtype=np.float32):
        self.specs = list(specs)
        rng = np.random.default_rng(seed)
        self.layers: List[Layer] = [build_layer(s, rng, dtype) for s in self.specs]
        self.forward_calls = 0

    def forward(self, x: np.ndarray, training: bool = False, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        self.forward_calls += 1
        dtype = self.dtype
        out = np.asarray(x, dtype=dtype)
        for layer in self.layers[start:stop]:
            out = layer.forward(out, training=training)
        return out

    def backward(self, grad: np.ndarray, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        for layer in reversed(self.layers[start:stop]):
            grad = layer.backward(grad)
        return grad

    @property
    def dtype(self):
        for p in self.parameters():
            return p.data.dtype
        return np.float32

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def named_parameters(self, start: int = 0, stop: Optional[int] = None) -> List[Tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            if i < start or (stop is not None and i >= stop):
                continue
            for p in layer.parameters():
                out.append((f"{i}.{layer.spec.kind}.{p.name}", p))
        return out

    def parameters(self, start: int = 0, stop: Optional[int] = None) -> List[Tensor]:
        return [p for _, p in self.named_parameters(start, stop)]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze(self, stop: int):
        """Mark parameters of layers [0, stop) as not trainable."""
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                p.trainable = i >= stop

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters and running buffers, layer by layer in spec order."""
        state = {}
        for i, layer in enumerate(self.layers):
            prefix = f"{i}.{layer.spec.kind}"
            for p in layer.parameters():
                state[f"{prefix}.{p.name}"] = p.data.copy()
            for key, value in layer.buffers().items():
                state[f"{prefix}.{key}"] = value.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        unexpected = set(state) - set(self.state_dict())
        if unexpected:
            raise ShapeMismatch(f"Unexpected weight arrays: {sorted(unexpected)}")
        for name, p in self.named_parameters():
            if name not in state:
                raise ShapeMismatch(f"Missing weight array {name}")
            if state[name].shape != p.shape:
                raise ShapeMismatch(f"Weight {name} has shape {state[name].shape}, expected {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for i, layer in enumerate(self.layers):
            for key in layer.buffers():
                name = f"{i}.{layer.spec.kind}.{key}"
                if name not in state:
                    raise ShapeMismatch(f"Missing buffer array {name}")
                setattr(layer, key, np.array(state[name], dtype=getattr(layer, key).dtype))


# ---------------------------------------------------
# LOSS
# ---------------------------------------------------
def bce_smoothed(p: np.ndarray, y: np.ndarray, epsilon: float = 0.0) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy against targets y(1 - eps) + eps/2, and d loss / d p."""
    p64 = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y64 = np.asarray(y, dtype=np.float64)
    target = y64 * (1.0 - epsilon) + epsilon / 2.0
    n = p64.size
    loss = -np.mean(target * np.log(p64) + (1.0 - target) * np.log(1.0 - p64))
    grad = (-(target / p64) + (1.0 - target) / (1.0 - p64)) / n
    return float(loss), grad.astype(np.asarray(p).dtype)


# ---------------------------------------------------
# OPTIMIZATION
# ---------------------------------------------------
@dataclass
class AdamState:
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float):
    """One bias-corrected Adam update over `params` (grads already populated)."""
    if len(params) != len(state.m):
        raise ShapeMismatch("Adam state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.m[i].shape != p.shape:
            raise ShapeMismatch(f"Adam moment shape {state.m[i].shape} does not match {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def l2_penalty(params: Sequence[Tensor], lam: float):
    """Add lam * theta to every gradient (penalty term itself is not reported in the loss)."""
    if lam == 0:
        return
    for p in params:
        p.accumulate(lam * p.data)


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients together when their joint L2 norm exceeds max_norm; returns the norm."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def _improved(value: float, best: float, mode: str, min_delta: float) -> bool:
    if mode == "max":
        return value > best + min_delta
    return value < best - min_delta


class ReduceLROnPlateau:
    """Divide the learning rate by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 4.0, mode: str = "min",
                 min_delta: float = 1e-4, min_lr: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.mode = mode
        self.min_delta = min_delta
        self.min_lr = min_lr
        self.best: Optional[float] = None
        self.wait = 0

    def step(self, metric: float) -> float:
        if self.best is None or _improved(metric, self.best, self.mode, self.min_delta):
            self.best = metric
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            self.lr = max(self.lr / self.factor, self.min_lr)
            self.wait = 0
        return self.lr


def reduce_lr_on_plateau(history: Sequence[float], lr: float, patience: int = 5, factor: float = 4.0,
                         mode: str = "min", min_delta: float = 1e-4, min_lr: float = 1e-6) -> float:
    """Learning rate after replaying a metric history through the plateau rule."""
    scheduler = ReduceLROnPlateau(lr, patience, factor, mode, min_delta, min_lr)
    for value in history:
        scheduler.step(value)
    return scheduler.lr


def early_stop(history: Sequence[float], patience: int, mode: str = "min", min_delta: float = 0.0) -> Tuple[int, bool]:
    """Index of the best epoch so far, and whether `patience` epochs have passed since it."""
    if not history:
        return -1, False
    best_index = 0
    for i, value in enumerate(history[1:], start=1):
        if _improved(value, history[best_index], mode, min_delta):
            best_index = i
    return best_index, len(history) - 1 - best_index >= patience
