"""Minimal dense/conv neural-network engine on numpy.

Forward pass, manual backprop, cross-entropy loss and momentum SGD --
just enough to train small image classifiers and to run the fixed-input
probe network used by the update-screening aggregator. Everything works
on flat parameter vectors so that a client's model or update is a single
1-D float64 array.

Parameter layout is fixed: layers in spec order, weight before bias,
row-major (C-order) within each array.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Shape or length mismatch between params, spec and inputs."""


class NumericError(ArithmeticError):
    """Non-finite value encountered during a forward/backward pass."""


# ---------------------------------------------------------------------------
# Layer descriptors and network specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int | None = None  # None -> non-overlapping (stride = kernel)

    @property
    def effective_stride(self) -> int:
        return self.kernel if self.stride is None else self.stride


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Conv2d | ReLU | MaxPool2d | Flatten | FullyConnected | Softmax


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture descriptor; gives a flat parameter vector its meaning."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int

    def __post_init__(self):
        shapes = list(self.iter_shapes())
        last = shapes[-1]
        if not isinstance(self.layers[-1], Softmax):
            raise DimensionError("final layer must be Softmax")
        if last != (self.num_classes,):
            raise DimensionError(
                f"network output shape {last} != ({self.num_classes},)")

    def iter_shapes(self) -> Iterator[tuple[int, ...]]:
        """Yield the activation shape after each layer; validates composition."""
        shape: tuple[int, ...] = self.input_shape
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                c, h, w = shape
                if c != layer.in_ch:
                    raise DimensionError(
                        f"conv expects {layer.in_ch} channels, got {c}")
                oh = (h - layer.kernel) // layer.stride + 1
                ow = (w - layer.kernel) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise DimensionError("conv kernel larger than input")
                shape = (layer.out_ch, oh, ow)
            elif isinstance(layer, MaxPool2d):
                c, h, w = shape
                s = layer.effective_stride
                oh = (h - layer.kernel) // s + 1
                ow = (w - layer.kernel) // s + 1
                if oh < 1 or ow < 1:
                    raise DimensionError("pool kernel larger than input")
                shape = (c, oh, ow)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, FullyConnected):
                if shape != (layer.in_dim,):
                    raise DimensionError(
                        f"fc expects ({layer.in_dim},), got {shape}")
                shape = (layer.out_dim,)
            elif isinstance(layer, (ReLU, Softmax)):
                pass
            else:
                raise TypeError(f"unknown layer {layer!r}")
            yield shape


def param_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(weight_shape, bias_shape) per parametric layer, in layer order."""
    out = []
    for layer in spec.layers:
        if isinstance(layer, Conv2d):
            out.append(((layer.out_ch, layer.in_ch, layer.kernel, layer.kernel),
                        (layer.out_ch,)))
        elif isinstance(layer, FullyConnected):
            out.append(((layer.out_dim, layer.in_dim), (layer.out_dim,)))
    return out


def param_count(spec: NetworkSpec) -> int:
    """Total number of parameters the spec interprets (the vector length)."""
    return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in param_shapes(spec))


def unflatten_params(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (weight, bias) views."""
    params = np.asarray(params)
    if params.ndim != 1 or params.size != param_count(spec):
        raise DimensionError(
            f"params length {params.size} != {param_count(spec)}")
    out, off = [], 0
    for wshape, bshape in param_shapes(spec):
        wn, bn = int(np.prod(wshape)), int(np.prod(bshape))
        w = params[off:off + wn].reshape(wshape)
        b = params[off + wn:off + wn + bn].reshape(bshape)
        out.append((w, b))
        off += wn + bn
    return out


def flatten_params(spec: NetworkSpec, structured: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`unflatten_params`; bit-exact round trip."""
    expect = param_shapes(spec)
    if len(structured) != len(expect):
        raise DimensionError("wrong number of parametric layers")
    chunks = []
    for (w, b), (wshape, bshape) in zip(structured, expect):
        w, b = np.asarray(w, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
        if w.shape != wshape or b.shape != bshape:
            raise DimensionError(f"expected {wshape}/{bshape}, got {w.shape}/{b.shape}")
        chunks.append(w.reshape(-1))
        chunks.append(b.reshape(-1))
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=DTYPE)


def init_params(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Deterministic Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for wshape, bshape in param_shapes(spec):
        fan_in = int(np.prod(wshape[1:]))
        fan_out = wshape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(wshape))))
        chunks.append(np.zeros(int(np.prod(bshape))))
    return np.concatenate(chunks).astype(DTYPE)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, OH, OW, C*k*k) patch matrix (a view, no copy)."""
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    sb, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(b, oh, ow, c, kernel, kernel),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    return patches.reshape(b, oh, ow, c * kernel * kernel)


def _conv_forward(x, w, bias, stride):
    b, c, h, w_in = x.shape
    oc, ic, k, _ = w.shape
    cols = _im2col(x, k, stride)                      # (B, OH, OW, C*k*k)
    out = cols @ w.reshape(oc, -1).T + bias           # (B, OH, OW, OC)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _conv_backward(dout, cols, x_shape, w, stride):
    b, c, h, w_in = x_shape
    oc, ic, k, _ = w.shape
    dflat = dout.transpose(0, 2, 3, 1)                # (B, OH, OW, OC)
    dw = np.tensordot(dflat, cols, axes=([0, 1, 2], [0, 1, 2]))  # (OC, C*k*k)
    db = dflat.sum(axis=(0, 1, 2))
    dcols = dflat @ w.reshape(oc, -1)                 # (B, OH, OW, C*k*k)
    dx = np.zeros(x_shape, dtype=DTYPE)
    oh, ow = dout.shape[2], dout.shape[3]
    dcols = dcols.reshape(b, oh, ow, c, k, k)
    for i in range(oh):
        for j in range(ow):
            dx[:, :, i * stride:i * stride + k, j * stride:j * stride + k] += dcols[:, i, j]
    return dx, dw.reshape(w.shape), db


def _pool_forward(x, kernel, stride):
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, oh, ow, kernel, kernel),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    flat = windows.reshape(b, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)                        # first max wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape, kernel, stride):
    b, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=DTYPE)
    ki, kj = np.divmod(arg, kernel)                   # offsets within window
    bi, ci, ii, jj = np.indices((b, c, oh, ow))
    rows = ii * stride + ki
    cols = jj * stride + kj
    np.add.at(dx, (bi, ci, rows, cols), dout)
    return dx


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _run_forward(params, spec, x, keep_cache=False):
    """Shared forward over a batch (B, C, H, W); returns logits and cache."""
    layers = unflatten_params(spec, params)
    cache = []
    act = x
    li = 0
    for layer in spec.layers:
        if isinstance(layer, Conv2d):
            w, bias = layers[li]
            li += 1
            inp_shape = act.shape
            act, cols = _conv_forward(act, w, bias, layer.stride)
            if keep_cache:
                cache.append(("conv", cols, inp_shape, w, layer.stride))
        elif isinstance(layer, ReLU):
            mask = act > 0
            act = act * mask
            if keep_cache:
                cache.append(("relu", mask))
        elif isinstance(layer, MaxPool2d):
            s = layer.effective_stride
            inp_shape = act.shape
            act, arg = _pool_forward(act, layer.kernel, s)
            if keep_cache:
                cache.append(("pool", arg, inp_shape, layer.kernel, s))
        elif isinstance(layer, Flatten):
            inp_shape = act.shape
            act = act.reshape(act.shape[0], -1)
            if keep_cache:
                cache.append(("flatten", inp_shape))
        elif isinstance(layer, FullyConnected):
            w, bias = layers[li]
            li += 1
            inp = act
            act = act @ w.T + bias
            if keep_cache:
                cache.append(("fc", inp, w))
        elif isinstance(layer, Softmax):
            pass  # handled by the caller (fused with the loss or applied last)
    if not np.all(np.isfinite(act)):
        raise NumericError("non-finite activation in forward pass")
    return act, cache


def batch_forward(params: np.ndarray, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Softmax probabilities for a batch of inputs shaped (B, *input_shape)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != {spec.input_shape}")
    logits, _ = _run_forward(params, spec, x)
    return _softmax(logits)


def forward(params: np.ndarray, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Softmax output (length M) for a single input shaped like input_shape."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != spec.input_shape:
        raise DimensionError(f"input shape {x.shape} != {spec.input_shape}")
    return batch_forward(params, spec, x[None])[0]


def loss_and_grad(params: np.ndarray, spec: NetworkSpec,
                  batch: tuple[np.ndarray, np.ndarray]) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. params."""
    x, y = batch
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty batch")
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != {spec.input_shape}")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError("label out of range")

    logits, cache = _run_forward(params, spec, x, keep_cache=True)
    n = len(x)
    zmax = logits.max(axis=1, keepdims=True)
    logp = logits - zmax - np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), y].mean())

    probs = np.exp(logp)
    dact = probs
    dact[np.arange(n), y] -= 1.0
    dact /= n

    n_param_layers = len(param_shapes(spec))
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * n_param_layers
    li = n_param_layers
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "conv":
            _, cols, inp_shape, w, stride = entry
            li -= 1
            dact, dw, db = _conv_backward(dact, cols, inp_shape, w, stride)
            grads[li] = (dw, db)
        elif kind == "relu":
            dact = dact * entry[1]
        elif kind == "pool":
            _, arg, inp_shape, kernel, stride = entry
            dact = _pool_backward(dact, arg, inp_shape, kernel, stride)
        elif kind == "flatten":
            dact = dact.reshape(entry[1])
        elif kind == "fc":
            _, inp, w = entry
            li -= 1
            dw = dact.T @ inp
            db = dact.sum(axis=0)
            grads[li] = (dw, db)
            dact = dact @ w
    grad = flatten_params(spec, [g for g in grads if g is not None])
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             state: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Momentum SGD with L2 weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * params
    params <- params - lr * v

    Returns (new_params, new_state); `state` is the caller-owned momentum
    buffer (None or empty on the first step).
    """
    params = np.asarray(params, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if params.shape != grad.shape:
        raise DimensionError("params/grad length mismatch")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not (0.0 <= momentum < 1.0):
        raise ValueError("momentum must be in [0, 1)")
    if state is None or len(state) == 0:
        state = np.zeros_like(params)
    elif state.shape != params.shape:
        raise DimensionError("momentum buffer length mismatch")
    v = momentum * state + grad + weight_decay * params
    return params - lr * v, v


# ---------------------------------------------------------------------------
# Preset architectures
# ---------------------------------------------------------------------------

def probe_net(n: int) -> NetworkSpec:
    """Single conv/pool/fc chain on an n x n input.

    Conv 3x3 stride 1 -> ReLU -> MaxPool 3x3 stride 1 -> Flatten ->
    FC -> Softmax, so the pooled map is (n-4) x (n-4) and there are
    n-4 output classes. n >= 6 gives a non-degenerate softmax; n = 5
    collapses to a single class.
    """
    if n < 5:
        raise ValueError("probe net needs n >= 5")
    m = n - 4
    return NetworkSpec(
        layers=(Conv2d(1, 1, 3, 1), ReLU(), MaxPool2d(3, 1), Flatten(),
                FullyConnected(m * m, m), Softmax()),
        input_shape=(1, n, n),
        num_classes=m,
    )


def probe_net_params(spec: NetworkSpec, kernel: np.ndarray, conv_bias: float,
                     fc_weights: np.ndarray, fc_biases: np.ndarray) -> np.ndarray:
    """Parameters for :func:`probe_net` in the row-shared fully connected form.

    The fc maps the pooled (m x m) map P to m logits out_p = sum_i P[p, i] *
    fc_weights[i] + fc_biases[p], i.e. one shared weight per pooled column.
    """
    m = spec.num_classes
    w_fc = np.zeros((m, m * m), dtype=DTYPE)
    for p in range(m):
        w_fc[p, p * m:(p + 1) * m] = fc_weights
    return flatten_params(spec, [
        (np.asarray(kernel, dtype=DTYPE).reshape(1, 1, 3, 3),
         np.array([conv_bias], dtype=DTYPE)),
        (w_fc, np.asarray(fc_biases, dtype=DTYPE)),
    ])


def lenet_lite(input_shape: tuple[int, int, int] = (1, 28, 28),
               num_classes: int = 10) -> NetworkSpec:
    """Small two-conv classifier for 2-D image datasets."""
    c, h, w = input_shape
    h1, w1 = (h - 3 + 1) // 2, (w - 3 + 1) // 2      # conv3 then pool2
    h2, w2 = (h1 - 3 + 1) // 2, (w1 - 3 + 1) // 2
    flat = 16 * h2 * w2
    return NetworkSpec(
        layers=(Conv2d(c, 8, 3, 1), ReLU(), MaxPool2d(2),
                Conv2d(8, 16, 3, 1), ReLU(), MaxPool2d(2),
                Flatten(), FullyConnected(flat, num_classes), Softmax()),
        input_shape=input_shape,
        num_classes=num_classes,
    )


def linear_net(input_shape: tuple[int, int, int], num_classes: int) -> NetworkSpec:
    """Flatten -> FC -> Softmax; a multinomial logistic model."""
    return NetworkSpec(
        layers=(Flatten(), FullyConnected(int(np.prod(input_shape)), num_classes),
                Softmax()),
        input_shape=input_shape,
        num_classes=num_classes,
    )
