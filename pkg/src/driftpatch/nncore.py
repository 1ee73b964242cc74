"""Minimal feed-forward network engine written directly against numpy.

Supports the fixed layer set used by the base classifiers, patches and error
estimators: Input, Dense, Conv2D, MaxPool, Flatten, Dropout and SoftmaxOutput.
Images are carried in NHWC layout; a 2-D per-sample input is treated as a
single channel by convolutions.  Everything is float32 unless ``precision``
says otherwise.  The Adam update is the one numba kernel: in plain numpy it
cost as much as the forward and backward passes of the larger base net.
"""
from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

real_type = np.float32


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build and run networks in ``dtype`` (float64 for gradient checks)."""
    global real_type
    saved, real_type = real_type, np.dtype(dtype).type
    try:
        yield
    finally:
        real_type = saved

PRE = "pre_activation"
POST = "post_activation"
_TAP_ALIASES = {"pre": PRE, PRE: PRE, "post": POST, POST: POST}

LOG_CLAMP = 1e-12


class NNCoreError(Exception):
    """Base class for engine errors."""


class InvalidShapeError(NNCoreError, ValueError):
    """A tensor or layer shape is empty or inconsistent."""


class InvalidInputError(NNCoreError, ValueError):
    """A batch, target array or argument does not fit the network."""


class InvalidLayerError(NNCoreError, IndexError):
    """A layer index is out of range or the layer cannot be tapped."""


class NonFiniteError(NNCoreError, FloatingPointError):
    """NaN or Inf showed up in an activation or gradient."""


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Input:
    shape: tuple
    kind = "input"


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str | None = "relu"
    kind = "dense"


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: int = 3
    stride: int = 1
    padding: str = "valid"
    activation: str | None = "relu"
    kind = "conv2d"


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2
    kind = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind = "dropout"


@dataclass(frozen=True)
class SoftmaxOutput:
    classes: int
    kind = "softmax"


LayerSpec = Input | Dense | Conv2D | MaxPool | Flatten | Dropout | SoftmaxOutput
_SPEC_TYPES = {cls.kind: cls for cls in (Input, Dense, Conv2D, MaxPool, Flatten, Dropout, SoftmaxOutput)}


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    if "shape" in d:
        d["shape"] = list(d["shape"])
    d["kind"] = spec.kind
    return d


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _SPEC_TYPES:
        raise InvalidInputError(f"unknown layer kind {kind!r}")
    if "shape" in d:
        d["shape"] = tuple(d["shape"])
    return _SPEC_TYPES[kind](**d)


def _has_params(spec) -> bool:
    return isinstance(spec, (Dense, Conv2D, SoftmaxOutput))


def _is_passthrough(spec) -> bool:
    # layers whose output is just a reshaped / masked copy of the previous one
    return isinstance(spec, (Dropout, Flatten))


def _conv_out(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-size // s)
    return (size - k) // s + 1


def _same_pad(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def infer_shapes(layers: Sequence) -> list[tuple]:
    """Per-sample output shape of every layer, validating the stack."""
    if not layers or not isinstance(layers[0], Input):
        raise InvalidShapeError("a network starts with exactly one Input layer")
    shapes: list[tuple] = []
    for i, spec in enumerate(layers):
        if i > 0 and isinstance(spec, Input):
            raise InvalidShapeError("Input may only appear at position 0")
        if isinstance(spec, SoftmaxOutput) and i != len(layers) - 1:
            raise InvalidShapeError("SoftmaxOutput must be the last layer")
        prev = shapes[-1] if shapes else None
        if isinstance(spec, Input):
            shape = tuple(int(s) for s in spec.shape)
            if not shape or any(s <= 0 for s in shape):
                raise InvalidShapeError(f"bad input shape {spec.shape}")
        elif isinstance(spec, (Dense, SoftmaxOutput)):
            if len(prev) != 1:
                raise InvalidShapeError(f"layer {i} needs flat input, got {prev}; add Flatten")
            n = spec.units if isinstance(spec, Dense) else spec.classes
            if n <= 0:
                raise InvalidShapeError(f"layer {i} has no units")
            shape = (int(n),)
        elif isinstance(spec, Conv2D):
            if len(prev) == 2:
                prev = prev + (1,)
            if len(prev) != 3 or spec.filters <= 0 or spec.kernel <= 0 or spec.stride <= 0:
                raise InvalidShapeError(f"bad conv layer {i} on input {prev}")
            if spec.padding not in ("valid", "same"):
                raise InvalidShapeError(f"padding must be valid or same, got {spec.padding!r}")
            h = _conv_out(prev[0], spec.kernel, spec.stride, spec.padding)
            w = _conv_out(prev[1], spec.kernel, spec.stride, spec.padding)
            if h <= 0 or w <= 0:
                raise InvalidShapeError(f"conv layer {i} shrinks {prev} to nothing")
            shape = (h, w, int(spec.filters))
        elif isinstance(spec, MaxPool):
            if len(prev) == 2:
                prev = prev + (1,)
            if len(prev) != 3 or spec.kernel <= 0 or spec.stride <= 0:
                raise InvalidShapeError(f"bad pool layer {i} on input {prev}")
            h = (prev[0] - spec.kernel) // spec.stride + 1
            w = (prev[1] - spec.kernel) // spec.stride + 1
            if h <= 0 or w <= 0:
                raise InvalidShapeError(f"pool layer {i} shrinks {prev} to nothing")
            shape = (h, w, prev[2])
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(prev)),)
        elif isinstance(spec, Dropout):
            if not 0.0 <= spec.rate < 1.0:
                raise InvalidShapeError(f"dropout rate must lie in [0, 1), got {spec.rate}")
            shape = prev
        else:
            raise InvalidShapeError(f"unknown layer spec {spec!r}")
        shapes.append(shape)
    return shapes


def _param_shapes(spec, in_shape: tuple) -> dict[str, tuple]:
    if isinstance(spec, Dense):
        return {"W": (in_shape[0], spec.units), "b": (spec.units,)}
    if isinstance(spec, SoftmaxOutput):
        return {"W": (in_shape[0], spec.classes), "b": (spec.classes,)}
    if isinstance(spec, Conv2D):
        cin = in_shape[2] if len(in_shape) == 3 else 1
        return {"W": (spec.kernel, spec.kernel, cin, spec.filters), "b": (spec.filters,)}
    return {}


def default_layer_names(layers: Sequence) -> list[str]:
    """Names such as input, conv1, pool1, fc1, dropout2, flatten, softmax."""
    counters: dict[str, int] = {}
    prefix = {"input": "input", "dense": "fc", "conv2d": "conv", "maxpool": "pool",
              "flatten": "flatten", "dropout": "dropout", "softmax": "softmax"}
    names = []
    for spec in layers:
        p = prefix[spec.kind]
        counters[p] = counters.get(p, 0) + 1
        if p in ("input", "softmax"):
            names.append(p)
        elif p == "flatten" and counters[p] == 1:
            names.append("flatten")
        else:
            names.append(f"{p}{counters[p]}")
    return names


def glorot_uniform_init(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Glorot/Xavier uniform draw, limit sqrt(6 / (fan_in + fan_out)).

    Dense kernels (in, out) use their two dims; conv kernels (kh, kw, cin, cout)
    use kh*kw*cin and kh*kw*cout; a 1-D shape uses its length for both fans.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise InvalidShapeError(f"cannot initialize zero-sized shape {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[:-2]))
        fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(real_type)


class Network:
    """Ordered layer specs plus their parameters and a trainable mask.

    params[i] is a dict {"W", "b"} for layers with weights and None otherwise.
    """

    def __init__(self, layers: Sequence, params: list | None = None,
                 trainable: Sequence[bool] | None = None, rng_seed: int = 0,
                 names: Sequence[str] | None = None):
        self.layers = list(layers)
        self.shapes = infer_shapes(self.layers)
        self.rng_seed = int(rng_seed)
        self.names = list(names) if names is not None else default_layer_names(self.layers)
        if len(self.names) != len(self.layers) or len(set(self.names)) != len(self.names):
            raise InvalidInputError("layer names must be unique, one per layer")
        if params is None:
            rng = np.random.default_rng(self.rng_seed)
            params = []
            for i, spec in enumerate(self.layers):
                shp = _param_shapes(spec, self.shapes[i - 1]) if i else {}
                if shp:
                    params.append({"W": glorot_uniform_init(shp["W"], rng),
                                   "b": np.zeros(shp["b"], dtype=real_type)})
                else:
                    params.append(None)
        self.params = params
        self._check_params()
        self.trainable = [True] * len(self.layers) if trainable is None else [bool(t) for t in trainable]
        if len(self.trainable) != len(self.layers):
            raise InvalidInputError("trainable mask length differs from layer count")

    def _check_params(self):
        if len(self.params) != len(self.layers):
            raise InvalidShapeError("one params entry per layer required")
        for i, spec in enumerate(self.layers):
            expect = _param_shapes(spec, self.shapes[i - 1]) if i else {}
            got = self.params[i]
            if not expect:
                if got:
                    raise InvalidShapeError(f"layer {i} ({spec.kind}) takes no parameters")
                continue
            for key, shp in expect.items():
                if got is None or key not in got or tuple(got[key].shape) != shp:
                    raise InvalidShapeError(f"layer {i} param {key} should have shape {shp}")
                got[key] = np.ascontiguousarray(got[key], dtype=real_type)

    @property
    def input_shape(self) -> tuple:
        return self.shapes[0]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def layer_index(self, layer: int | str) -> int:
        """Resolve a layer name or (possibly negative) index."""
        if isinstance(layer, str):
            if layer not in self.names:
                raise InvalidLayerError(f"no layer named {layer!r}; have {self.names}")
            return self.names.index(layer)
        idx = int(layer)
        if idx < 0:
            idx += len(self.layers)
        if not 0 <= idx < len(self.layers):
            raise InvalidLayerError(f"layer index {layer} out of range for {len(self.layers)} layers")
        return idx

    def copy(self) -> "Network":
        params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.params]
        return Network(self.layers, params, self.trainable, self.rng_seed, self.names)

    def frozen_through(self) -> int:
        """Largest index i such that layers 0..i are all frozen, or -1."""
        i = -1
        while i + 1 < len(self.layers) and not self.trainable[i + 1]:
            i += 1
        return i

    def param_count(self) -> int:
        return sum(v.size for p in self.params if p for v in p.values())

    def __repr__(self) -> str:
        body = ", ".join(f"{n}:{s.kind}" for n, s in zip(self.names, self.layers))
        return f"Network([{body}])"


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Per-layer activations from one forward call.

    pre[i] / post[i] are the layer's output before and after its activation
    (identical arrays when there is none).  Entries before ``start`` are None.
    """
    mode: str
    start: int
    pre: list
    post: list
    dropout_masks: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)
    batch: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_nhwc(x: np.ndarray) -> np.ndarray:
    return x[..., None] if x.ndim == 3 else x


def _conv_forward(x: np.ndarray, spec: Conv2D, p: dict, keep: bool):
    x = _as_nhwc(x)
    k, s = spec.kernel, spec.stride
    if spec.padding == "same":
        ph, pw = _same_pad(x.shape[1], k, s), _same_pad(x.shape[2], k, s)
        x = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    b, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)
    z = cols @ p["W"].reshape(k * k * c, -1)
    z += p["b"]
    aux = (cols, x.shape) if keep else None
    return z.reshape(b, ho, wo, -1), aux


def _conv_backward(dz: np.ndarray, spec: Conv2D, p: dict, aux, in_shape: tuple, need_dx: bool):
    cols, padded_shape = aux
    k, s = spec.kernel, spec.stride
    b, ho, wo, f = dz.shape
    dz2 = dz.reshape(-1, f)
    gw = (cols.T @ dz2).reshape(p["W"].shape)
    gb = dz2.sum(axis=0)
    if not need_dx:
        return gw, gb, None
    c = padded_shape[3]
    dxp = np.zeros(padded_shape, dtype=real_type)
    # one small matmul per kernel offset keeps the scatter contiguous
    for i in range(k):
        for j in range(k):
            part = (dz2 @ p["W"][i, j].T).reshape(b, ho, wo, c)
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += part
    if spec.padding == "same":
        h0 = _same_pad(in_shape[0], k, s)[0]
        w0 = _same_pad(in_shape[1], k, s)[0]
        dxp = dxp[:, h0:h0 + in_shape[0], w0:w0 + in_shape[1], :]
    return gw, gb, dxp.reshape((b,) + tuple(in_shape))


def _pool_offsets(x: np.ndarray, spec: MaxPool, ho: int, wo: int):
    k, s = spec.kernel, spec.stride
    for i in range(k):
        for j in range(k):
            yield i, j, x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]


def _pool_forward(x: np.ndarray, spec: MaxPool, keep: bool):
    x = _as_nhwc(x)
    ho = (x.shape[1] - spec.kernel) // spec.stride + 1
    wo = (x.shape[2] - spec.kernel) // spec.stride + 1
    out = None
    for _, _, part in _pool_offsets(x, spec, ho, wo):
        out = part.copy() if out is None else np.maximum(out, part, out=out)
    return out, ((x, out) if keep else None)


def _pool_backward(dy: np.ndarray, spec: MaxPool, aux, in_shape: tuple):
    x, out = aux
    b, ho, wo, c = dy.shape
    dx = np.zeros(x.shape, dtype=real_type)
    taken = np.zeros(out.shape, dtype=bool)
    s = spec.stride
    # route each window's gradient to the first position holding the max
    for i, j, part in _pool_offsets(x, spec, ho, wo):
        hit = (part == out) & ~taken
        taken |= hit
        dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += np.where(hit, dy, 0)
    return dx.reshape((b,) + tuple(in_shape))


def _activate(z: np.ndarray, activation: str | None) -> np.ndarray:
    if activation is None:
        return z
    if activation == "relu":
        return np.maximum(z, 0)
    raise InvalidInputError(f"unsupported activation {activation!r}")


def _run(net: Network, batch: np.ndarray, mode: str, rng: np.random.Generator | None,
         start: int = 0, stop: int | None = None) -> ForwardTrace:
    if mode not in ("train", "infer"):
        raise InvalidInputError(f"mode must be train or infer, got {mode!r}")
    n = len(net.layers)
    stop = n - 1 if stop is None else stop
    x = np.asarray(batch, dtype=real_type)
    expect = net.shapes[start - 1] if start > 0 else net.shapes[0]
    if x.ndim < 1 or tuple(x.shape[1:]) != tuple(expect):
        raise InvalidInputError(f"batch shape {x.shape} does not match per-sample shape {expect}")
    keep = mode == "train"
    tr = ForwardTrace(mode, start, [None] * n, [None] * n, batch=x)
    for i in range(start, stop + 1):
        spec, p = net.layers[i], net.params[i]
        if isinstance(spec, Input):
            z = y = x
        elif isinstance(spec, Dense):
            z = x.reshape(len(x), -1) @ p["W"]
            z += p["b"]
            y = _activate(z, spec.activation)
        elif isinstance(spec, SoftmaxOutput):
            z = x @ p["W"]
            z += p["b"]
            y = _softmax(z)
        elif isinstance(spec, Conv2D):
            z, aux = _conv_forward(x, spec, p, keep)
            if keep:
                tr.aux[i] = aux
            y = _activate(z, spec.activation)
        elif isinstance(spec, MaxPool):
            z, aux = _pool_forward(x, spec, keep)
            if keep:
                tr.aux[i] = aux
            y = z
        elif isinstance(spec, Flatten):
            z = y = x.reshape(len(x), -1)
        elif isinstance(spec, Dropout):
            if mode == "train" and spec.rate > 0:
                if rng is None:
                    raise InvalidInputError("train-mode forward with dropout needs an rng")
                keep_p = real_type(1.0 - spec.rate)
                mask = (rng.random(x.shape, dtype=real_type) < keep_p).astype(real_type)
                mask /= keep_p
            else:
                mask = np.ones_like(x)
            tr.dropout_masks[i] = mask
            z = y = x * mask
        else:  # pragma: no cover - infer_shapes rejects unknown specs
            raise InvalidInputError(f"unknown layer {spec!r}")
        tr.pre[i], tr.post[i] = z, y
        x = y
    last = tr.post[stop]
    if not np.isfinite(last).all():
        raise NonFiniteError(f"non-finite activation at layer {stop} ({net.names[stop]})")
    return tr


def forward(net: Network, batch: np.ndarray, mode: str = "infer",
            rng: np.random.Generator | None = None, start: int = 0) -> tuple[np.ndarray, ForwardTrace]:
    """Run the whole network.

    Returns the softmax probabilities, shape (batch, classes), and the trace.
    The raw logits are ``trace.pre[-1]``.  With ``start > 0`` the batch is taken
    as the output of layer ``start - 1``.
    """
    tr = _run(net, batch, mode, rng, start)
    return tr.post[-1], tr


@dataclass
class Gradients:
    loss: float
    grads: list  # per layer: dict like params, or None


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(-np.mean(np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP)), axis=1)))


def backward(net: Network, trace: ForwardTrace, targets: np.ndarray) -> Gradients:
    """Mean cross-entropy gradients for every layer with parameters.

    Frozen layers receive zero arrays; propagation stops at the lowest
    trainable layer.
    """
    if trace.mode != "train":
        raise InvalidInputError("backward needs a train-mode trace")
    probs = trace.post[-1]
    if probs is None:
        raise InvalidInputError("trace does not reach the output layer")
    targets = np.asarray(targets, dtype=real_type)
    if targets.shape != probs.shape:
        raise InvalidInputError(f"targets shape {targets.shape} != output shape {probs.shape}")
    loss = cross_entropy(probs, targets)
    n = len(net.layers)
    grads: list = [None] * n
    for i, p in enumerate(net.params):
        if p is not None and (i < trace.start or not net.trainable[i]):
            grads[i] = {k: np.zeros_like(v) for k, v in p.items()}
    lowest = next((i for i in range(trace.start, n) if net.params[i] is not None and net.trainable[i]), None)
    if lowest is None:
        return Gradients(loss, grads)
    g = (probs - targets) / real_type(len(probs))
    for i in range(n - 1, lowest - 1, -1):
        spec, p = net.layers[i], net.params[i]
        x = trace.post[i - 1] if i > trace.start else trace.batch
        in_shape = net.shapes[i - 1]
        need_dx = i > lowest
        if isinstance(spec, SoftmaxOutput) or isinstance(spec, Dense):
            dz = g if isinstance(spec, SoftmaxOutput) or spec.activation is None else g * (trace.pre[i] > 0)
            x2 = x.reshape(len(x), -1)
            if net.trainable[i]:
                grads[i] = {"W": x2.T @ dz, "b": dz.sum(axis=0)}
            g = (dz @ p["W"].T).reshape((len(dz),) + tuple(in_shape)) if need_dx else None
        elif isinstance(spec, Conv2D):
            dz = g if spec.activation is None else g * (trace.pre[i] > 0)
            gw, gb, g = _conv_backward(dz, spec, p, trace.aux[i], in_shape, need_dx)
            if net.trainable[i]:
                grads[i] = {"W": gw, "b": gb}
        elif isinstance(spec, MaxPool):
            g = _pool_backward(g, spec, trace.aux[i], in_shape)
        elif isinstance(spec, Flatten):
            g = g.reshape((len(g),) + tuple(in_shape))
        elif isinstance(spec, Dropout):
            g = g * trace.dropout_masks[i]
        if g is None:
            break
    for i, gd in enumerate(grads):
        if gd is not None and net.trainable[i]:
            for v in gd.values():
                # a sum is non-finite whenever any term is, without a mask pass
                if not np.isfinite(v.sum()):
                    raise NonFiniteError(f"non-finite gradient at layer {i} ({net.names[i]})")
    return Gradients(loss, grads)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class SGD:
    lr: float = 0.01
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict, repr=False)

    def step(self, net: Network, grads: Gradients) -> None:
        for i, gd in _trainable_grads(net, grads):
            for key, g in gd.items():
                w = net.params[i][key]
                if self.momentum:
                    if (i, key) not in self.velocity:
                        self.velocity[(i, key)] = np.zeros_like(w)
                    v = self.velocity[(i, key)]
                    v *= real_type(self.momentum)
                    v -= real_type(self.lr) * g
                    w += v
                else:
                    w -= real_type(self.lr) * g


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def step(self, net: Network, grads: Gradients) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        # fold the bias corrections into the step size and epsilon
        lr_t = self.lr * np.sqrt(c2) / c1
        eps_t = self.eps * np.sqrt(c2)
        for i, gd in _trainable_grads(net, grads):
            for key, g in gd.items():
                w = net.params[i][key]
                if (i, key) not in self.m:
                    self.m[(i, key)] = np.zeros_like(w)
                    self.v[(i, key)] = np.zeros_like(w)
                m, v = self.m[(i, key)], self.v[(i, key)]
                if not (w.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
                    raise InvalidShapeError(f"layer {i}/{key}: parameters must be C-contiguous")
                f = w.dtype.type
                tiny = np.finfo(w.dtype).tiny
                _adam_update(w.reshape(-1), np.ascontiguousarray(g, dtype=w.dtype).reshape(-1),
                             m.reshape(-1), v.reshape(-1), f(1 - b1), f(1 - b2), f(lr_t), f(eps_t),
                             f(tiny), f(np.sqrt(tiny)))


@numba.njit(cache=True)
def _adam_update(w, g, m, v, c1, c2, lr_t, eps_t, tiny, sqrt_tiny):
    """One fused pass over a parameter; the numpy version is memory-bound.

    Moments of rarely used weights decay into subnormal floats, which run
    tens of times slower on x86, so gradients under sqrt(tiny) and moments
    under tiny are flushed to zero.  Both sit far below eps.
    """
    zero = tiny - tiny  # a literal 0.0 would widen float32 loops to float64
    for k in range(w.size):
        gk = g[k]
        if abs(gk) < sqrt_tiny:
            gk = zero
        mk = m[k] + c1 * (gk - m[k])
        vk = v[k] + c2 * (gk * gk - v[k])
        if abs(mk) < tiny:
            mk = zero
        if vk < tiny:
            vk = zero
        m[k] = mk
        v[k] = vk
        w[k] -= lr_t * mk / (np.sqrt(vk) + eps_t)


Optimizer = SGD | Adam


def _trainable_grads(net: Network, grads: Gradients):
    if len(grads.grads) != len(net.layers):
        raise InvalidShapeError("gradient list does not match the network")
    for i, gd in enumerate(grads.grads):
        if gd is None or not net.trainable[i]:
            continue
        for key, g in gd.items():
            if g.shape != net.params[i][key].shape:
                raise InvalidShapeError(f"gradient shape {g.shape} != param shape at layer {i}/{key}")
        yield i, gd


def step(net: Network, grads: Gradients, opt: Optimizer) -> tuple[Network, Optimizer]:
    """Apply one optimizer update in place; frozen layers are skipped."""
    opt.step(net, grads)
    return net, opt


def make_optimizer(kind: str = "adam", **kwargs) -> Optimizer:
    if kind == "adam":
        return Adam(**kwargs)
    if kind == "sgd":
        return SGD(**kwargs)
    raise InvalidInputError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# training and inference helpers
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidInputError(f"labels outside 0..{classes - 1}")
    out = np.zeros((len(labels), classes), dtype=real_type)
    out[np.arange(len(labels)), labels] = 1
    return out


def train_epochs(net: Network, x: np.ndarray, y: np.ndarray, epochs: int, minibatch: int,
                 opt: Optimizer, rng: np.random.Generator, start: int = 0) -> list[float]:
    """Minibatch training in place.  Returns the mean loss of each epoch.

    ``y`` holds integer labels.  Data are reshuffled every epoch from ``rng``.
    ``start`` lets callers feed activations of layer ``start - 1`` directly.
    """
    if epochs < 1:
        raise InvalidInputError("epochs must be >= 1")
    if minibatch < 1:
        raise InvalidInputError("minibatch must be >= 1")
    x = np.asarray(x, dtype=real_type)
    y = np.asarray(y)
    if len(x) == 0:
        raise InvalidInputError("cannot train on an empty data set")
    if len(x) != len(y):
        raise InvalidInputError("inputs and labels differ in length")
    targets = one_hot(y, net.num_classes)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(x), minibatch):
            idx = order[lo:lo + minibatch]
            _, tr = forward(net, x[idx], "train", rng, start=start)
            gr = backward(net, tr, targets[idx])
            opt.step(net, gr)
            total += gr.loss * len(idx)
        history.append(total / len(x))
    return history


def predict_proba(net: Network, x: np.ndarray, batch_size: int = 512, start: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=real_type)
    if len(x) == 0:
        return np.zeros((0, net.num_classes), dtype=real_type)
    return np.concatenate([forward(net, x[lo:lo + batch_size], "infer", start=start)[0]
                           for lo in range(0, len(x), batch_size)])


def predict(net: Network, x: np.ndarray, batch_size: int = 512, start: int = 0) -> np.ndarray:
    """Class predictions; ties go to the lowest index."""
    return predict_proba(net, x, batch_size, start).argmax(axis=1)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(net, x) == np.asarray(y)))


def resolve_tap(net: Network, layer: int | str) -> int:
    """Map Dropout/Flatten indices to the layer that actually produces the data."""
    idx = net.layer_index(layer)
    while idx > 0 and _is_passthrough(net.layers[idx]):
        idx -= 1
    return idx


def tap_from_trace(net: Network, trace: ForwardTrace, layer: int | str, point: str) -> np.ndarray:
    """Flattened engagement output of ``layer`` read from an infer/train trace.

    The pre-activation tap of a MaxPool layer pools the pre-activation of the
    layer feeding it; since max commutes with ReLU the post tap is unchanged.
    """
    point = _TAP_ALIASES.get(point)
    if point is None:
        raise InvalidInputError("tap point must be pre_activation or post_activation")
    idx = resolve_tap(net, layer)
    if point == PRE and isinstance(net.layers[idx], MaxPool):
        src = resolve_tap(net, idx - 1)
        out = _pool_forward(trace.pre[src], net.layers[idx], False)[0]
    else:
        out = (trace.pre if point == PRE else trace.post)[idx]
    if out is None:
        raise InvalidLayerError(f"trace has no data for layer {idx}")
    return out.reshape(len(out), -1)


def activation_at(net: Network, layer_index: int | str, batch: np.ndarray,
                  point: str = POST, batch_size: int = 512) -> np.ndarray:
    """Engagement-layer output at the requested tap, shape (batch, features)."""
    idx = resolve_tap(net, layer_index)
    x = np.asarray(batch, dtype=real_type)
    parts = []
    for lo in range(0, max(len(x), 1), batch_size):
        tr = _run(net, x[lo:lo + batch_size], "infer", None, stop=idx)
        parts.append(tap_from_trace(net, tr, idx, point))
    return np.concatenate(parts)


def freeze_prefix(net: Network, through_layer: int | str) -> Network:
    """Mark layers 0..through_layer frozen and the rest trainable (in place)."""
    idx = net.layer_index(through_layer)
    net.trainable = [i > idx for i in range(len(net.layers))]
    return net


def detect_stagnation(loss_history: Sequence[float], window: int, tol: float) -> bool:
    """True when the last ``window`` losses span less than ``tol``."""
    if window < 2:
        raise InvalidInputError("window must be >= 2")
    if len(loss_history) < window:
        return False
    tail = np.asarray(loss_history[-window:], dtype=np.float64)
    return bool(tail.max() - tail.min() < tol)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NNPK"
CHECKPOINT_VERSION = 1


class CheckpointError(NNCoreError, ValueError):
    """Checkpoint file is malformed or of an unsupported version."""


def save_network(net: Network, path: str | Path) -> None:
    """Write ``net`` as an NNPK container.

    Layout (little-endian): magic, u32 version, u64 rng seed, u32 layer count,
    then per layer a u32-length-prefixed JSON record {spec, name, trainable},
    then every parameter as raw f32 in layer order (W before b).
    """
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<IQI", CHECKPOINT_VERSION, net.rng_seed & (2**64 - 1), len(net.layers))
    for spec, name, tr in zip(net.layers, net.names, net.trainable):
        rec = json.dumps({"spec": spec_to_dict(spec), "name": name, "trainable": tr},
                         sort_keys=True, separators=(",", ":")).encode()
        buf += struct.pack("<I", len(rec)) + rec
    for p in net.params:
        if p is not None:
            for key in ("W", "b"):
                buf += p[key].astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_network(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an NNPK checkpoint")
    try:
        version, seed, count = struct.unpack_from("<IQI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 4 + struct.calcsize("<IQI")
        layers, names, trainable = [], [], []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, off)
            rec = json.loads(data[off + 4:off + 4 + ln])
            off += 4 + ln
            layers.append(spec_from_dict(rec["spec"]))
            names.append(rec["name"])
            trainable.append(rec["trainable"])
        shapes = infer_shapes(layers)
        params = []
        for i, spec in enumerate(layers):
            shp = _param_shapes(spec, shapes[i - 1]) if i else {}
            if not shp:
                params.append(None)
                continue
            entry = {}
            for key in ("W", "b"):
                size = int(np.prod(shp[key]))
                if off + 4 * size > len(data):
                    raise CheckpointError(f"{path}: truncated parameter data")
                entry[key] = np.frombuffer(data, "<f4", size, off).astype(real_type).reshape(shp[key])
                off += 4 * size
            params.append(entry)
        if off != len(data):
            raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return Network(layers, params, trainable, seed, names)


def strip_dropout(net: Network) -> Network:
    """Copy of ``net`` without Dropout layers (same parameters)."""
    keep = [i for i, s in enumerate(net.layers) if not isinstance(s, Dropout)]
    return Network([net.layers[i] for i in keep],
                   [None if net.params[i] is None else {k: v.copy() for k, v in net.params[i].items()}
                    for i in keep],
                   [net.trainable[i] for i in keep], net.rng_seed, [net.names[i] for i in keep])

