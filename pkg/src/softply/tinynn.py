"""Minimal deterministic CNN engine for the depth-to-state regressor.

Tensors are plain numpy arrays (float32 by default; float64 supported for
finite-difference verification).  The layer set is fixed: convolution,
ReLU, 2x2 max-pooling, flatten, dense, and concatenative skip blocks (the
dense-connectivity analog).  Gradients are hand-derived per layer and
checked against central finite differences.

Model files: magic ``SPLYNN01``, u32 version, u32 header length, JSON header
(architecture + metadata), u64 parameter count, little-endian float32 blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

MAGIC = b"SPLYNN01"
FORMAT_VERSION = 1


class TinynnError(ValueError):
    """Raised for shape mismatches, bad specs, or corrupt model files."""


# -- layer specs -------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_ch: int
    out_ch: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class MaxPoolSpec:
    size: int = 2


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class DenseSpec:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ConcatSkipSpec:
    """Channel-concatenation of the input with a sub-block's output."""

    block: tuple


LayerSpec = Union[ConvSpec, ReluSpec, MaxPoolSpec, FlattenSpec, DenseSpec,
                  ConcatSkipSpec]


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    input_shape: tuple            # (channels, height, width) or (features,)

    def output_shape(self) -> tuple:
        shape = self.input_shape
        for spec in self.layers:
            shape = _out_shape(spec, shape)
        return shape

    def output_dim(self) -> int:
        shape = self.output_shape()
        if len(shape) != 1:
            raise TinynnError(f"network output is {shape}, expected a flat vector")
        return shape[0]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.kind != "adam":
            raise TinynnError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise TinynnError("lr must be positive")


def _out_shape(spec: LayerSpec, shape: tuple) -> tuple:
    if isinstance(spec, ConvSpec):
        if len(shape) != 3 or shape[0] != spec.in_ch:
            raise TinynnError(f"conv expects ({spec.in_ch}, H, W), got {shape}")
        h = (shape[1] + 2 * spec.pad - spec.kernel) // spec.stride + 1
        w = (shape[2] + 2 * spec.pad - spec.kernel) // spec.stride + 1
        if h < 1 or w < 1:
            raise TinynnError(f"conv output collapses: {shape} -> ({h}, {w})")
        return (spec.out_ch, h, w)
    if isinstance(spec, ReluSpec):
        return shape
    if isinstance(spec, MaxPoolSpec):
        if len(shape) != 3 or shape[1] % spec.size or shape[2] % spec.size:
            raise TinynnError(f"maxpool{spec.size} needs divisible H, W; got {shape}")
        return (shape[0], shape[1] // spec.size, shape[2] // spec.size)
    if isinstance(spec, FlattenSpec):
        return (int(np.prod(shape)),)
    if isinstance(spec, DenseSpec):
        if shape != (spec.n_in,):
            raise TinynnError(f"dense expects ({spec.n_in},), got {shape}")
        return (spec.n_out,)
    if isinstance(spec, ConcatSkipSpec):
        if len(shape) != 3:
            raise TinynnError("concat-skip operates on (C, H, W) tensors")
        inner = shape
        for sub in spec.block:
            inner = _out_shape(sub, inner)
        if inner[1:] != shape[1:]:
            raise TinynnError(
                f"concat-skip block must preserve spatial dims: {shape} vs {inner}")
        return (shape[0] + inner[0], shape[1], shape[2])
    raise TinynnError(f"unknown layer spec {spec!r}")


# -- layers ------------------------------------------------------------------

class _Conv:
    def __init__(self, spec: ConvSpec):
        self.spec = spec
        self.w = None                 # (out_ch, in_ch * k * k)
        self.b = None                 # (out_ch,)

    def init(self, rng: np.random.Generator, dtype) -> None:
        s = self.spec
        fan_in = s.in_ch * s.kernel * s.kernel
        bound = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-bound, bound, (s.out_ch, fan_in)).astype(dtype)
        self.b = np.zeros(s.out_ch, dtype=dtype)

    def params(self):
        return (("w", self.w), ("b", self.b))

    def set_param(self, name, value):
        setattr(self, name, value)

    def forward(self, x):
        s = self.spec
        col, out_h, out_w = _im2col(x, s.kernel, s.stride, s.pad)
        y = col @ self.w.T + self.b
        n = x.shape[0]
        y = y.reshape(n, out_h, out_w, s.out_ch).transpose(0, 3, 1, 2)
        return y, (x.shape, col)

    def backward(self, dy, cache):
        s = self.spec
        x_shape, col = cache
        n, _, out_h, out_w = dy.shape
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, s.out_ch)
        dw = dy_mat.T @ col
        db = dy_mat.sum(axis=0)
        dcol = dy_mat @ self.w
        dx = _col2im(dcol, x_shape, s.kernel, s.stride, s.pad, out_h, out_w)
        return dx, {"w": dw, "b": db}


class _Relu:
    def __init__(self, spec: ReluSpec):
        self.spec = spec

    def init(self, rng, dtype):
        pass

    def params(self):
        return ()

    def forward(self, x):
        return np.maximum(x, 0), (x > 0)

    def backward(self, dy, cache):
        return dy * cache, {}


class _MaxPool:
    def __init__(self, spec: MaxPoolSpec):
        self.spec = spec

    def init(self, rng, dtype):
        pass

    def params(self):
        return ()

    def forward(self, x):
        k = self.spec.size
        n, c, h, w = x.shape
        view = x.reshape(n, c, h // k, k, w // k, k)
        windows = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        arg = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        k = self.spec.size
        x_shape, arg = cache
        n, c, h, w = x_shape
        dwin = np.zeros((n, c, h // k, w // k, k * k), dtype=dy.dtype)
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(x_shape), {}


class _Flatten:
    def __init__(self, spec: FlattenSpec):
        self.spec = spec

    def init(self, rng, dtype):
        pass

    def params(self):
        return ()

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class _Dense:
    def __init__(self, spec: DenseSpec):
        self.spec = spec
        self.w = None                 # (n_out, n_in)
        self.b = None

    def init(self, rng, dtype):
        bound = np.sqrt(6.0 / self.spec.n_in)
        self.w = rng.uniform(-bound, bound,
                             (self.spec.n_out, self.spec.n_in)).astype(dtype)
        self.b = np.zeros(self.spec.n_out, dtype=dtype)

    def params(self):
        return (("w", self.w), ("b", self.b))

    def set_param(self, name, value):
        setattr(self, name, value)

    def forward(self, x):
        return x @ self.w.T + self.b, x

    def backward(self, dy, cache):
        dw = dy.T @ cache
        db = dy.sum(axis=0)
        dx = dy @ self.w
        return dx, {"w": dw, "b": db}


class _ConcatSkip:
    def __init__(self, spec: ConcatSkipSpec):
        self.spec = spec
        self.block = [_make_layer(s) for s in spec.block]

    def init(self, rng, dtype):
        for layer in self.block:
            layer.init(rng, dtype)

    def params(self):
        return ()

    def forward(self, x):
        h = x
        caches = []
        for layer in self.block:
            h, c = layer.forward(h)
            caches.append(c)
        return np.concatenate([x, h], axis=1), (x.shape[1], caches)

    def backward(self, dy, cache):
        c_in, caches = cache
        dx = dy[:, :c_in].copy()
        dh = dy[:, c_in:]
        block_grads = [{} for _ in self.block]
        for i in range(len(self.block) - 1, -1, -1):
            dh, block_grads[i] = self.block[i].backward(dh, caches[i])
        dx += dh
        return dx, {"block": block_grads}


_LAYER_CLASSES = {
    ConvSpec: _Conv,
    ReluSpec: _Relu,
    MaxPoolSpec: _MaxPool,
    FlattenSpec: _Flatten,
    DenseSpec: _Dense,
    ConcatSkipSpec: _ConcatSkip,
}


def _make_layer(spec: LayerSpec):
    try:
        return _LAYER_CLASSES[type(spec)](spec)
    except KeyError:
        raise TinynnError(f"unknown layer spec {spec!r}") from None


# -- model -------------------------------------------------------------------

class NetModel:
    """A network instance: spec, parameter tensors, Adam state, metadata."""

    def __init__(self, spec: NetSpec, dtype=np.float32, meta: Optional[dict] = None):
        spec.output_shape()           # validates shape propagation
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers = [_make_layer(s) for s in spec.layers]
        self.meta = dict(meta or {})
        self.opt_state: dict = {}

    def named_params(self) -> Iterator[tuple[str, object, str, np.ndarray]]:
        """Yields (path, owner, name, array) in a fixed deterministic order."""
        def walk(layers, prefix):
            for i, layer in enumerate(layers):
                for name, arr in layer.params():
                    yield (f"{prefix}{i}.{name}", layer, name, arr)
                if isinstance(layer, _ConcatSkip):
                    yield from walk(layer.block, f"{prefix}{i}.block.")
        yield from walk(self.layers, "")

    def param_count(self) -> int:
        return sum(arr.size for _, _, _, arr in self.named_params())

    def predict(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def init_params(spec: NetSpec, seed: int, dtype=np.float32,
                meta: Optional[dict] = None) -> NetModel:
    """Fresh model with He-style fan-in uniform weights and zero biases."""
    model = NetModel(spec, dtype=dtype, meta=meta)
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        layer.init(rng, model.dtype)
    return model


def forward(model: NetModel, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the network; returns (output, caches) for use by `backward`.

    Accepts a single input shaped like spec.input_shape or a batch with a
    leading batch axis; the output drops the batch axis for single inputs.
    """
    x = np.asarray(x, dtype=model.dtype)
    single = x.shape == tuple(model.spec.input_shape)
    if single:
        x = x[None]
    if x.shape[1:] != tuple(model.spec.input_shape):
        raise TinynnError(
            f"input shape {x.shape[1:]} does not match spec "
            f"{model.spec.input_shape}")
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return (x[0] if single else x), caches


def backward(model: NetModel, caches: list, loss_grad: np.ndarray) -> list[dict]:
    """Exact reverse-mode gradients; returns one grad dict per layer."""
    if not caches or len(caches) != len(model.layers):
        raise TinynnError("forward cache missing or stale")
    dy = np.asarray(loss_grad, dtype=model.dtype)
    if dy.ndim == 1:
        dy = dy[None]
    grads: list[dict] = [{} for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        dy, g = model.layers[i].backward(dy, caches[i])
        grads[i] = g
    return grads


def mse_loss(pred: np.ndarray, target: np.ndarray,
             weights: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """Weighted mean squared error over output axes (and batch, if present).

    L = mean_i w_i (pred_i − target_i)²; the returned gradient is dL/dpred.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise TinynnError(f"pred {pred.shape} vs target {target.shape}")
    if weights is None:
        weights = np.ones(pred.shape[-1], dtype=pred.dtype)
    weights = np.asarray(weights, dtype=pred.dtype)
    diff = pred - target
    n = diff.size
    loss = float((weights * diff * diff).sum() / n)
    grad = (2.0 / n) * weights * diff
    return loss, grad


def adam_step(model: NetModel, grads: list[dict], opt: OptimizerSpec,
              t: int) -> None:
    """Standard bias-corrected Adam update, in place, step index t >= 1."""
    if t < 1:
        raise TinynnError("adam step index starts at 1")
    b1, b2 = opt.beta1, opt.beta2
    layer_grads = dict(_flatten_grads(model, grads))
    for path, layer, name, arr in model.named_params():
        g = layer_grads.get(path)
        if g is None:
            raise TinynnError(f"missing gradient for {path}")
        state = model.opt_state.setdefault(
            path, (np.zeros_like(arr), np.zeros_like(arr)))
        m, v = state
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        model.opt_state[path] = (m, v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        layer.set_param(name, (arr - opt.lr * m_hat /
                               (np.sqrt(v_hat) + opt.eps)).astype(arr.dtype))


def _flatten_grads(model: NetModel, grads: list[dict]):
    def walk(layers, grad_list, prefix):
        for i, (layer, g) in enumerate(zip(layers, grad_list)):
            if isinstance(layer, _ConcatSkip):
                yield from walk(layer.block, g["block"], f"{prefix}{i}.block.")
            else:
                for name in g:
                    yield (f"{prefix}{i}.{name}", g[name])
    yield from walk(model.layers, grads, "")


# -- presets -----------------------------------------------------------------

def preset_spec(name: str, input_size: int = 64) -> NetSpec:
    """Named architectures; input is a single-channel square depth map."""
    if input_size % 8:
        raise TinynnError("input_size must be divisible by 8")
    tail = input_size // 8
    if name == "conv-small":
        layers = (
            ConvSpec(3, 1, 8, 1, 1), ReluSpec(), MaxPoolSpec(2),
            ConvSpec(3, 8, 16, 1, 1), ReluSpec(), MaxPoolSpec(2),
            ConvSpec(3, 16, 32, 1, 1), ReluSpec(), MaxPoolSpec(2),
            FlattenSpec(), DenseSpec(32 * tail * tail, 64), ReluSpec(),
            DenseSpec(64, 5),
        )
    elif name == "conv-dense":
        layers = (
            ConvSpec(3, 1, 8, 1, 1), ReluSpec(), MaxPoolSpec(2),
            ConcatSkipSpec((ConvSpec(3, 8, 16, 1, 1), ReluSpec())),
            MaxPoolSpec(2),
            ConcatSkipSpec((ConvSpec(3, 24, 32, 1, 1), ReluSpec())),
            MaxPoolSpec(2),
            FlattenSpec(), DenseSpec(56 * tail * tail, 64), ReluSpec(),
            DenseSpec(64, 5),
        )
    else:
        raise TinynnError(f"unknown architecture preset {name!r}")
    return NetSpec(layers, (1, input_size, input_size))


# -- serialization -----------------------------------------------------------

_SPEC_TAGS = {
    ConvSpec: "conv", ReluSpec: "relu", MaxPoolSpec: "maxpool",
    FlattenSpec: "flatten", DenseSpec: "dense", ConcatSkipSpec: "concat_skip",
}


def _spec_to_obj(spec: LayerSpec):
    tag = _SPEC_TAGS[type(spec)]
    if isinstance(spec, ConcatSkipSpec):
        return {"type": tag, "block": [_spec_to_obj(s) for s in spec.block]}
    obj = {"type": tag}
    obj.update(spec.__dict__)
    return obj


def _spec_from_obj(obj) -> LayerSpec:
    kind = obj.get("type")
    if kind == "conv":
        return ConvSpec(obj["kernel"], obj["in_ch"], obj["out_ch"],
                        obj["stride"], obj["pad"])
    if kind == "relu":
        return ReluSpec()
    if kind == "maxpool":
        return MaxPoolSpec(obj["size"])
    if kind == "flatten":
        return FlattenSpec()
    if kind == "dense":
        return DenseSpec(obj["n_in"], obj["n_out"])
    if kind == "concat_skip":
        return ConcatSkipSpec(tuple(_spec_from_obj(s) for s in obj["block"]))
    raise TinynnError(f"unknown layer type {kind!r} in model file")


def save_model(model: NetModel, path) -> None:
    header = json.dumps({
        "layers": [_spec_to_obj(s) for s in model.spec.layers],
        "input_shape": list(model.spec.input_shape),
        "meta": model.meta,
    }).encode("utf-8")
    blob = np.concatenate(
        [arr.astype("<f4").ravel() for _, _, _, arr in model.named_params()])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", blob.size))
        fh.write(blob.tobytes())


def load_model(path) -> NetModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise TinynnError(f"{path}: not a model file (bad magic)")
    off = len(MAGIC)
    version, header_len = struct.unpack_from("<II", data, off)
    off += 8
    if version != FORMAT_VERSION:
        raise TinynnError(f"{path}: unsupported model version {version}")
    if off + header_len + 8 > len(data):
        raise TinynnError(f"{path}: truncated header")
    header = json.loads(data[off:off + header_len].decode("utf-8"))
    off += header_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    avail = len(data) - off
    if avail != count * 4:
        raise TinynnError(
            f"{path}: parameter blob is {avail} bytes, header says {count * 4}")
    blob = np.frombuffer(data, dtype="<f4", count=count, offset=off)

    spec = NetSpec(tuple(_spec_from_obj(o) for o in header["layers"]),
                   tuple(header["input_shape"]))
    model = NetModel(spec, dtype=np.float32, meta=header.get("meta", {}))
    pos = 0
    for _, layer, name, arr_ref in model.named_params():
        shape = _param_shape(layer, name)
        size = int(np.prod(shape))
        if pos + size > blob.size:
            raise TinynnError(f"{path}: parameter blob ends early at {pos + size}")
        layer.set_param(name, blob[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != blob.size:
        raise TinynnError(f"{path}: {blob.size - pos} trailing parameter values")
    return model


def _param_shape(layer, name):
    if isinstance(layer, _Conv):
        s = layer.spec
        return ((s.out_ch, s.in_ch * s.kernel * s.kernel) if name == "w"
                else (s.out_ch,))
    if isinstance(layer, _Dense):
        return ((layer.spec.n_out, layer.spec.n_in) if name == "w"
                else (layer.spec.n_out,))
    raise TinynnError(f"layer {layer} has no parameter {name!r}")


# -- finite-difference verification -------------------------------------------

def finite_difference_check(model: NetModel, x: np.ndarray, target: np.ndarray,
                            eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-FD parameter gradients.

    Per parameter tensor the error is ‖g_fd − g_an‖∞ normalized by the larger
    of the two gradient magnitudes (floored at 1e-8).  Run on float64 models;
    float32 cannot separate FD truncation from rounding at eps = 1e-3.
    """
    out, caches = forward(model, x)
    _, grad = mse_loss(out, target)
    grads = backward(model, caches, grad)
    analytic = dict(_flatten_grads(model, grads))

    worst = 0.0
    for path, layer, name, arr in model.named_params():
        an = np.asarray(analytic[path], dtype=np.float64)
        fd = np.zeros_like(an)
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = mse_loss(forward(model, x)[0], target)
            flat[i] = orig - eps
            lm, _ = mse_loss(forward(model, x)[0], target)
            flat[i] = orig
            fd.ravel()[i] = (lp - lm) / (2 * eps)
        scale = max(np.abs(fd).max(), np.abs(an).max(), 1e-8)
        err = np.abs(fd - an).max() / scale
        worst = max(worst, err)
    return worst


def input_gradient_check(model: NetModel, x: np.ndarray, target: np.ndarray,
                         eps: float = 1e-3) -> float:
    """Central-FD check of dL/dinput (covers parameterless layers)."""
    out, caches = forward(model, x)
    _, grad = mse_loss(out, target)
    model_layers_dy = grad[None] if grad.ndim == 1 else grad
    dy = np.asarray(model_layers_dy, dtype=model.dtype)
    for i in range(len(model.layers) - 1, -1, -1):
        dy, _ = model.layers[i].backward(dy, caches[i])
    an = dy[0] if x.shape == tuple(model.spec.input_shape) else dy

    x_work = np.asarray(x, dtype=np.float64).copy()
    fd = np.zeros_like(x_work)
    flat = x_work.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp, _ = mse_loss(forward(model, x_work)[0], target)
        flat[i] = orig - eps
        lm, _ = mse_loss(forward(model, x_work)[0], target)
        flat[i] = orig
        fd.ravel()[i] = (lp - lm) / (2 * eps)
    scale = max(np.abs(fd).max(), np.abs(np.asarray(an, dtype=np.float64)).max(), 1e-8)
    return float(np.abs(fd - np.asarray(an, dtype=np.float64)).max() / scale)


def gradcheck_suite(eps: float = 1e-3, instances: int = 20,
                    seed: int = 0) -> dict[str, float]:
    """Per-layer central-FD gradient verification on random small instances.

    Returns the worst relative error per layer kind.  Models are float64;
    instances whose ReLU pre-activations or max-pool windows sit within a few
    eps of a kink are regenerated (the loss is non-smooth there and finite
    differences would measure the wrong one-sided slope).
    """
    harnesses = {
        "dense": lambda: (NetSpec((DenseSpec(12, 5),), (12,)), False),
        "conv": lambda: (NetSpec((ConvSpec(3, 2, 3, 1, 0), FlattenSpec()),
                                 (2, 6, 6)), False),
        "conv_stride2_pad1": lambda: (
            NetSpec((ConvSpec(3, 2, 3, 2, 1), FlattenSpec()), (2, 6, 6)), False),
        "relu": lambda: (NetSpec((ReluSpec(),), (10,)), True),
        "maxpool": lambda: (NetSpec((MaxPoolSpec(2), FlattenSpec()), (2, 6, 6)), True),
        "concat_skip": lambda: (
            NetSpec((ConcatSkipSpec((ConvSpec(3, 2, 2, 1, 1), ReluSpec())),
                     FlattenSpec()), (2, 4, 4)), False),
        "composite": lambda: (
            NetSpec((ConvSpec(3, 1, 2, 1, 1), ReluSpec(), MaxPoolSpec(2),
                     ConvSpec(3, 2, 3, 1, 1), ReluSpec(), MaxPoolSpec(2),
                     FlattenSpec(), DenseSpec(3 * 2 * 2, 6), ReluSpec(),
                     DenseSpec(6, 5)), (1, 8, 8)), False),
    }

    results: dict[str, float] = {}
    for idx, (name, build) in enumerate(harnesses.items()):
        spec, input_only = build()
        worst = 0.0
        for inst in range(instances):
            model, x = _smooth_instance(spec, seed * 7919 + idx * 131 + inst, eps)
            target = np.random.default_rng(seed * 31 + inst).normal(
                size=spec.output_dim())
            if input_only:
                err = input_gradient_check(model, x, target, eps)
            else:
                err = max(finite_difference_check(model, x, target, eps),
                          input_gradient_check(model, x, target, eps))
            worst = max(worst, err)
        results[name] = worst

    worst = 0.0
    for inst in range(instances):
        rng = np.random.default_rng(9000 + inst)
        pred = rng.normal(size=5)
        target = rng.normal(size=5)
        weights = rng.uniform(0.2, 2.0, size=5)
        _, grad = mse_loss(pred, target, weights)
        fd = np.zeros(5)
        for i in range(5):
            p = pred.copy()
            p[i] += eps
            lp, _ = mse_loss(p, target, weights)
            p[i] -= 2 * eps
            lm, _ = mse_loss(p, target, weights)
            fd[i] = (lp - lm) / (2 * eps)
        scale = max(np.abs(fd).max(), np.abs(grad).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - grad).max() / scale))
    results["mse_loss"] = worst
    return results


def _smooth_instance(spec: NetSpec, seed: int, eps: float):
    """Float64 model + input pair whose loss is smooth within a few eps."""
    best = 0.0
    for attempt in range(500):
        s = seed * 1009 + attempt
        model = init_params(spec, s, dtype=np.float64)
        rng = np.random.default_rng(s + 1)
        # Zero-init biases park every pre-activation on the ReLU kink;
        # any parameter values are fair game for derivative checking.
        for _, layer, name, arr in model.named_params():
            if name == "b":
                layer.set_param(name, rng.uniform(-0.4, 0.4, arr.shape))
        n = int(np.prod(spec.input_shape))
        # Well-separated magnitudes keep max-pool windows untied and ReLU
        # inputs away from zero at the first layer.
        vals = np.linspace(0.2, 1.7, n) * rng.choice([-1.0, 1.0], n)
        x = rng.permutation(vals).reshape(spec.input_shape)
        margin = _kink_margin(model, x)
        best = max(best, margin)
        if margin > 4.0 * eps:
            return model, x
    raise TinynnError(
        f"no smooth gradcheck instance found (best margin {best:.2e})")


def _kink_margin(model: NetModel, x) -> float:
    """Distance of the nearest ReLU/max-pool decision boundary, in input units."""
    h = np.asarray(x, dtype=model.dtype)
    if h.shape == tuple(model.spec.input_shape):
        h = h[None]
    margin, _ = _walk_margin(model.layers, h)
    return margin


def _walk_margin(layers, h):
    margin = np.inf
    for layer in layers:
        if isinstance(layer, _Relu):
            margin = min(margin, float(np.abs(h).min()))
        elif isinstance(layer, _MaxPool):
            k = layer.spec.size
            n, c, hh, ww = h.shape
            win = h.reshape(n, c, hh // k, k, ww // k, k)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // k, ww // k, -1)
            top2 = np.sort(win, axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
        elif isinstance(layer, _ConcatSkip):
            m, inner = _walk_margin(layer.block, h)
            margin = min(margin, m)
            h = np.concatenate([h, inner], axis=1)
            continue
        h = layer.forward(h)[0]
    return margin, h


def _im2col(x, kernel, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    out_h = (hp - kernel) // stride + 1
    out_w = (wp - kernel) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kernel, kernel, out_h, out_w),
        (s0, s1, s2, s3, s2 * stride, s3 * stride))
    col = np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3))
    return col.reshape(n * out_h * out_w, c * kernel * kernel), out_h, out_w


def _col2im(dcol, x_shape, kernel, stride, pad, out_h, out_w):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    dx = np.zeros((n, c, hp, wp), dtype=dcol.dtype)
    d6 = dcol.reshape(n, out_h, out_w, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i:i + stride * out_h:stride,
               j:j + stride * out_w:stride] += d6[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx
