"""
Minimal CNN engine: conv -> ReLU -> 2x2 max-pool -> dense -> softmax.

Every layer is a pair of functions, ``*_forward`` returning ``(out, cache)``
and ``*_backward`` consuming the cache. Convolutions run through real FFTs;
the valid-region slice of a circular correlation on the unpadded input is
exact, so no padding is needed for any of the three passes.

Parameters live in a ``ModelParams`` (an ordered name -> ndarray mapping).
Precision is explicit: float64 for gradient checks and reproducibility runs,
float32 permitted for fast training.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, OrderedDict as OrderedDictT, Union

import numpy as np

from .errors import FormatError, InvalidParamsError, PoisonedUpdateError, ShapeError

NUM_CLASSES = 6

ModelParams = OrderedDictT[str, np.ndarray]

_DTYPES = {"f64": np.float64, "f32": np.float32}


def resolve_dtype(precision: str):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise InvalidParamsError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}") from None


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Valid cross-correlation, stride 1.

    x: (N, C, H, W), w: (F, C, k, k), b: (F,) -> (N, F, H-k+1, W-k+1)
    """
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects 4-D input/weights and 1-D bias, got x{x.shape} w{w.shape} b{b.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d input has {c} channels but weights expect {cw}")
    if b.shape[0] != f:
        raise ShapeError(f"conv2d bias has {b.shape[0]} entries for {f} filters")
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d input {h}x{wd} smaller than kernel {kh}x{kw}")
    oh, ow = h - kh + 1, wd - kw + 1
    xf = np.fft.rfft2(x)
    wf = np.fft.rfft2(w, s=(h, wd))
    prod = np.einsum("nchw,fchw->nfhw", xf, wf.conj())
    out = np.fft.irfft2(prod, s=(h, wd))[..., :oh, :ow]
    out = out + b[None, :, None, None]
    return out.astype(x.dtype, copy=False), (x.shape, w, xf, wf)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    x_shape, w, xf, wf = cache
    _, _, h, wd = x_shape
    _, _, kh, kw = w.shape
    dtype = dout.dtype
    df = np.fft.rfft2(dout, s=(h, wd))
    dw_f = np.einsum("nchw,nfhw->fchw", xf.conj(), df).conj()
    dw = np.fft.irfft2(dw_f, s=(h, wd))[..., :kh, :kw]
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = np.fft.irfft2(np.einsum("nfhw,fchw->nchw", df, wf), s=(h, wd)).astype(dtype, copy=False)
    return dx, dw.astype(dtype, copy=False), db


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.maximum(x, 0, dtype=x.dtype), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def _quadrants(x: np.ndarray, oh: int, ow: int):
    # window positions in row-major order: (0,0), (0,1), (1,0), (1,1)
    return (
        x[:, :, 0 : 2 * oh : 2, 0 : 2 * ow : 2],
        x[:, :, 0 : 2 * oh : 2, 1 : 2 * ow : 2],
        x[:, :, 1 : 2 * oh : 2, 0 : 2 * ow : 2],
        x[:, :, 1 : 2 * oh : 2, 1 : 2 * ow : 2],
    )


def maxpool2_forward(x: np.ndarray):
    """2x2 / stride-2 max-pool; an odd trailing row or column is dropped.

    Ties send the gradient to the first maximal element in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects (N, C, H, W), got {x.shape}")
    oh, ow = x.shape[2] // 2, x.shape[3] // 2
    if oh == 0 or ow == 0:
        raise ShapeError(f"maxpool2 needs at least 2x2 input, got {x.shape[2]}x{x.shape[3]}")
    q = _quadrants(x, oh, ow)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3))).astype(np.int8)
    return out, (x.shape, idx)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, idx = cache
    oh, ow = idx.shape[2:]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k, view in enumerate(_quadrants(dx, oh, ow)):
        view[...] = dout * (idx == k)
    return dx


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine map on the flattened input; w has shape (out, in)."""
    flat = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or flat.shape[1] != w.shape[1]:
        raise ShapeError(f"dense input has {flat.shape[1]} features but weights are {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias shape {b.shape} does not match {w.shape[0]} outputs")
    return flat @ w.T + b, (x.shape, flat, w)


def dense_backward(dout: np.ndarray, cache):
    x_shape, flat, w = cache
    dw = dout.T @ flat
    db = dout.sum(axis=0)
    dx = (dout @ w).reshape(x_shape)
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, dlogits)`` with dlogits = (probs - onehot) / N.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidParamsError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_probs = z - log_norm[:, None]
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    probs = np.exp(log_probs)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


# ---------------------------------------------------------------------------
# The classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CnnSpec:
    input_size: int = 64
    filters: int = 16
    kernel: int = 12
    in_channels: int = 1
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.input_size < self.kernel + 1:
            raise InvalidParamsError(f"input_size {self.input_size} too small for a {self.kernel}x{self.kernel} kernel")

    @property
    def conv_out(self) -> int:
        return self.input_size - self.kernel + 1

    @property
    def dense_in(self) -> int:
        return self.filters * (self.conv_out // 2) ** 2


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_layer(spec: CnnSpec, layer: str, rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    """Fresh parameters for ``layer`` ('conv' or 'dense')."""
    k2 = spec.kernel * spec.kernel
    if layer == "conv":
        w = glorot_uniform(
            rng, (spec.filters, spec.in_channels, spec.kernel, spec.kernel),
            spec.in_channels * k2, spec.filters * k2, dtype,
        )
        return OrderedDict([("conv.weight", w), ("conv.bias", np.zeros(spec.filters, dtype))])
    if layer == "dense":
        w = glorot_uniform(rng, (spec.num_classes, spec.dense_in), spec.dense_in, spec.num_classes, dtype)
        return OrderedDict([("dense.weight", w), ("dense.bias", np.zeros(spec.num_classes, dtype))])
    raise InvalidParamsError(f"unknown layer {layer!r}")


LAYERS = ("conv", "dense")


def init_params(spec: CnnSpec, seed, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for layer in LAYERS:
        params.update(init_layer(spec, layer, rng, dtype))
    return params


def check_params(params, spec: CnnSpec) -> None:
    expected = {
        "conv.weight": (spec.filters, spec.in_channels, spec.kernel, spec.kernel),
        "conv.bias": (spec.filters,),
        "dense.weight": (spec.num_classes, spec.dense_in),
        "dense.bias": (spec.num_classes,),
    }
    if list(params) != list(expected):
        raise ShapeError(f"parameter names {list(params)} do not match {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")


def images_to_input(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 (N, H, W) images -> (N, 1, H, W) floats in [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got {images.shape}")
    return (images.astype(dtype) / 255.0)[:, None]


def forward(params, x: np.ndarray, keep_cache: bool = False):
    h, c_conv = conv2d_forward(x, params["conv.weight"], params["conv.bias"])
    h, c_relu = relu_forward(h)
    h, c_pool = maxpool2_forward(h)
    logits, c_dense = dense_forward(h, params["dense.weight"], params["dense.bias"])
    if keep_cache:
        return logits, (c_conv, c_relu, c_pool, c_dense)
    return logits


def loss_and_grads(params, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of the batch and its gradient for every parameter."""
    logits, (c_conv, c_relu, c_pool, c_dense) = forward(params, x, keep_cache=True)
    loss, _, dlogits = softmax_xent(logits, labels)
    dlogits = dlogits.astype(logits.dtype, copy=False)
    dh, dw_d, db_d = dense_backward(dlogits, c_dense)
    dh = maxpool2_backward(dh, c_pool)
    dh = relu_backward(dh, c_relu)
    _, dw_c, db_c = conv2d_backward(dh, c_conv, need_dx=False)
    grads = OrderedDict(
        [("conv.weight", dw_c), ("conv.bias", db_c), ("dense.weight", dw_d), ("dense.bias", db_d)]
    )
    return loss, grads


def predict_proba(params, images: np.ndarray, batch: int = 256) -> np.ndarray:
    dtype = params["conv.weight"].dtype
    out = []
    for i in range(0, len(images), batch):
        out.append(softmax(forward(params, images_to_input(images[i : i + batch], dtype))))
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))


def evaluate_accuracy(params, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise InvalidParamsError("cannot evaluate accuracy on an empty set")
    pred = predict_proba(params, images).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def per_class_accuracy(params, images: np.ndarray, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Recall per class; NaN for classes absent from ``labels``."""
    labels = np.asarray(labels)
    pred = predict_proba(params, images).argmax(axis=1)
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        sel = labels == c
        if sel.any():
            acc[c] = np.mean(pred[sel] == c)
    return acc


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidParamsError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.lr >= 0:
            raise InvalidParamsError(f"learning rate must be non-negative, got {self.lr}")


def _check_grads(params, grads) -> None:
    if list(params) != list(grads):
        raise ShapeError(f"gradient names {list(grads)} do not match parameters {list(params)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise PoisonedUpdateError(f"non-finite gradient for {name}")


def sgd_step(params, grads, cfg: OptimizerConfig):
    _check_grads(params, grads)
    lr = cfg.lr
    return OrderedDict((k, (v - lr * grads[k]).astype(v.dtype, copy=False)) for k, v in params.items())


def adam_step(params, grads, cfg: OptimizerConfig, state: Optional[dict] = None):
    """One bias-corrected Adam step. ``state`` holds {'t', 'm', 'v'}."""
    _check_grads(params, grads)
    if state is None:
        state = {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    t = state["t"] + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, m_new, v_new = OrderedDict(), {}, {}
    for k, w in params.items():
        g = grads[k]
        m = b1 * state["m"][k] + (1 - b1) * g
        v = b2 * state["v"][k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[k] = (w - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(w.dtype, copy=False)
        m_new[k], v_new[k] = m, v
    return new_params, {"t": t, "m": m_new, "v": v_new}


class Optimizer:
    """Stateful wrapper dispatching to ``sgd_step`` / ``adam_step``."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.state = None

    def step(self, params, grads):
        if self.cfg.kind == "sgd":
            return sgd_step(params, grads, self.cfg)
        params, self.state = adam_step(params, grads, self.cfg, self.state)
        return params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"JFCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: Union[str, Path], params) -> None:
    """Little-endian named-tensor container.

    Layout: magic, u16 version, u32 tensor count, then per tensor:
    u16 name length, name (utf-8), u8 dtype code, u8 ndim, u32 dims, raw data.
    """
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"cannot store dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a jamfed checkpoint")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 10
        params = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(raw):
                raise FormatError(f"{path}: truncated data for {name}")
            params[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return params


def cast_params(params, dtype):
    return OrderedDict((k, v.astype(dtype)) for k, v in params.items())


def iter_batches(n: int, batch_size: Optional[int], order: np.ndarray) -> Iterable[np.ndarray]:
    """Slices of ``order`` of length ``batch_size`` (None/0 means full batch)."""
    step = n if not batch_size else batch_size
    for i in range(0, n, step):
        yield order[i : i + step]
