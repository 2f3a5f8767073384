# kernels.py
"""
Reference kernel catalog shared by the graph evaluator and the interpreter
backend. Activations are NHWC, filters are [out_ch, kh, kw, in_ch].

Float kernels compute in the dtype of their operands. Quantized kernels
work on raw int8 payloads: products accumulate in int32, everything else
is rescaled through the real domain, and results are rounded half away
from zero and saturated to int8.
"""

from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import (
    TensorType,
    dequantize_array,
    quantize_array,
    quantize_value,
    requantize_array,
    round_half_away_from_zero,
)

KernelFn = Callable[..., np.ndarray]
KERNELS: Dict[str, KernelFn] = {}

INT32_MIN, INT32_MAX = int(np.iinfo(np.int32).min), int(np.iinfo(np.int32).max)


def kernel(*names: str):
    def register(fn: KernelFn) -> KernelFn:
        for name in names:
            KERNELS[name] = fn
        return fn
    return register


def _real(x: np.ndarray, ty: TensorType) -> np.ndarray:
    if ty.is_quantized:
        return (x.astype(np.int64) - ty.offset) * ty.scale
    return x


def _emit(real: np.ndarray, out_ty: TensorType, float_dtype) -> np.ndarray:
    if out_ty.is_quantized:
        return quantize_array(real, out_ty)
    return np.asarray(real, dtype=float_dtype)


def _pass_through(x: np.ndarray, src: TensorType, dst: TensorType) -> np.ndarray:
    if dst.is_quantized and src.is_quantized:
        return requantize_array(x, src, dst)
    return x.copy()


# -- elementwise ------------------------------------------------------------

_BINARY = {
    "Add": np.add,
    "Sub": np.subtract,
    "Mul": np.multiply,
    "Div": np.divide,
    "Max": np.maximum,
    "Min": np.minimum,
}


@kernel("Add", "Sub", "Mul", "Div", "Max", "Min", "BroadcastAdd")
def _binary(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    a, b = ins
    ta, tb = in_types
    op = np.add if name == "BroadcastAdd" else _BINARY[name]
    if not out_ty.is_quantized:
        return op(a, b)
    if name in ("Max", "Min") and ta == tb:
        # requantization is monotone, so comparing raw values first is exact
        return requantize_array(op(a, b), ta, out_ty)
    with np.errstate(divide="ignore", invalid="ignore"):
        return quantize_array(op(_real(a, ta), _real(b, tb)), out_ty)


@kernel("Relu")
def _relu(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    (x,) = ins
    if not out_ty.is_quantized:
        return np.maximum(x, x.dtype.type(0))
    return quantize_array(np.maximum(_real(x, in_types[0]), 0.0), out_ty)


@kernel("Tanh")
def _tanh(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    return np.tanh(ins[0])


@kernel("Sigmoid")
def _sigmoid(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    x = ins[0]
    one = x.dtype.type(1)
    return one / (one + np.exp(-x))


@kernel("Splat")
def _splat(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    dims = tuple(shape) if shape is not None else out_ty.dims
    value = attrs["value"]
    if out_ty.is_quantized:
        return np.full(dims, quantize_value(value, out_ty), dtype=np.int8)
    if out_ty.elem_kind.value == "bool":
        return np.full(dims, bool(value), dtype=np.bool_)
    return np.full(dims, value, dtype=float_dtype)


@kernel("Quantize")
def _quantize(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    return quantize_array(ins[0], out_ty)


@kernel("Dequantize")
def _dequantize(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    ty = in_types[0]
    if float_dtype == np.float32:
        return dequantize_array(ins[0], ty)
    return ((ins[0].astype(np.int64) - ty.offset) * ty.scale).astype(float_dtype)


@kernel("RescaleQuantized")
def _rescale(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    return requantize_array(ins[0], in_types[0], out_ty)


@kernel("Copy")
def _copy(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    return np.array(ins[0], copy=True)


# -- data movement ----------------------------------------------------------

@kernel("Transpose")
def _transpose(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    out = np.ascontiguousarray(np.transpose(ins[0], attrs["shuffle"]))
    return _pass_through(out, in_types[0], out_ty)


@kernel("Reshape")
def _reshape(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    out = np.ascontiguousarray(ins[0]).reshape(attrs["dims"])
    return _pass_through(out, in_types[0], out_ty)


@kernel("Concat")
def _concat(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    parts = [_pass_through(x, t, out_ty) for x, t in zip(ins, in_types)]
    return np.concatenate(parts, axis=attrs["axis"])


# -- linear algebra ---------------------------------------------------------

@kernel("MatMul")
def _matmul(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    a, b = ins
    ta, tb = in_types
    if not out_ty.is_quantized:
        return np.matmul(a, b)
    acc = np.matmul(a.astype(np.int32) - np.int32(ta.offset), b.astype(np.int32) - np.int32(tb.offset))
    return quantize_array(acc * (ta.scale * tb.scale), out_ty)


@kernel("FullyConnected")
def _fully_connected(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    x, w, b = ins
    return np.matmul(x, w) + b


def _out_extent(size, kernel_size, stride, lo, hi):
    return (size + lo + hi - kernel_size) // stride + 1


def _windows(x_padded: np.ndarray, attrs, oh: int, ow: int):
    """Yield (i, j, strided slice) for every kernel offset."""
    kh, kw = attrs["kernels"]
    sh, sw = attrs["strides"]
    for i in range(kh):
        for j in range(kw):
            yield i, j, x_padded[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :]


def _pad(x: np.ndarray, attrs, value) -> np.ndarray:
    pt, pl, pb, pr = attrs["pads"]
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)


def _spatial_out(x: np.ndarray, attrs):
    kh, kw = attrs["kernels"]
    sh, sw = attrs["strides"]
    pt, pl, pb, pr = attrs["pads"]
    return _out_extent(x.shape[1], kh, sh, pt, pb), _out_extent(x.shape[2], kw, sw, pl, pr)


@kernel("Convolution")
def _convolution(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    x, f, b = ins
    tx, tf, tb = in_types
    oh, ow = _spatial_out(x, attrs)
    n, oc = x.shape[0], f.shape[0]
    if not out_ty.is_quantized:
        xp = _pad(x, attrs, 0)
        out = np.zeros((n, oh, ow, oc), dtype=x.dtype)
        for i, j, patch in _windows(xp, attrs, oh, ow):
            out += np.matmul(patch, f[:, i, j, :].T)
        return out + b
    xp = _pad(x.astype(np.int32) - np.int32(tx.offset), attrs, 0)
    fw = f.astype(np.int32) - np.int32(tf.offset)
    acc = np.zeros((n, oh, ow, oc), dtype=np.int32)
    for i, j, patch in _windows(xp, attrs, oh, ow):
        acc += np.matmul(patch, fw[:, i, j, :].T)
    acc_scale = tx.scale * tf.scale
    bias_real = (b.astype(np.int64) - tb.offset) * tb.scale
    bias_acc = round_half_away_from_zero(bias_real / acc_scale)
    acc += np.clip(bias_acc, INT32_MIN, INT32_MAX).astype(np.int32)
    return quantize_array(acc * acc_scale, out_ty)


@kernel("MaxPool")
def _max_pool(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    (x,) = ins
    oh, ow = _spatial_out(x, attrs)
    low = -np.inf if not in_types[0].is_quantized else -128
    xp = _pad(x, attrs, low)
    out = None
    for _, _, patch in _windows(xp, attrs, oh, ow):
        out = patch.copy() if out is None else np.maximum(out, patch)
    return _pass_through(out.astype(x.dtype), in_types[0], out_ty)


@kernel("AvgPool")
def _avg_pool(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    (x,) = ins
    kh, kw = attrs["kernels"]
    oh, ow = _spatial_out(x, attrs)
    real = _real(x, in_types[0])
    xp = _pad(real, attrs, 0)
    acc = np.zeros((x.shape[0], oh, ow, x.shape[3]), dtype=xp.dtype)
    for _, _, patch in _windows(xp, attrs, oh, ow):
        acc += patch
    mean = acc / xp.dtype.type(kh * kw)
    return _emit(mean, out_ty, float_dtype)


# -- normalisation and training ---------------------------------------------

@kernel("SoftMax")
def _softmax(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    (x,) = ins
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


@kernel("BatchNormalization")
def _batch_norm(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    x, gamma, beta, mean, var = ins
    eps = x.dtype.type(attrs["epsilon"])
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


@kernel("Regression")
def _regression(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    return np.array(ins[0], copy=True)


@kernel("SGD")
def _sgd(name, out_ty, ins, in_types, attrs, float_dtype, shape=None):
    w, g = ins
    return w - w.dtype.type(attrs["learning_rate"]) * g


def run_kernel(name: str, out_ty: TensorType, ins: Sequence[np.ndarray], in_types: Sequence[TensorType],
               attrs: Dict[str, Any], float_dtype=np.float32, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    fn = KERNELS.get(name)
    if fn is None:
        raise KeyError(f"no kernel for '{name}'")
    return fn(name, out_ty, list(ins), list(in_types), attrs, float_dtype, shape)


def has_kernel(name: str) -> bool:
    return name in KERNELS
