# node_table.py
"""
Static descriptor table for every high-level node kind: operand arity,
attribute schema and defaults, typing rule, and the capability flags the
passes consult (gradient rule, lowering rule, data-parallel).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .tensor import ElemKind, TensorType


class NodeKind(Enum):
    CONVOLUTION = "Convolution"
    MAX_POOL = "MaxPool"
    AVG_POOL = "AvgPool"
    FULLY_CONNECTED = "FullyConnected"
    MAT_MUL = "MatMul"
    BROADCAST_ADD = "BroadcastAdd"
    ADD = "Add"
    SUB = "Sub"
    MUL = "Mul"
    DIV = "Div"
    MAX = "Max"
    MIN = "Min"
    RELU = "Relu"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"
    SOFT_MAX = "SoftMax"
    TRANSPOSE = "Transpose"
    RESHAPE = "Reshape"
    CONCAT = "Concat"
    SPLAT = "Splat"
    BATCH_NORMALIZATION = "BatchNormalization"
    REGRESSION = "Regression"
    SGD = "SGD"
    SAVE = "Save"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"
    RESCALE_QUANTIZED = "RescaleQuantized"
    QUANTIZATION_PROFILE = "QuantizationProfile"


# (in_types, attrs) -> result type, or None for kinds without a result
InferFn = Callable[[List[TensorType], Dict[str, Any]], Optional[TensorType]]
# (in_types, attrs, result) -> list of diagnostic messages
CheckFn = Callable[[List[TensorType], Dict[str, Any], Optional[TensorType]], List[str]]


@dataclass(frozen=True)
class KindInfo:
    kind: NodeKind
    arity: Optional[int]
    attrs: Dict[str, Any] = field(default_factory=dict)
    has_result: bool = True
    data_parallel: bool = False
    has_gradient: bool = False
    lowerable: bool = False
    float_only: bool = False
    check: Optional[CheckFn] = None
    infer: Optional[InferFn] = None


# ---------------------------------------------------------------------------
# typing rules
# ---------------------------------------------------------------------------

def _same_kind(types: Sequence[TensorType]) -> List[str]:
    kinds = {t.elem_kind for t in types}
    if len(kinds) > 1:
        return [f"operands mix element kinds {sorted(k.value for k in kinds)}"]
    return []


def _result_matches(result: Optional[TensorType], expected: TensorType) -> List[str]:
    if result is None:
        return ["missing result type"]
    if result.dims != expected.dims:
        return [f"result dims {result.dims} do not match expected {expected.dims}"]
    if result.elem_kind is not expected.elem_kind:
        return [f"result kind {result.elem_kind.value} does not match expected {expected.elem_kind.value}"]
    if result.is_float and result != expected:
        return [f"result type {result} does not match expected {expected}"]
    return []


def _check_elementwise(in_types, attrs, result):
    a, b = in_types
    if a.dims != b.dims:
        return [f"elementwise operands must have the same shape, got {a.dims} and {b.dims}"]
    msgs = _same_kind(in_types)
    if msgs:
        return msgs
    if a.is_float and a != b:
        return [f"elementwise operands must operate on the same type, got {a} and {b}"]
    if a.elem_kind not in (ElemKind.FLOAT32, ElemKind.INT8Q):
        return [f"elementwise arithmetic is undefined on {a.elem_kind.value}"]
    return _result_matches(result, a)


def _infer_first(in_types, attrs):
    return in_types[0]


def _check_unary(in_types, attrs, result):
    (x,) = in_types
    if x.elem_kind not in (ElemKind.FLOAT32, ElemKind.INT8Q):
        return [f"unary arithmetic is undefined on {x.elem_kind.value}"]
    return _result_matches(result, x)


def _check_float_unary(in_types, attrs, result):
    (x,) = in_types
    if not x.is_float:
        return [f"operand must be float, got {x}"]
    return _result_matches(result, x)


def _check_softmax(in_types, attrs, result):
    (x,) = in_types
    msgs = _check_float_unary(in_types, attrs, result)
    if len(x.dims) != 2:
        msgs.append(f"SoftMax expects a rank-2 operand, got {x.dims}")
    return msgs


def _infer_matmul(in_types, attrs):
    a, b = in_types
    return a.with_dims((a.dims[0], b.dims[1]))


def _check_matmul(in_types, attrs, result):
    a, b = in_types
    if len(a.dims) != 2 or len(b.dims) != 2:
        return [f"MatMul expects rank-2 operands, got {a.dims} and {b.dims}"]
    if a.dims[1] != b.dims[0]:
        return [f"MatMul inner dimensions disagree: {a.dims[1]} vs {b.dims[0]}"]
    msgs = _same_kind(in_types)
    if msgs:
        return msgs
    return _result_matches(result, _infer_matmul(in_types, attrs))


def _check_broadcast_add(in_types, attrs, result):
    a, b = in_types
    if len(b.dims) > len(a.dims) or a.dims[len(a.dims) - len(b.dims):] != b.dims:
        return [f"BroadcastAdd operand {b.dims} is not a trailing suffix of {a.dims}"]
    msgs = _same_kind(in_types)
    if msgs:
        return msgs
    return _result_matches(result, a)


def _infer_fc(in_types, attrs):
    x, w, _ = in_types
    return x.with_dims((x.dims[0], w.dims[1]))


def _check_fc(in_types, attrs, result):
    x, w, b = in_types
    if len(x.dims) != 2 or len(w.dims) != 2:
        return [f"FullyConnected expects rank-2 input and weights, got {x.dims} and {w.dims}"]
    if x.dims[1] != w.dims[0]:
        return [f"FullyConnected inner dimensions disagree: {x.dims[1]} vs {w.dims[0]}"]
    if b.dims != (w.dims[1],):
        return [f"FullyConnected bias must have dims ({w.dims[1]},), got {b.dims}"]
    if not (x.is_float and w.is_float and b.is_float):
        return ["FullyConnected operands must be float"]
    return _result_matches(result, _infer_fc(in_types, attrs))


def _out_extent(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def _window_dims(x: TensorType, attrs, channels: int) -> Tuple[int, ...]:
    kh, kw = attrs["kernels"]
    sh, sw = attrs["strides"]
    pt, pl, pb, pr = attrs["pads"]
    n, h, w, _ = x.dims
    return (n, _out_extent(h, kh, sh, pt, pb), _out_extent(w, kw, sw, pl, pr), channels)


def _check_window_attrs(x: TensorType, attrs) -> List[str]:
    if len(x.dims) != 4:
        return [f"expected an NHWC operand, got {x.dims}"]
    kernels, strides, pads = attrs["kernels"], attrs["strides"], attrs["pads"]
    if len(kernels) != 2 or len(strides) != 2 or len(pads) != 4:
        return ["kernels/strides need two entries and pads four"]
    if min(kernels) < 1 or min(strides) < 1 or min(pads) < 0:
        return [f"invalid window kernels={kernels} strides={strides} pads={pads}"]
    _, h, w, _ = x.dims
    if h + pads[0] + pads[2] < kernels[0] or w + pads[1] + pads[3] < kernels[1]:
        return [f"window {kernels} larger than padded input {x.dims}"]
    return []


def _infer_conv(in_types, attrs):
    x, f, _ = in_types
    return x.with_dims(_window_dims(x, attrs, f.dims[0]))


def _check_conv(in_types, attrs, result):
    x, f, b = in_types
    msgs = _check_window_attrs(x, attrs)
    if msgs:
        return msgs
    if len(f.dims) != 4 or f.dims[3] != x.dims[3]:
        return [f"filter {f.dims} does not match input channels of {x.dims}"]
    if tuple(f.dims[1:3]) != tuple(attrs["kernels"]):
        return [f"filter spatial dims {f.dims[1:3]} disagree with kernels {attrs['kernels']}"]
    if b.dims != (f.dims[0],):
        return [f"bias must have dims ({f.dims[0]},), got {b.dims}"]
    msgs = _same_kind(in_types)
    if msgs:
        return msgs
    return _result_matches(result, _infer_conv(in_types, attrs))


def _infer_pool(in_types, attrs):
    (x,) = in_types
    return x.with_dims(_window_dims(x, attrs, x.dims[3]))


def _check_pool(in_types, attrs, result):
    msgs = _check_window_attrs(in_types[0], attrs)
    if msgs:
        return msgs
    return _result_matches(result, _infer_pool(in_types, attrs))


def _infer_transpose(in_types, attrs):
    (x,) = in_types
    return x.with_dims(tuple(x.dims[p] for p in attrs["shuffle"]))


def _check_transpose(in_types, attrs, result):
    (x,) = in_types
    shuffle = list(attrs["shuffle"])
    if sorted(shuffle) != list(range(len(x.dims))):
        return [f"shuffle {shuffle} is not a permutation of rank {len(x.dims)}"]
    return _result_matches(result, _infer_transpose(in_types, attrs))


def _infer_reshape(in_types, attrs):
    return in_types[0].with_dims(tuple(attrs["dims"]))


def _check_reshape(in_types, attrs, result):
    (x,) = in_types
    dims = tuple(attrs["dims"])
    if not dims or any(d < 1 for d in dims):
        return [f"invalid reshape dims {dims}"]
    size = 1
    for d in dims:
        size *= d
    if size != x.size:
        return [f"reshape to {dims} changes element count {x.size}"]
    return _result_matches(result, _infer_reshape(in_types, attrs))


def _infer_concat(in_types, attrs):
    axis = attrs["axis"]
    first = in_types[0]
    dims = list(first.dims)
    dims[axis] = sum(t.dims[axis] for t in in_types)
    return first.with_dims(dims)


def _check_concat(in_types, attrs, result):
    if not in_types:
        return ["Concat needs at least one operand"]
    axis = attrs["axis"]
    rank = len(in_types[0].dims)
    if not 0 <= axis < rank:
        return [f"Concat axis {axis} out of range for rank {rank}"]
    for t in in_types[1:]:
        if len(t.dims) != rank:
            return ["Concat operands differ in rank"]
        for i in range(rank):
            if i != axis and t.dims[i] != in_types[0].dims[i]:
                return [f"Concat dims disagree off-axis: {in_types[0].dims} vs {t.dims}"]
    msgs = _same_kind(in_types)
    if msgs:
        return msgs
    if in_types[0].is_float and len({t.as_float() for t in in_types}) > 1:
        return ["Concat operand types disagree"]
    return _result_matches(result, _infer_concat(in_types, attrs))


def _check_splat(in_types, attrs, result):
    if result is None:
        return ["Splat requires an explicit result type"]
    if result.elem_kind is ElemKind.INT64_INDEX:
        return ["Splat of index type is not supported"]
    return []


def _infer_batchnorm(in_types, attrs):
    return in_types[0]


def _check_batchnorm(in_types, attrs, result):
    x, gamma, beta, mean, var = in_types
    channels = x.dims[-1]
    for name, t in (("scale", gamma), ("bias", beta), ("mean", mean), ("var", var)):
        if t.dims != (channels,):
            return [f"BatchNormalization {name} must have dims ({channels},), got {t.dims}"]
        if not t.is_float:
            return [f"BatchNormalization {name} must be float"]
    if not x.is_float:
        return ["BatchNormalization input must be float"]
    if attrs["epsilon"] < 0:
        return ["BatchNormalization epsilon must be non-negative"]
    return _result_matches(result, x)


def _check_regression(in_types, attrs, result):
    pred, expected = in_types
    if pred != expected:
        return [f"Regression operands must share a type, got {pred} and {expected}"]
    if not pred.is_float:
        return ["Regression operands must be float"]
    return _result_matches(result, pred)


def _check_sgd(in_types, attrs, result):
    weight, grad = in_types
    if weight != grad:
        return [f"SGD weight and gradient types differ: {weight} vs {grad}"]
    if not weight.is_float:
        return ["SGD operands must be float"]
    if attrs["learning_rate"] < 0:
        return ["SGD learning rate must be non-negative"]
    return _result_matches(result, weight)


def _check_save(in_types, attrs, result):
    value, target = in_types
    if value != target:
        return [f"Save value type {value} does not match placeholder type {target}"]
    return []


def _infer_quantize(in_types, attrs):
    return None


def _check_quantize(in_types, attrs, result):
    (x,) = in_types
    if not x.is_float:
        return [f"Quantize input must be float, got {x}"]
    if result is None or not result.is_quantized:
        return ["Quantize result must carry scale and offset"]
    if result.dims != x.dims:
        return [f"Quantize changes dims {x.dims} -> {result.dims}"]
    return []


def _infer_dequantize(in_types, attrs):
    return in_types[0].as_float()


def _check_dequantize(in_types, attrs, result):
    (x,) = in_types
    if not x.is_quantized:
        return [f"Dequantize input must be quantized, got {x}"]
    return _result_matches(result, x.as_float())


def _check_rescale(in_types, attrs, result):
    (x,) = in_types
    if not x.is_quantized:
        return [f"RescaleQuantized input must be quantized, got {x}"]
    if result is None or not result.is_quantized:
        return ["RescaleQuantized result must carry scale and offset"]
    if result.dims != x.dims:
        return [f"RescaleQuantized changes dims {x.dims} -> {result.dims}"]
    return []


def _check_profile(in_types, attrs, result):
    (x,) = in_types
    if not x.is_float:
        return [f"QuantizationProfile observes float tensors only, got {x}"]
    if not attrs.get("tensor_name"):
        return ["QuantizationProfile needs a tensor_name"]
    return []


_WINDOW = {"kernels": None, "strides": [1, 1], "pads": [0, 0, 0, 0]}

KIND_TABLE: Dict[NodeKind, KindInfo] = {}


def _register(info: KindInfo):
    KIND_TABLE[info.kind] = info


for _k in (NodeKind.ADD, NodeKind.SUB, NodeKind.MUL, NodeKind.DIV, NodeKind.MAX, NodeKind.MIN):
    _register(KindInfo(
        _k, 2, data_parallel=True,
        has_gradient=_k in (NodeKind.ADD, NodeKind.SUB, NodeKind.MUL, NodeKind.DIV),
        check=_check_elementwise, infer=_infer_first,
    ))

_register(KindInfo(NodeKind.RELU, 1, data_parallel=True, has_gradient=True, lowerable=True,
                   check=_check_unary, infer=_infer_first))
_register(KindInfo(NodeKind.TANH, 1, data_parallel=True, float_only=True,
                   check=_check_float_unary, infer=_infer_first))
_register(KindInfo(NodeKind.SIGMOID, 1, data_parallel=True, float_only=True,
                   check=_check_float_unary, infer=_infer_first))
_register(KindInfo(NodeKind.SOFT_MAX, 1, float_only=True, check=_check_softmax, infer=_infer_first))
_register(KindInfo(NodeKind.MAT_MUL, 2, has_gradient=True, check=_check_matmul, infer=_infer_matmul))
_register(KindInfo(NodeKind.BROADCAST_ADD, 2, has_gradient=True,
                   check=_check_broadcast_add, infer=_infer_first))
_register(KindInfo(NodeKind.FULLY_CONNECTED, 3, has_gradient=True, lowerable=True, float_only=True,
                   check=_check_fc, infer=_infer_fc))
_register(KindInfo(NodeKind.CONVOLUTION, 3, attrs=dict(_WINDOW), check=_check_conv, infer=_infer_conv))
_register(KindInfo(NodeKind.MAX_POOL, 1, attrs=dict(_WINDOW), check=_check_pool, infer=_infer_pool))
_register(KindInfo(NodeKind.AVG_POOL, 1, attrs=dict(_WINDOW), check=_check_pool, infer=_infer_pool))
_register(KindInfo(NodeKind.TRANSPOSE, 1, attrs={"shuffle": None}, has_gradient=True,
                   check=_check_transpose, infer=_infer_transpose))
_register(KindInfo(NodeKind.RESHAPE, 1, attrs={"dims": None}, has_gradient=True,
                   check=_check_reshape, infer=_infer_reshape))
_register(KindInfo(NodeKind.CONCAT, None, attrs={"axis": 0}, check=_check_concat, infer=_infer_concat))
_register(KindInfo(NodeKind.SPLAT, 0, attrs={"value": 0.0}, data_parallel=True, check=_check_splat))
_register(KindInfo(NodeKind.BATCH_NORMALIZATION, 5, attrs={"epsilon": 1e-5}, lowerable=True,
                   float_only=True, check=_check_batchnorm, infer=_infer_batchnorm))
_register(KindInfo(NodeKind.REGRESSION, 2, has_gradient=True, lowerable=True, float_only=True,
                   check=_check_regression, infer=_infer_first))
_register(KindInfo(NodeKind.SGD, 2, attrs={"learning_rate": None}, lowerable=True, float_only=True,
                   check=_check_sgd, infer=_infer_first))
_register(KindInfo(NodeKind.SAVE, 2, has_result=False, check=_check_save))
_register(KindInfo(NodeKind.QUANTIZE, 1, data_parallel=True, check=_check_quantize, infer=_infer_quantize))
_register(KindInfo(NodeKind.DEQUANTIZE, 1, data_parallel=True,
                   check=_check_dequantize, infer=_infer_dequantize))
_register(KindInfo(NodeKind.RESCALE_QUANTIZED, 1, data_parallel=True, check=_check_rescale))
_register(KindInfo(NodeKind.QUANTIZATION_PROFILE, 1, attrs={"tensor_name": None}, has_result=False,
                   check=_check_profile))


def normalize_attrs(kind: NodeKind, attrs: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Fill schema defaults and canonicalise sequences to lists of ints."""
    schema = KIND_TABLE[kind].attrs
    attrs = dict(attrs or {})
    unknown = set(attrs) - set(schema)
    if unknown:
        raise KeyError(f"{kind.value} has no attributes {sorted(unknown)}")
    out: Dict[str, Any] = {}
    for name, default in schema.items():
        value = attrs.get(name, default)
        if value is None:
            raise KeyError(f"{kind.value} requires attribute '{name}'")
        if isinstance(value, (list, tuple)):
            value = [int(v) for v in value]
        out[name] = value
    return out


def infer_result_type(kind: NodeKind, in_types: List[TensorType], attrs: Dict[str, Any]) -> Optional[TensorType]:
    info = KIND_TABLE[kind]
    if not info.has_result or info.infer is None:
        return None
    return info.infer(in_types, attrs)


def check_types(kind: NodeKind, in_types: List[TensorType], attrs: Dict[str, Any],
                result: Optional[TensorType]) -> List[str]:
    info = KIND_TABLE[kind]
    if info.arity is not None and len(in_types) != info.arity:
        return [f"{kind.value} expects {info.arity} operands, got {len(in_types)}"]
    try:
        return list(info.check(in_types, attrs, result))
    except (KeyError, IndexError, TypeError, ValueError) as e:
        return [f"malformed {kind.value}: {e}"]
