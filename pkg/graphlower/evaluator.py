# evaluator.py
"""
Node-visitor evaluation of a high-level Function.

This is the straightforward execution model a compiler is measured
against: walk the graph in topological order and run one kernel per node.
It backs constant folding, profiling, gradient checking and the
correctness oracles in the tests.
"""

from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from logger_config import setup_logger
from .errors import BindingError
from .graph_ir import Constant, Function, Placeholder, Ref, topological_order
from .kernels import run_kernel
from .node_table import NodeKind
from .settings import get_settings
from .tensor import Tensor, TensorType

logger = setup_logger().getChild("evaluator")

SENTINEL_BYTE = 0xA5

Observer = Callable[[str, np.ndarray], None]
BindingValue = Union[Tensor, np.ndarray]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


def sentinel_array(ty: TensorType, dtype=None) -> np.ndarray:
    dtype = np.dtype(dtype or ty.elem_kind.dtype)
    raw = np.full(ty.size * dtype.itemsize, SENTINEL_BYTE, dtype=np.uint8)
    return raw.view(dtype).reshape(ty.dims)


def coerce_binding(name: str, value: BindingValue, ty: TensorType, float_dtype=np.float32) -> np.ndarray:
    """Check a bound value against its placeholder; floats come back in float_dtype."""
    if isinstance(value, Tensor):
        if value.ty != ty:
            raise BindingError(f"binding for '{name}' has type {value.ty}, placeholder expects {ty}")
        arr = value.data
    else:
        arr = np.asarray(value)
        if arr.shape != ty.dims:
            raise BindingError(f"binding for '{name}' has shape {arr.shape}, placeholder expects {ty.dims}")
    dtype = float_dtype if ty.is_float else ty.elem_kind.dtype
    return arr.astype(dtype, copy=False)


def _lift(arr: np.ndarray, float_dtype) -> np.ndarray:
    if arr.dtype.kind == "f" and arr.dtype != float_dtype:
        return arr.astype(float_dtype)
    return arr


def evaluate_all(f: Function, bindings: Mapping[str, BindingValue], precision: str = "float32",
                 observer: Optional[Observer] = None) -> Tuple[Dict[int, np.ndarray], Dict[str, np.ndarray]]:
    """Return (value of every node, value saved into every written Placeholder)."""
    float_dtype = _PRECISIONS[precision]
    debug_fill = get_settings().debug_fill
    module = f.module
    storage_values: Dict[str, np.ndarray] = {}

    def read(ref: Ref) -> np.ndarray:
        if isinstance(ref, str):
            if ref not in storage_values:
                storage = module.storage[ref]
                if isinstance(storage, Constant):
                    storage_values[ref] = _lift(storage.tensor.data, float_dtype)
                else:
                    if ref not in bindings:
                        raise BindingError(f"placeholder '{ref}' is not bound")
                    storage_values[ref] = coerce_binding(ref, bindings[ref], storage.ty, float_dtype)
            return storage_values[ref]
        return values[ref]

    values: Dict[int, np.ndarray] = {}
    outputs: Dict[str, np.ndarray] = {}
    for node_id in topological_order(f):
        node = f.nodes[node_id]
        if node.kind is NodeKind.SAVE:
            outputs[node.inputs[1]] = np.array(read(node.inputs[0]), copy=True)
            continue
        ins = [read(r) for r in node.inputs]
        if node.kind is NodeKind.QUANTIZATION_PROFILE:
            if observer is not None:
                observer(node.attrs["tensor_name"], ins[0])
            continue
        ty = node.result_type
        if node.predicate is not None and not np.any(read(node.predicate)):
            dtype = float_dtype if ty.is_float else None
            values[node_id] = sentinel_array(ty, dtype) if debug_fill else np.zeros(ty.dims, dtype or ty.elem_kind.dtype)
            logger.debug(f"%{node_id} skipped by predicate")
            continue
        in_types = [f.type_of(r) for r in node.inputs]
        values[node_id] = run_kernel(node.kind.value, ty, ins, in_types, node.attrs, float_dtype)
    return values, outputs


def evaluate(f: Function, bindings: Mapping[str, BindingValue], precision: str = "float32",
             observer: Optional[Observer] = None) -> Dict[str, np.ndarray]:
    """Run f node by node and return the arrays saved into each output Placeholder."""
    _, outputs = evaluate_all(f, bindings, precision, observer)
    return outputs


def evaluate_node(f: Function, node_id: int, float_dtype=np.float32) -> np.ndarray:
    """Evaluate one node whose operands are all Constants."""
    node = f.nodes[node_id]
    ins, in_types = [], []
    for r in node.inputs:
        storage = f.module.storage[r]
        ins.append(_lift(storage.tensor.data, float_dtype))
        in_types.append(storage.ty)
    return run_kernel(node.kind.value, node.result_type, ins, in_types, node.attrs, float_dtype)


def required_placeholders(f: Function) -> Dict[str, Placeholder]:
    """Placeholders the function reads (as opposed to only writes)."""
    out: Dict[str, Placeholder] = {}
    for node in f.nodes.values():
        refs = node.data_inputs() + ([node.predicate] if node.predicate is not None else [])
        for r in refs:
            p = f.module.get_placeholder(r) if isinstance(r, str) else None
            if p is not None:
                out.setdefault(r, p)
    return dict(sorted(out.items()))
