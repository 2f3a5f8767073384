# quantize.py
"""
Profile-guided int8 quantization.

The flow has two phases. ``instrument`` adds a QuantizationProfile observer
behind every float intermediate and ``run_profile`` runs a dataset through
the instrumented function to record value ranges. ``quantize_function`` then
recompiles the original function with those ranges, turning the quantizable
nodes into int8 islands bounded by Quantize and Dequantize nodes.

Tensors are keyed "function:Kind:topological-index:0" (placeholders use
"function:Placeholder:name:0"), so a profile stays valid for the same
pre-quantization graph across reloads.

Profile text format, one entry per line after optional '#' comments:

    <tensor name> <min> <max> <count>
"""

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from logger_config import setup_logger
from .errors import ProfileError
from .evaluator import BindingValue, evaluate, required_placeholders
from .graph_ir import Function, Ref, topological_order, verify_or_raise
from .node_table import NodeKind
from .tensor import Tensor, TensorType, quantize_array, quantized_type_for_range

logger = setup_logger().getChild("quantize")

PROFILE_HEADER = "# graphlower range profile: <tensor name> <min> <max> <count>"

QUANTIZABLE_KINDS = frozenset({
    NodeKind.CONVOLUTION, NodeKind.MAT_MUL, NodeKind.BROADCAST_ADD, NodeKind.ADD, NodeKind.SUB,
    NodeKind.MUL, NodeKind.MAX, NodeKind.MIN, NodeKind.RELU, NodeKind.MAX_POOL, NodeKind.AVG_POOL,
    NodeKind.TRANSPOSE, NodeKind.RESHAPE, NodeKind.CONCAT, NodeKind.SPLAT,
})
# these reuse their operand's scale and offset instead of a profiled range
INHERITING_KINDS = frozenset({NodeKind.MAX_POOL, NodeKind.TRANSPOSE, NodeKind.RESHAPE})


@dataclass
class ProfileEntry:
    min: float
    max: float
    count: int = 1


class RangeProfile:
    """Running min/max per tensor name; safe to update from several threads."""

    def __init__(self, entries: Optional[Mapping[str, ProfileEntry]] = None):
        self.entries: Dict[str, ProfileEntry] = dict(entries or {})
        self._lock = threading.Lock()

    def observe(self, name: str, values: np.ndarray):
        values = np.asarray(values)
        if values.size == 0:
            return
        lo, hi = float(np.min(values)), float(np.max(values))
        with self._lock:
            entry = self.entries.get(name)
            if entry is None:
                self.entries[name] = ProfileEntry(lo, hi, 1)
            else:
                entry.min = min(entry.min, lo)
                entry.max = max(entry.max, hi)
                entry.count += 1

    def range(self, name: str) -> Tuple[float, float]:
        entry = self.entries.get(name)
        if entry is None:
            raise ProfileError(f"no profile entry for tensor '{name}'")
        return entry.min, entry.max

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def to_text(self) -> str:
        lines = [PROFILE_HEADER]
        for name in sorted(self.entries):
            e = self.entries[name]
            lines.append(f"{name} {e.min!r} {e.max!r} {e.count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RangeProfile":
        entries: Dict[str, ProfileEntry] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ProfileError(f"profile line {lineno}: expected 'name min max count', got '{line}'")
            try:
                entry = ProfileEntry(float(parts[1]), float(parts[2]), int(parts[3]))
            except ValueError as e:
                raise ProfileError(f"profile line {lineno}: {e}")
            if entry.min > entry.max or entry.count < 1:
                raise ProfileError(f"profile line {lineno}: invalid entry for '{parts[0]}'")
            entries[parts[0]] = entry
        return cls(entries)

    def save(self, path: str):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> "RangeProfile":
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass
class QuantizationSchema:
    skip: FrozenSet[NodeKind] = field(default_factory=lambda: frozenset({NodeKind.SOFT_MAX}))

    def __post_init__(self):
        self.skip = frozenset(NodeKind(k) for k in self.skip)


def tensor_name(function_name: str, kind: NodeKind, index: int) -> str:
    return f"{function_name}:{kind.value}:{index}:0"


def placeholder_tensor_name(function_name: str, placeholder: str) -> str:
    return f"{function_name}:Placeholder:{placeholder}:0"


def _tensor_names(f: Function) -> Dict[int, str]:
    return {node_id: tensor_name(f.name, f.nodes[node_id].kind, index)
            for index, node_id in enumerate(topological_order(f))}


def is_instrumented(f: Function) -> bool:
    return f.count(NodeKind.QUANTIZATION_PROFILE) > 0


def instrument(f: Function) -> Function:
    """Copy of f with a profiling observer behind every float node output."""
    verify_or_raise(f, "instrumentation")
    if is_instrumented(f):
        raise ProfileError(f"function '{f.name}' is already instrumented")
    g = f.clone()
    g.meta["profile_of"] = f.name
    added = 0
    for node_id, name in _tensor_names(f).items():
        ty = f.nodes[node_id].result_type
        if ty is not None and ty.is_float:
            g.create(NodeKind.QUANTIZATION_PROFILE, node_id, tensor_name=name)
            added += 1
    verify_or_raise(g, "instrumentation")
    logger.info(f"Instrumented '{f.name}' with {added} profiling nodes")
    return g


def run_profile(f_instrumented: Function, dataset: Sequence[Mapping[str, BindingValue]],
                workers: int = 1) -> RangeProfile:
    """Run every sample through the instrumented function and record ranges."""
    if not is_instrumented(f_instrumented):
        raise ProfileError(f"function '{f_instrumented.name}' is not instrumented")
    dataset = list(dataset)
    if not dataset:
        raise ProfileError("cannot profile with an empty dataset")
    profile = RangeProfile()
    base_name = f_instrumented.meta.get("profile_of", f_instrumented.name)
    float_inputs = [name for name, p in required_placeholders(f_instrumented).items() if p.ty.is_float]

    def run_sample(sample: Mapping[str, BindingValue]):
        for name in float_inputs:
            if name in sample:
                value = sample[name]
                profile.observe(placeholder_tensor_name(base_name, name),
                                value.data if isinstance(value, Tensor) else value)
        evaluate(f_instrumented, sample, observer=profile.observe)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_sample, dataset))
    else:
        for sample in dataset:
            run_sample(sample)
    logger.info(f"Profiled '{base_name}' over {len(dataset)} samples: {len(profile)} tensors")
    return profile


class _Quantizer:
    def __init__(self, g: Function, profile: RangeProfile, names: Dict[int, str], base_name: str):
        self.g = g
        self.base_name = base_name
        self.profile = profile
        self.names = names
        self.quantized: Dict[Tuple[str, Ref], Ref] = {}
        self.dequantized: Dict[int, int] = {}

    def _profiled_type(self, name: str, dims) -> TensorType:
        if name not in self.profile:
            raise ProfileError(f"profile has no entry for tensor '{name}'")
        lo, hi = self.profile.range(name)
        return quantized_type_for_range(dims, lo, hi)

    def node_type(self, node_id: int) -> TensorType:
        node = self.g.nodes[node_id]
        return self._profiled_type(self.names[node_id], node.result_type.dims)

    def constant(self, name: str) -> str:
        module = self.g.module
        data = module.get_constant(name).tensor.data
        ty = quantized_type_for_range(data.shape, float(np.min(data)), float(np.max(data)))
        q = Tensor(ty, quantize_array(data, ty))
        target = f"{name}__q"
        existing = module.get_constant(target)
        if existing is not None and existing.tensor == q:
            return target
        return module.create_constant(target, q, unique=existing is not None)

    def to_quantized(self, ref: Ref, in_q: Set[int]) -> Ref:
        """int8 view of an operand, creating at most one conversion per operand."""
        if isinstance(ref, int) and ref in in_q:
            return ref
        key = (type(ref).__name__, ref)
        if key in self.quantized:
            return self.quantized[key]
        g = self.g
        if isinstance(ref, str) and g.module.get_constant(ref) is not None:
            out: Ref = self.constant(ref)
        else:
            if isinstance(ref, str):
                ty = self._profiled_type(placeholder_tensor_name(self.base_name, ref), g.type_of(ref).dims)
            else:
                ty = self.node_type(ref)
            out = g.create(NodeKind.QUANTIZE, ref, result_type=ty)
        self.quantized[key] = out
        return out

    def to_float(self, ref: Ref, in_q: Set[int]) -> Ref:
        if not (isinstance(ref, int) and ref in in_q):
            return ref
        if ref not in self.dequantized:
            self.dequantized[ref] = self.g.create(NodeKind.DEQUANTIZE, ref)
        return self.dequantized[ref]


def _quantizable(f: Function, schema: QuantizationSchema) -> Set[int]:
    candidates = {
        n.id for n in f.nodes.values()
        if n.kind in QUANTIZABLE_KINDS and n.kind not in schema.skip
        and n.result_type is not None and n.result_type.is_float
    }
    chosen = {i for i in candidates if f.nodes[i].kind is not NodeKind.SPLAT}
    for i in candidates - chosen:
        users = f.users(i)
        if users and all(u in chosen and slot >= 0 for u, slot in users):
            chosen.add(i)
    return chosen


def quantize_function(f: Function, profile: RangeProfile,
                      schema: Optional[QuantizationSchema] = None) -> Function:
    """Return a copy of f whose quantizable nodes compute on int8."""
    schema = schema or QuantizationSchema()
    verify_or_raise(f, "quantization")
    if is_instrumented(f):
        raise ProfileError(f"function '{f.name}' still carries profiling nodes")

    order = topological_order(f)
    names = _tensor_names(f)
    in_q = _quantizable(f, schema)
    g = f.clone()
    q = _Quantizer(g, profile, names, f.name)

    for node_id in order:
        node = g.nodes[node_id]
        if node_id in in_q:
            node.inputs = [q.to_quantized(r, in_q) for r in node.inputs]
            if node.kind in INHERITING_KINDS:
                ty = g.type_of(node.inputs[0]).with_dims(node.result_type.dims)
            else:
                ty = q.node_type(node_id)
            g.retype(node_id, ty)
        else:
            limit = 1 if node.kind is NodeKind.SAVE else len(node.inputs)
            for slot in range(limit):
                node.inputs[slot] = q.to_float(node.inputs[slot], in_q)

    g.meta["quantized"] = True
    verify_or_raise(g, "quantization")
    logger.info(f"Quantized '{f.name}': {len(in_q)} int8 nodes, "
                f"{g.count(NodeKind.QUANTIZE)} Quantize, {g.count(NodeKind.DEQUANTIZE)} Dequantize")
    return g


def profile_function(f: Function, dataset: Iterable[Mapping[str, BindingValue]], workers: int = 1) -> RangeProfile:
    """instrument + run_profile in one step."""
    return run_profile(instrument(f), list(dataset), workers=workers)


def quantized_node_count(f: Function) -> int:
    return sum(1 for n in f.nodes.values()
               if n.result_type is not None and n.result_type.is_quantized
               and n.kind not in (NodeKind.QUANTIZE, NodeKind.RESCALE_QUANTIZED))


def scales_of(f: Function) -> List[float]:
    return [n.result_type.scale for n in f.nodes.values()
            if n.result_type is not None and n.result_type.is_quantized]
