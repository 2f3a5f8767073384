# graph_opt.py
"""
Target-independent optimizations of the high-level graph.

Each pass is a function ``(f) -> bool`` that rewrites f in place and reports
whether anything changed; ``optimize`` runs every pass of a pipeline to its
fixpoint and re-verifies the function afterwards. The last three passes
only find work on functions that went through ``quantize_function``.
"""

import hashlib
import json
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from logger_config import setup_logger
from .errors import GraphLowerError, PassError
from .evaluator import evaluate_node
from .graph_ir import Function, Ref, replace_all_uses_with, topological_order, verify
from .node_table import NodeKind
from .tensor import Tensor, quantized_range, quantized_type_for_range

logger = setup_logger().getChild("graph_opt")

MAX_ITERATIONS = 10_000


class PassId(Enum):
    DCE = "dce"
    CSE = "cse"
    CONSTANT_FOLD = "constant-fold"
    TRANSPOSE_ELIM = "transpose-elim"
    MERGE_BATCHNORM_CONV = "merge-bn-conv"
    MINIMIZE_CONVERSIONS = "minimize-conversions"
    FOLD_RESCALE = "fold-rescale"
    NORMALIZE_MAX_SCALES = "normalize-max-scales"


DEFAULT_PIPELINE: List[PassId] = [
    PassId.DCE,
    PassId.CSE,
    PassId.CONSTANT_FOLD,
    PassId.TRANSPOSE_ELIM,
    PassId.MERGE_BATCHNORM_CONV,
    PassId.MINIMIZE_CONVERSIONS,
    PassId.FOLD_RESCALE,
    PassId.NORMALIZE_MAX_SCALES,
    PassId.DCE,
]

CONVERSION_KINDS = (NodeKind.QUANTIZE, NodeKind.DEQUANTIZE)
RESCALE_ABSORBERS = (NodeKind.ADD, NodeKind.SUB, NodeKind.MUL, NodeKind.MAX, NodeKind.MIN,
                     NodeKind.BROADCAST_ADD)


def parse_pipeline(text: str) -> List[PassId]:
    """'dce,cse' -> [PassId.DCE, PassId.CSE]; 'default' and 'none' are accepted."""
    text = text.strip()
    if text in ("", "none"):
        return []
    if text == "default":
        return list(DEFAULT_PIPELINE)
    try:
        return [PassId(p.strip()) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise PassError("pipeline", f"unknown pass in '{text}': {e}")


def _single_user(f: Function, ref: Ref) -> bool:
    return f.user_count(ref) == 1


def _drop_if_dead(f: Function, node_id: int):
    if node_id in f.nodes and f.user_count(node_id) == 0 and f.nodes[node_id].result_types:
        f.remove_node(node_id)


def conversion_count(f: Function) -> int:
    return sum(1 for n in f.nodes.values() if n.kind in CONVERSION_KINDS)


# ---------------------------------------------------------------------------
# structural passes
# ---------------------------------------------------------------------------

def eliminate_dead_code(f: Function) -> bool:
    """Keep what Save and QuantizationProfile nodes transitively read."""
    roots = [n.id for n in f.nodes.values()
             if n.kind in (NodeKind.SAVE, NodeKind.QUANTIZATION_PROFILE)]
    live: Set[int] = set()
    stack = list(roots)
    while stack:
        node_id = stack.pop()
        if node_id in live:
            continue
        live.add(node_id)
        node = f.nodes[node_id]
        refs = node.data_inputs() + ([node.predicate] if node.predicate is not None else [])
        stack.extend(r for r in refs if isinstance(r, int))
    dead = [i for i in f.nodes if i not in live]
    for node_id in dead:
        f.remove_node(node_id)
    erased = f.module.erase_unused_constants(also_keep=[f])
    if dead or erased:
        logger.debug(f"DCE removed {len(dead)} nodes and {len(erased)} constants from '{f.name}'")
    return bool(dead)


def _constant_digest(f: Function, name: str) -> str:
    c = f.module.get_constant(name)
    h = hashlib.sha256(str(c.ty).encode())
    h.update(c.tensor.to_bytes())
    return h.hexdigest()


def eliminate_common_subexpressions(f: Function) -> bool:
    changed = False
    canonical: Dict[str, str] = {}
    for name in sorted(f.referenced_storage()):
        if f.module.get_constant(name) is None:
            continue
        digest = _constant_digest(f, name)
        if digest in canonical:
            replace_all_uses_with(f, name, canonical[digest])
            changed = True
        else:
            canonical[digest] = name

    seen: Dict[Tuple, int] = {}
    for node_id in topological_order(f):
        node = f.nodes[node_id]
        if not node.result_types or node.kind is NodeKind.QUANTIZATION_PROFILE:
            continue
        key = (
            node.kind,
            tuple((type(r).__name__, r) for r in node.inputs),
            json.dumps(node.attrs, sort_keys=True),
            str(node.result_type),
            (type(node.predicate).__name__, node.predicate),
        )
        if key in seen:
            replace_all_uses_with(f, node_id, seen[key])
            f.remove_node(node_id)
            changed = True
        else:
            seen[key] = node_id
    return changed


_NEVER_FOLD = (NodeKind.SPLAT, NodeKind.SAVE, NodeKind.QUANTIZATION_PROFILE)


def fold_constants(f: Function) -> bool:
    changed = False
    for node_id in topological_order(f):
        node = f.nodes[node_id]
        if node.kind in _NEVER_FOLD or node.predicate is not None or not node.inputs:
            continue
        if not all(isinstance(r, str) and f.module.get_constant(r) is not None for r in node.inputs):
            continue
        value = evaluate_node(f, node_id)
        name = f.module.create_constant(f"fold{node_id}", Tensor(node.result_type, value), unique=True)
        replace_all_uses_with(f, node_id, name)
        f.remove_node(node_id)
        changed = True
    return changed


def _is_identity(perm: Sequence[int]) -> bool:
    return list(perm) == list(range(len(perm)))


def eliminate_transposes(f: Function) -> bool:
    changed = False
    for node_id in sorted(f.nodes):
        node = f.nodes.get(node_id)
        if node is None or node.kind is not NodeKind.TRANSPOSE or node.predicate is not None:
            continue
        x = node.inputs[0]
        shuffle = node.attrs["shuffle"]
        if _is_identity(shuffle) and f.type_of(x) == node.result_type:
            replace_all_uses_with(f, node_id, x)
            f.remove_node(node_id)
            changed = True
        elif isinstance(x, str) and f.module.get_constant(x) is not None:
            value = evaluate_node(f, node_id)
            name = f.module.create_constant(f"{x}_t", Tensor(node.result_type, value), unique=True)
            replace_all_uses_with(f, node_id, name)
            f.remove_node(node_id)
            changed = True
        elif isinstance(x, int) and f.nodes[x].kind is NodeKind.TRANSPOSE:
            inner = f.nodes[x]
            composed = [inner.attrs["shuffle"][q] for q in shuffle]
            source = inner.inputs[0]
            if _is_identity(composed) and f.type_of(source) == node.result_type:
                replacement = source
            else:
                replacement = f.create(NodeKind.TRANSPOSE, source, result_type=node.result_type,
                                       shuffle=composed)
            replace_all_uses_with(f, node_id, replacement)
            f.remove_node(node_id)
            _drop_if_dead(f, x)
            changed = True
    return changed


def merge_batchnorm_conv(f: Function) -> bool:
    """Fold BatchNormalization(Convolution(x, F, b)) into the convolution's constants."""
    changed = False
    for node_id in sorted(f.nodes):
        bn = f.nodes.get(node_id)
        if bn is None or bn.kind is not NodeKind.BATCH_NORMALIZATION or bn.predicate is not None:
            continue
        conv_id = bn.inputs[0]
        if not isinstance(conv_id, int) or f.nodes[conv_id].kind is not NodeKind.CONVOLUTION:
            continue
        conv = f.nodes[conv_id]
        if not conv.result_type.is_float or conv.predicate is not None or not _single_user(f, conv_id):
            continue
        x, filt, bias = conv.inputs
        stats = bn.inputs[1:]
        if not all(isinstance(r, str) and f.module.get_constant(r) is not None
                   for r in [filt, bias] + list(stats)):
            continue
        if not (_single_user(f, filt) and _single_user(f, bias)):
            logger.warning(f"%{node_id}: convolution constants are shared, not merging BatchNormalization")
            continue
        gamma, beta, mean, var = (f.module.get_constant(r).tensor.data.astype(np.float64) for r in stats)
        a = gamma / np.sqrt(var + bn.attrs["epsilon"])
        w = f.module.get_constant(filt).tensor.data.astype(np.float64) * a[:, None, None, None]
        b = (f.module.get_constant(bias).tensor.data.astype(np.float64) - mean) * a + beta
        new_filt = f.module.create_constant(f"{filt}_bn", w.astype(np.float32), unique=True)
        new_bias = f.module.create_constant(f"{bias}_bn", b.astype(np.float32), unique=True)
        merged = f.create(NodeKind.CONVOLUTION, x, new_filt, new_bias, result_type=bn.result_type,
                          **conv.attrs)
        replace_all_uses_with(f, node_id, merged)
        f.remove_node(node_id)
        f.remove_node(conv_id)
        changed = True
    return changed


# ---------------------------------------------------------------------------
# quantization passes
# ---------------------------------------------------------------------------

def _kind_of(f: Function, ref: Ref) -> Optional[NodeKind]:
    return f.nodes[ref].kind if isinstance(ref, int) else None


def minimize_conversions(f: Function) -> bool:
    changed = False
    for node_id in sorted(f.nodes):
        node = f.nodes.get(node_id)
        if node is None or node.predicate is not None:
            continue
        x = node.inputs[0] if node.inputs else None

        if node.kind is NodeKind.DEQUANTIZE and _kind_of(f, x) is NodeKind.QUANTIZE:
            source = f.nodes[x].inputs[0]
            if f.type_of(source) == node.result_type:
                replace_all_uses_with(f, node_id, source)
                f.remove_node(node_id)
                _drop_if_dead(f, x)
                changed = True

        elif node.kind is NodeKind.QUANTIZE and _kind_of(f, x) is NodeKind.DEQUANTIZE:
            source = f.nodes[x].inputs[0]
            if f.type_of(source) == node.result_type:
                replace_all_uses_with(f, node_id, source)
                f.remove_node(node_id)
                _drop_if_dead(f, x)
                changed = True

        elif node.kind in (NodeKind.TRANSPOSE, NodeKind.RESHAPE) \
                and _kind_of(f, x) is NodeKind.DEQUANTIZE and _single_user(f, x):
            source = f.nodes[x].inputs[0]
            moved_ty = f.type_of(source).with_dims(node.result_type.dims)
            moved = f.create(node.kind, source, result_type=moved_ty, **node.attrs)
            deq = f.create(NodeKind.DEQUANTIZE, moved)
            replace_all_uses_with(f, node_id, deq)
            f.remove_node(node_id)
            f.remove_node(x)
            changed = True

        elif node.kind is NodeKind.CONCAT and len(node.inputs) > 1 \
                and all(_kind_of(f, r) is NodeKind.DEQUANTIZE and _single_user(f, r) for r in node.inputs):
            sources = [f.nodes[r].inputs[0] for r in node.inputs]
            types = {f.type_of(s).with_dims((1,)) for s in sources}
            if len(types) != 1:
                continue
            q_ty = f.type_of(sources[0]).with_dims(node.result_type.dims)
            joined = f.create(NodeKind.CONCAT, *sources, result_type=q_ty, **node.attrs)
            deq = f.create(NodeKind.DEQUANTIZE, joined)
            old_inputs = list(node.inputs)
            replace_all_uses_with(f, node_id, deq)
            f.remove_node(node_id)
            for r in old_inputs:
                _drop_if_dead(f, r)
            changed = True
    return changed


def fold_rescale(f: Function) -> bool:
    changed = False
    for node_id in sorted(f.nodes):
        node = f.nodes.get(node_id)
        if node is None or node.kind is not NodeKind.RESCALE_QUANTIZED or node.predicate is not None:
            continue
        x = node.inputs[0]
        target = node.result_type
        producer = f.nodes[x] if isinstance(x, int) else None

        if f.type_of(x) == target:
            replace_all_uses_with(f, node_id, x)
            f.remove_node(node_id)
            changed = True
        elif producer is not None and producer.kind is NodeKind.RESCALE_QUANTIZED:
            node.inputs[0] = producer.inputs[0]
            _drop_if_dead(f, x)
            changed = True
        elif producer is not None and _single_user(f, x) and (
                producer.kind in (NodeKind.QUANTIZE, NodeKind.SPLAT) or producer.kind in RESCALE_ABSORBERS):
            f.retype(x, target)
            replace_all_uses_with(f, node_id, x)
            f.remove_node(node_id)
            changed = True
    return changed


def normalize_max_scales(f: Function) -> bool:
    """Give both operands of every quantized Max one shared type."""
    changed = False
    for node_id in sorted(f.nodes):
        node = f.nodes.get(node_id)
        if node is None or node.kind is not NodeKind.MAX or not node.result_type.is_quantized:
            continue
        a, b = node.inputs
        ta, tb = f.type_of(a), f.type_of(b)
        if ta == tb:
            continue
        splat_a = _kind_of(f, a) is NodeKind.SPLAT
        splat_b = _kind_of(f, b) is NodeKind.SPLAT
        if splat_a != splat_b:
            slot, other_ty = (0, tb) if splat_a else (1, ta)
            splat = f.nodes[node.inputs[slot]]
            node.inputs[slot] = f.create_splat(other_ty, splat.attrs["value"])
            _drop_if_dead(f, splat.id)
        else:
            lo = min(quantized_range(ta)[0], quantized_range(tb)[0])
            hi = max(quantized_range(ta)[1], quantized_range(tb)[1])
            union = quantized_type_for_range(ta.dims, lo, hi)
            for slot, ty in ((0, ta), (1, tb)):
                if ty != union:
                    node.inputs[slot] = f.create(NodeKind.RESCALE_QUANTIZED, node.inputs[slot],
                                                 result_type=union)
        changed = True
    return changed


PASSES: Dict[PassId, Callable[[Function], bool]] = {
    PassId.DCE: eliminate_dead_code,
    PassId.CSE: eliminate_common_subexpressions,
    PassId.CONSTANT_FOLD: fold_constants,
    PassId.TRANSPOSE_ELIM: eliminate_transposes,
    PassId.MERGE_BATCHNORM_CONV: merge_batchnorm_conv,
    PassId.MINIMIZE_CONVERSIONS: minimize_conversions,
    PassId.FOLD_RESCALE: fold_rescale,
    PassId.NORMALIZE_MAX_SCALES: normalize_max_scales,
}


def run_pass(f: Function, pass_id: Union[PassId, str]) -> int:
    """Run one pass to its fixpoint; returns the number of productive iterations."""
    pass_id = PassId(pass_id)
    fn = PASSES[pass_id]
    iterations = 0
    try:
        while fn(f):
            iterations += 1
            if iterations > MAX_ITERATIONS:
                raise PassError(pass_id.value, "did not reach a fixpoint")
    except PassError:
        raise
    except (GraphLowerError, KeyError, ValueError) as e:
        logger.error(f"Pass {pass_id.value} failed on '{f.name}': {e}")
        raise PassError(pass_id.value, str(e))
    diags = verify(f)
    if diags:
        raise PassError(pass_id.value, "; ".join(str(d) for d in diags[:5]))
    return iterations


def optimize(f: Function, pipeline: Optional[Sequence[Union[PassId, str]]] = None) -> Function:
    """Run the pipeline (default: DEFAULT_PIPELINE) over f in place and return it."""
    pipeline = DEFAULT_PIPELINE if pipeline is None else pipeline
    for pass_id in pipeline:
        before = len(f.nodes)
        iterations = run_pass(f, pass_id)
        logger.info(f"{PassId(pass_id).value}: '{f.name}' {before} -> {len(f.nodes)} nodes "
                    f"({iterations} iterations)")
    return f
