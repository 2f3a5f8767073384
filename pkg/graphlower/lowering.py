# lowering.py
"""
Node lowering: rewrite high-level operator nodes into the small set of
linear-algebra nodes every backend implements.

Lowering runs after differentiation. Regression is a no-op in both modes
once the gradient graph exists, which is why lowering a training function
that was never differentiated is refused.
"""

from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from logger_config import setup_logger
from .errors import LoweringError, TypeCheckError
from .graph_ir import Function, Node, Ref, replace_all_uses_with, verify_or_raise
from .node_table import KIND_TABLE, NodeKind

logger = setup_logger().getChild("lowering")


class CompilationMode(Enum):
    INFERENCE = "inference"
    TRAINING = "training"


BackendHook = Callable[[Node], bool]


def lower_everything(node: Node) -> bool:
    return True


def lower_fully_connected(f: Function, node_id: int) -> Ref:
    x, w, b = f.nodes[node_id].inputs
    mm = f.create(NodeKind.MAT_MUL, x, w)
    return f.create(NodeKind.BROADCAST_ADD, mm, b)


def lower_regression(f: Function, node_id: int) -> Ref:
    return f.nodes[node_id].inputs[0]


def lower_relu(f: Function, node_id: int) -> Ref:
    node = f.nodes[node_id]
    x = node.inputs[0]
    zero = f.create_splat(node.result_type, 0.0)
    return f.create(NodeKind.MAX, x, zero, result_type=node.result_type, predicate=node.predicate)


def lower_sgd(f: Function, node_id: int) -> Ref:
    """w <- w + grad * (-lr), built from Mul, Add and a Splat."""
    node = f.nodes[node_id]
    w, grad = node.inputs
    neg_lr = f.create_splat(node.result_type, -float(node.attrs["learning_rate"]))
    step = f.create(NodeKind.MUL, grad, neg_lr)
    return f.create(NodeKind.ADD, w, step)


def lower_batchnorm_inference(f: Function, node_id: int) -> Ref:
    """y = x * a + c with a = gamma / sqrt(var + eps) and c = beta - mean * a, per channel."""
    node = f.nodes[node_id]
    x, gamma, beta, mean, var = node.inputs
    stats = []
    for ref in (gamma, beta, mean, var):
        c = f.module.get_constant(ref) if isinstance(ref, str) else None
        if c is None:
            raise LoweringError(f"%{node_id} BatchNormalization statistics must be Constants, "
                                f"got {ref!r}")
        stats.append(c.tensor.data.astype(np.float64))
    g, b, m, v = stats
    a = g / np.sqrt(v + node.attrs["epsilon"])
    c = b - m * a
    ty = f.type_of(x)
    scale = f.module.create_constant(f"bn{node_id}_scale",
                                     np.broadcast_to(a.astype(np.float32), ty.dims), unique=True)
    shift = f.module.create_constant(f"bn{node_id}_shift",
                                     np.broadcast_to(c.astype(np.float32), ty.dims), unique=True)
    scaled = f.create(NodeKind.MUL, x, scale)
    return f.create(NodeKind.ADD, scaled, shift)


RULES = {
    NodeKind.FULLY_CONNECTED: lower_fully_connected,
    NodeKind.REGRESSION: lower_regression,
    NodeKind.RELU: lower_relu,
    NodeKind.SGD: lower_sgd,
    NodeKind.BATCH_NORMALIZATION: lower_batchnorm_inference,
}


def lower(f: Function, mode: CompilationMode = CompilationMode.INFERENCE,
          backend_hooks: Optional[BackendHook] = None) -> Function:
    """Lower f in place to a fixpoint and return it."""
    mode = CompilationMode(mode)
    should_lower = backend_hooks or lower_everything
    if mode is CompilationMode.TRAINING and not f.differentiated and f.count(NodeKind.REGRESSION):
        raise LoweringError(
            f"'{f.name}' must be differentiated before it is lowered for training")

    work = f.clone()

    def wants(node_id: int) -> bool:
        node = work.nodes.get(node_id)
        return node is not None and node.kind in RULES and should_lower(node)

    worklist: List[int] = sorted(i for i in work.nodes if wants(i))
    lowered = 0
    while worklist:
        node_id = worklist.pop(0)
        if not wants(node_id):
            continue
        node = work.nodes[node_id]
        first_new = work._next_id
        replacement = RULES[node.kind](work, node_id)
        new_ty = work.type_of(replacement)
        if new_ty != node.result_type:
            raise LoweringError(f"lowering %{node_id} ({node.kind.value}) produced {new_ty}, "
                                f"expected {node.result_type}")
        try:
            replace_all_uses_with(work, node_id, replacement)
        except TypeCheckError as e:
            raise LoweringError(str(e))
        work.remove_node(node_id)
        lowered += 1
        worklist.extend(i for i in range(first_new, work._next_id) if wants(i))
        worklist.sort()

    f.nodes = work.nodes
    f._next_id = work._next_id
    verify_or_raise(f, "lowering")
    logger.info(f"Lowered '{f.name}' ({mode.value}): {lowered} nodes rewritten, {len(f.nodes)} nodes")
    return f


def is_lowered(f: Function, backend_hooks: Optional[BackendHook] = None) -> bool:
    should_lower = backend_hooks or lower_everything
    return not any(n.kind in RULES and should_lower(n) for n in f.nodes.values())


def lowerable_kinds() -> List[NodeKind]:
    return [k for k, info in KIND_TABLE.items() if info.lowerable]
