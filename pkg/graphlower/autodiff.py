# autodiff.py
"""
Reverse-mode differentiation of a high-level Function.

Differentiation runs before lowering: a Regression node marks the loss,
gradients flow back to the trainable Placeholders, and each trainable gets
an SGD update saved back into it. The loss convention is 1/2 * ||pred - expected||^2,
so the seed gradient is the elementwise difference pred - expected.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Set

import numpy as np

from logger_config import setup_logger
from .errors import BindingError, UnsupportedGradientError
from .evaluator import BindingValue, evaluate_all, required_placeholders
from .graph_ir import Function, Ref, topological_order, verify_or_raise
from .node_table import KIND_TABLE, NodeKind
from .tensor import TensorType

logger = setup_logger().getChild("autodiff")

# Smallest positive float32; Max(x, TINY) equals x for every positive float32 x.
TINY = float(np.finfo(np.float32).smallest_subnormal)


@dataclass
class GradConfig:
    learning_rate: float
    trainables: Set[str] = field(default_factory=set)

    def __post_init__(self):
        self.trainables = set(self.trainables)
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not self.trainables:
            raise ValueError("training needs at least one trainable placeholder")


class _GradBuilder:
    """Accumulates gradient contributions while walking the graph backwards."""

    def __init__(self, g: Function, tracked):
        self.g = g
        self.tracked = tracked
        self.grads: Dict[Ref, Ref] = {}

    def accumulate(self, ref: Ref, contribution: Ref):
        if not self.tracked(ref):
            return
        key = (type(ref).__name__, ref)
        if key in self.grads:
            self.grads[key] = self.g.create(NodeKind.ADD, self.grads[key], contribution)
        else:
            self.grads[key] = contribution

    def get(self, ref: Ref):
        return self.grads.get((type(ref).__name__, ref))

    # -- helpers --------------------------------------------------------------
    def neg(self, ref: Ref) -> int:
        ty = self.g.type_of(ref)
        return self.g.create(NodeKind.MUL, ref, self.g.create_splat(ty, -1.0))

    def transpose2d(self, ref: Ref) -> int:
        return self.g.create(NodeKind.TRANSPOSE, ref, shuffle=[1, 0])

    def reduce_to(self, ref: Ref, dims) -> int:
        """Sum ref over its leading axes so that it ends up with shape dims."""
        ty = self.g.type_of(ref)
        inner = int(np.prod(dims))
        outer = ty.size // inner
        flat = self.g.create(NodeKind.RESHAPE, ref, dims=[outer, inner])
        ones = self.g.create_splat(TensorType.float32(1, outer), 1.0)
        summed = self.g.create(NodeKind.MAT_MUL, ones, flat)
        return self.g.create(NodeKind.RESHAPE, summed, dims=list(dims))


def _required_nodes(f: Function, trainables: Set[str]) -> Set[int]:
    """Nodes that depend on a trainable and feed a Regression loss."""
    seeds = [n.id for n in f.nodes.values()
             if any(isinstance(r, str) and r in trainables for r in n.data_inputs())]
    forward: Set[int] = set()
    for s in seeds:
        forward.add(s)
        forward.update(_data_descendants(f, s))
    regressions = [n.id for n in f.nodes.values() if n.kind is NodeKind.REGRESSION]
    backward: Set[int] = set()
    for r in regressions:
        backward.add(r)
        backward.update(_data_ancestors(f, r))
    return forward & backward


def _data_descendants(f: Function, start: int) -> Set[int]:
    users: Dict[int, List[int]] = {}
    for n in f.nodes.values():
        for r in n.data_inputs():
            if isinstance(r, int):
                users.setdefault(r, []).append(n.id)
    seen, stack = set(), [start]
    while stack:
        for u in users.get(stack.pop(), []):
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def _data_ancestors(f: Function, start: int) -> Set[int]:
    seen, stack = set(), [start]
    while stack:
        for r in f.nodes[stack.pop()].data_inputs():
            if isinstance(r, int) and r not in seen:
                seen.add(r)
                stack.append(r)
    return seen


def differentiate(f: Function, cfg: GradConfig) -> Function:
    """Return a new function computing f plus an SGD update of every trainable."""
    verify_or_raise(f, "differentiation")
    for name in sorted(cfg.trainables):
        if f.module.get_placeholder(name) is None:
            raise UnsupportedGradientError(f"trainable '{name}' is not a Placeholder")
    if not any(n.kind is NodeKind.REGRESSION for n in f.nodes.values()):
        raise UnsupportedGradientError(f"function '{f.name}' has no Regression loss to differentiate")

    g = f.clone(name=f"{f.name}_grad")
    required = _required_nodes(g, cfg.trainables)
    for node_id in sorted(required):
        node = g.nodes[node_id]
        if not KIND_TABLE[node.kind].has_gradient:
            raise UnsupportedGradientError(
                f"%{node_id} ({node.kind.value}) has no gradient rule but lies between a trainable and the loss")
    for name in sorted(cfg.trainables):
        if not any(name in g.nodes[i].data_inputs() for i in required):
            raise UnsupportedGradientError(f"trainable '{name}' does not reach the loss")

    def tracked(ref: Ref) -> bool:
        if isinstance(ref, str):
            return ref in cfg.trainables
        return ref in required

    builder = _GradBuilder(g, tracked)
    forward_order = [i for i in topological_order(g) if i in required]
    for node_id in reversed(forward_order):
        node = g.nodes[node_id]
        ins = node.inputs
        if node.kind is NodeKind.REGRESSION:
            # d(1/2 ||p - e||^2)/dp = p - e
            seed = g.create(NodeKind.SUB, ins[0], ins[1])
            builder.accumulate(ins[0], seed)
            if tracked(ins[1]):
                builder.accumulate(ins[1], builder.neg(seed))
            continue
        grad = builder.get(node_id)
        if grad is None:
            continue
        _apply_rule(builder, node, grad)

    updates = {}
    for name in sorted(cfg.trainables):
        grad = builder.get(name)
        sgd = g.create(NodeKind.SGD, name, grad, learning_rate=float(cfg.learning_rate))
        g.create_save(sgd, name)
        updates[name] = grad
    g.differentiated = True
    g.meta["gradients"] = updates
    verify_or_raise(g, "differentiated function")
    logger.info(f"Differentiated '{f.name}': {len(f.nodes)} -> {len(g.nodes)} nodes, "
                f"{len(updates)} trainables")
    return g


def _apply_rule(b: _GradBuilder, node, grad: Ref):
    g = b.g
    ins = node.inputs
    kind = node.kind
    if kind is NodeKind.ADD:
        b.accumulate(ins[0], grad)
        b.accumulate(ins[1], grad)
    elif kind is NodeKind.SUB:
        b.accumulate(ins[0], grad)
        if b.tracked(ins[1]):
            b.accumulate(ins[1], b.neg(grad))
    elif kind is NodeKind.MUL:
        if b.tracked(ins[0]):
            b.accumulate(ins[0], g.create(NodeKind.MUL, grad, ins[1]))
        if b.tracked(ins[1]):
            b.accumulate(ins[1], g.create(NodeKind.MUL, grad, ins[0]))
    elif kind is NodeKind.DIV:
        if b.tracked(ins[0]):
            b.accumulate(ins[0], g.create(NodeKind.DIV, grad, ins[1]))
        if b.tracked(ins[1]):
            num = g.create(NodeKind.MUL, grad, ins[0])
            den = g.create(NodeKind.MUL, ins[1], ins[1])
            b.accumulate(ins[1], b.neg(g.create(NodeKind.DIV, num, den)))
    elif kind is NodeKind.MAT_MUL:
        if b.tracked(ins[0]):
            b.accumulate(ins[0], g.create(NodeKind.MAT_MUL, grad, b.transpose2d(ins[1])))
        if b.tracked(ins[1]):
            b.accumulate(ins[1], g.create(NodeKind.MAT_MUL, b.transpose2d(ins[0]), grad))
    elif kind is NodeKind.BROADCAST_ADD:
        b.accumulate(ins[0], grad)
        if b.tracked(ins[1]):
            b.accumulate(ins[1], b.reduce_to(grad, g.type_of(ins[1]).dims))
    elif kind is NodeKind.RELU:
        # mask is 1 where x > 0 and 0 elsewhere (including x == 0)
        x = ins[0]
        floor = g.create_splat(g.type_of(x), TINY)
        mask = g.create(NodeKind.DIV, node.id, g.create(NodeKind.MAX, x, floor))
        b.accumulate(x, g.create(NodeKind.MUL, grad, mask))
    elif kind is NodeKind.TRANSPOSE:
        shuffle = node.attrs["shuffle"]
        inverse = [0] * len(shuffle)
        for i, p in enumerate(shuffle):
            inverse[p] = i
        b.accumulate(ins[0], g.create(NodeKind.TRANSPOSE, grad, shuffle=inverse))
    elif kind is NodeKind.RESHAPE:
        b.accumulate(ins[0], g.create(NodeKind.RESHAPE, grad, dims=list(g.type_of(ins[0]).dims)))
    elif kind is NodeKind.FULLY_CONNECTED:
        x, w, bias = ins
        if b.tracked(x):
            b.accumulate(x, g.create(NodeKind.MAT_MUL, grad, b.transpose2d(w)))
        if b.tracked(w):
            b.accumulate(w, g.create(NodeKind.MAT_MUL, b.transpose2d(x), grad))
        if b.tracked(bias):
            b.accumulate(bias, b.reduce_to(grad, g.type_of(bias).dims))
    else:
        raise UnsupportedGradientError(f"%{node.id} ({kind.value}) has no gradient rule")


# ---------------------------------------------------------------------------
# validation harness
# ---------------------------------------------------------------------------

def regression_loss(f: Function, bindings: Mapping[str, BindingValue]) -> float:
    """Sum of 1/2 * ||pred - expected||^2 over every Regression node, in float64."""
    values, _ = evaluate_all(f, bindings, precision="float64")

    def value_of(ref):
        if isinstance(ref, int):
            return values[ref]
        return np.asarray(bindings[ref], dtype=np.float64) if ref in bindings else \
            f.module.storage[ref].tensor.data.astype(np.float64)

    total = 0.0
    for node in f.nodes.values():
        if node.kind is NodeKind.REGRESSION:
            diff = value_of(node.inputs[0]) - value_of(node.inputs[1])
            total += 0.5 * float(np.sum(diff * diff))
    return total


def gradient_check(f: Function, cfg: GradConfig, bindings: Mapping[str, BindingValue],
                   step: float = 1e-3) -> float:
    """Max relative error between symbolic and central-difference gradients."""
    for name in required_placeholders(f):
        if name not in bindings:
            raise BindingError(f"placeholder '{name}' is not bound")
    base = {}
    for name, value in bindings.items():
        arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        base[name] = np.array(arr, dtype=np.float64 if np.asarray(arr).dtype.kind == "f" else None)

    g = differentiate(f, cfg)
    values, _ = evaluate_all(g, base, precision="float64")
    worst = 0.0
    for name in sorted(cfg.trainables):
        symbolic = values[g.meta["gradients"][name]]
        w = base[name]
        for idx in np.ndindex(w.shape):
            original = w[idx]
            w[idx] = original + step
            plus = regression_loss(f, base)
            w[idx] = original - step
            minus = regression_loss(f, base)
            w[idx] = original
            numeric = (plus - minus) / (2 * step)
            s = float(symbolic[idx])
            err = abs(s - numeric) / max(abs(s), abs(numeric), 1e-6)
            worst = max(worst, err)
    logger.info(f"Gradient check on '{f.name}': max relative error {worst:.3e}")
    return worst
