# interp_backend.py
"""
Reference interpreter backend.

``compile`` turns an optimized IRFunction and its MemoryPlan into a
CompiledFunction: the constant image preloaded at constant offsets plus a
list of execution steps. Runs of consecutive data-parallel instructions over
same-shaped buffers are stacked into one ElementwiseFused step that walks
the index space once, block by block, applying every instruction of the run
to a block before moving to the next. A group is closed early when two of
its buffers share arena bytes without lining up element for element.

``run`` gives every call a private arena, so one CompiledFunction can serve
concurrent callers.
"""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from logger_config import setup_logger
from .errors import BindingError, IRError
from .evaluator import SENTINEL_BYTE, BindingValue, coerce_binding
from .graph_ir import Node
from .kernels import has_kernel, run_kernel
from .low_ir import (
    COPY,
    DATA_PARALLEL_KINDS,
    ELEMENTWISE_FUSED,
    LOW_LEVEL_KINDS,
    Instruction,
    IRFunction,
    Mutability,
    verify_ir_or_raise,
)
from .memory_plan import MemoryPlan
from .node_table import NodeKind
from .settings import get_settings
from .tensor import Tensor

logger = setup_logger().getChild("interp_backend")

# elements per block when executing a stacked group
BLOCK_ELEMENTS = 4096


@dataclass(frozen=True)
class Step:
    kind: str
    instructions: Tuple[Instruction, ...]
    first: int
    last: int
    shape: Tuple[int, ...] = ()


@dataclass
class CompiledFunction:
    ir: IRFunction
    plan: MemoryPlan
    constant_image: bytes
    steps: List[Step]
    fused_groups: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.ir.name

    def input_names(self) -> List[str]:
        return [w.name for w in self.ir.inputs()]

    def output_names(self) -> List[str]:
        return [w.name for w in self.ir.outputs()]


def _stackable(ir: IRFunction, ins: Instruction) -> bool:
    if ins.kind not in DATA_PARALLEL_KINDS or ins.predicate is not None:
        return False
    dims = ir.type_of(ins.operands[0][0]).dims
    return all(ir.type_of(name).dims == dims for name, _ in ins.operands)


def _span(ir: IRFunction, plan: MemoryPlan, name: str) -> Tuple[int, int, int]:
    ty = ir.type_of(name)
    off = plan.offsets[name]
    return off, off + ty.size_in_bytes, ty.elem_kind.itemsize


def _clashes(spans: Mapping[str, Tuple[int, int, int]], name: str, span: Tuple[int, int, int]) -> bool:
    """
    Members of one stacked group may share bytes only when their views line
    up element for element: same start offset and same element size.
    """
    lo, hi, itemsize = span
    for other, (o_lo, o_hi, o_itemsize) in spans.items():
        if other == name or hi <= o_lo or o_hi <= lo:
            continue
        if lo != o_lo or itemsize != o_itemsize:
            return True
    return False


def compile(ir: IRFunction, plan: MemoryPlan, fuse: Optional[bool] = None,
            constants: Optional[Mapping[str, Tensor]] = None) -> CompiledFunction:
    """Freeze the constant image and group instructions into execution steps."""
    constants = ir.payloads if constants is None else constants
    fuse = get_settings().fuse if fuse is None else fuse
    verify_ir_or_raise(ir, "compile")
    for ins in ir.compute_instructions():
        if ins.kind != COPY and not has_kernel(ins.kind):
            raise IRError(f"interpreter has no kernel for '{ins.kind}'")

    lo, hi = plan.constant_region
    image = bytearray(hi - lo)
    for w in ir.weights.values():
        if w.mutability is Mutability.CONSTANT:
            if w.name not in constants:
                raise IRError(f"no payload for constant '{w.name}'")
            if constants[w.name].ty != w.ty:
                raise IRError(f"payload of '{w.name}' has type {constants[w.name].ty}, expected {w.ty}")
            data = constants[w.name].to_bytes()
            off = plan.offsets[w.name] - lo
            image[off:off + len(data)] = data

    steps: List[Step] = []
    fused: List[Tuple[int, int]] = []
    run: List[Tuple[int, Instruction]] = []
    spans: Dict[str, Tuple[int, int, int]] = {}

    def flush():
        if len(run) >= 2:
            shape = ir.type_of(run[0][1].operands[0][0]).dims
            steps.append(Step(ELEMENTWISE_FUSED, tuple(i for _, i in run), run[0][0], run[-1][0], shape))
            fused.append((run[0][0], run[-1][0]))
        else:
            steps.extend(Step(i.kind, (i,), idx, idx) for idx, i in run)
        run.clear()
        spans.clear()

    for idx, ins in enumerate(ir.instructions):
        if ins.is_marker:
            continue
        if fuse and _stackable(ir, ins):
            own = {name: _span(ir, plan, name) for name, _ in ins.operands}
            if run and (ir.type_of(run[0][1].operands[0][0]).dims != ir.type_of(ins.operands[0][0]).dims
                        or any(_clashes(spans, n, s) for n, s in own.items())):
                flush()
            run.append((idx, ins))
            spans.update(own)
            continue
        flush()
        steps.append(Step(ins.kind, (ins,), idx, idx))
    flush()

    cf = CompiledFunction(ir, plan, bytes(image), steps, fused)
    logger.info(f"Compiled '{ir.name}': {len(steps)} steps, {len(fused)} stacked groups, "
                f"arena {plan.arena_size} bytes")
    return cf


class _Arena:
    def __init__(self, cf: CompiledFunction):
        self.cf = cf
        self.raw = np.zeros(cf.plan.arena_size, dtype=np.uint8)
        lo, hi = cf.plan.constant_region
        self.raw[lo:hi] = np.frombuffer(cf.constant_image, dtype=np.uint8)
        if get_settings().debug_fill:
            a_lo, a_hi = cf.plan.activation_region
            self.raw[a_lo:a_hi] = SENTINEL_BYTE

    def view(self, name: str) -> np.ndarray:
        ty = self.cf.ir.type_of(name)
        off = self.cf.plan.offsets[name]
        nbytes = ty.size_in_bytes
        if off < 0 or off + nbytes > self.raw.size:
            raise IRError(f"buffer '{name}' lies outside the arena")
        return self.raw[off:off + nbytes].view(ty.elem_kind.dtype).reshape(ty.dims)


def _execute(arena: _Arena, ins: Instruction, debug_fill: bool):
    ir = arena.cf.ir
    out_name = ins.operands[0][0]
    out = arena.view(out_name)
    if ins.predicate is not None and not np.any(arena.view(ins.predicate)):
        if debug_fill:
            out.view(np.uint8)[...] = SENTINEL_BYTE
        return
    srcs = [n for n, _ in ins.operands[1:]]
    ins_data = [arena.view(n) for n in srcs]
    if ins.kind == COPY:
        out[...] = ins_data[0]
        return
    in_types = [ir.type_of(n) for n in srcs]
    out[...] = run_kernel(ins.kind, ir.type_of(out_name), ins_data, in_types, ins.attrs)


def _execute_stacked(arena: _Arena, step: Step):
    ir = arena.cf.ir
    size = int(np.prod(step.shape))
    flat: Dict[str, np.ndarray] = {}
    for ins in step.instructions:
        for name, _ in ins.operands:
            if name not in flat:
                flat[name] = arena.view(name).reshape(-1)
    for start in range(0, size, BLOCK_ELEMENTS):
        stop = min(start + BLOCK_ELEMENTS, size)
        for ins in step.instructions:
            out_name = ins.operands[0][0]
            srcs = [n for n, _ in ins.operands[1:]]
            block = [flat[n][start:stop] for n in srcs]
            if ins.kind == COPY:
                flat[out_name][start:stop] = block[0]
                continue
            flat[out_name][start:stop] = run_kernel(
                ins.kind, ir.type_of(out_name), block, [ir.type_of(n) for n in srcs], ins.attrs,
                shape=(stop - start,))


def run(cf: CompiledFunction, bindings: Mapping[str, BindingValue]) -> Dict[str, Tensor]:
    """Execute cf once; returns a Tensor for every weight the program writes."""
    settings = get_settings()
    arena = _Arena(cf)
    for w in cf.ir.inputs():
        if w.name not in bindings:
            raise BindingError(f"placeholder '{w.name}' is not bound")
    for w in cf.ir.weights.values():
        if w.mutability is Mutability.MUTABLE and w.name in bindings:
            arena.view(w.name)[...] = coerce_binding(w.name, bindings[w.name], w.ty)

    for step in cf.steps:
        if step.kind == ELEMENTWISE_FUSED:
            _execute_stacked(arena, step)
        else:
            _execute(arena, step.instructions[0], settings.debug_fill)

    if settings.guard_constants:
        lo, hi = cf.plan.constant_region
        if arena.raw[lo:hi].tobytes() != cf.constant_image:
            raise IRError(f"'{cf.name}' wrote into its constant region")
    return {w.name: Tensor(w.ty, arena.view(w.name)) for w in cf.ir.outputs()}


class InterpreterBackend:
    """The reference target: every low-level kind plus optionally some native high-level kinds."""

    name = "interpreter"

    def __init__(self, native_kinds: Iterable[NodeKind] = ()):
        self.native_kinds: FrozenSet[NodeKind] = frozenset(NodeKind(k) for k in native_kinds)

    def should_lower(self, node: Node) -> bool:
        return node.kind not in self.native_kinds

    @property
    def supported_kinds(self) -> FrozenSet[NodeKind]:
        return LOW_LEVEL_KINDS | self.native_kinds

    def compile(self, ir: IRFunction, plan: MemoryPlan, fuse: Optional[bool] = None,
                constants: Optional[Mapping[str, Tensor]] = None) -> CompiledFunction:
        return compile(ir, plan, fuse, constants)

    def run(self, cf: CompiledFunction, bindings: Mapping[str, BindingValue]) -> Dict[str, Tensor]:
        return run(cf, bindings)
