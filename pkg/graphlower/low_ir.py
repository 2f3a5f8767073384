# low_ir.py
"""
Low-level, address-only instruction IR.

An IRFunction has two sections. ``declare`` lists WeightVars, one per
Constant or Placeholder the function touches. ``program`` is a flat list of
instructions whose operands name either a WeightVar or an ActivationVar and
carry an @in/@out/@inout qualifier. Activations live between an Alloc and
a Dealloc; the Alloc only marks the start of the lifetime.

Textual form:

    declare {
      %A = weight mutable float<2 x 3>
    }
    program {
      %t0 = alloc float<2 x 3>
      Relu @out %t0, @in %A
      Copy @out %B, @in %t0
      dealloc @out %t0
    }

An instruction line is ``Kind operands [json attrs] [if %pred] [!keepalive]``.
"""

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from logger_config import setup_logger
from .errors import IRError, TypeCheckError
from .graph_ir import Constant, Function, verify_or_raise
from .node_table import KIND_TABLE, NodeKind, check_types
from .scheduler import is_topological, schedule
from .tensor import ElemKind, Tensor, TensorType

logger = setup_logger().getChild("low_ir")

ALLOC = "Alloc"
DEALLOC = "Dealloc"
COPY = "Copy"
ELEMENTWISE_FUSED = "ElementwiseFused"

# element-for-element instructions: candidates for in-place reuse and stacking
DATA_PARALLEL_KINDS = frozenset({k.value for k, info in KIND_TABLE.items() if info.data_parallel} | {COPY})

# kinds the graph must be lowered out of before IRGen
_GRAPH_ONLY = {NodeKind.FULLY_CONNECTED, NodeKind.BATCH_NORMALIZATION, NodeKind.REGRESSION,
               NodeKind.SGD, NodeKind.RELU, NodeKind.SAVE, NodeKind.QUANTIZATION_PROFILE}
LOW_LEVEL_KINDS = frozenset(k for k in NodeKind if k not in _GRAPH_ONLY)


class Mutability(Enum):
    CONSTANT = "const"
    MUTABLE = "mutable"


class Qualifier(Enum):
    IN = "in"
    OUT = "out"
    INOUT = "inout"


@dataclass(frozen=True)
class WeightVar:
    name: str
    ty: TensorType
    mutability: Mutability


@dataclass(frozen=True)
class ActivationVar:
    name: str
    ty: TensorType


Value = Union[WeightVar, ActivationVar]
Operand = Tuple[str, Qualifier]


@dataclass
class Instruction:
    kind: str
    operands: List[Operand]
    attrs: Dict[str, Any] = field(default_factory=dict)
    predicate: Optional[str] = None
    keep_alive: bool = False

    @property
    def is_marker(self) -> bool:
        return self.kind in (ALLOC, DEALLOC)

    def names(self) -> List[str]:
        out = [name for name, _ in self.operands]
        if self.predicate is not None:
            out.append(self.predicate)
        return out

    def reads(self) -> List[str]:
        out = [n for n, q in self.operands if q in (Qualifier.IN, Qualifier.INOUT)]
        if self.predicate is not None:
            out.append(self.predicate)
        return out

    def writes(self) -> List[str]:
        return [n for n, q in self.operands if q in (Qualifier.OUT, Qualifier.INOUT)]

    def rename(self, old: str, new: str):
        self.operands = [(new if n == old else n, q) for n, q in self.operands]
        if self.predicate == old:
            self.predicate = new


@dataclass
class IRFunction:
    name: str
    weights: Dict[str, WeightVar] = field(default_factory=dict)
    activations: Dict[str, ActivationVar] = field(default_factory=dict)
    instructions: List[Instruction] = field(default_factory=list)
    training: bool = False
    # constant weight name -> payload; not part of the text form
    payloads: Dict[str, Tensor] = field(default_factory=dict, repr=False, compare=False)

    def value(self, name: str) -> Value:
        if name in self.weights:
            return self.weights[name]
        if name in self.activations:
            return self.activations[name]
        raise IRError(f"unknown value '%{name}' in '{self.name}'")

    def type_of(self, name: str) -> TensorType:
        return self.value(name).ty

    def is_activation(self, name: str) -> bool:
        return name in self.activations

    def inputs(self) -> List[WeightVar]:
        """Mutable weights the program reads before (or without) writing them."""
        written: Set[str] = set()
        out: Dict[str, WeightVar] = {}
        for ins in self.instructions:
            for name in ins.reads():
                w = self.weights.get(name)
                if w is not None and w.mutability is Mutability.MUTABLE and name not in written:
                    out.setdefault(name, w)
            written.update(ins.writes())
        return list(out.values())

    def outputs(self) -> List[WeightVar]:
        names = {n for ins in self.instructions if not ins.is_marker for n in ins.writes()}
        return [w for w in self.weights.values() if w.name in names]

    def compute_instructions(self) -> List[Instruction]:
        return [ins for ins in self.instructions if not ins.is_marker]

    def copy(self) -> "IRFunction":
        """Deep copy that shares the (read-only) constant payloads."""
        return copy.deepcopy(self, {id(self.payloads): self.payloads})


# ---------------------------------------------------------------------------
# lifetimes
# ---------------------------------------------------------------------------

def live_intervals(ir: IRFunction) -> Dict[str, Tuple[int, int]]:
    """Activation name -> (Alloc index, Dealloc index)."""
    starts: Dict[str, int] = {}
    ends: Dict[str, int] = {}
    for i, ins in enumerate(ir.instructions):
        if ins.kind == ALLOC:
            starts[ins.operands[0][0]] = i
        elif ins.kind == DEALLOC:
            ends[ins.operands[0][0]] = i
    return {name: (starts[name], ends[name]) for name in starts if name in ends}


def total_span(ir: IRFunction) -> int:
    return sum(end - start for start, end in live_intervals(ir).values())


def peak_live_bytes(ir: IRFunction) -> int:
    intervals = live_intervals(ir)
    peak = 0
    for i in range(len(ir.instructions)):
        live = sum(ir.activations[n].ty.size_in_bytes for n, (s, e) in intervals.items() if s <= i <= e)
        peak = max(peak, live)
    return peak


def _place_lifetimes(ir: IRFunction):
    """Alloc right before the first use and Dealloc right after the last use."""
    body = ir.compute_instructions()
    first: Dict[str, int] = {}
    last: Dict[str, int] = {}
    for i, ins in enumerate(body):
        for name in ins.names():
            if name in ir.activations:
                first.setdefault(name, i)
                last[name] = i
    for name in [n for n in ir.activations if n not in first]:
        del ir.activations[name]
    allocs: Dict[int, List[str]] = {}
    deallocs: Dict[int, List[str]] = {}
    for name in ir.activations:
        allocs.setdefault(first[name], []).append(name)
        deallocs.setdefault(last[name], []).append(name)
    placed: List[Instruction] = []
    for i, ins in enumerate(body):
        for name in sorted(allocs.get(i, [])):
            placed.append(Instruction(ALLOC, [(name, Qualifier.OUT)]))
        placed.append(ins)
        for name in sorted(deallocs.get(i, [])):
            placed.append(Instruction(DEALLOC, [(name, Qualifier.OUT)]))
    ir.instructions = placed


# ---------------------------------------------------------------------------
# IRGen
# ---------------------------------------------------------------------------

def irgen(f: Function, order: Optional[Sequence[int]] = None,
          supported_kinds: Optional[Iterable[NodeKind]] = None, keep_alive: bool = False) -> IRFunction:
    """Translate a scheduled, lowered function into instructions."""
    verify_or_raise(f, "IRGen")
    supported = frozenset(supported_kinds) if supported_kinds is not None else LOW_LEVEL_KINDS
    order = list(order) if order is not None else schedule(f)
    if not is_topological(f, order):
        raise IRError(f"order given for '{f.name}' is not a topological order of its nodes")

    ir = IRFunction(f.name, training=keep_alive)
    for name in sorted(f.referenced_storage()):
        storage = f.module.storage[name]
        mutability = Mutability.CONSTANT if isinstance(storage, Constant) else Mutability.MUTABLE
        ir.weights[name] = WeightVar(name, storage.ty, mutability)
        if isinstance(storage, Constant):
            ir.payloads[name] = storage.tensor

    act_names: Dict[int, str] = {}

    def act_name(node_id: int) -> str:
        if node_id not in act_names:
            name = f"t{node_id}"
            while name in ir.weights:
                name = "_" + name
            act_names[node_id] = name
        return act_names[node_id]

    def value_name(ref) -> str:
        return ref if isinstance(ref, str) else act_name(ref)

    for node_id in order:
        node = f.nodes[node_id]
        predicate = value_name(node.predicate) if node.predicate is not None else None
        if node.kind is NodeKind.SAVE:
            value, target = node.inputs
            ir.instructions.append(Instruction(
                COPY, [(target, Qualifier.OUT), (value_name(value), Qualifier.IN)],
                predicate=predicate, keep_alive=keep_alive))
            continue
        if node.kind not in supported:
            raise IRError(f"%{node_id} ({node.kind.value}) is not supported by the target; lower it first")
        out = act_name(node_id)
        ir.activations[out] = ActivationVar(out, node.result_type)
        operands = [(out, Qualifier.OUT)] + [(value_name(r), Qualifier.IN) for r in node.inputs]
        ir.instructions.append(Instruction(node.kind.value, operands, dict(node.attrs), predicate, keep_alive))

    _place_lifetimes(ir)
    logger.info(f"IRGen '{f.name}': {len(ir.weights)} weights, {len(ir.activations)} activations, "
                f"{len(ir.instructions)} instructions")
    return ir


# ---------------------------------------------------------------------------
# IR optimization
# ---------------------------------------------------------------------------

def _uses(body: List[Instruction], name: str) -> List[int]:
    return [i for i, ins in enumerate(body) if name in ins.names()]


def _eliminate_copy(ir: IRFunction, body: List[Instruction]) -> bool:
    """copy dst <- src with src dying at the copy: let src's producers write dst directly."""
    for i, ins in enumerate(body):
        if ins.kind != COPY or ins.predicate is not None or ins.keep_alive:
            continue
        dst, src = ins.operands[0][0], ins.operands[1][0]
        if not ir.is_activation(src) or dst == src:
            continue
        w = ir.weights.get(dst)
        if w is not None and w.mutability is Mutability.CONSTANT:
            continue
        uses = _uses(body, src)
        if uses[-1] != i:
            continue
        start = uses[0]
        producer = body[start]
        if (src, Qualifier.OUT) not in producer.operands or producer.keep_alive:
            continue
        if any(dst in body[k].names() for k in range(start, i)):
            continue
        for k in range(start, i):
            body[k].rename(src, dst)
        del body[i]
        del ir.activations[src]
        logger.debug(f"'{ir.name}': copy %{dst} <- %{src} eliminated")
        return True
    return False


def _share_in_place(ir: IRFunction, body: List[Instruction]) -> bool:
    """Elementwise instruction writes over an operand that dies there."""
    for i, ins in enumerate(body):
        if ins.kind not in DATA_PARALLEL_KINDS or ins.kind == COPY:
            continue
        if ins.predicate is not None or ins.keep_alive or len(ins.operands) < 2:
            continue
        out, qualifier = ins.operands[0]
        if qualifier is not Qualifier.OUT or not ir.is_activation(out) or _uses(body, out)[0] != i:
            continue
        for cand, q in ins.operands[1:]:
            if cand == out or not ir.is_activation(cand) or q is not Qualifier.IN:
                continue
            if ir.type_of(cand) != ir.type_of(out) or _uses(body, cand)[-1] != i:
                continue
            ins.operands[0] = (cand, Qualifier.INOUT)
            for later in body[i + 1:]:
                later.rename(out, cand)
            del ir.activations[out]
            logger.debug(f"'{ir.name}': {ins.kind} now writes %{cand} in place")
            return True
    return False


def optimize_ir(ir: IRFunction) -> IRFunction:
    """Copy elimination, in-place reuse, then tightest Alloc/Dealloc placement."""
    out = ir.copy()
    body = out.compute_instructions()
    before = (len(out.activations), total_span(ir))
    while _eliminate_copy(out, body) or _share_in_place(out, body):
        pass
    out.instructions = body
    _place_lifetimes(out)
    logger.info(f"Optimized IR '{ir.name}': activations {before[0]} -> {len(out.activations)}, "
                f"span {before[1]} -> {total_span(out)}")
    return out


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def verify_ir(ir: IRFunction) -> List[str]:
    """Well-formedness diagnostics; empty when the IR is valid. Never raises."""
    diags: List[str] = []
    allocs: Dict[str, List[int]] = {}
    deallocs: Dict[str, List[int]] = {}
    first_use: Dict[str, Tuple[int, Optional[Qualifier]]] = {}
    for name in ir.weights:
        if name in ir.activations:
            diags.append(f"'{name}' declared both as weight and activation")

    for i, ins in enumerate(ir.instructions):
        for name in ins.names():
            if name not in ir.weights and name not in ir.activations:
                diags.append(f"instr {i}: unknown value '%{name}'")
        if ins.kind in (ALLOC, DEALLOC):
            if len(ins.operands) != 1 or ins.operands[0][0] not in ir.activations:
                diags.append(f"instr {i}: {ins.kind.lower()} must name one activation")
                continue
            (allocs if ins.kind == ALLOC else deallocs).setdefault(ins.operands[0][0], []).append(i)
            continue
        if ins.kind != COPY and ins.kind not in {k.value for k in NodeKind}:
            diags.append(f"instr {i}: unknown instruction kind '{ins.kind}'")
            continue
        if not ins.operands or ins.operands[0][1] is Qualifier.IN:
            diags.append(f"instr {i}: first operand of {ins.kind} must be @out or @inout")
        if any(q is not Qualifier.IN for _, q in ins.operands[1:]):
            diags.append(f"instr {i}: {ins.kind} source operands must be @in")
        for name, q in ins.operands:
            w = ir.weights.get(name)
            if w is not None and w.mutability is Mutability.CONSTANT and q is not Qualifier.IN:
                diags.append(f"instr {i}: constant weight '%{name}' is written")
            if name in ir.activations and name not in first_use:
                first_use[name] = (i, q)
        if ins.predicate is not None:
            if ins.predicate in ir.activations and ins.predicate not in first_use:
                first_use[ins.predicate] = (i, None)
            try:
                pty = ir.type_of(ins.predicate)
                if pty.elem_kind is not ElemKind.BOOL:
                    diags.append(f"instr {i}: predicate must be bool, got {pty}")
            except IRError:
                pass
        diags.extend(f"instr {i}: {m}" for m in _check_instruction_types(ir, ins))

    for name in ir.activations:
        a, d = allocs.get(name, []), deallocs.get(name, [])
        if len(a) != 1 or len(d) != 1:
            diags.append(f"'%{name}' needs exactly one alloc and one dealloc, got {len(a)} and {len(d)}")
            continue
        if a[0] > d[0]:
            diags.append(f"'%{name}' deallocated before it is allocated")
        for i, ins in enumerate(ir.instructions):
            if not ins.is_marker and name in ins.names() and not a[0] < i < d[0]:
                diags.append(f"instr {i}: '%{name}' used outside its lifetime")
        use = first_use.get(name)
        if use is not None and use[1] is not Qualifier.OUT:
            diags.append(f"instr {use[0]}: '%{name}' is read before it is written")
    return diags


def _check_instruction_types(ir: IRFunction, ins: Instruction) -> List[str]:
    try:
        types = [ir.type_of(n) for n, _ in ins.operands]
    except IRError:
        return []
    if ins.kind == COPY:
        if len(types) != 2 or types[0] != types[1]:
            return [f"Copy operands must share a type, got {', '.join(str(t) for t in types)}"]
        return []
    kind = NodeKind(ins.kind)
    if not types:
        return [f"{ins.kind} has no output operand"]
    return check_types(kind, types[1:], ins.attrs, types[0])


def verify_ir_or_raise(ir: IRFunction, context: str = "IR verification"):
    diags = verify_ir(ir)
    if diags:
        raise IRError(f"{context} of '{ir.name}' failed: {'; '.join(diags[:5])}")


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------

def _fmt_instruction(ins: Instruction, ir: IRFunction) -> str:
    if ins.kind == ALLOC:
        name = ins.operands[0][0]
        return f"%{name} = alloc {ir.activations[name].ty}"
    if ins.kind == DEALLOC:
        return f"dealloc @out %{ins.operands[0][0]}"
    text = ins.kind
    if ins.operands:
        text += " " + ", ".join(f"@{q.value} %{n}" for n, q in ins.operands)
    if ins.attrs:
        text += " " + json.dumps(ins.attrs, sort_keys=True)
    if ins.predicate is not None:
        text += f" if %{ins.predicate}"
    if ins.keep_alive:
        text += " !keepalive"
    return text


def dump_ir(ir: IRFunction) -> str:
    if ir.weights:
        lines = ["declare {"]
        for w in ir.weights.values():
            lines.append(f"  %{w.name} = weight {w.mutability.value} {w.ty}")
        lines.append("}")
    else:
        lines = ["declare {}"]
    if ir.instructions:
        lines.append("program {")
        lines.extend("  " + _fmt_instruction(ins, ir) for ins in ir.instructions)
        lines.append("}")
    else:
        lines.append("program {}")
    return "\n".join(lines) + "\n"


def _parse_instruction(line: str, lineno: int, ir: IRFunction) -> Instruction:
    if line.startswith("%") and " = alloc " in line:
        name, ty = line[1:].split(" = alloc ", 1)
        ir.activations[name] = ActivationVar(name, TensorType.parse(ty))
        return Instruction(ALLOC, [(name, Qualifier.OUT)])
    if line.startswith("dealloc "):
        return Instruction(DEALLOC, [(line.split("%", 1)[1].strip(), Qualifier.OUT)])
    keep_alive = line.endswith(" !keepalive")
    if keep_alive:
        line = line[: -len(" !keepalive")]
    predicate = None
    if " if %" in line:
        line, predicate = line.rsplit(" if %", 1)
    attrs: Dict[str, Any] = {}
    brace = line.find(" {")
    if brace >= 0:
        attrs = json.loads(line[brace + 1:])
        line = line[:brace]
    kind, _, rest = line.partition(" ")
    operands: List[Operand] = []
    for part in filter(None, (p.strip() for p in rest.split(","))):
        qual, _, name = part.partition(" ")
        if not qual.startswith("@") or not name.startswith("%"):
            raise IRError(f"line {lineno}: malformed operand '{part}'")
        operands.append((name[1:], Qualifier(qual[1:])))
    return Instruction(kind, operands, attrs, predicate, keep_alive)


def parse_ir(text: str, name: str = "main", training: bool = False) -> IRFunction:
    """Inverse of dump_ir."""
    ir = IRFunction(name, training=training)
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line in ("declare {}", "program {}"):
                section = None
            elif line in ("declare {", "program {"):
                section = line.split()[0]
            elif line == "}":
                section = None
            elif section == "declare":
                lhs, rhs = line.split(" = weight ", 1)
                mutability, ty = rhs.split(" ", 1)
                w = WeightVar(lhs.lstrip("%"), TensorType.parse(ty), Mutability(mutability))
                ir.weights[w.name] = w
            elif section == "program":
                ir.instructions.append(_parse_instruction(line, lineno, ir))
            else:
                raise IRError(f"line {lineno}: unexpected '{line}'")
        except IRError:
            raise
        except (ValueError, KeyError, TypeCheckError) as e:
            raise IRError(f"line {lineno}: {e}")
    return ir
