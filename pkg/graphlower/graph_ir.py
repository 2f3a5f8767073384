# graph_ir.py
"""
High-level strongly typed dataflow graph.

A Module owns storage (Constants and Placeholders) and a set of Functions.
A Function owns its nodes in an id-indexed table. Node operands are refs:
an int refers to a node of the same function, a str names module storage.
"""

import copy
import json
import weakref
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import networkx as nx
import numpy as np

from logger_config import setup_logger
from .errors import CycleError, TypeCheckError, VerificationError
from .node_table import (
    KIND_TABLE,
    NodeKind,
    check_types,
    infer_result_type,
    normalize_attrs,
)
from .tensor import ElemKind, Tensor, TensorType

logger = setup_logger().getChild("graph_ir")

Ref = Union[int, str]


@dataclass
class Constant:
    name: str
    tensor: Tensor

    @property
    def ty(self) -> TensorType:
        return self.tensor.ty


@dataclass
class Placeholder:
    name: str
    ty: TensorType


Storage = Union[Constant, Placeholder]


@dataclass
class Node:
    id: int
    kind: NodeKind
    inputs: List[Ref]
    result_types: List[TensorType]
    attrs: Dict[str, Any] = field(default_factory=dict)
    predicate: Optional[Ref] = None

    @property
    def result_type(self) -> Optional[TensorType]:
        return self.result_types[0] if self.result_types else None

    def data_inputs(self) -> List[Ref]:
        """Operands excluding the Placeholder a Save writes into."""
        if self.kind is NodeKind.SAVE:
            return self.inputs[:1]
        return list(self.inputs)


@dataclass
class Diagnostic:
    node_id: Optional[int]
    message: str

    def __str__(self) -> str:
        where = f"%{self.node_id}" if self.node_id is not None else "<function>"
        return f"{where}: {self.message}"


class Module:
    """Storage plus the functions that may reference it."""

    def __init__(self):
        self.storage: Dict[str, Storage] = {}
        self.functions: Dict[str, "Function"] = {}
        # every Function object still alive, registered or not
        self._live: "weakref.WeakSet[Function]" = weakref.WeakSet()

    # -- storage ----------------------------------------------------------
    def unique_name(self, base: str) -> str:
        if base not in self.storage:
            return base
        i = 1
        while f"{base}__{i}" in self.storage:
            i += 1
        return f"{base}__{i}"

    def create_constant(self, name: str, value, ty: Optional[TensorType] = None, unique: bool = False) -> str:
        if unique:
            name = self.unique_name(name)
        if name in self.storage:
            raise TypeCheckError(f"storage name '{name}' already used")
        tensor = value if isinstance(value, Tensor) else Tensor.from_array(
            np.asarray(value, dtype=np.float32) if ty is None else value, ty)
        if ty is not None and tensor.ty != ty:
            raise TypeCheckError(f"constant '{name}' payload {tensor.ty} does not match declared {ty}")
        self.storage[name] = Constant(name, tensor)
        return name

    def create_placeholder(self, name: str, ty: TensorType, unique: bool = False) -> str:
        if unique:
            name = self.unique_name(name)
        if name in self.storage:
            raise TypeCheckError(f"storage name '{name}' already used")
        self.storage[name] = Placeholder(name, ty)
        return name

    def get_constant(self, name: str) -> Optional[Constant]:
        s = self.storage.get(name)
        return s if isinstance(s, Constant) else None

    def get_placeholder(self, name: str) -> Optional[Placeholder]:
        s = self.storage.get(name)
        return s if isinstance(s, Placeholder) else None

    def constants(self) -> List[Constant]:
        return [s for s in self.storage.values() if isinstance(s, Constant)]

    def placeholders(self) -> List[Placeholder]:
        return [s for s in self.storage.values() if isinstance(s, Placeholder)]

    # -- functions --------------------------------------------------------
    def create_function(self, name: str) -> "Function":
        if name in self.functions:
            raise TypeCheckError(f"function '{name}' already exists")
        f = Function(name, self)
        self.functions[name] = f
        return f

    def erase_unused_constants(self, also_keep: Iterable["Function"] = ()) -> List[str]:
        """Delete Constants that no live function of this module references."""
        used = set()
        for f in list(self._live) + list(also_keep):
            used.update(f.referenced_storage())
        erased = [c.name for c in self.constants() if c.name not in used]
        for name in erased:
            del self.storage[name]
        return erased


class Function:
    def __init__(self, name: str, module: Module):
        self.name = name
        self.module = module
        self.nodes: Dict[int, Node] = {}
        self._next_id = 0
        self.differentiated = False
        self.meta: Dict[str, Any] = {}
        module._live.add(self)

    # -- construction -----------------------------------------------------
    def create(self, kind: NodeKind, *inputs: Ref, result_type: Optional[TensorType] = None,
               predicate: Optional[Ref] = None, **attrs) -> int:
        attrs = normalize_attrs(kind, attrs)
        info = KIND_TABLE[kind]
        if info.has_result and result_type is None:
            try:
                result_type = infer_result_type(kind, [self.type_of(r) for r in inputs], attrs)
            except (IndexError, KeyError, TypeError, ValueError) as e:
                raise TypeCheckError(f"cannot infer result type of {kind.value}: {e}")
            if result_type is None:
                raise TypeCheckError(f"{kind.value} requires an explicit result type")
        node = Node(
            id=self._next_id,
            kind=kind,
            inputs=list(inputs),
            result_types=[result_type] if info.has_result else [],
            attrs=attrs,
            predicate=predicate,
        )
        self.nodes[node.id] = node
        self._next_id += 1
        return node.id

    def create_splat(self, ty: TensorType, value: float) -> int:
        return self.create(NodeKind.SPLAT, result_type=ty, value=float(value))

    def create_save(self, value: Ref, placeholder: str) -> int:
        return self.create(NodeKind.SAVE, value, placeholder)

    # -- queries ----------------------------------------------------------
    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def type_of(self, ref: Ref) -> TensorType:
        if isinstance(ref, str):
            storage = self.module.storage.get(ref)
            if storage is None:
                raise TypeCheckError(f"unknown storage '@{ref}'")
            return storage.ty
        node = self.nodes.get(ref)
        if node is None:
            raise TypeCheckError(f"unknown node '%{ref}'")
        if not node.result_types:
            raise TypeCheckError(f"%{ref} ({node.kind.value}) produces no value")
        return node.result_types[0]

    def users(self, ref: Ref) -> List[Tuple[int, int]]:
        """(node id, operand slot) pairs reading ref; slot -1 is the predicate."""
        out = []
        for node in self.nodes.values():
            for slot, r in enumerate(node.data_inputs()):
                if r == ref and type(r) is type(ref):
                    out.append((node.id, slot))
            if node.predicate is not None and node.predicate == ref and type(node.predicate) is type(ref):
                out.append((node.id, -1))
        return out

    def user_count(self, ref: Ref) -> int:
        return len(self.users(ref))

    def saves(self) -> List[Node]:
        return [n for n in self.nodes.values() if n.kind is NodeKind.SAVE]

    @property
    def outputs(self) -> List[Node]:
        return self.saves()

    def referenced_storage(self) -> List[str]:
        seen: Dict[str, None] = {}
        for node in self.nodes.values():
            for r in node.inputs + ([node.predicate] if node.predicate is not None else []):
                if isinstance(r, str):
                    seen.setdefault(r, None)
        return list(seen)

    def count(self, kind: NodeKind) -> int:
        return sum(1 for n in self.nodes.values() if n.kind is kind)

    # -- mutation ---------------------------------------------------------
    def remove_node(self, node_id: int):
        del self.nodes[node_id]

    def retype(self, node_id: int, ty: TensorType):
        self.nodes[node_id].result_types = [ty]

    def clone(self, name: Optional[str] = None) -> "Function":
        """Detached copy sharing the module's storage; node ids are preserved."""
        f = Function(name or self.name, self.module)
        f.nodes = {i: copy.deepcopy(n) for i, n in self.nodes.items()}
        f._next_id = self._next_id
        f.differentiated = self.differentiated
        f.meta = copy.deepcopy(self.meta)
        return f


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _resolve(f: Function, ref: Ref) -> Optional[str]:
    if isinstance(ref, str):
        return None if ref in f.module.storage else f"unknown storage '@{ref}'"
    if isinstance(ref, (int, np.integer)) and not isinstance(ref, bool):
        node = f.nodes.get(int(ref))
        if node is None:
            return f"dangling reference %{ref}"
        if not node.result_types:
            return f"%{ref} ({node.kind.value}) produces no value"
        return None
    return f"malformed reference {ref!r}"


def verify(f: Function) -> List[Diagnostic]:
    """Type-check every node; never raises."""
    diags: List[Diagnostic] = []
    for node in sorted(f.nodes.values(), key=lambda n: n.id):
        bad = False
        for slot, ref in enumerate(node.inputs):
            msg = _resolve(f, ref)
            if msg:
                diags.append(Diagnostic(node.id, f"operand {slot}: {msg}"))
                bad = True
        if node.kind is NodeKind.SAVE and len(node.inputs) == 2:
            if f.module.get_placeholder(node.inputs[1]) is None:
                diags.append(Diagnostic(node.id, "Save must write to a Placeholder"))
                bad = True
        if node.predicate is not None:
            msg = _resolve(f, node.predicate)
            if msg:
                diags.append(Diagnostic(node.id, f"predicate: {msg}"))
                bad = True
            else:
                pty = f.type_of(node.predicate)
                batch = None
                if node.result_types:
                    batch = node.result_types[0].dims[0]
                elif node.inputs and _resolve(f, node.inputs[0]) is None:
                    batch = f.type_of(node.inputs[0]).dims[0]
                if pty.elem_kind is not ElemKind.BOOL:
                    diags.append(Diagnostic(node.id, f"predicate must be bool, got {pty}"))
                elif pty.dims not in ((1,), (batch,)):
                    diags.append(Diagnostic(node.id, f"predicate dims {pty.dims} must be (1,) or ({batch},)"))
        if bad:
            continue
        in_types = [f.type_of(r) for r in node.inputs]
        for msg in check_types(node.kind, in_types, node.attrs, node.result_type):
            diags.append(Diagnostic(node.id, msg))
    try:
        topological_order(f)
    except CycleError as e:
        diags.append(Diagnostic(e.node_id, str(e)))
    except TypeCheckError as e:
        diags.append(Diagnostic(None, str(e)))
    return diags


def verify_or_raise(f: Function, context: str = "verification"):
    diags = verify(f)
    if diags:
        summary = "; ".join(str(d) for d in diags[:5])
        raise VerificationError(f"{context} of '{f.name}' failed: {summary}", diags)


# ---------------------------------------------------------------------------
# rewriting
# ---------------------------------------------------------------------------

def replace_all_uses_with(f: Function, old: Ref, new: Ref):
    """Point every reader of old at new. Save targets are never rewritten."""
    if old == new and type(old) is type(new):
        return
    old_ty, new_ty = f.type_of(old), f.type_of(new)
    if old_ty != new_ty:
        raise TypeCheckError(f"cannot replace {_fmt_ref(old)} ({old_ty}) with {_fmt_ref(new)} ({new_ty})")
    for node in f.nodes.values():
        if isinstance(new, int) and node.id == new:
            continue
        limit = 1 if node.kind is NodeKind.SAVE else len(node.inputs)
        for slot in range(limit):
            r = node.inputs[slot]
            if r == old and type(r) is type(old):
                node.inputs[slot] = new
        if node.predicate is not None and node.predicate == old and type(node.predicate) is type(old):
            node.predicate = new


# ---------------------------------------------------------------------------
# ordering
# ---------------------------------------------------------------------------

def dependency_graph(f: Function) -> nx.DiGraph:
    """
    Data edges between function nodes plus write-after-read edges: a Save
    into Placeholder P follows every other reader of P.
    """
    g = nx.DiGraph()
    g.add_nodes_from(f.nodes)
    readers: Dict[str, List[int]] = {}
    for node in f.nodes.values():
        refs = node.data_inputs() + ([node.predicate] if node.predicate is not None else [])
        for r in refs:
            if isinstance(r, str):
                readers.setdefault(r, []).append(node.id)
            elif r in f.nodes:
                g.add_edge(r, node.id)
    for node in f.nodes.values():
        if node.kind is NodeKind.SAVE and len(node.inputs) == 2:
            for reader in readers.get(node.inputs[1], []):
                if reader != node.id:
                    g.add_edge(reader, node.id)
    return g


def topological_order(f: Function) -> List[int]:
    """Inputs before users; ties broken by smallest node id."""
    g = dependency_graph(f)
    try:
        return list(nx.lexicographical_topological_sort(g, key=lambda n: n))
    except nx.NetworkXUnfeasible:
        cycle = nx.find_cycle(g)
        node_id = min(u for u, _ in cycle)
        raise CycleError(f"cycle through %{node_id}", node_id)


# ---------------------------------------------------------------------------
# dumping
# ---------------------------------------------------------------------------

def _fmt_ref(ref: Ref) -> str:
    return f"@{ref}" if isinstance(ref, str) else f"%{ref}"


def _fmt_attrs(attrs: Dict[str, Any]) -> str:
    return json.dumps(attrs, sort_keys=True) if attrs else ""


def _text_line(node: Node) -> str:
    if node.kind is NodeKind.SAVE:
        body = f"Save({_fmt_ref(node.inputs[0])} -> {_fmt_ref(node.inputs[1])})"
    else:
        operands = ", ".join(_fmt_ref(r) for r in node.inputs)
        body = f"{node.kind.value}({operands})"
    attrs = _fmt_attrs(node.attrs)
    if attrs:
        body += f" {attrs}"
    if node.predicate is not None:
        body += f" if {_fmt_ref(node.predicate)}"
    if node.result_types:
        return f"%{node.id} = {body} : {node.result_types[0]}"
    return body


def _dot_id(ref: Ref) -> str:
    return f"s_{ref}" if isinstance(ref, str) else f"n{ref}"


def dump(f: Function, format: str = "text") -> str:
    diags = verify(f)
    if diags:
        raise VerificationError(f"cannot dump unverified function '{f.name}'", diags)
    order = topological_order(f)
    if format == "text":
        lines = [f"function {f.name}"]
        lines.extend(_text_line(f.nodes[i]) for i in order)
        return "\n".join(lines) + "\n"
    if format == "dot":
        lines = [f'digraph "{f.name}" {{']
        for name in sorted(f.referenced_storage()):
            storage = f.module.storage[name]
            kind = "Constant" if isinstance(storage, Constant) else "Placeholder"
            lines.append(f'  "{_dot_id(name)}" [shape=box, label="@{name}\\n{kind}\\n{storage.ty}"];')
        for i in order:
            node = f.nodes[i]
            label = f"%{i} {node.kind.value}"
            if node.result_types:
                label += f"\\n{node.result_types[0]}"
            lines.append(f'  "{_dot_id(i)}" [label="{label}"];')
        for i in order:
            node = f.nodes[i]
            for r in node.inputs:
                lines.append(f'  "{_dot_id(r)}" -> "{_dot_id(i)}";')
            if node.predicate is not None:
                lines.append(f'  "{_dot_id(node.predicate)}" -> "{_dot_id(i)}" [style=dashed];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown dump format '{format}'")
