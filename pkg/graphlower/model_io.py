# model_io.py
"""
Model files: a JSON manifest plus a little-endian weight blob.

Manifest layout:

    {
      "format": "graphlower-model",
      "version": 1,
      "placeholders": [{"name": "x", "type": "float<1 x 4>"}],
      "weights": [{"name": "w", "type": "float<4 x 2>", "dtype": "float32",
                   "dims": [4, 2], "offset": 0, "length": 32}],
      "functions": [{"name": "main", "differentiated": false, "nodes": [
          {"id": 0, "kind": "MatMul", "inputs": ["x", "w"], "attrs": {},
           "type": "float<1 x 2>", "predicate": null},
          {"id": 1, "kind": "Save", "inputs": [0, "out"], "attrs": {}, "type": null}]}]
    }

Node inputs follow the in-memory convention: an integer is a node id of the
same function, a string names a placeholder or weight. Weights are stored
back to back in name order, without padding.
"""

import json
from typing import Any, Dict, Iterable, List, Optional, Union

from pydantic import BaseModel, Field, ValidationError

from logger_config import setup_logger
from .errors import GraphLowerError, ModelLoadError
from .graph_ir import Constant, Function, Module, Node, Placeholder, verify
from .node_table import KIND_TABLE, NodeKind, normalize_attrs
from .tensor import Tensor, TensorType

logger = setup_logger().getChild("model_io")

MODEL_FORMAT = "graphlower-model"
MODEL_VERSION = 1

_DTYPE_NAMES = {"float": "float32", "int8q": "int8", "index": "int64", "bool": "bool"}


class PlaceholderEntry(BaseModel):
    name: str = Field(..., min_length=1)
    type: str


class WeightEntry(BaseModel):
    name: str = Field(..., min_length=1)
    type: str
    dtype: str
    dims: List[int]
    offset: int = Field(..., ge=0, description="Byte offset into the blob")
    length: int = Field(..., ge=0, description="Byte length in the blob")


class NodeEntry(BaseModel):
    id: int = Field(..., ge=0)
    kind: str
    inputs: List[Union[int, str]] = Field(default_factory=list)
    attrs: Dict[str, Any] = Field(default_factory=dict)
    type: Optional[str] = None
    predicate: Optional[Union[int, str]] = None


class FunctionEntry(BaseModel):
    name: str = Field(..., min_length=1)
    differentiated: bool = False
    nodes: List[NodeEntry] = Field(default_factory=list)


class ModelManifest(BaseModel):
    format: str = MODEL_FORMAT
    version: int = MODEL_VERSION
    placeholders: List[PlaceholderEntry] = Field(default_factory=list)
    weights: List[WeightEntry] = Field(default_factory=list)
    functions: List[FunctionEntry] = Field(default_factory=list)


def _location(loc) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<manifest>"


def _parse_type(text: str, where: str) -> TensorType:
    try:
        return TensorType.parse(text)
    except GraphLowerError as e:
        raise ModelLoadError(where, str(e))


def parse_manifest(data: Any, source: str = "<manifest>") -> ModelManifest:
    if not isinstance(data, dict):
        raise ModelLoadError(source, "manifest must be a JSON object")
    try:
        manifest = ModelManifest(**data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ModelLoadError(_location(first.get("loc", ())), first.get("msg", str(e)))
    if manifest.format != MODEL_FORMAT:
        raise ModelLoadError("format", f"expected '{MODEL_FORMAT}', got '{manifest.format}'")
    if manifest.version != MODEL_VERSION:
        raise ModelLoadError("version", f"unsupported version {manifest.version}")
    return manifest


def _load_weights(module: Module, manifest: ModelManifest, blob: bytes):
    spans = []
    for i, entry in enumerate(manifest.weights):
        where = f"weights[{i}]"
        ty = _parse_type(entry.type, f"{where}.type")
        if list(ty.dims) != list(entry.dims):
            raise ModelLoadError(f"{where}.dims", f"{entry.dims} disagree with type {ty}")
        if _DTYPE_NAMES[ty.elem_kind.value] != entry.dtype:
            raise ModelLoadError(f"{where}.dtype", f"'{entry.dtype}' disagrees with type {ty}")
        if entry.length != ty.size_in_bytes:
            raise ModelLoadError(f"{where}.length", f"{entry.length} bytes, type {ty} needs {ty.size_in_bytes}")
        if entry.offset + entry.length > len(blob):
            raise ModelLoadError(f"{where}.offset", f"bytes {entry.offset}..{entry.offset + entry.length} "
                                                   f"lie outside the {len(blob)}-byte blob")
        spans.append((entry.offset, entry.offset + entry.length, i))
    spans.sort()
    for (lo_a, hi_a, a), (lo_b, hi_b, b) in zip(spans, spans[1:]):
        if lo_b < hi_a:
            raise ModelLoadError(f"weights[{b}].offset", f"overlaps weights[{a}] "
                                                         f"('{manifest.weights[a].name}')")
    for i, entry in enumerate(manifest.weights):
        ty = TensorType.parse(entry.type)
        data = blob[entry.offset:entry.offset + entry.length]
        try:
            module.create_constant(entry.name, Tensor.from_bytes(ty, data))
        except GraphLowerError as e:
            raise ModelLoadError(f"weights[{i}].name", str(e))


def _load_function(module: Module, fi: int, entry: FunctionEntry) -> Function:
    where = f"functions[{fi}]"
    try:
        f = module.create_function(entry.name)
    except GraphLowerError as e:
        raise ModelLoadError(f"{where}.name", str(e))
    f.differentiated = entry.differentiated
    index_of: Dict[int, int] = {}
    for ni, n in enumerate(entry.nodes):
        at = f"{where}.nodes[{ni}]"
        if n.id in f.nodes:
            raise ModelLoadError(f"{at}.id", f"duplicate node id {n.id}")
        try:
            kind = NodeKind(n.kind)
        except ValueError:
            raise ModelLoadError(f"{at}.kind", f"unknown node kind '{n.kind}'")
        try:
            attrs = normalize_attrs(kind, n.attrs)
        except (KeyError, TypeError, ValueError) as e:
            raise ModelLoadError(f"{at}.attrs", str(e))
        result_types = []
        if KIND_TABLE[kind].has_result:
            if n.type is None:
                raise ModelLoadError(f"{at}.type", f"{kind.value} needs a result type")
            result_types = [_parse_type(n.type, f"{at}.type")]
        elif n.type is not None:
            raise ModelLoadError(f"{at}.type", f"{kind.value} has no result")
        f.nodes[n.id] = Node(n.id, kind, list(n.inputs), result_types, attrs, n.predicate)
        index_of[n.id] = ni
    f._next_id = max(f.nodes, default=-1) + 1
    diags = verify(f)
    if diags:
        d = diags[0]
        at = f"{where}.nodes[{index_of[d.node_id]}]" if d.node_id in index_of else where
        raise ModelLoadError(at, d.message)
    return f


def load_model_data(manifest_data: Any, blob: bytes, source: str = "<manifest>") -> Module:
    manifest = parse_manifest(manifest_data, source)
    module = Module()
    for i, p in enumerate(manifest.placeholders):
        ty = _parse_type(p.type, f"placeholders[{i}].type")
        try:
            module.create_placeholder(p.name, ty)
        except GraphLowerError as e:
            raise ModelLoadError(f"placeholders[{i}].name", str(e))
    _load_weights(module, manifest, blob)
    for fi, entry in enumerate(manifest.functions):
        _load_function(module, fi, entry)
    return module


def load_model(manifest_path: str, blob_path: str) -> Module:
    try:
        with open(manifest_path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ModelLoadError(f"{manifest_path}:{e.lineno}:{e.colno}", e.msg)
    except OSError as e:
        raise ModelLoadError(manifest_path, str(e))
    try:
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise ModelLoadError(blob_path, str(e))
    module = load_model_data(data, blob, manifest_path)
    logger.info(f"Loaded model {manifest_path}: {len(module.functions)} functions, "
                f"{len(module.constants())} weights ({len(blob)} bytes)")
    return module


def _node_entry(node: Node) -> dict:
    return {
        "id": node.id,
        "kind": node.kind.value,
        "inputs": list(node.inputs),
        "attrs": node.attrs,
        "type": str(node.result_type) if node.result_types else None,
        "predicate": node.predicate,
    }


def model_to_data(module: Module, functions: Optional[Iterable[Function]] = None):
    """(manifest dict, blob bytes) for the given functions, default all registered ones."""
    functions = list(module.functions.values()) if functions is None else list(functions)
    referenced = sorted({name for f in functions for name in f.referenced_storage()})
    placeholders, weights, blob = [], [], bytearray()
    for name in referenced:
        storage = module.storage[name]
        if isinstance(storage, Placeholder):
            placeholders.append({"name": name, "type": str(storage.ty)})
        elif isinstance(storage, Constant):
            data = storage.tensor.to_bytes()
            weights.append({
                "name": name,
                "type": str(storage.ty),
                "dtype": _DTYPE_NAMES[storage.ty.elem_kind.value],
                "dims": list(storage.ty.dims),
                "offset": len(blob),
                "length": len(data),
            })
            blob.extend(data)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "placeholders": placeholders,
        "weights": weights,
        "functions": [
            {"name": f.name, "differentiated": f.differentiated,
             "nodes": [_node_entry(f.nodes[i]) for i in sorted(f.nodes)]}
            for f in functions
        ],
    }
    return manifest, bytes(blob)


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def save_model(module: Module, manifest_path: str, blob_path: str,
               functions: Optional[Iterable[Function]] = None):
    manifest, blob = model_to_data(module, functions)
    with open(manifest_path, "w") as fh:
        fh.write(dump_manifest(manifest))
    with open(blob_path, "wb") as fh:
        fh.write(blob)
    logger.info(f"Saved model {manifest_path}: {len(manifest['functions'])} functions, "
                f"{len(manifest['weights'])} weights ({len(blob)} bytes)")


def modules_equal(a: Module, b: Module) -> bool:
    """Structural equality: same storage, same functions node for node."""
    if sorted(a.storage) != sorted(b.storage) or sorted(a.functions) != sorted(b.functions):
        return False
    for name, s in a.storage.items():
        t = b.storage[name]
        if type(s) is not type(t) or s.ty != t.ty:
            return False
        if isinstance(s, Constant) and s.tensor != t.tensor:
            return False
    for name, f in a.functions.items():
        g = b.functions[name]
        if sorted(f.nodes) != sorted(g.nodes) or f.differentiated != g.differentiated:
            return False
        for i, n in f.nodes.items():
            m = g.nodes[i]
            if (n.kind, n.inputs, n.result_types, n.attrs, n.predicate) != \
                    (m.kind, m.inputs, m.result_types, m.attrs, m.predicate):
                return False
    return True
