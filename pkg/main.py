# main.py
"""
Command-line front door for graphlower.

    python main.py compile  <model.json> [--train] [--passes=...] [--dump-graph=dot|text] [--dump-ir]
    python main.py run      <bundle-dir|model.json> --input <blob> [--repeat N] [--output <blob>]
    python main.py profile  <model.json> --data <dir> [--out <profile>]
    python main.py quantize <model.json> --profile <file> [--out <model.json>]
    python main.py serve    <model.json> --devices <fleet.json> --requests <requests.json>

A model is a manifest plus a weight blob next to it (model.json / model.bin
unless --blob says otherwise). Input and output blobs hold the tensors of the
read (or written) placeholders back to back, in name order, little-endian.
"""

import argparse
import glob
import hashlib
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from logger_config import setup_logger
from graphlower.autodiff import GradConfig
from graphlower.errors import BindingError, GraphLowerError
from graphlower.evaluator import required_placeholders
from graphlower.graph_ir import Function, Module, dump
from graphlower.graph_opt import parse_pipeline
from graphlower.interp_backend import CompiledFunction, InterpreterBackend
from graphlower.low_ir import dump_ir
from graphlower.lowering import CompilationMode
from graphlower.model_io import load_model, save_model
from graphlower.pipeline import (
    compile_function,
    is_bundle,
    prepare_for_quantization,
    prepare_function,
    read_bundle,
    write_bundle,
)
from graphlower.quantize import RangeProfile, quantize_function, run_profile
from graphlower.runtime import HostManager, InferenceRequest, load_device_fleet

logger = setup_logger()


# ---------------------------------------------------------------------------
# blobs
# ---------------------------------------------------------------------------

def split_blob(blob: bytes, layout: Sequence[tuple]) -> Dict[str, np.ndarray]:
    """Cut a blob into the (name, TensorType) tensors of layout, in order."""
    need = sum(ty.size_in_bytes for _, ty in layout)
    if len(blob) != need:
        names = ", ".join(name for name, _ in layout)
        raise BindingError(f"input blob holds {len(blob)} bytes, [{names}] need {need}")
    out, cursor = {}, 0
    for name, ty in layout:
        chunk = blob[cursor:cursor + ty.size_in_bytes]
        out[name] = np.frombuffer(chunk, dtype=ty.elem_kind.dtype).reshape(ty.dims).copy()
        cursor += ty.size_in_bytes
    return out


def join_blob(tensors: Dict[str, np.ndarray], layout: Sequence[tuple]) -> bytes:
    return b"".join(np.asarray(tensors[name]).astype(ty.elem_kind.dtype).tobytes() for name, ty in layout)


def checksum(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def input_layout(cf: CompiledFunction) -> List[tuple]:
    names = set(cf.input_names())
    return [(w.name, w.ty) for w in cf.ir.weights.values() if w.name in names]


def output_layout(cf: CompiledFunction) -> List[tuple]:
    names = set(cf.output_names())
    return [(w.name, w.ty) for w in cf.ir.weights.values() if w.name in names]


def function_layout(f: Function, names: Sequence[str]) -> List[tuple]:
    return [(name, f.module.storage[name].ty) for name in sorted(names)]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _blob_path(model_path: str, blob: Optional[str]) -> str:
    return blob or os.path.splitext(model_path)[0] + ".bin"


def _load(args) -> Module:
    return load_model(args.model, _blob_path(args.model, args.blob))


def _select_function(module: Module, name: Optional[str]) -> Function:
    if name:
        if name not in module.functions:
            raise GraphLowerError(f"model has no function '{name}'")
        return module.functions[name]
    if len(module.functions) == 1:
        return next(iter(module.functions.values()))
    if "main" in module.functions:
        return module.functions["main"]
    raise GraphLowerError(f"model has {len(module.functions)} functions; pick one with --function")


def _grad_config(args) -> GradConfig:
    if not args.trainables:
        raise GraphLowerError("--train needs --trainables")
    try:
        return GradConfig(args.learning_rate, {t.strip() for t in args.trainables.split(",") if t.strip()})
    except ValueError as e:
        raise GraphLowerError(str(e))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_compile(args) -> int:
    module = _load(args)
    f = _select_function(module, args.function)
    passes = parse_pipeline(args.passes)
    mode = CompilationMode.TRAINING if args.train else CompilationMode.INFERENCE
    grad = _grad_config(args) if args.train else None
    cf = compile_function(f, mode, passes, grad=grad)
    out = args.out or os.path.splitext(args.model)[0] + ".bundle"
    write_bundle(cf, out)
    if args.dump_graph:
        lowered = prepare_function(f, mode, passes, grad=grad)
        ext = "dot" if args.dump_graph == "dot" else "txt"
        with open(os.path.join(out, f"graph.{ext}"), "w") as fh:
            fh.write(dump(lowered, args.dump_graph))
    if args.dump_ir:
        print(dump_ir(cf.ir), end="")
    print(f"compiled {f.name} -> {out} (arena {cf.plan.arena_size} bytes, {len(cf.steps)} steps)")
    return 0


def _compiled(args) -> CompiledFunction:
    if is_bundle(args.target):
        return read_bundle(args.target)
    module = load_model(args.target, _blob_path(args.target, args.blob))
    return compile_function(_select_function(module, args.function))


def cmd_run(args) -> int:
    cf = _compiled(args)
    backend = InterpreterBackend()
    with open(args.input, "rb") as fh:
        bindings = split_blob(fh.read(), input_layout(cf))
    blob = b""
    for i in range(max(1, args.repeat)):
        outputs = backend.run(cf, bindings)
        current = join_blob({k: t.data for k, t in outputs.items()}, output_layout(cf))
        if i and current != blob:
            raise GraphLowerError(f"run {i} produced different outputs")
        blob = current
    if args.output:
        with open(args.output, "wb") as fh:
            fh.write(blob)
    print(f"sha256 {checksum(blob)}")
    return 0


def cmd_profile(args) -> int:
    module = _load(args)
    f = _select_function(module, args.function)
    instrumented = prepare_for_quantization(f, parse_pipeline(args.passes))
    layout = function_layout(instrumented, required_placeholders(instrumented))
    files = sorted(glob.glob(os.path.join(args.data, "*.bin")))
    if not files:
        raise GraphLowerError(f"no .bin samples in {args.data}")
    dataset = []
    for path in files:
        with open(path, "rb") as fh:
            dataset.append(split_blob(fh.read(), layout))
    profile = run_profile(instrumented, dataset, workers=args.workers)
    out = args.out or os.path.splitext(args.model)[0] + ".profile"
    profile.save(out)
    print(f"profiled {f.name} over {len(dataset)} samples -> {out} ({len(profile)} tensors)")
    return 0


def cmd_quantize(args) -> int:
    module = _load(args)
    f = _select_function(module, args.function)
    profile = RangeProfile.load(args.profile)
    prepared = prepare_function(f, passes=parse_pipeline(args.passes))
    quantized = quantize_function(prepared, profile)
    out = args.out or os.path.splitext(args.model)[0] + ".q.json"
    save_model(module, out, _blob_path(out, None), functions=[quantized])
    print(f"quantized {f.name} -> {out}")
    return 0


def _read_requests(path: str) -> List[dict]:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise GraphLowerError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    entries = data.get("requests") if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise GraphLowerError(f"{path}: expected a list of requests")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, entry in enumerate(entries):
        if "input" not in entry:
            raise GraphLowerError(f"{path}: requests[{i}] has no 'input'")
        out.append({"id": str(entry.get("id", f"r{i}")), "input": os.path.join(base, entry["input"])})
    return out


def cmd_serve(args) -> int:
    module = _load(args)
    f = _select_function(module, args.function)
    fleet = load_device_fleet(args.devices)
    requests = _read_requests(args.requests)
    out_dir = args.out or os.path.splitext(args.requests)[0] + ".outputs"
    os.makedirs(out_dir, exist_ok=True)
    with HostManager(fleet, jitter=args.jitter) as host:
        dag = host.add_network(f)
        in_layout = function_layout(f, dag.input_names)
        out_layout = function_layout(f, dag.output_names)
        futures = []
        for req in requests:
            with open(req["input"], "rb") as fh:
                bindings = split_blob(fh.read(), in_layout)
            futures.append((req["id"], host.run_network(f.name, InferenceRequest(bindings, req["id"]))))
        for request_id, fut in futures:
            blob = join_blob(fut.result(), out_layout)
            with open(os.path.join(out_dir, f"{request_id}.bin"), "wb") as fh:
                fh.write(blob)
            print(f"{request_id} sha256 {checksum(blob)}")
        events = args.events or os.path.join(out_dir, "events.log")
        host.events.write(events)
        print(f"served {len(requests)} requests on {len(dag.device_ids())} devices, "
              f"makespan {host.events.makespan():.6f}s -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphlower", description="Neural-network graph compiler")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p: argparse.ArgumentParser):
        p.add_argument("model", help="Model manifest (.json)")
        p.add_argument("--blob", help="Weight blob (default: manifest path with .bin)")
        p.add_argument("--function", help="Function to use (default: the only one, or 'main')")
        p.add_argument("--passes", default="default", help="Comma-separated pass list, 'default' or 'none'")

    p = sub.add_parser("compile", help="Compile a model into a bundle directory")
    model_args(p)
    p.add_argument("--train", action="store_true", help="Differentiate and compile a training step")
    p.add_argument("--trainables", help="Comma-separated trainable placeholders (with --train)")
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--dump-graph", choices=["text", "dot"], help="Write the lowered graph into the bundle")
    p.add_argument("--dump-ir", action="store_true", help="Print the optimized IR")
    p.add_argument("--out", help="Bundle directory (default: <model>.bundle)")
    p.set_defaults(handler=cmd_compile)

    p = sub.add_parser("run", help="Execute a bundle or a model on an input blob")
    p.add_argument("target", help="Bundle directory or model manifest")
    p.add_argument("--blob", help="Weight blob when target is a manifest")
    p.add_argument("--function")
    p.add_argument("--input", required=True, help="Input blob")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--output", help="Where to write the output blob")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("profile", help="Record value ranges over a calibration set")
    model_args(p)
    p.add_argument("--data", required=True, help="Directory of input blobs (*.bin)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="Profile file (default: <model>.profile)")
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("quantize", help="Quantize a model with a recorded profile")
    model_args(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--out", help="Quantized manifest (default: <model>.q.json)")
    p.set_defaults(handler=cmd_quantize)

    p = sub.add_parser("serve", help="Serve requests on a simulated device fleet")
    model_args(p)
    p.add_argument("--devices", required=True, help="Device fleet JSON")
    p.add_argument("--requests", required=True, help="Requests JSON")
    p.add_argument("--out", help="Output directory (default: <requests>.outputs)")
    p.add_argument("--events", help="Event log path (default: <out>/events.log)")
    p.add_argument("--jitter", type=float, default=0.0, help="Max random device delay in seconds")
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (GraphLowerError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
