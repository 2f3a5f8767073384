# pipeline.py
"""
Compilation driver.

compile_function runs a high-level Function through every stage down to an
executable CompiledFunction:

    verify -> differentiate (training) -> optimize -> lower -> optimize
           -> schedule -> irgen -> optimize_ir -> allocate -> backend compile

The caller's Function is left untouched; every stage works on a clone.
A compiled function can be written to a bundle directory and read back.
"""

import json
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from logger_config import setup_logger
from .autodiff import GradConfig, differentiate, regression_loss
from .errors import BindingError, IRError, LoweringError
from .evaluator import BindingValue
from .graph_ir import Function, verify_or_raise
from .graph_opt import PassId, optimize
from .interp_backend import CompiledFunction, InterpreterBackend
from .low_ir import Mutability, dump_ir, irgen, optimize_ir, parse_ir
from .lowering import CompilationMode, lower
from .memory_plan import MemoryPlan, allocate
from .quantize import instrument
from .scheduler import schedule
from .tensor import Tensor

logger = setup_logger().getChild("pipeline")

BUNDLE_FILES = ("ir.txt", "plan.json", "constants.bin", "meta.json")
BUNDLE_VERSION = 1


def prepare_function(f: Function, mode: CompilationMode = CompilationMode.INFERENCE,
                     passes: Optional[Sequence[PassId]] = None,
                     backend: Optional[InterpreterBackend] = None,
                     grad: Optional[GradConfig] = None) -> Function:
    """The graph-level half of the pipeline: an optimized, lowered clone of f."""
    backend = backend or InterpreterBackend()
    verify_or_raise(f, "compilation")
    if mode is CompilationMode.TRAINING and not f.differentiated:
        if grad is None:
            raise LoweringError(f"training compilation of '{f.name}' needs a GradConfig")
        work = differentiate(f, grad)
    else:
        work = f.clone()
    optimize(work, passes)
    lower(work, mode, backend.should_lower)
    optimize(work, passes)
    return work


def compile_function(f: Function, mode: CompilationMode = CompilationMode.INFERENCE,
                     passes: Optional[Sequence[PassId]] = None,
                     backend: Optional[InterpreterBackend] = None,
                     grad: Optional[GradConfig] = None,
                     fuse: Optional[bool] = None) -> CompiledFunction:
    backend = backend or InterpreterBackend()
    work = prepare_function(f, mode, passes, backend, grad)
    order = schedule(work)
    ir = irgen(work, order, backend.supported_kinds, keep_alive=mode is CompilationMode.TRAINING)
    ir = optimize_ir(ir)
    plan = allocate(ir)
    cf = backend.compile(ir, plan, fuse)
    logger.info(f"Compiled '{f.name}' for {backend.name} ({mode.value}): "
                f"{len(cf.steps)} steps, arena {plan.arena_size} bytes")
    return cf


def prepare_for_quantization(f: Function, passes: Optional[Sequence[PassId]] = None) -> Function:
    """Lowered, optimized, instrumented copy of f ready for run_profile."""
    return instrument(prepare_function(f, CompilationMode.INFERENCE, passes))


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

def write_bundle(cf: CompiledFunction, path: str):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "ir.txt"), "w") as fh:
        fh.write(dump_ir(cf.ir))
    with open(os.path.join(path, "plan.json"), "w") as fh:
        json.dump(cf.plan.to_dict(), fh, indent=2)
    with open(os.path.join(path, "constants.bin"), "wb") as fh:
        fh.write(cf.constant_image)
    meta = {
        "version": BUNDLE_VERSION,
        "name": cf.name,
        "training": cf.ir.training,
        "fused": bool(cf.fused_groups),
        "inputs": cf.input_names(),
        "outputs": cf.output_names(),
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    logger.info(f"Wrote bundle for '{cf.name}' to {path}")


def is_bundle(path: str) -> bool:
    return os.path.isdir(path) and all(os.path.exists(os.path.join(path, n)) for n in BUNDLE_FILES)


def read_bundle(path: str, backend: Optional[InterpreterBackend] = None) -> CompiledFunction:
    backend = backend or InterpreterBackend()
    if not is_bundle(path):
        raise IRError(f"{path} is not a compiled bundle (expected {', '.join(BUNDLE_FILES)})")
    try:
        with open(os.path.join(path, "meta.json")) as fh:
            meta = json.load(fh)
        with open(os.path.join(path, "plan.json")) as fh:
            plan = MemoryPlan.from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise IRError(f"{path}: malformed bundle metadata: {e}")
    if meta.get("version") != BUNDLE_VERSION:
        raise IRError(f"{path}: unsupported bundle version {meta.get('version')}")
    with open(os.path.join(path, "ir.txt")) as fh:
        ir = parse_ir(fh.read(), name=meta["name"], training=bool(meta.get("training")))
    with open(os.path.join(path, "constants.bin"), "rb") as fh:
        image = fh.read()

    lo, hi = plan.constant_region
    if len(image) != hi - lo:
        raise IRError(f"{path}: constants.bin holds {len(image)} bytes, plan expects {hi - lo}")
    constants: Dict[str, Tensor] = {}
    for w in ir.weights.values():
        if w.mutability is not Mutability.CONSTANT:
            continue
        if w.name not in plan.offsets:
            raise IRError(f"{path}: plan has no offset for constant '{w.name}'")
        off = plan.offsets[w.name] - lo
        constants[w.name] = Tensor.from_bytes(w.ty, image[off:off + w.ty.size_in_bytes])
    ir.payloads.update(constants)
    return backend.compile(ir, plan, fuse=bool(meta.get("fused")), constants=ir.payloads)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(f: Function, grad: GradConfig, dataset: Sequence[Mapping[str, BindingValue]],
          initial: Mapping[str, np.ndarray], steps: int,
          backend: Optional[InterpreterBackend] = None,
          passes: Optional[Sequence[PassId]] = None) -> Tuple[Dict[str, np.ndarray], List[float]]:
    """
    Run ``steps`` SGD steps of f on the interpreter, cycling through dataset.
    Returns the final trainable values and the loss before each step plus
    the loss after the last one, measured on the sample of that step.
    """
    if not dataset:
        raise BindingError("training needs at least one sample")
    missing = sorted(set(grad.trainables) - set(initial))
    if missing:
        raise BindingError(f"no initial value for trainable(s) {', '.join(missing)}")
    cf = compile_function(f, CompilationMode.TRAINING, passes, backend, grad)
    backend = backend or InterpreterBackend()
    weights = {name: np.array(initial[name], dtype=np.float32) for name in grad.trainables}
    losses: List[float] = []
    sample: Mapping[str, BindingValue] = dataset[0]
    for step in range(steps):
        sample = dataset[step % len(dataset)]
        bindings = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in sample.items()}
        bindings.update(weights)
        losses.append(regression_loss(f, bindings))
        outputs = backend.run(cf, bindings)
        for name in grad.trainables:
            weights[name] = np.array(outputs[name].data, copy=True)
        logger.debug(f"step {step}: loss {losses[-1]:.6g}")
    final = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in sample.items()}
    final.update(weights)
    losses.append(regression_loss(f, final))
    logger.info(f"Trained '{f.name}' for {steps} steps: loss {losses[0]:.6g} -> {losses[-1]:.6g}")
    return weights, losses
