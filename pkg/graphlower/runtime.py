# runtime.py
"""
Host-level serving over simulated devices.

partition   splits a network along its memory-minimizing schedule into
            contiguous sub-networks that each fit one device
provision   compiles every sub-network and loads it onto its device(s)
DeviceManager
            one simulated device: memory accounting plus a FIFO worker
            thread; each execution advances a virtual clock by its transfer
            and compute cost estimates
Executor    walks the partition DAG for one request, starting every
            sub-network whose predecessors have finished
HostManager add_network / remove_network / execute / run_network

Sub-networks exchange values through transfer placeholders named
"__xfer_<function>_<node id>": the producer saves into it, consumers read it.
Outputs are computed for real by the interpreter; only timing is simulated.
"""

import copy
import json
import threading
import time
import uuid
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, Field, ValidationError

from logger_config import setup_logger
from .errors import (
    BindingError,
    GraphLowerError,
    PartitionError,
    ProvisioningError,
    UnknownNetworkError,
)
from .evaluator import BindingValue, coerce_binding, required_placeholders
from .graph_ir import Function, Node, Ref
from .interp_backend import CompiledFunction, InterpreterBackend
from .low_ir import irgen, optimize_ir
from .memory_plan import allocate
from .node_table import NodeKind
from .pipeline import compile_function, prepare_function
from .scheduler import schedule
from .settings import get_settings
from .tensor import TensorType

logger = setup_logger().getChild("runtime")

# how far back from the capacity limit the partitioner looks for a cheaper cut
CUT_LOOKBACK = 4
# a stage is replicated when its estimated time exceeds this multiple of the mean
REPLICATION_FACTOR = 2.0


class DeviceConfig(BaseModel):
    device_id: str = Field(..., min_length=1, description="Unique device name")
    memory_capacity: int = Field(..., gt=0, description="Arena bytes the device can hold")
    throughput: float = Field(..., gt=0, description="Operations per second, for cost estimates")
    bandwidth: float = Field(..., gt=0, description="Host transfer bytes per second")


def parse_device_fleet(data) -> List[DeviceConfig]:
    """A JSON list of device objects, or {"devices": [...]}."""
    entries = data.get("devices") if isinstance(data, dict) else data
    if not isinstance(entries, list) or not entries:
        raise ProvisioningError("<fleet>", "device configuration must list at least one device")
    devices = []
    for i, entry in enumerate(entries):
        try:
            devices.append(DeviceConfig(**entry))
        except (TypeError, ValidationError) as e:
            raise ProvisioningError(f"devices[{i}]", f"invalid device entry: {e}")
    seen: Set[str] = set()
    for d in devices:
        if d.device_id in seen:
            raise ProvisioningError(d.device_id, "device id listed twice")
        seen.add(d.device_id)
    return devices


def load_device_fleet(path: str) -> List[DeviceConfig]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ProvisioningError("<fleet>", f"cannot read {path}: {e}")
    return parse_device_fleet(data)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def estimate_ops(f: Function, node: Node) -> int:
    """Rough operation count used for time estimates."""
    if node.kind is NodeKind.SAVE:
        return 0
    out = node.result_type
    if node.kind in (NodeKind.MAT_MUL, NodeKind.FULLY_CONNECTED):
        m, k = f.type_of(node.inputs[0]).dims
        return 2 * m * k * out.dims[1]
    if node.kind is NodeKind.CONVOLUTION:
        filt = f.type_of(node.inputs[1]).dims
        return 2 * out.size * int(np.prod(filt[1:]))
    if node.kind in (NodeKind.MAX_POOL, NodeKind.AVG_POOL):
        kh, kw = node.attrs["kernels"]
        return out.size * kh * kw
    return out.size


@dataclass
class SubNetwork:
    name: str
    function: Function
    node_ids: List[int]
    device_ids: List[str]
    inputs: Dict[str, TensorType]
    outputs: Dict[str, TensorType]
    footprint: int
    ops: int
    compiled: Optional[CompiledFunction] = None

    @property
    def replicas(self) -> int:
        return len(self.device_ids)


@dataclass(frozen=True)
class DagEdge:
    producer: str
    consumer: str
    tensor: str
    ty: TensorType


@dataclass
class PartitionDag:
    network: str
    subnetworks: List[SubNetwork]
    edges: List[DagEdge]
    transfers: Dict[str, TensorType]
    devices: Dict[str, DeviceConfig] = field(default_factory=dict)

    def get(self, name: str) -> SubNetwork:
        for sub in self.subnetworks:
            if sub.name == name:
                return sub
        raise UnknownNetworkError(f"'{self.network}' has no sub-network '{name}'")

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(s.name for s in self.subnetworks)
        g.add_edges_from((e.producer, e.consumer) for e in self.edges)
        return g

    def predecessors(self, name: str) -> List[str]:
        return sorted({e.producer for e in self.edges if e.consumer == name})

    def device_ids(self) -> List[str]:
        return sorted({d for s in self.subnetworks for d in s.device_ids})

    @property
    def input_names(self) -> List[str]:
        names = {n for s in self.subnetworks for n in s.inputs if n not in self.transfers}
        return sorted(names)

    @property
    def output_names(self) -> List[str]:
        names = {n for s in self.subnetworks for n in s.outputs if n not in self.transfers}
        return sorted(names)

    def load_count(self) -> int:
        return sum(s.replicas for s in self.subnetworks)

    def cost_report(self) -> List[dict]:
        report = []
        for sub in self.subnetworks:
            dev = self.devices[sub.device_ids[0]]
            crossing = sum(ty.size_in_bytes for n, ty in sub.outputs.items() if n in self.transfers)
            report.append({
                "subnetwork": sub.name,
                "devices": list(sub.device_ids),
                "nodes": len(sub.node_ids),
                "footprint_bytes": sub.footprint,
                "ops": sub.ops,
                "est_seconds": sub.ops / dev.throughput,
                "crossing_bytes": crossing,
                "transfer_seconds": crossing / dev.bandwidth,
            })
        return report

    def verify(self) -> List[str]:
        problems = []
        if not nx.is_directed_acyclic_graph(self.graph()):
            problems.append("partition graph has a cycle")
        for e in self.edges:
            produced = self.get(e.producer).outputs.get(e.tensor)
            consumed = self.get(e.consumer).inputs.get(e.tensor)
            if produced != e.ty or consumed != e.ty:
                problems.append(f"edge {e.producer} -> {e.consumer} carries {e.ty}, "
                                f"interfaces say {produced} / {consumed}")
        used: Dict[str, int] = {}
        for sub in self.subnetworks:
            for d in sub.device_ids:
                used[d] = used.get(d, 0) + sub.footprint
        for d, total in used.items():
            if d in self.devices and total > self.devices[d].memory_capacity:
                problems.append(f"device {d} is assigned {total} bytes, capacity "
                                f"{self.devices[d].memory_capacity}")
        return problems


def transfer_name(function_name: str, node_id: int) -> str:
    return f"__xfer_{function_name}_{node_id}"


class _Cutter:
    """Builds sub-functions for contiguous slices of one schedule."""

    def __init__(self, f: Function, order: List[int]):
        self.f = f
        self.order = order
        self.position = {n: i for i, n in enumerate(order)}
        self.last_reader: Dict[int, int] = {}
        for node in f.nodes.values():
            refs = node.data_inputs() + ([node.predicate] if node.predicate is not None else [])
            for r in refs:
                if isinstance(r, int):
                    pos = self.position[node.id]
                    self.last_reader[r] = max(self.last_reader.get(r, -1), pos)
        self._footprints: Dict[Tuple[int, int], int] = {}
        self.created: Set[str] = set()

    def crossing_bytes(self, cut: int) -> int:
        """Bytes of values produced before position cut and read at or after it."""
        return sum(self.f.nodes[n].result_type.size_in_bytes
                   for n in self.order[:cut] if self.last_reader.get(n, -1) >= cut)

    def _transfer(self, node_id: int) -> str:
        module = self.f.module
        name = transfer_name(self.f.name, node_id)
        ty = self.f.type_of(node_id)
        existing = module.get_placeholder(name)
        if existing is None:
            module.create_placeholder(name, ty)
            self.created.add(name)
        elif existing.ty != ty:
            raise PartitionError(f"transfer placeholder '{name}' already exists with type {existing.ty}")
        return name

    def build(self, start: int, end: int, name: str) -> Function:
        members = self.order[start:end]
        inside = set(members)
        sub = Function(name, self.f.module)

        def remap(ref: Ref) -> Ref:
            if isinstance(ref, int) and ref not in inside:
                return self._transfer(ref)
            return ref

        for node_id in members:
            node = copy.deepcopy(self.f.nodes[node_id])
            limit = 1 if node.kind is NodeKind.SAVE else len(node.inputs)
            node.inputs = [remap(r) if slot < limit else r for slot, r in enumerate(node.inputs)]
            if node.predicate is not None:
                node.predicate = remap(node.predicate)
            sub.nodes[node_id] = node
        sub._next_id = max(self.f._next_id, max(members) + 1)
        for node_id in members:
            if self.f.nodes[node_id].result_types and self.last_reader.get(node_id, -1) >= end:
                sub.create_save(node_id, self._transfer(node_id))
        return sub

    def footprint(self, start: int, end: int) -> int:
        key = (start, end)
        if key not in self._footprints:
            sub = self.build(start, end, f"{self.f.name}__probe")
            ir = optimize_ir(irgen(sub, None))
            self._footprints[key] = allocate(ir).arena_size
        return self._footprints[key]


def partition(f: Function, devices: Sequence[DeviceConfig],
              available: Optional[Mapping[str, int]] = None,
              backend: Optional[InterpreterBackend] = None,
              replicate: bool = True) -> PartitionDag:
    """
    Greedy contiguous cut of f's memory-minimizing schedule. Each sub-network
    grows until the next node would overflow the device with the most free
    memory; the cut then moves back up to CUT_LOOKBACK nodes to the position
    with the fewest crossing bytes (latest position on ties).
    """
    if not devices:
        raise PartitionError("partitioning needs at least one device")
    lowered = prepare_function(f, backend=backend)
    order = schedule(lowered)
    if not order:
        raise PartitionError(f"'{f.name}' has no nodes to partition")
    fleet = {d.device_id: d for d in devices}
    remaining = {d.device_id: (available or {}).get(d.device_id, d.memory_capacity) for d in devices}
    largest = max(d.memory_capacity for d in devices)
    cutter = _Cutter(lowered, order)

    segments: List[Tuple[int, int, str]] = []
    start = 0
    while start < len(order):
        single = cutter.footprint(start, start + 1)
        if single > largest:
            node = lowered.nodes[order[start]]
            raise PartitionError(f"%{node.id} ({node.kind.value}) needs {single} bytes, "
                                 f"more than any device holds ({largest})")
        target = max(remaining, key=lambda d: (remaining[d], -list(fleet).index(d)))
        budget = remaining[target]
        if single > budget:
            raise PartitionError(f"devices are out of memory: %{order[start]} needs {single} bytes, "
                                 f"largest free region is {budget} on {target}")
        end = start + 1
        while end < len(order) and cutter.footprint(start, end + 1) <= budget:
            end += 1
        if end < len(order):
            window = range(max(start + 1, end - CUT_LOOKBACK + 1), end + 1)
            end = min((c for c in window if cutter.footprint(start, c) <= budget),
                      key=lambda c: (cutter.crossing_bytes(c), -c))
        segments.append((start, end, target))
        remaining[target] -= cutter.footprint(start, end)
        start = end

    subnetworks: List[SubNetwork] = []
    for k, (s, e, device) in enumerate(segments):
        name = f"{f.name}_p{k}"
        sub = cutter.build(s, e, name)
        reads = {n: p.ty for n, p in required_placeholders(sub).items()}
        writes = {n.inputs[1]: sub.type_of(n.inputs[1]) for n in sub.saves()}
        ops = sum(estimate_ops(lowered, lowered.nodes[i]) for i in order[s:e])
        subnetworks.append(SubNetwork(name, sub, list(order[s:e]), [device], reads, writes,
                                      cutter.footprint(s, e), ops))

    transfers = {name: ty for sub in subnetworks for name, ty in sub.outputs.items()
                 if name.startswith("__xfer_")}
    edges = []
    for producer in subnetworks:
        for tensor, ty in producer.outputs.items():
            if tensor not in transfers:
                continue
            for consumer in subnetworks:
                if tensor in consumer.inputs:
                    edges.append(DagEdge(producer.name, consumer.name, tensor, ty))

    for name in cutter.created - set(transfers):
        del f.module.storage[name]
    dag = PartitionDag(f.name, subnetworks, edges, transfers, fleet)
    if replicate:
        _replicate(dag, remaining)
    problems = dag.verify()
    if problems:
        raise PartitionError(f"invalid partition of '{f.name}': {'; '.join(problems)}")
    for row in dag.cost_report():
        logger.debug(f"{row['subnetwork']} on {','.join(row['devices'])}: {row['ops']} ops, "
                     f"{row['est_seconds']:.3e}s, {row['crossing_bytes']} bytes out")
    logger.info(f"Partitioned '{f.name}' into {len(subnetworks)} sub-networks over "
                f"{len(dag.device_ids())} devices ({dag.load_count()} loads)")
    return dag


def _replicate(dag: PartitionDag, remaining: Dict[str, int]):
    """Duplicate stages that are much slower than the mean onto spare devices."""
    if len(dag.subnetworks) < 2:
        return
    cost = {s.name: s.ops / dag.devices[s.device_ids[0]].throughput for s in dag.subnetworks}
    mean = sum(cost.values()) / len(cost)
    for sub in dag.subnetworks:
        if cost[sub.name] <= REPLICATION_FACTOR * mean:
            continue
        spare = [d for d in remaining if d not in sub.device_ids and remaining[d] >= sub.footprint]
        if not spare:
            logger.warning(f"{sub.name} is a bottleneck but no device has {sub.footprint} bytes free")
            continue
        device = max(spare, key=lambda d: remaining[d])
        sub.device_ids.append(device)
        remaining[device] -= sub.footprint
        logger.info(f"Replicated {sub.name} onto {device}")


# ---------------------------------------------------------------------------
# devices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    timestamp: float
    device: str
    subnetwork: str
    event: str
    request: str = "-"

    def line(self) -> str:
        return f"{self.timestamp:.9f} {self.device} {self.subnetwork} {self.event} {self.request}"


class EventLog:
    """Line-oriented execution trace; timestamps are virtual seconds."""

    def __init__(self):
        self._events: List[Event] = []
        self._lock = threading.Lock()

    def record(self, event: Event):
        with self._lock:
            self._events.append(event)

    @property
    def events(self) -> List[Event]:
        with self._lock:
            return list(self._events)

    def makespan(self) -> float:
        finished = [e.timestamp for e in self.events if e.event == "finish"]
        return max(finished) if finished else 0.0

    def to_text(self) -> str:
        return "".join(e.line() + "\n" for e in sorted(self.events, key=lambda e: (e.timestamp, e.device)))

    def write(self, path: str):
        with open(path, "w") as fh:
            fh.write(self.to_text())


@dataclass
class DeviceResult:
    outputs: Dict[str, np.ndarray]
    start: float
    end: float


@dataclass
class _Loaded:
    compiled: CompiledFunction
    footprint: int
    ops: int


class DeviceManager:
    """One simulated accelerator: runs loaded sub-networks one at a time, in submission order."""

    def __init__(self, config: DeviceConfig, events: Optional[EventLog] = None,
                 backend: Optional[InterpreterBackend] = None, jitter: float = 0.0,
                 seed: Optional[int] = None):
        self.config = config
        self.events = events or EventLog()
        self.backend = backend or InterpreterBackend()
        self.jitter = jitter
        self._rng = np.random.default_rng(get_settings().seed if seed is None else seed)
        self._loaded: Dict[str, _Loaded] = {}
        self._used = 0
        self.high_water = 0
        self._queued = 0
        self._busy_until = 0.0
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"device-{config.device_id}")

    @property
    def device_id(self) -> str:
        return self.config.device_id

    def maximum_memory(self) -> int:
        return self.config.memory_capacity

    def available_memory(self) -> int:
        with self._lock:
            return self.config.memory_capacity - self._used

    def queue_depth(self) -> int:
        with self._lock:
            return self._queued

    def loaded(self) -> List[str]:
        with self._lock:
            return sorted(self._loaded)

    def load(self, key: str, compiled: CompiledFunction, ops: int = 0):
        footprint = compiled.plan.arena_size
        with self._lock:
            if key in self._loaded:
                raise ProvisioningError(self.device_id, f"'{key}' is already loaded")
            if self._used + footprint > self.config.memory_capacity:
                raise ProvisioningError(
                    self.device_id, f"loading '{key}' needs {footprint} bytes, "
                                    f"{self.config.memory_capacity - self._used} available")
            self._loaded[key] = _Loaded(compiled, footprint, ops)
            self._used += footprint
            self.high_water = max(self.high_water, self._used)
            stamp = self._busy_until
        self.events.record(Event(stamp, self.device_id, key, "load"))
        logger.debug(f"{self.device_id}: loaded '{key}' ({footprint} bytes)")

    def evict(self, key: str):
        with self._lock:
            loaded = self._loaded.pop(key, None)
            if loaded is None:
                raise UnknownNetworkError(f"'{key}' is not loaded on device {self.device_id}")
            self._used -= loaded.footprint
            stamp = self._busy_until
        self.events.record(Event(stamp, self.device_id, key, "evict"))

    def run(self, key: str, bindings: Mapping[str, BindingValue], ready_at: float = 0.0,
            request_id: str = "-") -> "Future[DeviceResult]":
        with self._lock:
            if key not in self._loaded:
                raise UnknownNetworkError(f"'{key}' is not loaded on device {self.device_id}")
            self._queued += 1
        return self._pool.submit(self._execute, key, dict(bindings), ready_at, request_id)

    def _execute(self, key: str, bindings: Dict[str, BindingValue], ready_at: float,
                 request_id: str) -> DeviceResult:
        try:
            if self.jitter > 0:
                with self._lock:
                    delay = float(self._rng.uniform(0.0, self.jitter))
                time.sleep(delay)
            with self._lock:
                loaded = self._loaded[key]
            outputs = self.backend.run(loaded.compiled, bindings)
            arrays = {name: np.array(t.data, copy=True) for name, t in outputs.items()}
            in_bytes = sum(np.asarray(getattr(v, "data", v)).nbytes for v in bindings.values())
            out_bytes = sum(a.nbytes for a in arrays.values())
            with self._lock:
                start = max(ready_at, self._busy_until)
                end = (start + in_bytes / self.config.bandwidth + loaded.ops / self.config.throughput
                       + out_bytes / self.config.bandwidth)
                self._busy_until = end
            self.events.record(Event(start, self.device_id, key, "start", request_id))
            self.events.record(Event(end, self.device_id, key, "finish", request_id))
            return DeviceResult(arrays, start, end)
        finally:
            with self._lock:
                self._queued -= 1

    def shutdown(self):
        self._pool.shutdown(wait=True)


def provision(dag: PartitionDag, devices: Mapping[str, DeviceManager],
              backend: Optional[InterpreterBackend] = None) -> int:
    """Compile every sub-network and load it on each assigned device; returns the load count."""
    backend = backend or InterpreterBackend()
    done: List[Tuple[DeviceManager, str]] = []
    try:
        for sub in dag.subnetworks:
            if sub.compiled is None:
                sub.compiled = compile_function(sub.function, passes=[], backend=backend)
            for device_id in sub.device_ids:
                if device_id not in devices:
                    raise ProvisioningError(device_id, "device is not managed by this host")
                key = f"{dag.network}/{sub.name}"
                devices[device_id].load(key, sub.compiled, sub.ops)
                done.append((devices[device_id], key))
    except GraphLowerError as e:
        for dev, key in reversed(done):
            dev.evict(key)
        logger.error(f"Provisioning '{dag.network}' failed: {e}")
        raise
    logger.info(f"Provisioned '{dag.network}': {len(done)} loads")
    return len(done)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass
class InferenceRequest:
    bindings: Mapping[str, BindingValue]
    request_id: str = field(default_factory=lambda: uuid.uuid4().hex[:8])


@dataclass
class ExecutionState:
    """Per-request bookkeeping; never shared between requests."""
    request_id: str
    store: Dict[str, np.ndarray] = field(default_factory=dict)
    ready_at: Dict[str, float] = field(default_factory=dict)
    completed: Set[str] = field(default_factory=set)
    started: Set[str] = field(default_factory=set)
    finished_at: float = 0.0


class Executor:
    def __init__(self, dag: PartitionDag, devices: Mapping[str, DeviceManager]):
        self.dag = dag
        self.devices = devices
        self._preds = {s.name: dag.predecessors(s.name) for s in dag.subnetworks}
        self._select_lock = threading.Lock()

    def _pick_device(self, sub: SubNetwork) -> DeviceManager:
        return min((self.devices[d] for d in sub.device_ids),
                   key=lambda dev: (dev.queue_depth(), sub.device_ids.index(dev.device_id)))

    def _submit(self, sub: SubNetwork, state: ExecutionState) -> "Future[DeviceResult]":
        bindings = {name: state.store[name] for name in sub.inputs}
        ready_at = max([state.ready_at.get(p, 0.0) for p in self._preds[sub.name]], default=0.0)
        with self._select_lock:
            device = self._pick_device(sub)
            state.started.add(sub.name)
            return device.run(f"{self.dag.network}/{sub.name}", bindings, ready_at, state.request_id)

    def execute(self, request: InferenceRequest) -> Dict[str, np.ndarray]:
        state = ExecutionState(request.request_id)
        placeholders = {n: ty for s in self.dag.subnetworks for n, ty in s.inputs.items()}
        for name in self.dag.input_names:
            if name not in request.bindings:
                raise BindingError(f"placeholder '{name}' is not bound")
            state.store[name] = coerce_binding(name, request.bindings[name], placeholders[name])

        pending: Dict[Future, SubNetwork] = {}

        def launch_ready():
            for sub in self.dag.subnetworks:
                if sub.name in state.started:
                    continue
                if all(p in state.completed for p in self._preds[sub.name]):
                    pending[self._submit(sub, state)] = sub

        launch_ready()
        while pending:
            finished, _ = wait(list(pending), return_when=FIRST_COMPLETED)
            for fut in finished:
                sub = pending.pop(fut)
                result = fut.result()
                state.store.update(result.outputs)
                state.ready_at[sub.name] = result.end
                state.completed.add(sub.name)
                state.finished_at = max(state.finished_at, result.end)
            launch_ready()
        return {name: state.store[name] for name in self.dag.output_names}


class HostManager:
    """Entry point for serving: owns the devices and every added network."""

    def __init__(self, devices: Sequence[DeviceConfig], backend: Optional[InterpreterBackend] = None,
                 jitter: float = 0.0, seed: Optional[int] = None, workers: int = 8):
        if not devices:
            raise ProvisioningError("<fleet>", "a host needs at least one device")
        self.backend = backend or InterpreterBackend()
        self.events = EventLog()
        seed = get_settings().seed if seed is None else seed
        self.devices: Dict[str, DeviceManager] = {
            d.device_id: DeviceManager(d, self.events, self.backend, jitter, seed + i)
            for i, d in enumerate(devices)
        }
        self.configs = list(devices)
        self.networks: Dict[str, Executor] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="host")

    def add_network(self, f: Function, replicate: bool = True) -> PartitionDag:
        with self._lock:
            if f.name in self.networks:
                raise PartitionError(f"network '{f.name}' is already added")
            available = {d: dev.available_memory() for d, dev in self.devices.items()}
            dag = partition(f, self.configs, available, self.backend, replicate)
            provision(dag, self.devices, self.backend)
            self.networks[f.name] = Executor(dag, self.devices)
        return dag

    def remove_network(self, name: str):
        with self._lock:
            executor = self.networks.pop(name, None)
            if executor is None:
                raise UnknownNetworkError(f"no network named '{name}'")
            for sub in executor.dag.subnetworks:
                for device_id in sub.device_ids:
                    self.devices[device_id].evict(f"{name}/{sub.name}")
        logger.info(f"Removed network '{name}'")

    def _executor(self, name: str) -> Executor:
        executor = self.networks.get(name)
        if executor is None:
            raise UnknownNetworkError(f"no network named '{name}'")
        return executor

    def execute(self, name: str, request) -> Dict[str, np.ndarray]:
        if not isinstance(request, InferenceRequest):
            request = InferenceRequest(request)
        return self._executor(name).execute(request)

    def run_network(self, name: str, request) -> "Future[Dict[str, np.ndarray]]":
        self._executor(name)
        return self._pool.submit(self.execute, name, request)

    def close(self):
        self._pool.shutdown(wait=True)
        for dev in self.devices.values():
            dev.shutdown()

    def __enter__(self) -> "HostManager":
        return self

    def __exit__(self, *exc):
        self.close()
