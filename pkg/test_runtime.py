# test_runtime.py
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from conftest import build_chain, build_mlp, build_random_graph, random_bindings
from graphlower.errors import BindingError, PartitionError, ProvisioningError, UnknownNetworkError
from graphlower.interp_backend import run
from graphlower.pipeline import compile_function
from graphlower.runtime import (
    DeviceConfig,
    DeviceManager,
    EventLog,
    Executor,
    HostManager,
    InferenceRequest,
    load_device_fleet,
    parse_device_fleet,
    partition,
    provision,
)

WIDTHS = [8, 64, 64, 64, 64, 8]


def _fleet(n=4, capacity=24576):
    return [DeviceConfig(device_id=f"d{i}", memory_capacity=capacity, throughput=1e9, bandwidth=1e8)
            for i in range(n)]


def _reference(f, bindings):
    return run(compile_function(f), bindings)["out"].data


def test_fleet_parsing(tmp_path):
    entry = dict(device_id="a", memory_capacity=1024, throughput=1.0, bandwidth=1.0)
    assert [d.device_id for d in parse_device_fleet({"devices": [entry]})] == ["a"]
    assert parse_device_fleet([entry])[0].memory_capacity == 1024
    with pytest.raises(ProvisioningError):
        parse_device_fleet([])
    with pytest.raises(ProvisioningError):
        parse_device_fleet([entry, entry])
    with pytest.raises(ProvisioningError):
        parse_device_fleet([dict(entry, memory_capacity=0)])
    path = tmp_path / "devices.json"
    path.write_text(json.dumps({"devices": [entry, dict(entry, device_id="b")]}))
    assert [d.device_id for d in load_device_fleet(str(path))] == ["a", "b"]
    with pytest.raises(ProvisioningError):
        load_device_fleet(str(tmp_path / "missing.json"))


def test_roomy_device_takes_the_whole_network(rng):
    m, f = build_mlp(rng)
    dag = partition(f, _fleet(1, 1 << 20))
    assert len(dag.subnetworks) == 1
    assert dag.edges == [] and dag.transfers == {}
    assert dag.input_names == ["x"] and dag.output_names == ["out"]


def test_tight_devices_split_the_chain(rng):
    m, f = build_chain(WIDTHS, rng)
    dag = partition(f, _fleet())
    assert len(dag.subnetworks) >= 3
    assert dag.verify() == []
    assert all(name.startswith("__xfer_main_") for name in dag.transfers)
    assert {n for n in m.storage if n.startswith("__xfer_")} == set(dag.transfers)
    capacity = {d.device_id: d.memory_capacity for d in _fleet()}
    for sub in dag.subnetworks:
        for d in sub.device_ids:
            assert sub.footprint <= capacity[d]
    covered = sorted(n for sub in dag.subnetworks for n in sub.node_ids)
    assert len(covered) == len(set(covered))
    report = dag.cost_report()
    assert [r["subnetwork"] for r in report] == [s.name for s in dag.subnetworks]
    assert all(r["est_seconds"] >= 0 and r["footprint_bytes"] > 0 for r in report)


def test_oversized_node_cannot_be_placed(rng):
    m, f = build_chain(WIDTHS, rng)
    with pytest.raises(PartitionError):
        partition(f, _fleet(2, 4096))


def test_partition_needs_devices(rng):
    m, f = build_mlp(rng)
    with pytest.raises(PartitionError):
        partition(f, [])


def test_device_memory_accounting(rng):
    m, f = build_mlp(rng)
    cf = compile_function(f)
    size = cf.plan.arena_size
    dev = DeviceManager(DeviceConfig(device_id="d", memory_capacity=size, throughput=1.0, bandwidth=1.0))
    try:
        dev.load("a", cf)
        assert dev.available_memory() == 0
        with pytest.raises(ProvisioningError):
            dev.load("b", cf)
        with pytest.raises(ProvisioningError):
            dev.load("a", cf)
        dev.evict("a")
        assert dev.available_memory() == size
        assert dev.high_water == size
        with pytest.raises(UnknownNetworkError):
            dev.evict("a")
        with pytest.raises(UnknownNetworkError):
            dev.run("a", {})
    finally:
        dev.shutdown()


def test_provision_rolls_back_on_failure(rng):
    m, f = build_chain(WIDTHS, rng)
    fleet = _fleet()
    dag = partition(f, fleet, replicate=False)
    last = dag.subnetworks[-1].device_ids[0]
    managers = {d.device_id: DeviceManager(d if d.device_id != last else
                                           d.model_copy(update={"memory_capacity": 64}))
                for d in fleet}
    try:
        with pytest.raises(ProvisioningError):
            provision(dag, managers)
        assert all(dev.loaded() == [] for dev in managers.values())
        assert all(dev.available_memory() == dev.maximum_memory() for dev in managers.values())
    finally:
        for dev in managers.values():
            dev.shutdown()


def test_executor_matches_a_single_device(rng):
    m, f = build_chain(WIDTHS, rng)
    fleet = _fleet()
    dag = partition(f, fleet)
    events = EventLog()
    managers = {d.device_id: DeviceManager(d, events) for d in fleet}
    try:
        assert provision(dag, managers) == dag.load_count()
        executor = Executor(dag, managers)
        bindings = random_bindings(f, rng)
        out = executor.execute(InferenceRequest(bindings, request_id="r1"))
        assert np.asarray(out["out"]).tobytes() == _reference(f, bindings).tobytes()
        with pytest.raises(BindingError):
            executor.execute(InferenceRequest({}))
    finally:
        for dev in managers.values():
            dev.shutdown()

    starts = {e.subnetwork: e.timestamp for e in events.events if e.event == "start"}
    finishes = {e.subnetwork: e.timestamp for e in events.events if e.event == "finish"}
    for edge in dag.edges:
        assert finishes[f"main/{edge.producer}"] <= starts[f"main/{edge.consumer}"]
    assert events.makespan() == max(finishes.values()) > 0
    for line in events.to_text().splitlines():
        assert len(line.split()) == 5


def test_host_serves_concurrent_requests(rng):
    m, f = build_chain(WIDTHS, rng)
    samples = [random_bindings(f, rng) for _ in range(16)]
    expected = [_reference(f, s) for s in samples]
    with HostManager(_fleet(), jitter=0.002, seed=7) as host:
        dag = host.add_network(f)
        assert len(dag.subnetworks) >= 3
        futures = [host.run_network("main", s) for s in samples]
        for fut, want in zip(futures, expected):
            assert np.asarray(fut.result()["out"]).tobytes() == want.tobytes()
        with ThreadPoolExecutor(max_workers=4) as pool:
            direct = list(pool.map(lambda s: host.execute("main", s), samples[:4]))
        for got, want in zip(direct, expected[:4]):
            assert np.asarray(got["out"]).tobytes() == want.tobytes()
        finished = [e for e in host.events.events if e.event == "finish"]
        assert len(finished) == 20 * len(dag.subnetworks)


def test_host_network_lifecycle(rng):
    m, f = build_mlp(rng)
    with HostManager(_fleet(2, 1 << 20)) as host:
        free = {d: dev.available_memory() for d, dev in host.devices.items()}
        host.add_network(f)
        with pytest.raises(PartitionError):
            host.add_network(f)
        assert sum(dev.available_memory() for dev in host.devices.values()) < sum(free.values())
        host.remove_network("main")
        assert {d: dev.available_memory() for d, dev in host.devices.items()} == free
        with pytest.raises(UnknownNetworkError):
            host.remove_network("main")
        with pytest.raises(UnknownNetworkError):
            host.execute("main", {})
        with pytest.raises(UnknownNetworkError):
            host.run_network("main", {})


def test_host_needs_devices():
    with pytest.raises(ProvisioningError):
        HostManager([])


def test_partitioned_random_networks_match_one_device_bit_for_bit(rng):
    split = 0
    for _ in range(12):
        m, f = build_random_graph(rng, n_nodes=int(rng.integers(6, 14)), dims=(16, 32))
        samples = [random_bindings(f, rng) for _ in range(3)]
        whole = compile_function(f)
        expected = [run(whole, s) for s in samples]
        footprint = partition(f, _fleet(1, 1 << 24)).subnetworks[0].footprint
        capacity = int(footprint * rng.uniform(0.35, 1.2))
        try:
            host = HostManager(_fleet(int(rng.integers(2, 6)), capacity), jitter=0.001,
                               seed=int(rng.integers(0, 1000)))
            with host:
                dag = host.add_network(f)
                split += len(dag.subnetworks) > 1
                futures = [host.run_network("main", s) for s in samples]
                for fut, want in zip(futures, expected):
                    got = fut.result()
                    for name, tensor in want.items():
                        assert np.asarray(got[name]).tobytes() == tensor.data.tobytes(), name
        except (PartitionError, ProvisioningError):
            continue
    assert split > 0
