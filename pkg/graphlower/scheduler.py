# scheduler.py
"""
Linear scheduling of a lowered function.

A schedule is a topological order of the nodes. Its cost is the peak number
of activation bytes alive at once: a node's output is alive from the step
that produces it until the step of its last reader. Storage does not count.
"""

from typing import Callable, Dict, List, Set

from logger_config import setup_logger
from .graph_ir import Function, dependency_graph, topological_order

logger = setup_logger().getChild("scheduler")


def _data_readers(f: Function) -> Dict[int, Set[int]]:
    readers: Dict[int, Set[int]] = {i: set() for i in f.nodes}
    for node in f.nodes.values():
        refs = node.data_inputs() + ([node.predicate] if node.predicate is not None else [])
        for r in refs:
            if isinstance(r, int):
                readers[r].add(node.id)
    return readers


def _output_bytes(f: Function, node_id: int) -> int:
    ty = f.nodes[node_id].result_type
    return ty.size_in_bytes if ty is not None else 0


def peak_memory(f: Function, order: List[int]) -> int:
    """Peak live activation bytes when nodes execute in the given order."""
    readers = _data_readers(f)
    remaining = {i: len(rs) for i, rs in readers.items()}
    live = peak = 0
    for node_id in order:
        live += _output_bytes(f, node_id)
        peak = max(peak, live)
        node = f.nodes[node_id]
        refs = set(r for r in node.data_inputs() if isinstance(r, int))
        if isinstance(node.predicate, int):
            refs.add(node.predicate)
        for r in refs:
            remaining[r] -= 1
            if remaining[r] == 0:
                live -= _output_bytes(f, r)
        if remaining[node_id] == 0:
            live -= _output_bytes(f, node_id)
    return peak


# score(node_id, freed_bytes, output_bytes) -> sort key, smallest wins
ScoreFn = Callable[[int, int, int], tuple]


def _bytes_freed_first(node_id: int, freed: int, out: int) -> tuple:
    return (-freed, out, node_id)


def _net_bytes_first(node_id: int, freed: int, out: int) -> tuple:
    return (out - freed, out, node_id)


def greedy_schedule(f: Function, score: ScoreFn = _bytes_freed_first) -> List[int]:
    deps = dependency_graph(f)
    readers = _data_readers(f)
    remaining = {i: len(rs) for i, rs in readers.items()}
    waiting = {i: deps.in_degree(i) for i in f.nodes}
    ready = {i for i, d in waiting.items() if d == 0}
    order: List[int] = []
    while ready:
        def key(node_id: int) -> tuple:
            node = f.nodes[node_id]
            refs = set(r for r in node.data_inputs() if isinstance(r, int))
            if isinstance(node.predicate, int):
                refs.add(node.predicate)
            freed = sum(_output_bytes(f, r) for r in refs if remaining[r] == 1)
            return score(node_id, freed, _output_bytes(f, node_id))

        chosen = min(ready, key=key)
        ready.remove(chosen)
        order.append(chosen)
        node = f.nodes[chosen]
        refs = set(r for r in node.data_inputs() if isinstance(r, int))
        if isinstance(node.predicate, int):
            refs.add(node.predicate)
        for r in refs:
            remaining[r] -= 1
        for succ in deps.successors(chosen):
            waiting[succ] -= 1
            if waiting[succ] == 0:
                ready.add(succ)
    return order


def schedule(f: Function) -> List[int]:
    """
    Memory-minimizing topological order. Ready nodes are picked by the bytes
    their emission frees (then smaller output, then node id); a net-bytes
    variant and the plain id order compete and the lowest peak wins.
    """
    naive = topological_order(f)
    candidates = [
        ("bytes-freed", greedy_schedule(f, _bytes_freed_first)),
        ("net-bytes", greedy_schedule(f, _net_bytes_first)),
        ("id-order", naive),
    ]
    best_name, best = min(candidates, key=lambda c: peak_memory(f, c[1]))
    logger.info(f"Scheduled '{f.name}' ({best_name}): {len(best)} nodes, "
                f"peak {peak_memory(f, best)} bytes (id order {peak_memory(f, naive)})")
    return best


def is_topological(f: Function, order: List[int]) -> bool:
    if sorted(order) != sorted(f.nodes):
        return False
    position = {n: i for i, n in enumerate(order)}
    deps = dependency_graph(f)
    return all(position[u] < position[v] for u, v in deps.edges)
