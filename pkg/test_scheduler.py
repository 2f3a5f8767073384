# test_scheduler.py
import numpy as np

from conftest import F, build_random_graph
from graphlower.graph_ir import Module, dependency_graph, topological_order
from graphlower.node_table import NodeKind
from graphlower.scheduler import greedy_schedule, is_topological, peak_memory, schedule


def _best_peak(f):
    """Exact minimum peak over every topological order, by search over executed-node sets."""
    deps = dependency_graph(f)
    size = {i: n.result_type.size_in_bytes if n.result_type is not None else 0 for i, n in f.nodes.items()}
    readers = {i: set() for i in f.nodes}
    for n in f.nodes.values():
        for r in n.data_inputs() + ([n.predicate] if n.predicate is not None else []):
            if isinstance(r, int):
                readers[r].add(n.id)

    def live(done):
        return sum(size[i] for i in done if not readers[i] <= done)

    best = {frozenset(): 0}
    frontier = [frozenset()]
    for _ in range(len(f.nodes)):
        following = {}
        for done in frontier:
            base = live(done)
            for n in f.nodes:
                if n in done or not set(deps.predecessors(n)) <= done:
                    continue
                nxt = done | {n}
                cost = max(best[done], base + size[n])
                if cost < following.get(nxt, float("inf")):
                    following[nxt] = cost
        best.update(following)
        frontier = list(following)
    return best[frozenset(f.nodes)]


def _two_chains(rng, wide=256, narrow=8):
    m = Module()
    x = m.create_placeholder("x", F(1, 4))
    f = m.create_function("main")
    ends = []
    for tag, width in (("a", wide), ("b", narrow)):
        w1 = m.create_constant(f"{tag}1", rng.normal(size=(4, width)).astype(np.float32))
        w2 = m.create_constant(f"{tag}2", rng.normal(size=(width, 4)).astype(np.float32))
        h = f.create(NodeKind.MAT_MUL, x, w1)
        h = f.create(NodeKind.TANH, h)
        ends.append(f.create(NodeKind.MAT_MUL, h, w2))
    f.create_save(f.create(NodeKind.ADD, *ends), m.create_placeholder("out", F(1, 4)))
    return m, f


def test_chain_has_a_unique_order():
    m = Module()
    x = m.create_placeholder("x", F(2, 2))
    f = m.create_function("main")
    a = f.create(NodeKind.TANH, x)
    b = f.create(NodeKind.SIGMOID, a)
    c = f.create(NodeKind.TANH, b)
    s = f.create_save(c, m.create_placeholder("out", F(2, 2)))
    assert schedule(f) == [a, b, c, s]


def test_two_chains_beat_naive_and_stay_near_optimal(rng):
    m, f = _two_chains(rng)
    order = schedule(f)
    assert is_topological(f, order)
    peak = peak_memory(f, order)
    assert peak <= peak_memory(f, topological_order(f))
    assert peak <= 1.5 * _best_peak(f)


def test_fat_and_thin_branches_are_not_live_together(rng):
    m = Module()
    x = m.create_placeholder("x", F(1, 4))
    f = m.create_function("main")
    r = f.create(NodeKind.TANH, x)
    fat, thin = 262144, 256
    branches = []
    for tag, width in (("fat", fat), ("thin", thin)):
        w1 = m.create_constant(f"{tag}1", np.zeros((4, width), np.float32))
        w2 = m.create_constant(f"{tag}2", np.zeros((width, 4), np.float32))
        branches.append(f.create(NodeKind.MAT_MUL, f.create(NodeKind.MAT_MUL, r, w1), w2))
    f.create_save(f.create(NodeKind.ADD, *branches), m.create_placeholder("out", F(1, 4)))
    peak = peak_memory(f, schedule(f))
    assert peak < (fat + thin) * 4


def test_random_graphs_schedule_no_worse_than_id_order(rng):
    for _ in range(10):
        m, f = build_random_graph(rng, n_nodes=8, with_high_level=False)
        order = schedule(f)
        assert is_topological(f, order)
        assert peak_memory(f, order) <= peak_memory(f, topological_order(f))
        assert peak_memory(f, order) <= 1.5 * _best_peak(f)


def test_greedy_orders_are_topological(rng):
    m, f = build_random_graph(rng, n_nodes=12, with_high_level=False)
    assert is_topological(f, greedy_schedule(f))


def test_peak_memory_counts_live_outputs():
    m = Module()
    x = m.create_placeholder("x", F(1, 4))
    f = m.create_function("main")
    a = f.create(NodeKind.TANH, x)
    b = f.create(NodeKind.SIGMOID, x)
    c = f.create(NodeKind.ADD, a, b)
    s = f.create_save(c, m.create_placeholder("out", F(1, 4)))
    # a and b are alive when c is produced
    assert peak_memory(f, [a, b, c, s]) == 48
    assert not is_topological(f, [c, a, b, s])
