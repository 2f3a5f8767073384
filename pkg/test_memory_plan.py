# test_memory_plan.py
import itertools

from conftest import build_cnn, build_mlp
from graphlower.low_ir import Mutability, irgen, optimize_ir
from graphlower.memory_plan import (
    ALIGNMENT,
    BufferInterval,
    MemoryPlan,
    align_up,
    allocate,
    check_plan,
    plan_buffers,
)
from graphlower.pipeline import prepare_function


def _optimal_region(buffers):
    """Smallest region over every placement order, each buffer at its lowest free offset."""
    conflicts = {a.name: [b.name for b in buffers if b is not a and a.overlaps(b)] for a in buffers}
    sizes = {b.name: b.size for b in buffers}
    best = None
    for perm in itertools.permutations(buffers):
        placed = {}
        top = 0
        for b in perm:
            busy = sorted((placed[n], placed[n] + sizes[n]) for n in conflicts[b.name] if n in placed)
            offset = 0
            for lo, hi in busy:
                if offset + b.size <= lo:
                    break
                offset = max(offset, hi)
            placed[b.name] = offset
            top = max(top, offset + b.size)
            if best is not None and top >= best:
                break
        best = top if best is None else min(best, top)
    return best


def test_align_up():
    assert align_up(0) == 0
    assert align_up(1) == ALIGNMENT
    assert align_up(ALIGNMENT) == ALIGNMENT
    assert align_up(ALIGNMENT + 1) == 2 * ALIGNMENT


def test_disjoint_lifetimes_share_offset_zero():
    buffers = [BufferInterval("a", 1024, 0, 1), BufferInterval("b", 1024, 2, 3)]
    offsets, size, _ = plan_buffers(buffers)
    assert offsets == {"a": 0, "b": 0}
    assert size == 1024


def test_overlapping_lifetimes_get_disjoint_offsets():
    buffers = [BufferInterval("a", 1024, 0, 2), BufferInterval("b", 1024, 1, 3)]
    offsets, size, _ = plan_buffers(buffers)
    assert size == 2048
    assert {offsets["a"], offsets["b"]} == {0, 1024}
    assert check_plan(buffers, offsets) == []


def test_random_plans_are_valid_and_near_optimal(rng):
    for _ in range(2):
        buffers = []
        for i in range(8):
            start = int(rng.integers(0, 20))
            buffers.append(BufferInterval(f"b{i}", int(rng.integers(1, 17)) * ALIGNMENT,
                                          start, start + int(rng.integers(0, 8))))
        offsets, size, strategy = plan_buffers(buffers)
        assert strategy in ("linear-scan", "size-ordered")
        assert check_plan(buffers, offsets) == []
        assert all(off % ALIGNMENT == 0 for off in offsets.values())
        assert size <= 1.5 * _optimal_region(buffers)
        assert size <= sum(b.size for b in buffers)


def test_pairwise_overlapping_buffers_need_the_full_sum():
    buffers = [BufferInterval(f"b{i}", 64 * (i + 1), 0, 10) for i in range(4)]
    _, size, _ = plan_buffers(buffers)
    assert size == sum(b.size for b in buffers)


def test_check_plan_reports_collisions():
    buffers = [BufferInterval("a", 128, 0, 2), BufferInterval("b", 128, 1, 3)]
    assert check_plan(buffers, {"a": 0, "b": 64})


def test_plan_is_deterministic(rng):
    m, f = build_cnn(rng)
    g = prepare_function(f)
    ir = optimize_ir(irgen(g))
    assert allocate(ir).to_dict() == allocate(ir).to_dict()


def test_arena_layout_puts_constants_first(rng):
    m, f = build_mlp(rng)
    ir = optimize_ir(irgen(prepare_function(f)))
    plan = allocate(ir)
    lo, hi = plan.constant_region
    assert lo == 0
    for w in ir.weights.values():
        off = plan.offsets[w.name]
        assert off % ALIGNMENT == 0
        if w.mutability is Mutability.CONSTANT:
            assert lo <= off and off + w.ty.size_in_bytes <= hi
        else:
            m_lo, m_hi = plan.mutable_region
            assert m_lo <= off and off + w.ty.size_in_bytes <= m_hi
    a_lo, a_hi = plan.activation_region
    assert a_hi == plan.arena_size
    for name in ir.activations:
        assert a_lo <= plan.offsets[name] < a_hi
    buffers = [BufferInterval(n, plan.sizes[n], *plan.intervals[n]) for n in ir.activations]
    assert check_plan(buffers, plan.offsets) == []
    assert plan.activation_size <= sum(align_up(b.size) for b in buffers)


def test_plan_dict_round_trip(rng):
    m, f = build_mlp(rng)
    plan = allocate(optimize_ir(irgen(prepare_function(f))))
    again = MemoryPlan.from_dict(plan.to_dict())
    assert again.to_dict() == plan.to_dict()
    assert again.activation_offset(next(iter(plan.intervals))) >= 0
