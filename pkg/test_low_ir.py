# test_low_ir.py
import numpy as np
import pytest

from conftest import F, build_cnn, build_identity, build_random_graph, random_bindings
from graphlower.errors import IRError
from graphlower.graph_ir import Module
from graphlower.interp_backend import InterpreterBackend, compile, run
from graphlower.low_ir import (
    ALLOC,
    COPY,
    DEALLOC,
    IRFunction,
    Mutability,
    Qualifier,
    dump_ir,
    irgen,
    live_intervals,
    peak_live_bytes,
    optimize_ir,
    parse_ir,
    total_span,
    verify_ir,
)
from graphlower.memory_plan import allocate
from graphlower.node_table import NodeKind
from graphlower.pipeline import prepare_function
from graphlower.scheduler import schedule

RELU_IR = """\
declare {
  %out = weight mutable float<2 x 3>
  %x = weight mutable float<2 x 3>
}
program {
  %t0 = alloc float<2 x 3>
  Relu @out %t0, @in %x
  Copy @out %out, @in %t0
  dealloc @out %t0
}
"""


def _lowered_ir(f):
    g = prepare_function(f)
    return irgen(g, schedule(g))


def _kinds(ir):
    return [ins.kind for ins in ir.instructions]


def test_save_of_placeholder_is_a_single_copy():
    m, f = build_identity()
    ir = irgen(f)
    assert _kinds(ir) == [COPY]
    assert ir.activations == {}
    assert ir.instructions[0].operands == [("out", Qualifier.OUT), ("x", Qualifier.IN)]


def test_single_relu_irgen_and_dump():
    m = Module()
    x = m.create_placeholder("x", F(2, 3))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.RELU, x), m.create_placeholder("out", F(2, 3)))
    backend = InterpreterBackend(native_kinds=[NodeKind.RELU])
    ir = irgen(f, supported_kinds=backend.supported_kinds)
    assert _kinds(ir) == [ALLOC, "Relu", COPY, DEALLOC]
    assert {w.mutability for w in ir.weights.values()} == {Mutability.MUTABLE}
    assert dump_ir(ir) == RELU_IR


def test_irgen_refuses_unlowered_kinds():
    m = Module()
    x = m.create_placeholder("x", F(2, 3))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.RELU, x), m.create_placeholder("out", F(2, 3)))
    with pytest.raises(IRError):
        irgen(f)


def test_irgen_rejects_non_topological_orders(rng):
    m, f = build_cnn(rng)
    g = prepare_function(f)
    with pytest.raises(IRError):
        irgen(g, list(reversed(schedule(g))))


def test_every_activation_has_one_alloc_and_one_dealloc(rng):
    for _ in range(5):
        m, f = build_random_graph(rng, n_nodes=12)
        ir = _lowered_ir(f)
        assert verify_ir(ir) == []
        for name in ir.activations:
            allocs = [i for i, ins in enumerate(ir.instructions)
                      if ins.kind == ALLOC and ins.operands[0][0] == name]
            deallocs = [i for i, ins in enumerate(ir.instructions)
                        if ins.kind == DEALLOC and ins.operands[0][0] == name]
            uses = [i for i, ins in enumerate(ir.instructions)
                    if not ins.is_marker and name in ins.names()]
            assert len(allocs) == 1 and len(deallocs) == 1
            assert allocs[0] < min(uses) and max(uses) < deallocs[0]


def test_constants_become_const_weights(rng):
    m, f = build_cnn(rng)
    ir = _lowered_ir(f)
    consts = {w.name for w in ir.weights.values() if w.mutability is Mutability.CONSTANT}
    assert {"f1", "c1", "f2", "c2"} <= consts
    assert set(ir.payloads) == consts
    assert [w.name for w in ir.inputs()] == ["x"]
    assert [w.name for w in ir.outputs()] == ["out"]


def test_copy_through_temporary_is_eliminated():
    ir = parse_ir("""
declare {
  %x = weight mutable float<4>
  %y = weight mutable float<4>
}
program {
  %t = alloc float<4>
  Copy @out %t, @in %x
  Copy @out %y, @in %t
  dealloc @out %t
}
""")
    assert verify_ir(ir) == []
    out = optimize_ir(ir)
    assert verify_ir(out) == []
    assert [(ins.kind, ins.operands) for ins in out.instructions] == \
           [(COPY, [("y", Qualifier.OUT), ("x", Qualifier.IN)])]
    assert _kinds(ir) == [ALLOC, COPY, COPY, DEALLOC]


def test_elementwise_writes_in_place_over_a_dead_operand():
    ir = parse_ir("""
declare {
  %c = weight mutable float<2 x 2>
  %w = weight mutable float<2 x 2>
  %x = weight mutable float<2 x 2>
  %y = weight mutable float<2 x 2>
}
program {
  %t1 = alloc float<2 x 2>
  Tanh @out %t1, @in %x
  %t2 = alloc float<2 x 2>
  Add @out %t2, @in %t1, @in %c
  dealloc @out %t1
  %t3 = alloc float<2 x 2>
  MatMul @out %t3, @in %t2, @in %w
  dealloc @out %t2
  Copy @out %y, @in %t3
  dealloc @out %t3
}
""")
    out = optimize_ir(ir)
    assert verify_ir(out) == []
    assert "t2" not in out.activations
    add = next(ins for ins in out.instructions if ins.kind == "Add")
    assert add.operands[0] == ("t1", Qualifier.INOUT)
    matmul = next(ins for ins in out.instructions if ins.kind == "MatMul")
    assert matmul.operands == [("y", Qualifier.OUT), ("t1", Qualifier.IN), ("w", Qualifier.IN)]


def test_optimized_programs_run_bit_identically(rng):
    backend = InterpreterBackend()
    for _ in range(5):
        m, f = build_random_graph(rng, n_nodes=15)
        raw = _lowered_ir(f)
        opt = optimize_ir(raw)
        assert total_span(opt) <= total_span(raw)
        assert peak_live_bytes(opt) <= peak_live_bytes(raw)
        bindings = random_bindings(f, rng)
        a = run(compile(raw, allocate(raw)), bindings)
        b = run(compile(opt, allocate(opt)), bindings)
        assert a.keys() == b.keys()
        for name in a:
            assert a[name].to_bytes() == b[name].to_bytes()


def test_dump_of_empty_program():
    assert dump_ir(IRFunction("empty")) == "declare {}\nprogram {}\n"


def test_dump_annotates_conv_and_pool_operands(rng):
    m, f = build_cnn(rng)
    text = dump_ir(_lowered_ir(f))
    conv = next(l for l in text.splitlines() if l.strip().startswith("Convolution "))
    assert conv.count("@in %") == 3 and conv.count("@out %") == 1
    pool = next(l for l in text.splitlines() if l.strip().startswith("MaxPool "))
    assert '"kernels": [2, 2]' in pool


def test_dump_parse_round_trip(rng):
    for _ in range(3):
        m, f = build_random_graph(rng, n_nodes=10)
        ir = optimize_ir(_lowered_ir(f))
        back = parse_ir(dump_ir(ir), ir.name, ir.training)
        assert back == ir
    m, f = build_cnn(rng)
    ir = _lowered_ir(f)
    assert parse_ir(dump_ir(ir), ir.name) == ir


def test_keep_alive_blocks_copy_elimination():
    m = Module()
    x = m.create_placeholder("x", F(2, 2))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.TANH, x), m.create_placeholder("out", F(2, 2)))
    ir = irgen(f, keep_alive=True)
    assert ir.training
    assert all(ins.keep_alive for ins in ir.compute_instructions())
    assert COPY in _kinds(optimize_ir(ir))
    assert "!keepalive" in dump_ir(ir)


def test_verify_ir_catches_malformed_programs():
    read_first = parse_ir("""
declare {
  %y = weight mutable float<2>
}
program {
  %t = alloc float<2>
  Copy @out %y, @in %t
  dealloc @out %t
}
""")
    assert any("read before it is written" in d for d in verify_ir(read_first))

    writes_constant = parse_ir("""
declare {
  %k = weight const float<2>
  %x = weight mutable float<2>
}
program {
  Copy @out %k, @in %x
}
""")
    assert any("constant weight" in d for d in verify_ir(writes_constant))

    no_dealloc = parse_ir("""
declare {
  %x = weight mutable float<2>
}
program {
  %t = alloc float<2>
  Tanh @out %t, @in %x
}
""")
    assert any("exactly one alloc and one dealloc" in d for d in verify_ir(no_dealloc))


def test_parse_rejects_garbage():
    with pytest.raises(IRError):
        parse_ir("declare {\n  %x = weight mutable float<by>\n}\n")
    with pytest.raises(IRError):
        parse_ir("program {\n  Tanh out %t, @in %x\n}\n")
    with pytest.raises(IRError):
        parse_ir("something else\n")


def test_live_intervals_follow_markers():
    ir = parse_ir(RELU_IR, "main")
    assert live_intervals(ir) == {"t0": (0, 3)}
    assert total_span(ir) == 3
    np.testing.assert_equal(len(ir.compute_instructions()), 2)
