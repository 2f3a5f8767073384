# test_end_to_end.py
import numpy as np
import pytest

import naive_kernels as naive
from conftest import F, build_cnn, build_random_graph, build_regression, random_bindings
from graphlower.errors import LoweringError
from graphlower.evaluator import evaluate
from graphlower.graph_ir import Module, verify
from graphlower.interp_backend import run
from graphlower.lowering import RULES, CompilationMode, is_lowered, lower, lowerable_kinds
from graphlower.node_table import NodeKind
from graphlower.pipeline import compile_function


def test_compiled_cnn_matches_loop_reference(rng):
    m, f = build_cnn(rng)
    params = {name: m.storage[name].tensor.data for name in ("f1", "c1", "f2", "c2", "w", "b")}
    cf = compile_function(f)
    for _ in range(50):
        x = rng.uniform(-1, 1, (1, 8, 8, 3)).astype(np.float32)
        got = run(cf, {"x": x})["out"].data
        np.testing.assert_allclose(got, naive.cnn_forward(x, params), rtol=1e-5, atol=1e-5)


def test_lowering_preserves_random_graphs(rng):
    for _ in range(10):
        m, f = build_random_graph(rng, n_nodes=12)
        bindings = random_bindings(f, rng)
        expected = evaluate(f, bindings)
        g = lower(f.clone())
        assert is_lowered(g)
        assert verify(g) == []
        got = evaluate(g, bindings)
        for name in expected:
            np.testing.assert_allclose(got[name], expected[name], rtol=1e-5, atol=1e-5)


def test_lowering_respects_backend_hooks(rng):
    m, f = build_cnn(rng)
    keep_fc = lambda node: node.kind is not NodeKind.FULLY_CONNECTED
    g = lower(f.clone(), backend_hooks=keep_fc)
    assert g.count(NodeKind.FULLY_CONNECTED) == 1
    assert g.count(NodeKind.RELU) == 0
    assert is_lowered(g, keep_fc) and not is_lowered(g)


def test_relu_lowers_to_max_with_zero(rng):
    m = Module()
    x = m.create_placeholder("x", F(3, 3))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.RELU, x), m.create_placeholder("out", F(3, 3)))
    value = rng.normal(size=(3, 3)).astype(np.float32)
    expected = evaluate(f, {"x": value})["out"]
    lower(f)
    assert f.count(NodeKind.MAX) == 1 and f.count(NodeKind.SPLAT) == 1
    np.testing.assert_array_equal(evaluate(f, {"x": value})["out"], expected)


def _sgd_function(lr):
    m = Module()
    w = m.create_placeholder("w", F(4))
    g = m.create_placeholder("g", F(4))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.SGD, w, g, learning_rate=lr), m.create_placeholder("out", F(4)))
    return f


def test_sgd_lowering():
    w = np.array([1.0, -2.0, 3.5, 0.25], np.float32)
    f = lower(_sgd_function(0.0))
    assert f.count(NodeKind.SGD) == 0
    assert {NodeKind.MUL, NodeKind.ADD, NodeKind.SPLAT} <= {n.kind for n in f.nodes.values()}
    np.testing.assert_array_equal(evaluate(f, {"w": w, "g": np.ones(4, np.float32)})["out"], w)
    f = lower(_sgd_function(1.0))
    np.testing.assert_array_equal(evaluate(f, {"w": w, "g": w})["out"], np.zeros(4, np.float32))


def test_sgd_lowering_is_exact(rng):
    for lr in (0.01, 0.3, 2.0):
        f = _sgd_function(lr)
        bindings = {"w": rng.normal(size=4).astype(np.float32), "g": rng.normal(size=4).astype(np.float32)}
        expected = evaluate(f, bindings)["out"]
        np.testing.assert_array_equal(evaluate(lower(f), bindings)["out"], expected)


def _bn_function(stats, dims=(2, 3)):
    m = Module()
    x = m.create_placeholder("x", F(*dims))
    names = [m.create_constant(k, np.asarray(v, np.float32)) for k, v in zip("gbmv", stats)]
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.BATCH_NORMALIZATION, x, *names, epsilon=1e-5),
                  m.create_placeholder("out", F(*dims)))
    return f


def test_batchnorm_lowering():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    f = lower(_bn_function([np.full(3, 2.0), np.full(3, 3.0), np.zeros(3), np.full(3, 1 - 1e-5)]))
    assert f.count(NodeKind.BATCH_NORMALIZATION) == 0
    np.testing.assert_allclose(evaluate(f, {"x": x})["out"], 2 * x + 3, rtol=1e-6)

    f = lower(_bn_function([np.ones(3), np.zeros(3), np.array([0.0, 1.0, 2.0]), np.full(3, 1 - 1e-5)]))
    np.testing.assert_allclose(evaluate(f, {"x": x})["out"], x - np.array([0.0, 1.0, 2.0]), atol=1e-5)


def test_batchnorm_lowering_matches_the_kernel(rng):
    stats = [rng.uniform(0.5, 1.5, 3), rng.normal(size=3), rng.normal(size=3), rng.uniform(0.5, 2, 3)]
    f = _bn_function(stats)
    x = rng.normal(size=(2, 3)).astype(np.float32)
    expected = evaluate(f, {"x": x})["out"]
    np.testing.assert_allclose(evaluate(lower(f), {"x": x})["out"], expected, rtol=1e-5, atol=1e-6)


def test_batchnorm_needs_constant_statistics():
    m = Module()
    x = m.create_placeholder("x", F(2, 3))
    stats = [m.create_placeholder(k, F(3)) for k in "gbmv"]
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.BATCH_NORMALIZATION, x, *stats), m.create_placeholder("out", F(2, 3)))
    with pytest.raises(LoweringError):
        lower(f)


def test_training_lowering_needs_gradients():
    m, f = build_regression()
    with pytest.raises(LoweringError):
        lower(f, CompilationMode.TRAINING)
    g = lower(f.clone())
    assert g.count(NodeKind.REGRESSION) == 0


def test_every_lowerable_kind_has_a_rule():
    assert set(lowerable_kinds()) == set(RULES)
