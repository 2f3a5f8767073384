# test_autodiff.py
import numpy as np
import pytest

from conftest import F, build_regression, build_trainable_mlp
from graphlower.autodiff import GradConfig, differentiate, gradient_check, regression_loss
from graphlower.errors import BindingError, UnsupportedGradientError
from graphlower.evaluator import evaluate, evaluate_all
from graphlower.graph_ir import Module, verify
from graphlower.lowering import CompilationMode, lower
from graphlower.node_table import NodeKind
from graphlower.pipeline import train


def _regression_data(rng, rows=16, features=4):
    x = rng.uniform(-1, 1, (rows, features)).astype(np.float32)
    a_true = rng.normal(0, 1, (features, 1)).astype(np.float32)
    return x, a_true, (x @ a_true).astype(np.float32)


def test_grad_config_validation():
    with pytest.raises(ValueError):
        GradConfig(learning_rate=-0.1, trainables={"A"})
    with pytest.raises(ValueError):
        GradConfig(learning_rate=0.1, trainables=set())


def test_differentiate_leaves_original_untouched():
    m, f = build_regression()
    before = {i: (n.kind, list(n.inputs)) for i, n in f.nodes.items()}
    g = differentiate(f, GradConfig(0.1, {"A"}))
    assert {i: (n.kind, list(n.inputs)) for i, n in f.nodes.items()} == before
    assert not f.differentiated
    assert g.differentiated
    assert verify(g) == []
    assert g.count(NodeKind.SGD) == 1
    assert any(s.inputs[1] == "A" for s in g.saves())


def test_update_of_a_single_placeholder_lowers_to_sub_mul_add_save():
    m = Module()
    a = m.create_placeholder("A", F(3, 2))
    t = m.create_placeholder("T", F(3, 2))
    out = m.create_placeholder("out", F(3, 2))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.REGRESSION, a, t), out)
    g = lower(differentiate(f, GradConfig(0.5, {"A"})), CompilationMode.TRAINING)
    kinds = {n.kind for n in g.nodes.values()} - {NodeKind.SPLAT}
    assert kinds == {NodeKind.SUB, NodeKind.MUL, NodeKind.ADD, NodeKind.SAVE}


def test_trainable_that_does_not_reach_the_loss_is_rejected():
    m, f = build_regression()
    m.create_placeholder("unused", F(4, 1))
    with pytest.raises(UnsupportedGradientError):
        differentiate(f, GradConfig(0.1, {"unused"}))


def test_constant_trainable_and_missing_loss_are_rejected():
    m = Module()
    x = m.create_placeholder("x", F(2, 2))
    w = m.create_constant("w", np.eye(2, dtype=np.float32))
    out = m.create_placeholder("out", F(2, 2))
    f = m.create_function("main")
    f.create_save(f.create(NodeKind.MAT_MUL, x, w), out)
    with pytest.raises(UnsupportedGradientError):
        differentiate(f, GradConfig(0.1, {"w"}))
    with pytest.raises(UnsupportedGradientError):
        differentiate(f, GradConfig(0.1, {"x"}))


def test_node_without_gradient_rule_is_named():
    m = Module()
    x = m.create_placeholder("x", F(2, 2))
    w = m.create_placeholder("w", F(2, 2))
    y = m.create_placeholder("y", F(2, 2))
    out = m.create_placeholder("out", F(2, 2))
    f = m.create_function("main")
    h = f.create(NodeKind.TANH, f.create(NodeKind.MAT_MUL, x, w))
    f.create_save(f.create(NodeKind.REGRESSION, h, y), out)
    with pytest.raises(UnsupportedGradientError, match=f"%{h} \\(Tanh\\)"):
        differentiate(f, GradConfig(0.1, {"w"}))


def test_symbolic_gradient_matches_closed_form(rng):
    m, f = build_regression()
    x, _, y = _regression_data(rng)
    a = rng.normal(0, 1, (4, 1))
    g = differentiate(f, GradConfig(0.1, {"A"}))
    values, _ = evaluate_all(g, {"x": x, "y": y, "A": a}, precision="float64")
    expected = x.astype(np.float64).T @ (x.astype(np.float64) @ a - y)
    np.testing.assert_allclose(values[g.meta["gradients"]["A"]], expected, rtol=1e-9, atol=1e-9)


def test_gradient_check_linear(rng):
    m, f = build_regression()
    x, _, y = _regression_data(rng)
    a = rng.normal(0, 1, (4, 1))
    assert gradient_check(f, GradConfig(0.1, {"A"}), {"x": x, "y": y, "A": a}) <= 1e-6


def test_gradient_check_mlp_with_relu(rng):
    m, f = build_trainable_mlp(batch=4, features=3, hidden=8, classes=2)
    bindings = {
        "x": rng.uniform(-1, 1, (4, 3)),
        "y": rng.uniform(-1, 1, (4, 2)),
        "w1": rng.normal(0, 0.7, (3, 8)),
        "b1": rng.normal(0, 0.3, (8,)),
        "w2": rng.normal(0, 0.7, (8, 2)),
        "b2": rng.normal(0, 0.3, (2,)),
    }
    cfg = GradConfig(0.1, {"w1", "b1", "w2", "b2"})
    assert gradient_check(f, cfg, bindings) <= 1e-4


def test_gradient_check_requires_bindings(rng):
    m, f = build_regression()
    with pytest.raises(BindingError):
        gradient_check(f, GradConfig(0.1, {"A"}), {"x": np.zeros((16, 4))})


def test_zero_learning_rate_keeps_weights(rng):
    m, f = build_regression()
    x, _, y = _regression_data(rng)
    a = rng.normal(0, 1, (4, 1)).astype(np.float32)
    g = differentiate(f, GradConfig(0.0, {"A"}))
    out = evaluate(g, {"x": x, "y": y, "A": a})
    np.testing.assert_array_equal(out["A"], a)


def test_regression_forwards_its_prediction(rng):
    m, f = build_regression()
    x, _, y = _regression_data(rng)
    a = rng.normal(0, 1, (4, 1)).astype(np.float32)
    out = evaluate(f, {"x": x, "y": y, "A": a})
    np.testing.assert_allclose(out["pred"], x @ a, rtol=1e-6)
    assert regression_loss(f, {"x": x, "y": y, "A": a}) == pytest.approx(
        0.5 * float(np.sum((x.astype(np.float64) @ a - y) ** 2)), rel=1e-5)


def test_two_hundred_sgd_steps_cut_the_loss(rng):
    m, f = build_regression()
    x, _, y = _regression_data(rng)
    weights, losses = train(f, GradConfig(0.05, {"A"}), [{"x": x, "y": y}],
                            {"A": np.zeros((4, 1), dtype=np.float32)}, steps=200)
    assert len(losses) == 201
    assert losses[-1] * 100 <= losses[0]
    assert weights["A"].shape == (4, 1)


def test_train_requires_initial_weights(rng):
    m, f = build_regression()
    x, _, y = _regression_data(rng)
    with pytest.raises(BindingError):
        train(f, GradConfig(0.05, {"A"}), [{"x": x, "y": y}], {}, steps=1)
