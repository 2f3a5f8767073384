# conftest.py
"""Shared model builders and fixtures for the test suite."""

import numpy as np
import pytest

from graphlower.graph_ir import Function, Module
from graphlower.node_table import NodeKind
from graphlower.settings import get_settings
from graphlower.tensor import TensorType

F = TensorType.float32


def build_identity(dims=(2, 3)):
    m = Module()
    x = m.create_placeholder("x", F(*dims))
    out = m.create_placeholder("out", F(*dims))
    f = m.create_function("main")
    f.create_save(x, out)
    return m, f


def build_regression(rows=16, features=4):
    """pred = x @ A, Regression against y; A is the trainable."""
    m = Module()
    x = m.create_placeholder("x", F(rows, features))
    a = m.create_placeholder("A", F(features, 1))
    y = m.create_placeholder("y", F(rows, 1))
    out = m.create_placeholder("pred", F(rows, 1))
    f = m.create_function("main")
    mm = f.create(NodeKind.MAT_MUL, x, a)
    reg = f.create(NodeKind.REGRESSION, mm, y)
    f.create_save(reg, out)
    return m, f


def build_mlp(rng, batch=8, features=4, hidden=16, classes=3, softmax=True):
    """FC -> Relu -> FC (-> SoftMax) with constant weights."""
    m = Module()
    x = m.create_placeholder("x", F(batch, features))
    out = m.create_placeholder("out", F(batch, classes))
    w1 = m.create_constant("w1", rng.normal(0, 0.5, (features, hidden)).astype(np.float32))
    b1 = m.create_constant("b1", rng.normal(0, 0.1, (hidden,)).astype(np.float32))
    w2 = m.create_constant("w2", rng.normal(0, 0.5, (hidden, classes)).astype(np.float32))
    b2 = m.create_constant("b2", rng.normal(0, 0.1, (classes,)).astype(np.float32))
    f = m.create_function("main")
    h = f.create(NodeKind.FULLY_CONNECTED, x, w1, b1)
    r = f.create(NodeKind.RELU, h)
    o = f.create(NodeKind.FULLY_CONNECTED, r, w2, b2)
    if softmax:
        o = f.create(NodeKind.SOFT_MAX, o)
    f.create_save(o, out)
    return m, f


def build_trainable_mlp(batch=4, features=3, hidden=5, classes=2):
    """Two FC layers with placeholder weights and a Regression loss."""
    m = Module()
    x = m.create_placeholder("x", F(batch, features))
    y = m.create_placeholder("y", F(batch, classes))
    w1 = m.create_placeholder("w1", F(features, hidden))
    b1 = m.create_placeholder("b1", F(hidden))
    w2 = m.create_placeholder("w2", F(hidden, classes))
    b2 = m.create_placeholder("b2", F(classes))
    out = m.create_placeholder("out", F(batch, classes))
    f = m.create_function("main")
    h = f.create(NodeKind.FULLY_CONNECTED, x, w1, b1)
    r = f.create(NodeKind.RELU, h)
    o = f.create(NodeKind.FULLY_CONNECTED, r, w2, b2)
    reg = f.create(NodeKind.REGRESSION, o, y)
    f.create_save(reg, out)
    return m, f


def build_cnn(rng):
    """Two 3x3 convolutions, a 2x2 max pool, FC and SoftMax over an 8x8x3 input."""
    m = Module()
    x = m.create_placeholder("x", F(1, 8, 8, 3))
    out = m.create_placeholder("out", F(1, 5))
    f1 = m.create_constant("f1", rng.normal(0, 0.3, (4, 3, 3, 3)).astype(np.float32))
    c1 = m.create_constant("c1", rng.normal(0, 0.1, (4,)).astype(np.float32))
    f2 = m.create_constant("f2", rng.normal(0, 0.3, (4, 3, 3, 4)).astype(np.float32))
    c2 = m.create_constant("c2", rng.normal(0, 0.1, (4,)).astype(np.float32))
    w = m.create_constant("w", rng.normal(0, 0.2, (64, 5)).astype(np.float32))
    b = m.create_constant("b", rng.normal(0, 0.1, (5,)).astype(np.float32))
    f = m.create_function("main")
    same = dict(kernels=[3, 3], strides=[1, 1], pads=[1, 1, 1, 1])
    h = f.create(NodeKind.CONVOLUTION, x, f1, c1, **same)
    h = f.create(NodeKind.RELU, h)
    h = f.create(NodeKind.CONVOLUTION, h, f2, c2, **same)
    h = f.create(NodeKind.RELU, h)
    h = f.create(NodeKind.MAX_POOL, h, kernels=[2, 2], strides=[2, 2], pads=[0, 0, 0, 0])
    h = f.create(NodeKind.RESHAPE, h, dims=[1, 64])
    h = f.create(NodeKind.FULLY_CONNECTED, h, w, b)
    h = f.create(NodeKind.SOFT_MAX, h)
    f.create_save(h, out)
    return m, f


def build_chain(widths, rng, batch=2, name="main"):
    """MatMul -> Tanh layers; widths[i] -> widths[i + 1]."""
    m = Module()
    x = m.create_placeholder("x", F(batch, widths[0]))
    out = m.create_placeholder("out", F(batch, widths[-1]))
    f = m.create_function(name)
    h = x
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        w = m.create_constant(f"w{i}", rng.normal(0, 0.5, (a, b)).astype(np.float32))
        h = f.create(NodeKind.MAT_MUL, h, w)
        h = f.create(NodeKind.TANH, h)
    f.create_save(h, out)
    return m, f


ELEMENTWISE_BINARY = [NodeKind.ADD, NodeKind.SUB, NodeKind.MUL, NodeKind.MAX, NodeKind.MIN]
ELEMENTWISE_UNARY = [NodeKind.RELU, NodeKind.TANH, NodeKind.SIGMOID]


def build_random_graph(rng, n_nodes=8, dims=(3, 4), with_high_level=True):
    """
    Random DAG over same-shaped float tensors. Draws elementwise kinds and,
    when with_high_level, FullyConnected and BatchNormalization nodes.
    Every sink is saved.
    """
    m = Module()
    ty = F(*dims)
    inputs = [m.create_placeholder("x0", ty), m.create_placeholder("x1", ty)]
    f = m.create_function("main")
    values = list(inputs)
    for i in range(n_nodes):
        choice = rng.integers(0, 10)
        pick = lambda: values[int(rng.integers(0, len(values)))]
        if with_high_level and choice == 0:
            w = m.create_constant(f"fcw{i}", rng.normal(0, 0.5, (dims[1], dims[1])).astype(np.float32))
            b = m.create_constant(f"fcb{i}", rng.normal(0, 0.5, (dims[1],)).astype(np.float32))
            node = f.create(NodeKind.FULLY_CONNECTED, pick(), w, b)
        elif with_high_level and choice == 1:
            stats = [m.create_constant(f"bn{i}_{s}", v) for s, v in (
                ("g", rng.uniform(0.5, 1.5, dims[1])), ("b", rng.normal(0, 0.5, dims[1])),
                ("m", rng.normal(0, 0.5, dims[1])), ("v", rng.uniform(0.5, 2.0, dims[1])))]
            node = f.create(NodeKind.BATCH_NORMALIZATION, pick(), *stats)
        elif choice < 6:
            kind = ELEMENTWISE_BINARY[int(rng.integers(0, len(ELEMENTWISE_BINARY)))]
            node = f.create(kind, pick(), pick())
        else:
            kind = ELEMENTWISE_UNARY[int(rng.integers(0, len(ELEMENTWISE_UNARY)))]
            node = f.create(kind, pick())
        values.append(node)
    sinks = [n for n in f.nodes if not f.users(n)]
    for k, n in enumerate(sinks):
        f.create_save(n, m.create_placeholder(f"out{k}", ty))
    return m, f


def random_bindings(f: Function, rng, low=-1.0, high=1.0):
    from graphlower.evaluator import required_placeholders
    return {name: rng.uniform(low, high, p.ty.dims).astype(np.float32)
            for name, p in required_placeholders(f).items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def settings_override(monkeypatch):
    """Set GRAPHLOWER_* variables for one test and rebuild the cached settings."""

    def apply(**values):
        for key, value in values.items():
            monkeypatch.setenv(f"GRAPHLOWER_{key.upper()}", str(value))
        get_settings.cache_clear()
        return get_settings()

    yield apply
    monkeypatch.undo()
    get_settings.cache_clear()
