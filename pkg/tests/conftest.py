import numpy as np
import pytest

from hapkit import autodiff as ad
from hapkit.models import AttentionBlock, Dense, ModelSpec, ReLU, attention_classifier, build, mlp, tiny_convnet


def flat(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def fd_gradient(fn, params, batch, eps=1e-5):
    """Central-difference gradient, one coordinate at a time."""
    x = flat(params)
    shapes = [np.shape(p) for p in params]

    def unflat(v):
        out, k = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(v[k:k + n].reshape(s))
            k += n
        return out

    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (ad.forward(fn, unflat(x + e), batch)[0] - ad.forward(fn, unflat(x - e), batch)[0]) / (2 * eps)
    return g


def fd_hvp(fn, params, batch, v, eps=1e-4):
    plus = [p + eps * vi for p, vi in zip(params, v)]
    minus = [p - eps * vi for p, vi in zip(params, v)]
    gp = flat(ad.gradient(ad.forward(fn, plus, batch)[1]))
    gm = flat(ad.gradient(ad.forward(fn, minus, batch)[1]))
    return (gp - gm) / (2 * eps)


def random_small_model(seed):
    """One of a few tiny architectures with a random batch, chosen by seed."""
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        spec = mlp([3, 5, 4])
        X = rng.normal(size=(12, 3))
        c = 4
    elif kind == 1:
        spec = mlp([4, 6, 5, 2], loss="mse")
        X = rng.normal(size=(10, 4))
        model = build(spec, seed)
        return model, (X, rng.normal(size=(10, 2)))
    elif kind == 2:
        spec = tiny_convnet(3, channels=(2, 3), size=4)
        X = rng.normal(size=(6, 1, 4, 4))
        c = 3
    else:
        spec = ModelSpec((AttentionBlock(4, 2), ReLU(), Dense(12, 3)), "cross_entropy", (3, 4))
        X = rng.normal(size=(5, 3, 4))
        c = 3
    model = build(spec, seed)
    return model, (X, np.eye(c)[rng.integers(0, c, len(X))])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def convnet():
    return build(tiny_convnet(4, channels=(3, 4), size=4), seed=0)


@pytest.fixture
def attention_model():
    return build(attention_classifier(3, seq_len=3, d_model=8, n_heads=2, n_layers=2), seed=0)


ACCEPTANCE_LINES = []


def verdict(criterion, ok, detail):
    """Record and print one acceptance line, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
