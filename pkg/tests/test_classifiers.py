import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfdiff import classifiers as cl
from cfdiff import world as wd
from cfdiff.errors import InvalidArgument
from cfdiff.world import MixtureComponent, make_world

from oracles import central_diff


def linear(W, b=None):
    W = np.asarray(W, dtype=float)
    return cl.LinearSoftmax(W, np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=float))


def random_mlp(rng, n=5, h=7, K=3):
    return cl.Mlp1(rng.standard_normal((h, n)), rng.standard_normal(h), rng.standard_normal((K, h)), rng.standard_normal(K))


def brute_ce(model, x, c):
    lg = cl.logits(model, x)
    return math.log(sum(math.exp(v) for v in lg)) - lg[c]


def test_zero_model_ties_to_first():
    m = linear(np.zeros((3, 2)))
    assert np.all(cl.logits(m, np.ones(2)) == 0) and cl.predict(m, np.ones(2)) == 0


def test_hand_logits():
    m = linear([[1, 0], [-1, 0]])
    assert cl.logits(m, np.array([2.0, 5.0])).tolist() == [2.0, -2.0]
    assert cl.predict(m, np.array([2.0, 5.0])) == 0


def test_dead_head(rng):
    m = random_mlp(rng)
    m.W2[:] = 0
    for _ in range(3):
        assert np.array_equal(cl.logits(m, rng.standard_normal(5)), m.b2)


def test_dimension_and_class_errors(rng):
    m = random_mlp(rng)
    with pytest.raises(InvalidArgument):
        cl.logits(m, np.zeros(4))
    with pytest.raises(InvalidArgument):
        cl.ce_loss(m, np.zeros(5), 3)


def test_zero_weights_loss_and_grad():
    m = linear(np.zeros((4, 3)))
    assert cl.ce_loss(m, np.ones(3), 2) == pytest.approx(math.log(4), abs=1e-15)
    assert np.all(cl.input_grad(m, np.ones(3), 2) == 0)


def test_binary_hand_gradient():
    m = linear([[1, 0], [-1, 0]])
    assert cl.ce_loss(m, np.zeros(2), 0) == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(cl.input_grad(m, np.zeros(2), 0), [-1.0, 0.0], atol=1e-15)


def test_loss_matches_brute_force(rng):
    m = random_mlp(rng)
    for _ in range(5):
        x = rng.standard_normal(5)
        assert cl.ce_loss(m, x, 1) == pytest.approx(brute_ce(m, x, 1), abs=1e-12)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_input_grad_finite_difference(kind, rng):
    for _ in range(50):
        m = random_mlp(rng) if kind == "mlp" else linear(rng.standard_normal((3, 5)), rng.standard_normal(3))
        x, c = rng.standard_normal(5), int(rng.integers(3))
        fd = central_diff(lambda q: brute_ce(m, q, c), x)
        g = cl.input_grad(m, x, c)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8) + 1e-9


def test_batched_grad_matches_single(rng):
    m = random_mlp(rng)
    X = rng.standard_normal((4, 5))
    c = np.array([0, 1, 2, 1])
    G = cl.input_grad(m, X, c)
    for i in range(4):
        assert np.allclose(G[i], cl.input_grad(m, X[i], int(c[i])), atol=1e-14)


def test_bias_shift_invariance(rng):
    W, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    x = rng.standard_normal(4)
    a, s = linear(W, b), linear(W, b + 7.5)
    assert abs(cl.ce_loss(a, x, 1) - cl.ce_loss(s, x, 1)) <= 1e-10
    assert np.allclose(cl.input_grad(a, x, 1), cl.input_grad(s, x, 1), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_argmax_invariant_under_rescaling(x, scale):
    W = np.array([[1.0, 2, 0, -1], [0, -1, 3, 1], [2, 0, 1, 0]])
    top = np.sort(W @ x)
    assume(top[-1] - top[-2] > 1e-9 * (1 + abs(top[-1])))  # exact ties may round either way
    assert cl.predict(linear(W), x) == cl.predict(linear(W * scale), x)


# -- training ----------------------------------------------------------------------

def separable():
    return make_world([
        MixtureComponent((3.0, 0.0), 0.25, 0.5, 0),
        MixtureComponent((-3.0, 0.0), 0.25, 0.5, 1),
    ])


def test_epochs_zero_is_initialization():
    X, y = np.ones((4, 2)), np.array([0, 1, 0, 1])
    spec = cl.ModelSpec("mlp", 2, 2, 8)
    m = cl.train(spec, X, y, 0, 0.1, 2, 3)
    ref = cl.init_model(spec, np.random.default_rng(3))
    for k, v in m.params().items():
        assert np.array_equal(v, ref.params()[k])


def test_training_reaches_bayes_level():
    w = separable()
    X, y = wd.sample(w, 2000, 0)
    # the Bayes classifier is essentially error-free on this world
    bayes = np.argmax(wd.bayes_posteriors(w, X), axis=1)
    assert np.mean(bayes == y) >= 0.9999
    m = cl.train(cl.ModelSpec("linear", 2, 2), X, y, 50, 0.1, 32, 0)
    assert cl.accuracy(m, X, y) >= 0.99


def test_training_deterministic():
    X, y = wd.sample(separable(), 300, 1)
    a = cl.train(cl.ModelSpec("mlp", 2, 2, 16), X, y, 3, 0.1, 32, 9)
    b = cl.train(cl.ModelSpec("mlp", 2, 2, 16), X, y, 3, 0.1, 32, 9)
    assert all(a.params()[k].tobytes() == b.params()[k].tobytes() for k in a.params())


def test_empty_dataset():
    with pytest.raises(InvalidArgument):
        cl.train(cl.ModelSpec("linear", 2, 2), np.zeros((0, 2)), np.zeros(0, dtype=int), 1, 0.1, 4, 0)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = random_mlp(rng)
    cl.save_model(m, tmp_path / "m.json")
    back = cl.load_model(tmp_path / "m.json")
    x = rng.standard_normal(5)
    assert np.array_equal(cl.logits(back, x), cl.logits(m, x))


def test_init_range():
    m = cl.init_model(cl.ModelSpec("mlp", 16, 3, 64), np.random.default_rng(0))
    assert np.all(np.abs(m.W1) <= 0.5 / 4) and np.all(np.abs(m.W2) <= 0.5 / 8)
