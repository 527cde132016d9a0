import numpy as np

from csn3d import gradcheck
from csn3d.zoo import KINDS


def test_rel_error():
    assert gradcheck.rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert gradcheck.rel_error([0.0], [0.0]) == 0.0
    assert np.isclose(gradcheck.rel_error([1.0, 2.0], [1.0, 2.2]), 0.2 / 2.2)


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = gradcheck.numeric_grad(lambda: float(np.sum(x**2)), x, [0, 1, 2])
    assert np.allclose(g, 2 * x) and np.array_equal(x, [1.0, -2.0, 3.0])


def test_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    r = gradcheck.check_function("bad", lambda: float(np.sum(x**3)), {"x": 2 * x}, {"x": x}, np.random.default_rng(0))
    assert not r.passed and r.line().startswith("FAIL")


def test_layers_pass():
    results = gradcheck.run("layers")
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_blocks_pass_all_kinds():
    results = gradcheck.run("blocks")
    assert len(results) == len(KINDS)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_tiny_model_passes():
    assert all(r.passed for r in gradcheck.run("tiny-model"))
