import numpy as np
import pytest

from fedfair import backend, nn

from helpers import random_batch

needs_compiled = pytest.mark.skipif(
    "compiled" not in backend.available_backends(),
    reason="compiled extension not built",
)


@pytest.fixture
def both_backends():
    if "compiled" not in backend.available_backends():
        pytest.skip("compiled extension not built")
    prev = backend.active_backend()
    yield
    backend.use_backend(prev)


def test_python_backend_always_available():
    assert "python" in backend.available_backends()


def test_use_backend_rejects_unknown():
    from fedfair.errors import ConfigError

    with pytest.raises(ConfigError):
        backend.use_backend("fortran")


@needs_compiled
@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_backends_agree_on_forward_and_grad(both_backends, activation):
    rng = np.random.default_rng(42)
    model = nn.MLP.init([5, 9, 7, 3], activation, rng)
    batch = random_batch(rng, model, n=17)

    backend.use_backend("compiled")
    loss_c, grad_c = nn.loss_and_grad(model, batch)
    logits_c = nn.forward(model, batch)
    backend.use_backend("python")
    loss_p, grad_p = nn.loss_and_grad(model, batch)
    logits_p = nn.forward(model, batch)

    np.testing.assert_allclose(logits_c, logits_p, rtol=1e-12, atol=1e-13)
    assert loss_c == pytest.approx(loss_p, rel=1e-12)
    np.testing.assert_allclose(grad_c, grad_p, rtol=1e-10, atol=1e-13)


@needs_compiled
def test_backends_agree_on_input_gradients(both_backends):
    rng = np.random.default_rng(43)
    model = nn.MLP.init([4, 6, 2], "relu", rng)
    X = rng.normal(size=(8, 4))
    dout = rng.normal(size=(8, 2))
    results = {}
    for name in ("compiled", "python"):
        backend.use_backend(name)
        acts = backend.forward(model.flat, model.sizes, 0, X)
        results[name] = backend.backward(model.flat, model.sizes, 0, acts, dout,
                                         want_param_grad=False, want_input_grad=True)[1]
    np.testing.assert_allclose(results["compiled"], results["python"], rtol=1e-12, atol=1e-14)


@needs_compiled
def test_backward_skips_unwanted_outputs(both_backends):
    rng = np.random.default_rng(44)
    model = nn.MLP.init([3, 4, 2], "tanh", rng)
    X = rng.normal(size=(5, 3))
    dout = rng.normal(size=(5, 2))
    for name in ("compiled", "python"):
        backend.use_backend(name)
        acts = backend.forward(model.flat, model.sizes, 1, X)
        dflat, dX = backend.backward(model.flat, model.sizes, 1, acts, dout,
                                     want_param_grad=True, want_input_grad=False)
        assert dflat is not None and dX is None
