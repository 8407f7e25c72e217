import numpy as np
import pytest

from prefrl.approximator import (
    Adam, DimensionError, LayerSpec, NonFiniteGradientError, SGD, StaleTraceError,
    backward, fd_check, fd_gradient_error, forward, init_params, load_params, mlp_spec,
    param_count, params_from_bytes, params_to_bytes, save_params, sgd_step, unpack,
)


def naive_forward(params, spec, x):
    """Loop-based evaluation that shares nothing with the library path."""
    pos = 0
    a = list(map(float, x))
    for layer in spec:
        n_in, n_out = layer.input_width, layer.output_width
        W = [[params[pos + i * n_out + j] for j in range(n_out)] for i in range(n_in)]
        pos += n_in * n_out
        b = [params[pos + j] for j in range(n_out)]
        pos += n_out
        z = []
        for j in range(n_out):
            acc = b[j]
            for i in range(n_in):
                acc += a[i] * W[i][j]
            z.append(acc)
        if layer.nonlinearity == "tanh":
            a = [np.tanh(v) for v in z]
        elif layer.nonlinearity == "relu":
            a = [max(v, 0.0) for v in z]
        else:
            a = z
    return np.array(a)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(0, 3)
    with pytest.raises(ValueError):
        LayerSpec(2, 3, "sigmoid")
    with pytest.raises(DimensionError):
        forward(np.zeros(100), [LayerSpec(2, 3), LayerSpec(4, 1)], np.zeros(2))


def test_identity_layer_passes_input_through():
    spec = [LayerSpec(2, 2, "identity")]
    params = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    out, _ = forward(params, spec, np.array([0.3, -0.2]))
    np.testing.assert_array_equal(out, [0.3, -0.2])


def test_zero_params_tanh_output_is_zero():
    spec = mlp_spec(5, [7], 3, "tanh", "tanh")
    out, _ = forward(np.zeros(param_count(spec)), spec, np.random.default_rng(0).normal(size=5))
    np.testing.assert_array_equal(out, np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    spec = mlp_spec(4, [6], 3, "tanh", "identity")
    params = init_params(spec, rng)
    x = rng.normal(size=4)
    out, trace = forward(params, spec, x)
    np.testing.assert_allclose(out, naive_forward(params, spec, x), atol=1e-12, rtol=0)
    assert trace.activation(-1).shape == (1, 3)
    assert trace.activation(-2).shape == (1, 6)


def test_forward_rejects_wrong_width():
    spec = mlp_spec(3, [4], 1)
    with pytest.raises(DimensionError):
        forward(np.zeros(param_count(spec)), spec, np.zeros(5))


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    spec = mlp_spec(3, [8, 8], 2, "relu")
    params = init_params(spec, rng)
    x = rng.normal(size=(10, 3))
    a, _ = forward(params, spec, x)
    b, _ = forward(params, spec, x)
    assert a.tobytes() == b.tobytes()


def test_init_is_bounded_by_fan_in():
    spec = mlp_spec(16, [4], 1)
    params = init_params(spec, np.random.default_rng(0))
    (W0, b0), (W1, b1) = unpack(params, spec)
    assert np.abs(W0).max() <= 0.25 and np.abs(b0).max() <= 0.25
    assert np.abs(W1).max() <= 0.5 and np.abs(b1).max() <= 0.5


def test_backward_zero_output_gradient_gives_zero():
    rng = np.random.default_rng(2)
    spec = mlp_spec(3, [5], 2)
    params = init_params(spec, rng)
    _, trace = forward(params, spec, rng.normal(size=3))
    grad, gin = backward(params, spec, trace, np.zeros(2))
    assert not grad.any() and not gin.any()


def test_backward_linear_case():
    spec = [LayerSpec(3, 1, "identity")]
    params = np.array([0.5, -1.0, 2.0, 0.1])
    x = np.array([0.2, 0.7, -0.4])
    _, trace = forward(params, spec, x)
    grad, gin = backward(params, spec, trace, np.array([1.0]))
    np.testing.assert_array_equal(grad[:3], x)
    assert grad[3] == 1.0
    np.testing.assert_array_equal(gin, params[:3])


def test_backward_rejects_stale_trace():
    rng = np.random.default_rng(3)
    spec = mlp_spec(2, [3], 1)
    params = init_params(spec, rng)
    _, trace = forward(params, spec, np.ones(2))
    with pytest.raises(StaleTraceError):
        backward(params + 1.0, spec, trace, np.ones(1))
    with pytest.raises(DimensionError):
        backward(params, spec, trace, np.ones(2))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("nonlin", ["tanh", "relu", "identity"])
def test_backward_matches_finite_differences(seed, nonlin):
    rng = np.random.default_rng(seed)
    spec = mlp_spec(3, [5, 4], 2, nonlin, "identity")
    params = init_params(spec, rng)
    x = rng.normal(size=(6, 3))
    target = rng.normal(size=(6, 2))

    def loss_fn(out):
        diff = out - target
        return 0.5 * float((diff ** 2).sum()), diff

    assert fd_check(params, spec, loss_fn, x) < 1e-4


def test_backward_with_injected_embedding_gradient():
    rng = np.random.default_rng(4)
    spec = mlp_spec(3, [4, 5], 1, "tanh", "tanh")
    params = init_params(spec, rng)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 5))

    def objective(p):
        out, trace = forward(p, spec, x)
        emb = trace.activation(-2)
        loss = float(out.sum() + (w * emb).sum())
        grad, _ = backward(p, spec, trace, np.ones_like(out), {-2: w})
        return loss, grad

    assert fd_gradient_error(objective, params) < 1e-4


def test_fd_check_quadratic_linear_net():
    rng = np.random.default_rng(5)
    spec = [LayerSpec(4, 2, "identity")]
    params = rng.normal(size=param_count(spec))
    x = rng.normal(size=(3, 4))
    assert fd_check(params, spec, lambda o: (float((o ** 2).sum()), 2 * o), x) < 1e-7


def test_fd_check_zero_loss_is_exact():
    spec = mlp_spec(2, [3], 1)
    params = init_params(spec, np.random.default_rng(6))
    assert fd_check(params, spec, lambda o: (0.0, np.zeros_like(o)), np.ones(2)) == 0.0


def test_sgd_lr_zero_and_zero_gradient_leave_params():
    p = np.array([1.0, -2.0])
    out, _ = sgd_step(p, np.array([3.0, 4.0]), 0.0)
    np.testing.assert_array_equal(out, p)
    out, _ = sgd_step(p, np.zeros(2), 0.1)
    np.testing.assert_array_equal(out, p)


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradientError):
        sgd_step(np.zeros(2), np.array([np.nan, 0.0]), 0.1)
    with pytest.raises(NonFiniteGradientError):
        Adam().step(np.zeros(2), np.array([np.inf, 0.0]))


@pytest.mark.parametrize("opt", [SGD(learning_rate=0.01, momentum=0.5), SGD(0.05, 0.0),
                                 Adam(learning_rate=0.01)])
def test_optimizers_decrease_convex_quadratic_monotonically(opt):
    # f(x) = 3 (x - 2)^2
    x = np.array([-1.0])
    losses = []
    for _ in range(100):
        losses.append(float(3 * (x[0] - 2) ** 2))
        x = opt.step(x, 6 * (x - 2))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_params_bytes_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(7)
    spec = mlp_spec(6, [64, 64], 1, "tanh", "tanh")
    params = init_params(spec, rng)
    assert params_from_bytes(params_to_bytes(params)).tobytes() == params.tobytes()
    save_params(tmp_path / "ckpt", params, spec, output_bound=1.0)
    loaded, spec2, meta = load_params(tmp_path / "ckpt")
    assert loaded.tobytes() == params.tobytes()
    assert spec2 == spec
    assert meta["output_bound"] == 1.0
