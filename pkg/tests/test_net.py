import numpy as np
import pytest

from metantk.net import (
    NetworkSpec,
    finite_diff_jacobian,
    forward,
    init_params,
    per_sample_jacobian,
)

LINEAR = NetworkSpec(input_dim=1, hidden_widths=(), output_dim=1, activation="identity", use_bias=False)


def test_layout_size_formula():
    spec = NetworkSpec(3, (5, 4), 2)
    dims = [3, 5, 4, 2]
    assert spec.n_params == sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    assert spec.readout_slice == slice(spec.layout["W3"].start, spec.n_params)
    assert NetworkSpec(3, (5,), 2, use_bias=False).n_params == 3 * 5 + 5 * 2


def test_invalid_specs():
    with pytest.raises(ValueError):
        NetworkSpec(0, (3,), 1)
    with pytest.raises(ValueError):
        NetworkSpec(2, (0,), 1)
    with pytest.raises(ValueError):
        NetworkSpec(2, (3,), 1, activation="tanh")


def test_zero_variance_init_is_zero():
    spec = NetworkSpec(3, (4, 4), 2, sigma_w=0.0, sigma_b=0.0)
    np.testing.assert_array_equal(init_params(spec, 7), np.zeros(spec.n_params))


def test_init_is_deterministic():
    spec = NetworkSpec(3, (8,), 1, sigma_b=0.5)
    assert init_params(spec, 11).tobytes() == init_params(spec, 11).tobytes()
    assert init_params(spec, 11).tobytes() != init_params(spec, 12).tobytes()


def test_first_layer_weight_variance():
    spec = NetworkSpec(2, (1000,), 1, sigma_w=1.0)
    W1 = init_params(spec, 0)[spec.layout["W1"].slice]
    assert W1.size == 2000
    # target sigma_w^2 / fan_in = 0.5; 2000 draws give a standard error of ~0.016
    assert 0.45 <= W1.var() <= 0.55


def test_zero_params_give_zero_outputs():
    for act in ("relu", "identity"):
        spec = NetworkSpec(3, (6, 6), 2, activation=act)
        X = np.random.default_rng(0).standard_normal((4, 3))
        out, _ = forward(spec, np.zeros(spec.n_params), X)
        np.testing.assert_array_equal(out, np.zeros((4, 2)))


def test_identity_network_is_affine():
    spec = NetworkSpec(3, (5, 5), 2, activation="identity", sigma_b=0.3)
    p = init_params(spec, 1)
    rng = np.random.default_rng(1)
    x1, x2 = rng.standard_normal((2, 3))
    a = 0.3
    lhs, _ = forward(spec, p, a * x1 + (1 - a) * x2)
    r1, _ = forward(spec, p, x1)
    r2, _ = forward(spec, p, x2)
    np.testing.assert_allclose(lhs, a * r1 + (1 - a) * r2, atol=1e-10)


def test_hand_built_relu_unit():
    spec = NetworkSpec(1, (1,), 1, activation="relu")
    p = np.zeros(spec.n_params)
    p[spec.layout["W1"].slice] = 1.0
    p[spec.layout["b1"].slice] = -1.0
    p[spec.layout["W2"].slice] = 2.0
    out, patterns = forward(spec, p, np.array([[3.0], [0.0]]), capture_patterns=True)
    np.testing.assert_array_equal(out.ravel(), [4.0, 0.0])
    np.testing.assert_array_equal(patterns, [[True], [False]])


def test_dimension_mismatch():
    spec = NetworkSpec(3, (4,), 1)
    with pytest.raises(ValueError, match="input dimension mismatch"):
        forward(spec, init_params(spec, 0), np.ones((2, 2)))


def test_linear_model_jacobian_is_input():
    X = np.array([[0.5], [-2.0], [3.0]])
    J = per_sample_jacobian(LINEAR, np.array([1.7]), X)
    np.testing.assert_array_equal(J, X)
    np.testing.assert_allclose(finite_diff_jacobian(LINEAR, np.array([1.7]), X, step=0.37), X, atol=1e-13)


def test_jacobian_row_ordering_multi_output():
    spec = NetworkSpec(2, (), 3, activation="identity")
    p = init_params(spec, 0)
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    J = per_sample_jacobian(spec, p, X)
    assert J.shape == (6, spec.n_params)
    # row s*k + o: derivative of output o at sample s w.r.t. W[:, o] is x_s
    W = spec.layout["W1"]
    for s in range(2):
        for o in range(3):
            grads = J[s * 3 + o, W.slice].reshape(W.shape)
            np.testing.assert_array_equal(grads[:, o], X[s])


def test_relu_kink_uses_zero_subgradient():
    spec = NetworkSpec(1, (1,), 1, activation="relu")
    p = np.zeros(spec.n_params)
    p[spec.layout["W1"].slice] = 1.0
    p[spec.layout["W2"].slice] = 1.0
    J = per_sample_jacobian(spec, p, np.array([[0.0]]))
    assert np.all(np.isfinite(J))
    assert J[0, spec.layout["W1"].start] == 0.0
    assert J[0, spec.layout["b1"].start] == 0.0


def test_relu_jacobian_matches_finite_differences():
    spec = NetworkSpec(3, (8, 8), 2, activation="relu", sigma_w=np.sqrt(2), sigma_b=0.1)
    p = init_params(spec, 3)
    X = np.random.default_rng(3).uniform(-1, 1, (4, 3))
    J = per_sample_jacobian(spec, p, X)
    assert np.max(np.abs(J - finite_diff_jacobian(spec, p, X, step=1e-6))) < 1e-5


@pytest.mark.parametrize("parameterization", ["standard", "ntk"])
def test_erf_finite_difference_agreement_and_order(parameterization):
    spec = NetworkSpec(2, (16, 16), 2, activation="erf", sigma_w=1.5, sigma_b=0.2, parameterization=parameterization)
    p = init_params(spec, 4)
    X = np.random.default_rng(4).uniform(-1, 1, (3, 2))
    J = per_sample_jacobian(spec, p, X)
    e1 = np.max(np.abs(finite_diff_jacobian(spec, p, X, step=1e-4) - J))
    assert e1 < 1e-6
    e_big = np.max(np.abs(finite_diff_jacobian(spec, p, X, step=4e-2) - J))
    e_half = np.max(np.abs(finite_diff_jacobian(spec, p, X, step=2e-2) - J))
    assert 3.0 < e_big / e_half < 5.0


def test_jacobian_linearization_is_second_order():
    spec = NetworkSpec(2, (12, 12), 1, activation="erf", sigma_w=1.3, sigma_b=0.1)
    p = init_params(spec, 5)
    X = np.random.default_rng(5).uniform(-1, 1, (4, 2))
    J = per_sample_jacobian(spec, p, X)
    f0, _ = forward(spec, p, X)
    direction = np.random.default_rng(6).standard_normal(spec.n_params)
    direction /= np.linalg.norm(direction)
    residuals = []
    for eps in (0.2, 0.1, 0.05):
        f1, _ = forward(spec, p + eps * direction, X)
        residuals.append(np.linalg.norm(f1.ravel() - f0.ravel() - eps * J @ direction))
    for r_big, r_small in zip(residuals, residuals[1:]):
        assert 3.0 < r_big / r_small < 5.0


def test_patterns_are_deterministic_and_sized():
    spec = NetworkSpec(3, (7, 5), 1)
    p = init_params(spec, 8)
    X = np.random.default_rng(8).standard_normal((10, 3))
    _, a = forward(spec, p, X, capture_patterns=True)
    _, b = forward(spec, p, X, capture_patterns=True)
    assert a.shape == (10, 12)
    np.testing.assert_array_equal(a, b)


def test_positive_homogeneity_of_first_layer():
    spec = NetworkSpec(3, (9, 9), 1, activation="relu", sigma_w=np.sqrt(2), sigma_b=0.0)
    p = init_params(spec, 9)
    X = np.random.default_rng(9).standard_normal((6, 3))
    scaled = p.copy()
    scaled[spec.layout["W1"].slice] *= 2.5
    _, base = forward(spec, p, X, capture_patterns=True)
    _, after = forward(spec, scaled, X, capture_patterns=True)
    np.testing.assert_array_equal(base, after)
    H0, _ = spec.hidden_preactivations(p, X)
    H1, _ = spec.hidden_preactivations(scaled, X)
    np.testing.assert_allclose(np.asarray(H1)[:, :9], 2.5 * np.asarray(H0)[:, :9], rtol=1e-13)


def test_ntk_parameterization_matches_standard_function_space():
    std = NetworkSpec(2, (6,), 1, activation="erf", sigma_w=1.2, sigma_b=0.3)
    ntk = NetworkSpec(2, (6,), 1, activation="erf", sigma_w=1.2, sigma_b=0.3, parameterization="ntk")
    raw = init_params(ntk, 0)
    converted = raw.copy()
    for block in ntk.layout.blocks:
        factor = 1.2 / np.sqrt(block.shape[0]) if block.name.startswith("W") else 0.3
        converted[block.slice] *= factor
    X = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    np.testing.assert_allclose(forward(ntk, raw, X)[0], forward(std, converted, X)[0], rtol=1e-13)
