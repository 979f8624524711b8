import numpy as np
import pytest
from scipy import integrate

from labelflows import flows
from labelflows.flows import MlpSpec


def zeroed(model):
    model.params.flat = np.zeros(model.params.total_dim)
    return model


def constant_affine(s: float, b: float, x_dim: int = 3):
    """One scalar layer with s(x) = s, b(x) = b for every x."""
    model = zeroed(flows.affine_flow(x_dim, n_layers=1, hidden=4, seed=None))
    last = model.params["x_bank.2.b"]
    last[0] = np.log(s)
    last[1] = b
    return model


def random_model(rng, label_dim, x_dim=3, scale=0.4):
    if label_dim == 2:
        model = flows.coupling_flow(x_dim, n_steps=2, hidden=6, seed=None)
    else:
        model = flows.affine_flow(x_dim, n_layers=3, hidden=6, seed=None)
    model.params.flat = rng.normal(0.0, scale, model.params.total_dim)
    return model


def test_mlp_spec_requires_layers():
    with pytest.raises(ValueError):
        MlpSpec((4,))
    with pytest.raises(ValueError):
        MlpSpec((4, 0, 1))
    assert MlpSpec((3, 64, 64, 1)).n_linear == 3


def test_architecture_shapes():
    model = flows.coupling_flow(30)
    assert len(model.layers) == 16
    assert [layer.active for layer in model.layers[:4]] == [0, 1, 0, 1]
    assert model.label_dim == 2
    reg = flows.affine_flow(8)
    assert len(reg.layers) == 8 and reg.label_dim == 1


def test_bank_slot_equals_standalone_mlp():
    rng = np.random.default_rng(0)
    model = random_model(rng, 2)
    P = dict(model.params.items())
    x = rng.normal(size=(5, 3))
    stacked = model.x_bank.apply(P, "x_bank", x)
    k = 3
    h = x
    for layer in range(2):
        h = h @ P[f"x_bank.{layer}.W"][k] + P[f"x_bank.{layer}.b"][k]
        if layer == 0:
            h = np.tanh(h)
    np.testing.assert_allclose(stacked[k], h, atol=1e-14)


@pytest.mark.parametrize("label_dim", [1, 2])
def test_zero_params_give_identity(label_dim):
    model = zeroed(random_model(np.random.default_rng(0), label_dim))
    z = np.random.default_rng(1).normal(size=(7, label_dim))
    y, logdet = flows.generate(model, np.ones((7, 3)), z)
    np.testing.assert_array_equal(y, z)
    np.testing.assert_array_equal(logdet, np.zeros(7))
    np.testing.assert_array_equal(flows.invert(model, np.ones((7, 3)), y), y)


def test_scalar_affine_closed_form():
    model = constant_affine(2.0, 3.0)
    x = np.zeros((1, 3))
    y, logdet = flows.generate(model, x, np.array([[0.5]]))
    np.testing.assert_allclose(y, [[4.0]], rtol=1e-15)
    np.testing.assert_allclose(logdet, [np.log(2.0)], rtol=1e-15)
    np.testing.assert_allclose(flows.invert(model, x, np.array([[4.0]])), [[0.5]], rtol=1e-15)


def test_scalar_affine_log_prob():
    model = constant_affine(2.0, 3.0)
    expected = -0.5 * np.log(2 * np.pi) - np.log(2.0)
    np.testing.assert_allclose(flows.log_prob(model, np.zeros((1, 3)), np.array([[3.0]])), [expected], rtol=1e-14)


def test_identity_log_prob_at_origin():
    model = zeroed(flows.coupling_flow(3, n_steps=1, hidden=4))
    np.testing.assert_allclose(flows.log_prob(model, np.zeros((1, 3)), np.zeros((1, 2))), [-np.log(2 * np.pi)])


@pytest.mark.parametrize("label_dim", [1, 2])
def test_round_trip_invertibility(label_dim):
    rng = np.random.default_rng(label_dim)
    worst = 0.0
    for _ in range(10):
        model = random_model(rng, label_dim)
        x = rng.normal(size=(100, 3))
        z = rng.normal(size=(100, label_dim))
        y, _ = flows.generate(model, x, z)
        worst = max(worst, np.max(np.abs(flows.invert(model, x, y) - z)))
    assert worst < 1e-8


def numerical_jacobian(model, x_row, z_row, h=1e-6):
    d = z_row.size
    J = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        hi, _ = flows.generate(model, x_row[None], (z_row + e)[None])
        lo, _ = flows.generate(model, x_row[None], (z_row - e)[None])
        J[:, k] = (hi[0] - lo[0]) / (2 * h)
    return J


@pytest.mark.parametrize("label_dim", [1, 2])
def test_logdet_matches_numerical_jacobian(label_dim):
    rng = np.random.default_rng(10 + label_dim)
    for _ in range(10):
        model = random_model(rng, label_dim, scale=0.3)
        x, z = rng.normal(size=3), rng.normal(size=label_dim)
        _, logdet = flows.generate(model, x[None], z[None])
        _, numeric = np.linalg.slogdet(numerical_jacobian(model, x, z))
        assert abs(logdet[0] - numeric) < 1e-5


def test_change_of_variables_agreement():
    rng = np.random.default_rng(5)
    model = random_model(rng, 2)
    x, z = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    y, logdet = flows.generate(model, x, z)
    np.testing.assert_allclose(flows.log_prob(model, x, y), flows.log_normal(z) - logdet, atol=1e-10)


def test_one_dim_density_normalizes():
    rng = np.random.default_rng(7)
    for _ in range(20):
        model = random_model(rng, 1, scale=0.3)
        x = rng.normal(size=(1, 3))
        dens = lambda t: float(np.exp(flows.log_prob(model, x, np.array([[t]])))[0])  # noqa: E731
        # generous subdivision: the density can be narrow relative to [-50, 50]
        centre = float(flows.generate(model, x, np.zeros((1, 1)))[0][0, 0])
        total, _ = integrate.quad(dens, -50, 50, points=[centre], limit=400)
        assert abs(total - 1.0) < 1e-3


def test_coupling_triangularity():
    rng = np.random.default_rng(9)
    model = random_model(rng, 2)
    layer = model.layers[0]
    P = dict(model.params.items())
    x = rng.normal(size=(4, 3))
    cols = [rng.normal(size=(4, 1)), rng.normal(size=(4, 1))]
    xfeat = model.x_features(P, x)[0]
    log_s, shift = layer.scale_shift(P, "layer0", xfeat, cols)
    # perturbing the transformed coordinate leaves the conditioner outputs alone
    moved = [cols[0] + 5.0, cols[1]]
    log_s2, shift2 = layer.scale_shift(P, "layer0", xfeat, moved)
    np.testing.assert_array_equal(log_s, log_s2)
    np.testing.assert_array_equal(shift, shift2)
    # the untransformed coordinate passes through the layer unchanged
    out, _ = flows.generate_columns(flows.FlowModel([layer], 2, 3, params=model.params), P, x, cols)
    np.testing.assert_array_equal(out[1], cols[1])


def test_scale_is_clamped():
    model = constant_affine(1.0, 0.0)
    model.params["x_bank.2.b"][0] = 40.0
    _, logdet = flows.generate(model, np.zeros((1, 3)), np.zeros((1, 1)))
    assert logdet[0] == flows.LOG_SCALE_BOUND


def test_dimension_errors():
    model = flows.coupling_flow(3, n_steps=1, hidden=4)
    with pytest.raises(ValueError):
        flows.generate(model, np.zeros((2, 3)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        flows.generate(model, np.zeros((2, 4)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        flows.invert(model, np.zeros((1, 3)), np.array([[np.inf, 0.0]]))


def test_sample_mean_of_shift_only_flow():
    model = constant_affine(1.0, 0.25)
    mean = flows.sample_labels(model, np.zeros((3, 3)), n_samples=10_000, rng=0)
    np.testing.assert_allclose(mean, 0.25, atol=0.05)


def test_identity_sample_mean_near_prior_mean():
    model = zeroed(flows.coupling_flow(3, n_steps=1, hidden=4))
    mean = flows.sample_labels(model, np.zeros((2, 3)), n_samples=10_000, rng=1)
    np.testing.assert_allclose(mean, 0.0, atol=0.05)


def test_sampling_is_reproducible():
    model = random_model(np.random.default_rng(2), 2)
    x = np.random.default_rng(3).normal(size=(4, 3))
    a = flows.sample_labels(model, x, 10, rng=np.random.default_rng(11))
    b = flows.sample_labels(model, x, 10, rng=np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        flows.sample_labels(model, x, 0)


def test_single_sample_equals_one_generate_draw():
    model = random_model(np.random.default_rng(4), 2)
    x = np.random.default_rng(5).normal(size=(3, 3))
    mean = flows.sample_labels(model, x, 1, rng=np.random.default_rng(6))
    z = np.random.default_rng(6).standard_normal((1, 3, 2))[0]
    np.testing.assert_array_equal(mean, flows.generate(model, x, z)[0])


@pytest.mark.parametrize("label_dim", [1, 2])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, label_dim):
    model = random_model(np.random.default_rng(8), label_dim)
    model.meta["x_mean"] = [0.5, 1.0, -2.0]
    path = tmp_path / "m.npz"
    flows.save_checkpoint(model, path)
    loaded = flows.load_checkpoint(path)
    np.testing.assert_array_equal(loaded.params.flat, model.params.flat)
    assert loaded.meta == model.meta
    x, z = np.ones((5, 3)), np.full((5, label_dim), 0.3)
    np.testing.assert_array_equal(flows.generate(loaded, x, z)[0], flows.generate(model, x, z)[0])
