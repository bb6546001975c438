import numpy as np
import pytest
from hypothesis import given, settings

from cftruth.model import (
    ARCHITECTURES,
    LayoutError,
    ModelParams,
    MVEConfig,
    RegressorConfig,
    TrainConfig,
    TrainingDivergedError,
    embed,
    epoch_learning_rate,
    forward,
    init_params,
    layout_size,
    load_params,
    loss_and_grad,
    mve_loss,
    predict_batch,
    save_params,
    train_mse,
    train_mve,
)
from cftruth.molgraph import parse_smiles
from cftruth.oracle import LabeledSample, crippen_logp, generate_dataset

from graphs import permuted

SMALL_GRAPHS = [parse_smiles(s) for s in ("CC(=O)O", "C1=CC=CC=C1N", "CC#N")]


def central_difference(f, theta, h=1e-5):
    grad = np.empty_like(theta)
    for k in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        grad[k] = (f(up) - f(down)) / (2 * h)
    return grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("loss", ["mse", "mve"])
def test_gradient_matches_finite_differences(arch, loss):
    config = RegressorConfig(arch, layers=2, hidden_dim=6, mve=loss == "mve")
    params = init_params(config, np.random.default_rng(0))
    y = [crippen_logp(g) for g in SMALL_GRAPHS]
    scale = None
    if loss == "mve":
        # the sigma^(2 beta) weight is a constant in the gradient; pin it for the FD side
        scale = predict_batch(params, SMALL_GRAPHS)[1] ** 0.5
    f = lambda t: loss_and_grad(t, SMALL_GRAPHS, y, loss, 0.5, config, scale)[0]
    _, grad = loss_and_grad(params, SMALL_GRAPHS, y, loss, 0.5, scale=scale)
    fd = central_difference(f, params.theta.copy())
    assert rel_err(grad, fd) < 1e-4


def test_stop_gradient_on_variance_weight():
    config = RegressorConfig("gin", layers=1, hidden_dim=4, mve=True)
    params = init_params(config, np.random.default_rng(1))
    y = [0.0, 1.0, 2.0]
    s2 = predict_batch(params, SMALL_GRAPHS)[1]
    _, g_free = loss_and_grad(params, SMALL_GRAPHS, y, "mve", 0.5)
    _, g_pinned = loss_and_grad(params, SMALL_GRAPHS, y, "mve", 0.5, scale=s2**0.5)
    np.testing.assert_allclose(g_free, g_pinned, rtol=1e-12, atol=1e-14)


def test_mve_loss_numpy_formula():
    y, mu, s2 = np.array([1.0, 2.0]), np.array([0.5, 2.5]), np.array([0.25, 1.0])
    expected = np.mean(0.5 * s2**0.5 * ((y - mu) ** 2 / s2 + np.log(s2)))
    assert mve_loss(y, mu, s2, 0.5) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_parameters_predict_zero(arch):
    config = RegressorConfig(arch)
    params = ModelParams(config, np.zeros(layout_size(config)))
    pred = forward(params, config, parse_smiles("CCO"))
    assert pred.y_hat == 0.0
    assert pred.sigma2 is None


@pytest.mark.parametrize("arch", ARCHITECTURES)
@settings(max_examples=15, deadline=None)
@given(pair=permuted(max_atoms=9))
def test_permutation_invariance(arch, pair):
    g, h = pair
    config = RegressorConfig(arch, layers=2, hidden_dim=8, mve=True)
    params = init_params(config, np.random.default_rng(2))
    a, b = forward(params, config, g), forward(params, config, h)
    assert a.y_hat == pytest.approx(b.y_hat, abs=1e-10)
    assert a.sigma2 == pytest.approx(b.sigma2, abs=1e-10)
    np.testing.assert_allclose(a.embedding, b.embedding, atol=1e-10)


def test_mve_variance_positive_and_embedding_size():
    config = RegressorConfig("gatv2lite", hidden_dim=16, mve=True)
    params = init_params(config, np.random.default_rng(3))
    pred = forward(params, config, parse_smiles("C"))
    assert pred.sigma2 > 0
    assert embed(params, config, parse_smiles("CO")).shape == (16,)


def test_batch_agrees_with_single():
    config = RegressorConfig("gcn", mve=True)
    params = init_params(config, np.random.default_rng(4))
    y, s2, emb = predict_batch(params, SMALL_GRAPHS)
    for k, g in enumerate(SMALL_GRAPHS):
        p = forward(params, config, g)
        assert y[k] == pytest.approx(p.y_hat, abs=1e-12)
        assert s2[k] == pytest.approx(p.sigma2, abs=1e-12)


def test_layout_errors():
    config = RegressorConfig("gin")
    with pytest.raises(LayoutError):
        ModelParams(config, np.zeros(layout_size(config) + 1))
    params = init_params(config, np.random.default_rng(0))
    with pytest.raises(LayoutError):
        forward(params, RegressorConfig("gcn"), parse_smiles("C"))


def test_config_validation():
    with pytest.raises(ValueError):
        RegressorConfig("transformer")
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, mve=MVEConfig(warmup_epochs=10))
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_cosine_schedule_endpoints():
    tc = TrainConfig(epochs=11, learning_rate=0.1, lr_schedule="cosine", final_lr_fraction=0.1)
    assert epoch_learning_rate(tc, 0) == pytest.approx(0.1)
    assert epoch_learning_rate(tc, 10) == pytest.approx(0.01)
    assert epoch_learning_rate(TrainConfig(learning_rate=0.1), 5) == 0.1


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(40, 6, np.random.default_rng(0))


def test_training_deterministic(tiny_data):
    rc = RegressorConfig("gin", layers=2, hidden_dim=8)
    tc = TrainConfig(epochs=3, batch_size=8)
    a = train_mse(tiny_data, rc, tc, np.random.default_rng(9))
    b = train_mse(tiny_data, rc, tc, np.random.default_rng(9))
    assert a == b


def test_memorizes_small_set():
    data = [LabeledSample(parse_smiles(s), crippen_logp(parse_smiles(s))) for s in ("C", "CO", "CCO", "CF", "C=O", "CN")]
    rc = RegressorConfig("gin", layers=2, hidden_dim=16)
    tc = TrainConfig(epochs=300, learning_rate=0.01, batch_size=6)
    params = train_mse(data, rc, tc, np.random.default_rng(0))
    y_hat = predict_batch(params, [s.graph for s in data])[0]
    assert np.max(np.abs(y_hat - [s.y for s in data])) < 0.05


def test_mve_training_runs(tiny_data):
    rc = RegressorConfig("gcn", layers=2, hidden_dim=8)
    tc = TrainConfig(epochs=6, batch_size=8, mve=MVEConfig(0.5, 3))
    params = train_mve(tiny_data, rc, tc, np.random.default_rng(0))
    assert params.config.mve
    s2 = predict_batch(params, [s.graph for s in tiny_data])[1]
    assert np.all(s2 > 0)


def test_divergence_is_reported(tiny_data):
    bad = tiny_data[:5] + [LabeledSample(tiny_data[5].graph, float("inf"))]
    rc = RegressorConfig("gin", layers=2, hidden_dim=8)
    with pytest.raises(TrainingDivergedError):
        train_mse(bad, rc, TrainConfig(epochs=2, batch_size=8), np.random.default_rng(0))


def test_epoch_callback_sees_every_epoch(tiny_data):
    seen = []
    rc = RegressorConfig("gin", layers=1, hidden_dim=4)
    final = train_mse(tiny_data, rc, TrainConfig(epochs=4, batch_size=16), np.random.default_rng(0),
                      on_epoch_end=lambda e, theta: seen.append((e, theta)))
    assert [e for e, _ in seen] == [0, 1, 2, 3]
    np.testing.assert_array_equal(seen[-1][1], final.theta)


def test_checkpoint_round_trip(tmp_path):
    config = RegressorConfig("gatv2lite", layers=2, hidden_dim=8, mve=True)
    params = init_params(config, np.random.default_rng(5))
    save_params(params, tmp_path / "m.npz")
    assert load_params(tmp_path / "m.npz") == params
