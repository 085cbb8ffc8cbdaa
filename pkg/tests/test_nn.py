import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flt import nn
from flt.data import ClientDataset, Dataset, gen_gaussian_mixture

import gradcheck


# -- forward -----------------------------------------------------------------

def test_zero_params_give_uniform_probabilities():
    model = nn.Model([nn.Dense(6, 4)], (6,))
    x = np.random.default_rng(0).standard_normal((5, 6))
    np.testing.assert_allclose(nn.predict_proba(model, x), 0.25)


def test_identity_dense_is_identity():
    d = nn.Dense(3, 3)
    d.params["W"] = np.eye(3)
    model = nn.Model([d], (3,))
    v = np.array([[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(nn.forward(model, v), v)


def test_hand_set_mlp_logits():
    l1, l2 = nn.Dense(4, 3), nn.Dense(3, 2)
    l1.params["W"] = np.array([[1, 0, -1], [0, 1, 1], [2, -1, 0], [0, 0, 4]], dtype=float)
    l1.params["b"] = np.array([0.0, -1.0, 0.5])
    l2.params["W"] = np.array([[1, 2], [-1, 0], [0.5, 1]], dtype=float)
    l2.params["b"] = np.array([0.25, -0.5])
    model = nn.Model([l1, nn.Activation("relu"), l2], (4,))
    out = nn.forward(model, np.array([[1.0, 2.0, -1.0, 0.5]]))
    # hidden pre-activations (-1, 2, 3.5) -> relu (0, 2, 3.5)
    np.testing.assert_allclose(out, [[0.0, 3.0]], atol=1e-15)


def test_shape_mismatch_names_layer():
    with pytest.raises(nn.ShapeError, match="layer 1"):
        nn.Model([nn.Flatten(), nn.Dense(5, 2)], (2, 3))
    model = nn.mlp((4,), num_classes=2, hidden=3, dropout=0)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(model, np.zeros((2, 5)))


def test_eval_forward_deterministic():
    model = nn.mlp((8,), num_classes=3, hidden=5, seed=1)
    x = np.random.default_rng(0).standard_normal((4, 8))
    np.testing.assert_array_equal(nn.forward(model, x), nn.forward(model, x))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(row):
    p = nn.softmax(np.array([row, row[::-1]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# -- gradients -------------------------------------------------------------------

@pytest.mark.parametrize("kind", gradcheck.LAYER_KINDS)
def test_layer_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(10):
        layer, x, kw = gradcheck.random_instance(kind, rng)
        assert gradcheck.check_layer(layer, x, **kw) <= gradcheck.TOL


@pytest.mark.parametrize("loss", ["cross_entropy", "mse"])
def test_loss_gradient_matches_finite_differences(loss):
    rng = np.random.default_rng(7)
    for _ in range(10):
        assert gradcheck.check_loss(loss, rng) <= gradcheck.TOL


def test_whole_convae_gradient():
    # composite check; a smaller step keeps perturbations from crossing pooling/relu kinks
    h = 1e-6
    rng = np.random.default_rng(0)
    ae = nn.conv_autoencoder(input_hw=8, latent_dim=5, seed=3)
    x = rng.uniform(size=(2, 8, 8))
    _, g = nn.loss_and_gradient(ae, x, x, loss="mse")
    w = nn.flatten_params(ae)
    idx = rng.choice(w.size, 40, replace=False)
    num = []
    for i in idx:
        up, down = w.copy(), w.copy()
        up[i] += h
        down[i] -= h
        lu = nn.loss_and_gradient(nn.unflatten_params(ae, up), x, x, "mse")[0]
        ld = nn.loss_and_gradient(nn.unflatten_params(ae, down), x, x, "mse")[0]
        num.append((lu - ld) / (2 * h))
    assert gradcheck.rel_err(g[idx], num) <= 1e-4


# -- sgd_step ----------------------------------------------------------------------

def test_zero_lr_leaves_params():
    model = nn.mlp((3,), num_classes=2, hidden=4, dropout=0, seed=0)
    new, loss = nn.sgd_step(model, np.ones((2, 3)), np.array([0, 1]), lr=0.0)
    np.testing.assert_array_equal(nn.flatten_params(new), nn.flatten_params(model))
    assert loss > 0


def test_scalar_quadratic_step():
    d = nn.Dense(1, 1, bias=False)
    d.params["W"] = np.array([[2.0]])
    model = nn.Model([d], (1,))
    new, loss = nn.sgd_step(model, np.array([[1.0]]), np.array([[0.0]]), lr=0.1, loss="mse")
    assert loss == 4.0
    assert new.layers[0].params["W"][0, 0] == pytest.approx(1.6, abs=1e-15)
    assert model.layers[0].params["W"][0, 0] == 2.0  # original untouched


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_reports_layer():
    d = nn.Dense(2, 2)
    d.params["W"] = np.array([[np.inf, 0.0], [0.0, 1.0]])
    model = nn.Model([nn.Activation("identity"), d], (2,))
    with pytest.raises(nn.NonFiniteError):
        nn.sgd_step(model, np.ones((1, 2)), np.array([0]), lr=0.1)
    d.params["W"] = np.ones((2, 2))
    d.params["b"] = np.zeros(2)
    with pytest.raises(nn.NonFiniteError) as exc:
        nn.sgd_step(model, np.array([[1e308, 1e308]]), np.array([[0.0, 0.0]]), lr=0.1, loss="mse")
    assert exc.value.layer_index in (None, 1)


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        nn.sgd_step(nn.mlp((2,), 2, 2, 0), np.ones((1, 2)), np.array([0]), lr=-1)


def test_bad_labels_rejected():
    model = nn.mlp((2,), 2, 2, 0)
    with pytest.raises(ValueError):
        nn.sgd_step(model, np.ones((1, 2)), np.array([2]), lr=0.1)


# -- train_local -----------------------------------------------------------------

def _blobs(seed=0, n=100):
    return gen_gaussian_mixture(2, 2, [[-2.0, -2.0], [2.0, 2.0]], 0.5, n // 2, seed=seed)


def test_zero_epochs_unchanged():
    model = nn.mlp((2,), 2, 4, 0, seed=0)
    out = nn.train_local(model, _blobs(), epochs=0)
    np.testing.assert_array_equal(nn.flatten_params(out), nn.flatten_params(model))


def test_training_reduces_loss_on_separable_blobs():
    data = _blobs()
    model = nn.mlp((2,), 2, 8, 0, seed=0)
    before, _ = nn.loss_and_gradient(model, data.X, data.y)
    trained = nn.train_local(model, data, epochs=5, batch_size=10, lr=0.01, rng=0)
    after, _ = nn.loss_and_gradient(trained, data.X, data.y)
    assert after < before


def test_train_local_defaults():
    import inspect
    sig = inspect.signature(nn.train_local)
    assert sig.parameters["epochs"].default == 5
    assert sig.parameters["batch_size"].default == 10
    assert sig.parameters["lr"].default == 0.01


def test_train_local_deterministic_with_dropout():
    data = _blobs()
    model = nn.mlp((2,), 2, 8, 0.5, seed=0)
    a = nn.train_local(model, data, epochs=2, rng=42)
    b = nn.train_local(model, data, epochs=2, rng=42)
    np.testing.assert_array_equal(nn.flatten_params(a), nn.flatten_params(b))
    c = nn.train_local(model, data, epochs=2, rng=43)
    assert not np.array_equal(nn.flatten_params(a), nn.flatten_params(c))


def test_train_local_empty_client_fails():
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    client = ClientDataset(0, empty, empty)
    with pytest.raises(nn.EmptyDatasetError):
        nn.train_local(nn.mlp((2,), 2, 2, 0), client)


def test_train_local_accepts_client_dataset():
    data = _blobs()
    client = ClientDataset(0, data, data, 1.0)
    model = nn.mlp((2,), 2, 4, 0, seed=0)
    a = nn.train_local(model, client, epochs=1, rng=0)
    b = nn.train_local(model, data, epochs=1, rng=0)
    np.testing.assert_array_equal(nn.flatten_params(a), nn.flatten_params(b))


# -- encode / autoencoders ---------------------------------------------------------

def test_identity_encoder_returns_inputs():
    x = np.random.default_rng(0).standard_normal((7, 2, 3))
    enc = nn.identity_encoder((2, 3))
    np.testing.assert_array_equal(nn.encode(enc, x), x.reshape(7, 6))


def test_convae_latent_default_is_128():
    ae = nn.conv_autoencoder()
    enc = nn.encoder_from_autoencoder(ae, nn.CONV_AE_ENCODER_DEPTH)
    assert enc.latent_dim == 128
    z = nn.encode(enc, np.zeros((3, 28, 28)))
    assert z.shape == (3, 128)


def test_encode_shape_mismatch():
    enc = nn.identity_encoder((4,))
    with pytest.raises(nn.ShapeError):
        nn.encode(enc, np.zeros((2, 5)))


def test_dense_ae_latent_separates_clusters():
    data = gen_gaussian_mixture(2, 10, np.vstack([np.zeros(10), np.full(10, 3.0)]), 0.3, 100, seed=0)
    ae = nn.dense_autoencoder(10, 3, hidden=16, seed=0)
    ae = nn.finetune_autoencoder(ae, data, epochs=20, lr=0.05, rng=0)
    z = nn.encode(nn.encoder_from_autoencoder(ae, nn.DENSE_AE_ENCODER_DEPTH), data)
    c0, c1 = z[data.y == 0].mean(0), z[data.y == 1].mean(0)
    spread = max(np.linalg.norm(z[data.y == 0] - c0, axis=1).mean(),
                 np.linalg.norm(z[data.y == 1] - c1, axis=1).mean())
    assert np.linalg.norm(c0 - c1) / spread > 3.0


def test_finetune_reduces_reconstruction_error():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(60, 8))
    data = Dataset(x, np.zeros(60, dtype=int), 1)
    ae = nn.dense_autoencoder(8, 3, hidden=6, seed=1)
    mse = lambda m: float(np.mean((nn.forward(m, x) - x) ** 2))
    tuned = nn.finetune_autoencoder(ae, data, epochs=5, lr=0.05)
    assert mse(tuned) < mse(ae)
    np.testing.assert_array_equal(nn.flatten_params(nn.finetune_autoencoder(ae, data, epochs=0)),
                                  nn.flatten_params(ae))


def test_finetune_defaults_and_rejects_classifier():
    import inspect
    assert inspect.signature(nn.finetune_autoencoder).parameters["epochs"].default == 5
    with pytest.raises(nn.ShapeError):
        nn.finetune_autoencoder(nn.mlp((4,), 2, 3, 0), Dataset(np.zeros((2, 4)), [0, 1], 2))


# -- flatten / architectures ---------------------------------------------------------

def test_architecture_parameter_counts():
    assert nn.mlp((28, 28), num_classes=62).num_params == 169_462
    assert nn.conv_autoencoder(28, 128).num_params == 51_577
    assert len(nn.flatten_params(nn.mlp((28, 28), num_classes=62))) == 169_462


@pytest.mark.parametrize("factory", [
    lambda: nn.mlp((28, 28), 10, seed=3),
    lambda: nn.conv_autoencoder(seed=3),
    lambda: nn.small_cnn(seed=3),
    lambda: nn.dense_autoencoder(5, 2, seed=3),
])
def test_flatten_round_trip(factory):
    model = factory()
    vec = nn.flatten_params(model)
    back = nn.unflatten_params(model, vec)
    for a, b in zip(model.param_arrays(), back.param_arrays()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        nn.unflatten_params(model, vec[:-1])


def test_config_round_trip():
    ae = nn.conv_autoencoder(seed=2)
    rebuilt = nn.Model.from_config(ae.config(), seed=None)
    assert rebuilt.config() == ae.config()
    assert rebuilt.num_params == ae.num_params


def test_checkpoint_round_trip(tmp_path):
    model = nn.mlp((5,), 3, 4, seed=1)
    path = nn.save_checkpoint(tmp_path / "m.ckpt", model, extra={"client": 2})
    header, values = nn.load_checkpoint(path)
    assert header["client"] == 2
    np.testing.assert_array_equal(values, nn.flatten_params(model))
    rebuilt = nn.unflatten_params(nn.Model.from_config(header["architecture"], seed=None), values)
    np.testing.assert_array_equal(nn.flatten_params(rebuilt), values)
    raw = path.read_bytes()
    assert np.frombuffer(raw[-8:], "<f8")[0] == values[-1]  # little-endian float64 tail
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        nn.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + raw)
    with pytest.raises(ValueError):
        nn.load_checkpoint(tmp_path / "bad.ckpt")
