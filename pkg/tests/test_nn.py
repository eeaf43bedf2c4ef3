import numpy as np
import pytest

from cosa.nn import (Adam, CheckpointError, Classifier, Decoder, Encoder, TrainHyper,
                     TrainingDiverged, cross_entropy, grad_check, load_autoencoder, load_model,
                     save_autoencoder, save_model, train_autoencoder, train_classifier)
from cosa.nn.layers import knn_indices
from cosa.synthdata import DatasetConfig, make_dataset


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return make_dataset(DatasetConfig(str(root), n_train=3, n_test=2, n=24, master_seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_encoder_permutation_invariant(rng):
    enc = Encoder.init(8, 16, seed=0)
    X = rng.normal(size=(40, 3))
    assert np.array_equal(enc(X), enc(X[rng.permutation(40)]))


def test_encoder_single_point_is_pointwise_feature(rng):
    enc = Encoder.init(8, 16, seed=0)
    x = rng.normal(size=(1, 3))
    p = enc.params
    lk = lambda a: np.maximum(a, 0.01 * a)
    feat = lk(lk(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]) @ p["W3"] + p["b3"]
    assert np.array_equal(enc(x), feat[0])


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradient(seed):
    rng = np.random.default_rng(seed)
    enc = Encoder.init(8, 16, seed=seed)
    w = rng.normal(size=8)

    def f(x):
        z, cache = enc.forward(x)
        return z[0] @ w, enc.backward(cache, w[None], param_grads=False)[1][0]
    assert grad_check(f, rng.normal(size=(15, 3)), step=1e-5).max_rel_err <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_decoder_jvp(seed):
    rng = np.random.default_rng(seed)
    dec = Decoder.init(8, 16, 10, seed=seed)
    z0, v, w = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(10, 3))
    out, cache = dec.forward(z0)
    assert out.shape == (1, 10, 3)
    assert np.array_equal(dec(z0), dec(z0))
    _, gz = dec.backward(cache, w[None])
    h = 1e-5
    fd = ((dec(z0 + h * v) - dec(z0 - h * v)) * w).sum() / (2 * h)
    assert abs(gz[0] @ v - fd) <= 1e-5 * max(abs(fd), 1e-12)


def test_decoder_width_mismatch():
    with pytest.raises(ValueError):
        Decoder.init(8, 16, 10)(np.zeros(7))


@pytest.mark.parametrize("arch", ["A", "B", "C"])
def test_classifier_input_gradient(arch):
    rng = np.random.default_rng(7)
    clf = Classifier.init(arch, Z=5, h=16, k=4, seed=3)
    for _ in range(3):
        X = rng.normal(size=(20, 3))
        y = int(rng.integers(5))
        rep = grad_check(lambda x: clf.loss_and_input_grad(x, y), X)
        assert rep.max_rel_err <= 1e-5


@pytest.mark.parametrize("arch", ["A", "B", "C"])
def test_classifier_parameter_gradients(arch):
    rng = np.random.default_rng(8)
    clf = Classifier.init(arch, Z=4, h=8, k=3, seed=1)
    X, y = rng.normal(size=(3, 12, 3)), np.array([0, 3, 1])
    for name in clf.params:
        def f(w):
            saved = clf.params[name]
            clf.params[name] = w
            logits, cache = clf.forward(X)
            loss, gl = cross_entropy(logits, y)
            grads, _ = clf.backward(cache, gl)
            clf.params[name] = saved
            return loss, grads[name]
        assert grad_check(f, clf.params[name].copy()).max_rel_err <= 1e-5, name


def test_classifier_permutation_invariance(rng):
    X = rng.normal(size=(64, 3))
    Xp = X[rng.permutation(64)]
    for arch in "AB":
        clf = Classifier.init(arch, seed=2)
        assert np.array_equal(clf(X), clf(Xp))
    clf = Classifier.init("C", seed=2)
    a, b = clf(X), clf(Xp)
    assert np.abs(a - b).max() <= 1e-9 * np.abs(a).max()


def test_zero_weights_give_uniform_logits(rng):
    clf = Classifier.init("A", seed=0)
    for k in clf.params:
        clf.params[k] = np.zeros_like(clf.params[k])
    logits = clf(rng.normal(size=(30, 3)))
    assert np.all(logits == logits[0])


def test_edge_classifier_needs_more_points_than_neighbours():
    clf = Classifier.init("B", k=8, seed=0)
    with pytest.raises(ValueError):
        clf(np.random.default_rng(0).normal(size=(8, 3)))


def test_knn_excludes_self_and_breaks_ties_low():
    X = np.array([[[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 5, 0]]], float)
    nbr = knn_indices(X, 2)
    assert list(nbr[0, 0]) == [1, 2]
    assert 3 not in nbr[0, 3]


def test_cross_entropy():
    loss, g = cross_entropy(np.zeros(8), 3)
    assert loss == pytest.approx(np.log(8), abs=1e-15)
    logits = np.zeros(8)
    logits[2] = 1000.0
    assert cross_entropy(logits, 2)[0] == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(10):
        l0 = rng.normal(size=6) * 3
        y = int(rng.integers(6))
        assert grad_check(lambda l: cross_entropy(l, y), l0, tol=1e-6).passed
    p = np.exp(l0 - l0.max())
    p /= p.sum()
    expected = p.copy()
    expected[y] -= 1
    assert np.allclose(cross_entropy(l0, y)[1], expected, atol=1e-15)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(4), 4)


def test_grad_check_quadratic(rng):
    x0 = rng.normal(size=10)
    rep = grad_check(lambda x: (x @ x, 2 * x), x0)
    assert rep.max_rel_err <= 1e-8
    bad = grad_check(lambda x: (x @ x, 3 * x), x0)
    assert not bad.passed
    with pytest.raises(ValueError):
        grad_check(lambda x: (np.nan, x), x0)


def test_adam_matches_reference_formula():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    g = np.array([0.5, -1.0])
    opt.step(p, {"w": g})
    # first step: m_hat = g, v_hat = g^2
    assert np.allclose(p["w"], np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_train_autoencoder_deterministic(tiny_manifest):
    hyper = TrainHyper(epochs=5, d=8, h=16)
    e1, d1, r1 = train_autoencoder(tiny_manifest, hyper, seed=3)
    e2, d2, r2 = train_autoencoder(tiny_manifest, hyper, seed=3)
    for a, b in ((e1, e2), (d1, d2)):
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert np.all(np.isfinite(r1.losses)) and r1.epochs == 5
    assert r1.losses[-1] < r1.losses[0]
    assert np.isfinite(r1.metric)


@pytest.mark.parametrize("arch", ["A", "B", "C"])
def test_train_classifier_deterministic(tiny_manifest, arch):
    hyper = TrainHyper(epochs=4, h=8, k=4)
    m1, r1 = train_classifier(arch, tiny_manifest, hyper, seed=1)
    m2, _ = train_classifier(arch, tiny_manifest, hyper, seed=1)
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
    assert 0.0 <= r1.metric <= 1.0 and np.all(np.isfinite(r1.losses))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the diverging run overflows on purpose
def test_training_divergence_is_reported(tiny_manifest):
    with pytest.raises(TrainingDiverged) as info:
        train_classifier("A", tiny_manifest, TrainHyper(epochs=3, h=8, lr=1e300), seed=0)
    assert info.value.report.epochs >= 1


def test_checkpoint_round_trip(tmp_path):
    enc, dec = Encoder.init(8, 16, seed=1), Decoder.init(8, 16, 12, seed=2)
    save_autoencoder(tmp_path / "ae.json", enc, dec)
    e2, d2 = load_autoencoder(tmp_path / "ae.json")
    assert all(np.array_equal(enc.params[k], e2.params[k]) for k in enc.params)
    assert all(np.array_equal(dec.params[k], d2.params[k]) for k in dec.params)
    clf = Classifier.init("B", Z=5, h=8, k=3, seed=4)
    save_model(tmp_path / "b.json", clf)
    c2 = load_model(tmp_path / "b.json", "classifier")
    assert c2.arch == "B" and c2.k == 3
    assert all(np.array_equal(clf.params[k], c2.params[k]) for k in clf.params)


def test_checkpoint_rejects_bad_version_and_shape(tmp_path):
    import json
    clf = Classifier.init("A", Z=5, h=8, seed=4)
    save_model(tmp_path / "a.json", clf)
    doc = json.loads((tmp_path / "a.json").read_text())
    doc["version"] = 2
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_model(tmp_path / "v.json")
    doc["version"] = 1
    doc["meta"]["h"] = 9
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="mismatch"):
        load_model(tmp_path / "s.json")
