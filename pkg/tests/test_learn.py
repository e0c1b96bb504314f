import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from threepole import extract as X
from threepole import field as F
from threepole import learn as L


def tiny(mode="triclass", hidden=(8,), posenc=False, seed=0, dtype="float64"):
    cfg = L.TrainConfig(hidden=hidden, mode=mode, posenc=posenc, seed=seed, dtype=dtype)
    return L.init_model(cfg, seed)


def numeric_grads(loss_fn, params, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric):
    for a, n in zip(analytic, numeric):
        tol = np.maximum(1e-6, 1e-4 * np.maximum(np.abs(a), np.abs(n)))
        assert np.all(np.abs(a - n) <= tol)


# ---- init / forward ---------------------------------------------------------

def test_init_deterministic_and_shapes():
    cfg = L.TrainConfig(hidden=(8,))
    a, b, c = L.init_model(cfg, 1), L.init_model(cfg, 1), L.init_model(cfg, 2)
    assert [w.shape for w in a.weights] == [(8, 3), (3, 8)]
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert all(np.all(bias == 0) for bias in a.biases)
    assert np.abs(a.weights[0]).max() <= np.sqrt(6 / 3)


def test_posenc_width():
    m = tiny(posenc=True)
    assert m.weights[0].shape == (8, 39)
    assert L.encode(m, np.zeros((2, 3))).shape == (2, 39)


def test_zero_model_uniform_softmax():
    m = tiny()
    for p in m.parameters():
        p[...] = 0
    logits = L.forward(m, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(logits == 0)
    loss, _ = L.softmax_xent(logits, np.array([0, 1, 2, 0, 1]))
    assert loss == pytest.approx(np.log(3))


def test_batch_equals_single():
    m = tiny(hidden=(256, 256), dtype="float32")
    p = np.array([[0.1, -0.4, 0.7]])
    one = L.forward(m, p)
    many = L.forward(m, np.repeat(p, 100, axis=0))
    assert np.all(many == one)
    assert np.isfinite(L.forward(m, np.random.default_rng(1).normal(size=(50, 3)))).all()


def test_forward_shape_error():
    with pytest.raises(ValueError):
        L.forward(tiny(), np.zeros((4, 2)))


def test_config_validation():
    with pytest.raises(ValueError):
        L.TrainConfig(mode="regress")
    with pytest.raises(ValueError):
        L.TrainConfig(hidden=(0,))
    with pytest.raises(ValueError):
        L.TrainConfig(lr=0)


# ---- gradients --------------------------------------------------------------

@given(st.integers(0, 10_000), st.sampled_from(L.MODES))
@settings(max_examples=20, deadline=None)
def test_gradients_match_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in rng.integers(2, 12, rng.integers(1, 3)))
    m = tiny(mode, hidden, posenc=bool(rng.integers(2)), seed=seed)
    for b in m.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    assert m.n_parameters() <= 2000
    n = int(rng.integers(1, 17))
    pts = rng.normal(size=(n, 3))
    if mode == "triclass":
        labels = rng.integers(0, 3, n)
        w = rng.uniform(0.5, 2, 3) if rng.integers(2) else None
        f = lambda: L.triclass_loss(m, pts, labels, w)[0]
        _, grads = L.triclass_loss(m, pts, labels, w)
    else:
        nonnull = rng.integers(0, 2, n)
        dist = rng.normal(size=n)
        f = lambda: L.br_loss(m, pts, nonnull, dist)[0]
        _, grads = L.br_loss(m, pts, nonnull, dist)
    assert_grads_close(grads, numeric_grads(f, m.parameters()))


def test_xent_class_weights():
    logits = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    labels = np.array([0, 1])
    plain, _ = L.softmax_xent(logits, labels)
    nll = -np.log(np.exp(logits[[0, 1], labels]) / np.exp(logits).sum(1))
    assert plain == pytest.approx(nll.mean())
    weighted, _ = L.softmax_xent(logits, labels, np.array([3.0, 1.0, 1.0]))
    assert weighted == pytest.approx((3 * nll[0] + nll[1]) / 4)


def test_bce_l1_value():
    out = np.array([[0.0, 0.5], [2.0, -0.1], [-1.0, 9.0]])
    loss, _ = L.bce_l1(out, np.array([1, 1, 0]), np.array([0.2, 0.1, np.nan]))
    bce = np.mean([np.log(2), np.log1p(np.exp(-2.0)), np.log1p(np.exp(-1.0))])
    assert loss == pytest.approx(bce + np.mean([0.3, 0.2]))


def test_inverse_frequency():
    w = L._inverse_frequency(np.array([0, 0, 0, 1, 2, 2]))
    assert w == pytest.approx([6 / 9, 2.0, 1.0])


# ---- adam -------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    cfg = L.TrainConfig(lr=0.01)
    p = [np.array([1.0, -2.0, 3.0])]
    state = L.AdamState.zeros_like(p)
    L.adam_step(p, [np.array([0.5, -4.0, 0.0])], state, cfg)
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert p[0] == pytest.approx([0.99, -1.99, 3.0], abs=1e-9)
    assert state.step == 1


def test_adam_two_steps_reference():
    cfg = L.TrainConfig(lr=0.1, betas=(0.8, 0.9), eps=1e-8, weight_decay=0.01)
    p = [np.array([0.3])]
    state = L.AdamState.zeros_like(p)
    x, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate([1.0, -0.5], start=1):
        L.adam_step(p, [np.array([g])], state, cfg)
        g = g + 0.01 * x
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        x -= 0.1 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
    assert p[0][0] == pytest.approx(x, rel=1e-12)


# ---- training ---------------------------------------------------------------

@pytest.fixture(scope="module")
def disk_batch(disk):
    oc = F.build_octree(disk, 4)
    return F.sample_points(disk, oc, "octree", 1)


def test_zero_epochs_returns_initial(disk_batch):
    cfg = L.TrainConfig(hidden=(16,), epochs=0, seed=3)
    model, losses = L.train(disk_batch, cfg)
    init = L.init_model(cfg, 3)
    assert len(losses) == 0
    assert all(np.array_equal(a, b) for a, b in zip(model.parameters(), init.parameters()))


def test_training_deterministic(disk_batch):
    cfg = L.TrainConfig(hidden=(32, 32), epochs=5, lr=1e-3, batch_size=256, seed=4)
    a, la = L.train(disk_batch, cfg)
    b, lb = L.train(disk_batch, cfg)
    assert np.array_equal(la, lb)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("mode", L.MODES)
def test_training_reduces_loss(disk_batch, mode):
    cfg = L.TrainConfig(hidden=(32, 32), epochs=30, lr=3e-3, batch_size=256, mode=mode)
    _, losses = L.train(disk_batch, cfg)
    assert losses[-1] < 0.6 * losses[0]


def test_br_needs_targets(disk_batch):
    batch = F.SampleBatch(disk_batch.points, disk_batch.labels, "octree")
    with pytest.raises(ValueError):
        L.train(batch, L.TrainConfig(hidden=(4,), epochs=1, mode="br"))


def test_divergence_raises(disk_batch):
    cfg = L.TrainConfig(hidden=(4,), epochs=1)
    model = tiny(hidden=(4,), dtype="float32")
    batch = F.SampleBatch(disk_batch.points * 1e200, disk_batch.labels, "octree")
    with pytest.raises(L.TrainingDiverged):
        L.train(batch, cfg, model=model)


# ---- prediction -------------------------------------------------------------

def constant_model(mode, bias):
    m = tiny(mode)
    m.weights[-1][...] = 0
    m.biases[-1][...] = bias
    return m


def test_ties_pick_lowest_class():
    m = constant_model("triclass", [1.0, 1.0, 1.0])
    assert np.all(L.predict_labels(m, np.zeros((4, 3))) == 0)
    m = constant_model("triclass", [0.0, 2.0, 2.0])
    assert np.all(L.predict_labels(m, np.zeros((4, 3))) == 1)


def test_all_null_prediction_reconstructs_empty(disk):
    g = F.compute_grid(disk, 4)
    pg = L.predict_grid(constant_model("triclass", [0.0, 0.0, 5.0]), g)
    assert np.isnan(pg.values).all()
    assert X.reconstruct(pg).n_triangles == 0


@given(st.floats(-50, 50))
@settings(max_examples=25, deadline=None)
def test_argmax_invariant_to_logit_shift(shift):
    m = tiny(hidden=(8, 8), seed=5)
    pts = np.random.default_rng(5).normal(size=(200, 3))
    before = L.predict_labels(m, pts)
    m.biases[-1] += shift
    assert np.array_equal(L.predict_labels(m, pts), before)


def test_merge_threshold_inclusive():
    out = L.merge_br(np.array([0.5, 0.4999, 0.9]), np.array([0.1, 0.2, -0.3]))
    assert out[0] == 0.1 and np.isnan(out[1]) and out[2] == -0.3


def test_br_predict_grid_at_half_probability(disk):
    g = F.compute_grid(disk, 4)
    pg = L.predict_grid(constant_model("br", [0.0, 0.25]), g)
    assert np.all(pg.values == 0.25)


def test_triclass_predict_grid_values(disk):
    g = F.compute_grid(disk, 4)
    pg = L.predict_grid(constant_model("triclass", [3.0, 0.0, 0.0]), g)
    assert np.all(pg.values == -1.0) and pg.dims == g.dims


# ---- checkpoints ------------------------------------------------------------

@pytest.mark.parametrize("mode", L.MODES)
def test_checkpoint_round_trip(tmp_path, mode):
    m = tiny(mode, hidden=(6, 5), posenc=True, dtype="float32")
    m.center = np.array([0.1, 0.2, 0.3])
    m.scale = 0.7
    path = tmp_path / "m.3pm1"
    L.save_model(m, path, {"depth": 6})
    back, extra = L.load_model(path)
    assert extra == {"depth": 6} and back.config == m.config
    assert all(np.array_equal(a, b) for a, b in zip(m.parameters(), back.parameters()))
    pts = np.random.default_rng(0).normal(size=(10, 3))
    assert np.array_equal(L.forward(m, pts), L.forward(back, pts))
    assert path.read_bytes()[:4] == b"3PM1"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.3pm1"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        L.load_model(path)
    m = tiny(dtype="float32")
    L.save_model(m, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        L.load_model(path)
