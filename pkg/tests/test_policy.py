import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_jacobian
from tubeil.errors import DimensionMismatch
from tubeil.policy import Adam, Dataset, MlpPolicy, TrainConfig, mse_loss_and_grad, split_indices, train


def _net(sizes=(3, 5, 4, 2), seed=0):
    return MlpPolicy.init(list(sizes), np.random.default_rng(seed))


def test_forward_hand_example():
    p = MlpPolicy([np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([[1.0, -2.0]])],
                  [np.array([0.0, -3.0]), np.array([0.5])])
    # hidden relu([1-2, 2+1-3]) = [0, 0] -> 0.5
    assert p.forward([1.0, 2.0])[0] == pytest.approx(0.5)
    # hidden relu([3-1, 6+0.5-3]) = [2, 3.5] -> 2 - 7 + 0.5
    assert p.forward([3.0, 1.0])[0] == pytest.approx(-4.5)


def test_forward_applies_normalization():
    p = MlpPolicy([np.eye(2)], [np.zeros(2)], np.array([1.0, 2.0]), np.array([2.0, 4.0]),
                  np.array([10.0, 0.0]), np.array([3.0, 1.0]))
    assert np.allclose(p.forward([5.0, 6.0]), [10 + 3 * 2, 1.0])


def test_initialization_bounds():
    p = _net((100, 7, 1))
    assert np.abs(p.weights[0]).max() <= 0.1 and np.abs(p.weights[1]).max() <= 1 / np.sqrt(7)
    assert p.sizes == [100, 7, 1]


def test_wrong_input_width():
    with pytest.raises(DimensionMismatch):
        _net().forward(np.zeros(4))


def test_gradient_matches_finite_differences():
    p = _net()
    rng = np.random.default_rng(1)
    X, U = rng.normal(size=(16, 3)), rng.normal(size=(16, 2))
    p.fit_normalization(X, U)
    _, grads = mse_loss_and_grad(p, X, U)
    worst = 0.0
    for param, g in zip(p.params(), grads):
        flat = param.reshape(-1)
        orig = flat.copy()

        def loss_at(v):
            flat[:] = v
            return np.array([mse_loss_and_grad(p, X, U)[0]])

        fd = central_jacobian(loss_at, orig, 1e-6)[0]
        flat[:] = orig
        worst = max(worst, np.abs(fd - g.reshape(-1)).max())
    assert worst <= 1e-5


def test_empty_batch():
    with pytest.raises(ValueError):
        mse_loss_and_grad(_net(), np.zeros((0, 3)), np.zeros((0, 2)))


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0, 0.0])]
    Adam(lr=0.1).step(p, [np.array([3.0, -0.5, 0.0])])
    assert np.allclose(p[0], [0.9, -1.9, 0.0], atol=1e-7)


def test_adam_minimizes_quadratic():
    x = [np.array([5.0, -3.0])]
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(x, [2 * x[0]])
    assert np.abs(x[0]).max() < 1e-2


def test_adam_state_mismatch():
    opt = Adam()
    opt.step([np.zeros(2)], [np.ones(2)])
    with pytest.raises(DimensionMismatch):
        opt.step([np.zeros(2), np.zeros(1)], [np.ones(2), np.ones(1)])


def test_training_fits_linear_map():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 3))
    U = X @ np.array([[1.0, -2.0], [0.5, 0.0], [0.0, 1.0]])
    p = _net()
    p.fit_normalization(X, U)
    hist = train(p, X, U, TrainConfig(lr=3e-3, epochs=200, batch_size=32))
    assert hist["train"][-1] < 0.02 * hist["train"][0]
    assert np.abs(p.forward(X) - U).mean() < 0.05


def test_training_is_deterministic():
    rng = np.random.default_rng(2)
    X, U = rng.normal(size=(100, 3)), rng.normal(size=(100, 2))
    a, b = _net(), _net()
    train(a, X, U, TrainConfig(epochs=5), seed=4)
    train(b, X, U, TrainConfig(epochs=5), seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))


def test_early_stopping_restores_best():
    rng = np.random.default_rng(3)
    X, U = rng.normal(size=(60, 3)), rng.normal(size=(60, 2))   # pure noise: validation stalls
    p = _net((3, 64, 64, 2))
    hist = train(p, X, U, TrainConfig(lr=1e-2, epochs=300, validation_fraction=0.3, patience=5))
    assert hist["epochs"] < 300
    _, va = split_indices(60, 0.3, 0)
    Z, T = p.normalize_input(X[va]), p.normalize_output(U[va])
    assert float(np.sum((p.forward_normalized(Z) - T) ** 2) / len(va)) == pytest.approx(hist["best_val"])
    assert hist["best_val"] == min(hist["val"])


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_save_load_round_trip(tmp_path):
    p = _net((14, 64, 32, 4), seed=9)
    p.fit_normalization(np.random.default_rng(0).normal(size=(10, 14)), np.ones((10, 4)))
    p.save(tmp_path / "p.mlp")
    q = MlpPolicy.load(tmp_path / "p.mlp")
    x = np.random.default_rng(1).normal(size=(5, 14))
    assert np.array_equal(p.forward(x), q.forward(x))
    assert (tmp_path / "p.mlp").read_bytes()[:8] == b"TUBEMLP1"


def test_load_rejects_corrupt_files(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTAPOLICY")
    with pytest.raises(ValueError):
        MlpPolicy.load(tmp_path / "bad")
    _net().save(tmp_path / "ok")
    (tmp_path / "long").write_bytes((tmp_path / "ok").read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError):
        MlpPolicy.load(tmp_path / "long")


def test_dataset_csv_round_trip(tmp_path):
    d = Dataset.empty(3, 2)
    d.add(np.array([[0.1, 1 / 3, -2.0]]), np.array([[1e-17, 5.0]]), "demo")
    d.add(np.ones((2, 3)), np.zeros((2, 2)), "augmented")
    d.save_csv(tmp_path / "d.csv")
    e = Dataset.load_csv(tmp_path / "d.csv")
    assert np.array_equal(d.X, e.X) and np.array_equal(d.U, e.U) and np.array_equal(d.prov, e.prov)
    assert e.count("demo") == 1 and e.count("augmented") == 2


def test_dataset_rejects_wrong_width():
    with pytest.raises(DimensionMismatch):
        Dataset.empty(3, 2).add(np.zeros((1, 4)), np.zeros((1, 2)), "demo")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 200), st.floats(0.0, 0.9))
def test_split_partitions_indices(n, frac):
    tr, va = split_indices(n, frac, 0)
    assert sorted(np.r_[tr, va]) == list(range(n))


def test_zero_weights_return_bias():
    p = MlpPolicy([np.zeros((4, 3)), np.zeros((2, 4))], [np.ones(4), np.array([0.5, -1.5])])
    assert np.allclose(p.forward(np.random.default_rng(0).normal(size=(6, 3))), [0.5, -1.5])


def test_positive_preactivations_compose_linearly():
    rng = np.random.default_rng(8)
    W1, W2 = rng.uniform(0.1, 1, (5, 3)), rng.normal(size=(2, 5))
    b1, b2 = np.full(5, 0.2), rng.normal(size=2)
    p = MlpPolicy([W1, W2], [b1, b2])
    x = rng.uniform(0.1, 1, 3)              # positive inputs and weights keep every unit active
    assert np.allclose(p.forward(x), W2 @ (W1 @ x + b1) + b2)


def test_perfect_targets_have_zero_loss_and_gradient():
    p = _net()
    X = np.random.default_rng(0).normal(size=(10, 3))
    loss, grads = mse_loss_and_grad(p, X, p.forward(X))
    assert loss == pytest.approx(0.0, abs=1e-24) and all(np.allclose(g, 0) for g in grads)


def test_linear_gradient_closed_form():
    W, b = np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([0.5, 0.0])
    p = MlpPolicy([W.copy()], [b.copy()])
    x, u = np.array([0.3, -0.7]), np.array([1.0, 2.0])
    _, (gW, gb) = mse_loss_and_grad(p, x[None], u[None])
    r = W @ x + b - u
    assert np.allclose(gW, 2 * np.outer(r, x)) and np.allclose(gb, 2 * r)


def test_adam_zero_gradient_and_step_sizes():
    p = [np.array([1.0, 2.0])]
    opt = Adam()
    opt.step(p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, 2.0])
    p, opt = [np.zeros(3)], Adam(lr=1e-3)
    opt.step(p, [np.ones(3)])
    d1 = p[0].copy()
    assert np.allclose(d1, -1e-3, rtol=1e-6)
    opt.step(p, [np.ones(3)])
    assert np.all(np.abs(p[0] - d1) <= np.abs(d1) + 1e-15)
