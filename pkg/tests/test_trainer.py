import numpy as np
import pytest

from delta_uq import nn_core
from delta_uq.data import DatasetSource, ingest
from delta_uq.nn_core import Dataset, NetworkConfig
from delta_uq.trainer import DEFAULT_SCHEDULE, TrainConfig, TrainingError, accuracy, train


@pytest.fixture(scope="module")
def blobs():
    return ingest(DatasetSource("synthetic_blobs", n_classes=3, n_examples=60, dims=3, separation=2.0))


def test_learning_rate_schedule_lookup():
    cfg = TrainConfig()
    assert cfg.schedule == DEFAULT_SCHEDULE
    assert [cfg.learning_rate(s) for s in (0, 3999, 4000, 5999, 6000, 7999)] == [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"schedule": ((1, 1e-3),)},
        {"schedule": ((0, 1e-3), (0, 1e-4))},
        {"batch_size": 0},
        {"max_steps": 0},
        {"beta1": 1.0},
    ],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_accuracy_hand_example():
    # identity single layer: argmax of the input is the prediction
    net = NetworkConfig((2, 2))
    omega = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    data = Dataset.from_labels([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [0.0, 3.0]], [0, 1, 1, 0], 2)
    assert accuracy(net, omega, data) == 0.5


def test_convex_single_layer_reaches_stationary_point(blobs):
    net = NetworkConfig((3, 3), 0.05)
    cfg = TrainConfig(
        batch_size=len(blobs), schedule=((0, 1e-2), (1500, 1e-3), (2500, 1e-4)), max_steps=3000, log_every=0
    )
    report = train(net, blobs, cfg)
    assert report.grad_norm <= 1e-4
    assert report.steps_run == 3000 and report.log == []
    np.testing.assert_allclose(np.linalg.norm(nn_core.grad(net, report.omega, blobs)), report.grad_norm)


def test_training_is_bit_deterministic(blobs):
    net = NetworkConfig((3, 8, 3), 0.01)
    cfg = TrainConfig(batch_size=16, max_steps=200, seed=4, shuffle=True, log_every=50)
    a, b = train(net, blobs, cfg), train(net, blobs, cfg)
    np.testing.assert_array_equal(a.omega, b.omega)
    assert a.log == b.log
    c = train(net, blobs, TrainConfig(batch_size=16, max_steps=200, seed=5, shuffle=True))
    assert not np.array_equal(a.omega, c.omega)


def test_weight_norm_bounded_by_initial_cost(blobs):
    # any iterate with C(w) <= C(0) satisfies lambda/2 |w|^2 <= C(0)
    net = NetworkConfig((3, 8, 3), 0.05)
    report = train(net, blobs, TrainConfig(batch_size=60, max_steps=500, log_every=0))
    c0 = nn_core.cost(net, np.zeros(net.n_params), blobs)
    assert report.cost <= c0
    assert float(report.omega @ report.omega) <= 2 * c0 / net.l2_rate


def test_full_batch_cost_decreases_early(blobs):
    net = NetworkConfig((3, 8, 3), 0.01)
    report = train(net, blobs, TrainConfig(batch_size=60, max_steps=300, log_every=25, seed=1))
    costs = [c for _, _, c, _ in report.log]
    assert all(b < a for a, b in zip(costs, costs[1:]))
    assert report.train_accuracy >= 0.6


def test_log_and_test_accuracy(blobs):
    net = NetworkConfig((3, 4, 3), 0.01)
    report = train(net, blobs, TrainConfig(batch_size=20, max_steps=30, log_every=10), test_data=blobs.subset(range(10)))
    assert [row[0] for row in report.log] == [10, 20, 30]
    assert report.test_accuracy == accuracy(net, report.omega, blobs.subset(range(10)))
    assert set(report.summary()) == {"steps_run", "cost", "grad_norm", "train_accuracy", "test_accuracy"}


def test_explicit_start_point_is_used(blobs):
    net = NetworkConfig((3, 3), 0.01)
    omega0 = np.full(net.n_params, 0.1)
    cfg = TrainConfig(batch_size=60, max_steps=1, schedule=((0, 1e-3),), log_every=0)
    report = train(net, blobs, cfg, omega0=omega0)
    # first Adam step moves each coordinate by lr * sign(g) up to eps
    g = nn_core.grad(net, omega0, blobs)
    np.testing.assert_allclose(report.omega, omega0 - 1e-3 * np.sign(g), atol=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_training_error():
    net = NetworkConfig((1, 2), 0.01)
    data = Dataset.from_labels([[np.inf]], [0], 2)
    with pytest.raises(TrainingError) as info:
        train(net, data, TrainConfig(batch_size=1, max_steps=5, log_every=0))
    assert info.value.step == 0
