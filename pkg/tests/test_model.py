import numpy as np
import pytest

from se3gconv.data import Dataset
from se3gconv.gradcheck import model_gradcheck
from se3gconv.model import VARIANTS, Model, ModelConfig, build_model
from se3gconv.train import TrainConfig, TrainingDiverged, cross_entropy, evaluate, train


def tiny(variant="gcnn", **kw):
    kw.setdefault("channels", (2, 2, 3))
    kw.setdefault("resolution", 4)
    return Model(ModelConfig(variant, **kw))


def toy_data(n=8, size=8, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, 1, size, size, size)), np.arange(n) % classes)


def test_gcnn_parameter_count_is_close_to_the_baseline():
    cnn = build_model(ModelConfig("cnn-baseline")).num_parameters()
    g4 = build_model(ModelConfig("gcnn", resolution=4)).num_parameters()
    assert abs(g4 - cnn) / cnn <= 0.30


def test_parameter_count_grows_with_grid_resolution():
    counts = [Model(ModelConfig("gcnn", resolution=r)).num_parameters() for r in (4, 8, 16)]
    assert counts[0] < counts[1] < counts[2]


@pytest.mark.parametrize("variant", VARIANTS)
def test_same_config_gives_identical_initial_parameters(variant):
    a, b = tiny(variant, seed=3), tiny(variant, seed=3)
    for k, v in a.parameters().items():
        assert np.array_equal(v, b.parameters()[k])
    c = tiny(variant, seed=4)
    assert any(not np.array_equal(v, c.parameters()[k]) for k, v in a.parameters().items())


def test_invalid_configs():
    for bad in (dict(variant="resnet"), dict(channels=(1, 2)), dict(channels=(0, 2, 2)), dict(kernel_size=4),
                dict(resolution=0), dict(num_classes=1), dict(grid_kind="I60")):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


@pytest.mark.parametrize("variant", VARIANTS)
def test_end_to_end_gradients(variant):
    for r in model_gradcheck(variant, seed=1):
        assert r.passed, (r.name, r.error)


def test_features_shape_and_single_volume():
    m = tiny()
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8, 8))
    assert m.features(x).shape == (3, 3)
    assert np.allclose(m.features(x[0]), m.features(x)[:1])
    assert m.forward(x).shape == (3, 4)


def test_zero_learning_rate_leaves_parameters_unchanged():
    m = tiny()
    before = {k: v.copy() for k, v in m.parameters().items()}
    train(m, toy_data(), TrainConfig(epochs=1, batch_size=4, learning_rate=0.0))
    for k, v in m.parameters().items():
        assert np.array_equal(v, before[k]), k


@pytest.mark.parametrize("variant", ["cnn-baseline", "gcnn"])
def test_overfits_one_batch(variant):
    data = toy_data(n=8)
    m = tiny(variant, channels=(4, 4, 8))
    train(m, data, TrainConfig(epochs=200, batch_size=8, learning_rate=3e-3))
    assert evaluate(m, data) == 1.0


def test_training_is_bitwise_deterministic(tmp_path):
    data = toy_data()
    for name in ("a", "b"):
        train(tiny(seed=2), data, TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=5),
              eval_sets={"test": data}, metrics_path=tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,split,accuracy,loss,wall_seconds"


def test_non_finite_loss_aborts_with_a_diagnostic():
    data = toy_data()
    data.volumes[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(tiny("cnn-baseline"), data, TrainConfig(epochs=1, batch_size=8))


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(tiny(), Dataset(np.zeros((0, 1, 8, 8, 8)), np.zeros(0, int)), TrainConfig(epochs=1))


def test_zero_logits_predict_class_zero():
    m = tiny("cnn-baseline")
    m.head.params["weight"][:] = 0
    m.head.params["bias"][:] = 0
    data = Dataset(np.zeros((10, 1, 8, 8, 8)), np.array([0, 0, 0, 1, 2, 3, 3, 1, 2, 2]))
    assert evaluate(m, data) == 0.3


class _Oracle:
    """Stands in for a model whose logits are one-hot on the true labels."""

    def __init__(self, labels):
        self.labels = labels
        self.cfg = ModelConfig("cnn-baseline")
        self.seen = 0

    def forward(self, x, training=False):
        y = self.labels[self.seen:self.seen + len(x)]
        self.seen += len(x)
        return np.eye(4)[y]


def test_perfect_logits_give_accuracy_one():
    labels = np.random.default_rng(0).integers(0, 4, 70)
    assert evaluate(_Oracle(labels), Dataset(np.zeros((70, 1, 2, 2, 2)), labels)) == 1.0


def test_random_labels_give_chance_accuracy():
    rng = np.random.default_rng(1)
    data = Dataset(rng.standard_normal((1000, 1, 4, 4, 4)), rng.integers(0, 4, 1000))
    acc = evaluate(tiny("cnn-baseline"), data)
    assert 0.21 <= acc <= 0.29


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    _, g = cross_entropy(z, y)
    d = rng.standard_normal(z.shape)
    h = 1e-6
    fd = (cross_entropy(z + h * d, y)[0] - cross_entropy(z - h * d, y)[0]) / (2 * h)
    assert abs(fd - np.sum(g * d)) < 1e-8


def test_eval_mode_uses_the_fixed_grid_and_running_statistics():
    m = tiny()
    x = np.random.default_rng(3).standard_normal((2, 1, 8, 8, 8))
    a = m.forward(x)
    m.forward(np.random.default_rng(4).standard_normal((4, 1, 8, 8, 8)), m.sample_grid(np.random.default_rng(0)),
              training=True)
    b = m.forward(x)
    assert not np.array_equal(a, b)  # running statistics moved
    assert np.array_equal(b, m.forward(x))
