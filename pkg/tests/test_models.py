import numpy as np
import pytest

from saat.models import (ARCHITECTURES, Architecture, Block, CheckpointError, TrainingDiverged, accuracy, build,
                         forward_to_tap, load_checkpoint, predict, rank_labels, rank_of_label, save_checkpoint,
                         train)
from saat.tensor import Tensor, grad_check


def test_tap_counts():
    assert [ARCHITECTURES[n].num_taps for n in ("vgg", "res", "inc")] == [4, 5, 6]


@pytest.mark.parametrize("name", ["vgg", "res", "inc"])
def test_build_deterministic_and_output_size(name):
    a, b = build(name, 10, seed=3), build(name, 10, seed=3)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build(name, 10, seed=4)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)
    assert predict(a, np.zeros((2, 1, 32, 32))).shape == (2, 10)


def test_unknown_block_kind():
    arch = Architecture("bad", (Block("conv", 4), Block("deconv", 4), Block("gap"), Block("linear")), (0,))
    with pytest.raises(ValueError, match="deconv"):
        build(arch, 10)
    with pytest.raises(ValueError):
        build("nope", 10)


def test_tap_points_must_increase():
    arch = Architecture("bad", (Block("conv", 4), Block("conv", 4), Block("gap"), Block("linear")), (1, 0))
    with pytest.raises(ValueError):
        build(arch, 10)


@pytest.mark.parametrize("name", ["vgg", "res", "inc"])
def test_tap_spatial_size_non_increasing(name, tiny_models):
    m = tiny_models[name]
    sizes = [forward_to_tap(m, np.zeros((1, 32, 32)), t).positions for t in range(m.num_taps)]
    assert all(b <= a for a, b in zip(sizes, sizes[1:]))


def test_feature_map_shape_sixteen_channels_eight_by_eight():
    arch = Architecture("probe", (Block("conv", 16), Block("gap"), Block("linear")), (0,))
    m = build(arch, 10, dtype=np.float64)
    fm = forward_to_tap(m, np.zeros((1, 8, 8)), 0)
    assert (fm.channels, fm.positions) == (16, 64)


def test_tap_out_of_range(tiny_models):
    with pytest.raises(IndexError):
        forward_to_tap(tiny_models["vgg"], np.zeros((1, 32, 32)), 4)


def test_identical_images_identical_features(tiny_models, images):
    m = tiny_models["inc"]
    a = forward_to_tap(m, images, 3).values.data
    b = forward_to_tap(m, images.copy(), 3).values.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("name,tap", [("vgg", 0), ("res", 1), ("inc", 0)])
def test_tap_gradient_matches_finite_differences(name, tap, tiny_models, rng):
    m = tiny_models[name]
    img = rng.uniform(size=(1, 1, 8, 8))
    probe = rng.normal(size=forward_to_tap(m, img, tap).values.shape)
    assert grad_check(lambda t: (forward_to_tap(m, t, tap).values * Tensor(probe)).sum(), img) <= 1e-4


def test_rank_of_label_examples():
    assert rank_of_label([0.1, 0.9, 0.5], 2) == 2
    assert rank_of_label([0.1, 0.9, 0.5], 1) == 1
    with pytest.raises(ValueError):
        rank_of_label([0.1, 0.9, 0.5], 4)


def test_rank_ties_lower_index_first():
    # exhaustive over all 0/1 logit patterns of length 4
    for bits in range(16):
        logits = np.array([(bits >> i) & 1 for i in range(4)], dtype=float)
        expected = sorted(range(4), key=lambda i: (-logits[i], i))
        assert [rank_of_label(logits, k) for k in range(1, 5)] == expected
        assert rank_labels(logits[None], 2)[0] == expected[1]


def test_rank_bijection_for_distinct_logits(rng):
    for _ in range(20):
        logits = rng.normal(size=10)
        assert sorted(rank_of_label(logits, k) for k in range(1, 11)) == list(range(10))


def _toy_data(rng, n=100):
    x = rng.uniform(size=(n, 1, 8, 8)).astype(np.float32)
    y = (x[:, 0, :4].mean(axis=(1, 2)) > x[:, 0, 4:].mean(axis=(1, 2))).astype(np.int64)
    return x, y


def test_train_one_epoch_reports_accuracy(rng):
    x, y = _toy_data(rng)
    m = build("vgg", 2, seed=0)
    rep = train(m, x, y, epochs=1, lr=0.01, batch=32, seed=0)
    assert len(rep.train_acc) == 1 and 0.0 <= rep.train_acc[0] <= 1.0
    assert m.meta["epochs"] == 1


def test_train_zero_lr_leaves_parameters(rng):
    x, y = _toy_data(rng, 40)
    m = build("res", 2, seed=0)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, x, y, epochs=1, lr=0.0, batch=20, seed=0, weight_decay=0.0)
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("lr", [1e12, 1e30])
def test_train_divergence_aborts(lr, rng):
    x, y = _toy_data(rng, 40)
    m = build("vgg", 2, seed=0)
    with pytest.raises(TrainingDiverged):
        train(m, x, y, epochs=2, lr=lr, batch=20)


def test_train_rejects_bad_labels(rng):
    x, _ = _toy_data(rng, 10)
    with pytest.raises(ValueError):
        train(build("vgg", 2), x, np.full(10, 5), epochs=1)


@pytest.mark.parametrize("name", ["vgg", "res", "inc"])
def test_checkpoint_round_trip(name, tmp_path, rng):
    m = build(name, 10, seed=1)
    x, y = rng.uniform(size=(16, 1, 32, 32)).astype(np.float32), rng.integers(0, 10, 16)
    train(m, x, y, epochs=1, lr=0.01, batch=8)
    path = tmp_path / f"{name}.ckpt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    imgs = rng.uniform(size=(10, 1, 32, 32))
    assert np.max(np.abs(predict(m, imgs) - predict(loaded, imgs))) == 0
    assert loaded.meta["epochs"] == 1
    raw = path.read_bytes()
    assert raw[:8] == b"SAATCKPT" and int.from_bytes(raw[8:12], "little") == 1


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    m = build("vgg", 10)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_accuracy_range(tiny_models, images):
    acc = accuracy(tiny_models["vgg"], images, np.zeros(len(images), dtype=np.int64))
    assert 0.0 <= acc <= 1.0
