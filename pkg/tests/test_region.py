import numpy as np
import pytest

from helpers import gradient_check
from patchwork.dataset import SyntheticSpec, generate_synthetic
from patchwork.errors import ConfigError, DimensionError
from patchwork.grid import cells_in_rect, make_grid
from patchwork.nn.functional import cross_entropy_batch
from patchwork.region import (RegionClassifierModel, RegionTrainConfig, forward_with_region, predict_all_patches,
                              sample_training_patch, train_region_classifier)

GRID = make_grid(32, 8, 5)


@pytest.fixture(scope="module")
def synth():
    spec = SyntheticSpec(image_size=32, noise_std=0.03)
    return generate_synthetic(spec, 40, seed=11), generate_synthetic(spec, 15, seed=12)


@pytest.fixture(scope="module")
def trained(synth):
    train, _ = synth
    cfg = RegionTrainConfig(epochs=25, batch_size=64, patches_per_image=4, step_epochs=20, seed=0)
    return train_region_classifier(train.images, train.manifest.column("confounder"), GRID, cfg, "confounder")


def test_index_sampling_uniform():
    rng = np.random.default_rng(0)
    img = np.zeros((1, 32, 32), np.float32)
    counts = np.zeros(25)
    for _ in range(100_000):
        _, i = sample_training_patch(img, GRID, rng)
        counts[i] += 1
    expected = 100_000 / 25
    sigma = np.sqrt(100_000 * (1 / 25) * (24 / 25))
    assert np.all(np.abs(counts - expected) < 5 * sigma)


def test_single_position_always_zero():
    g = make_grid(16, 16, 1)
    rng = np.random.default_rng(1)
    assert {sample_training_patch(np.zeros((1, 16, 16)), g, rng)[1] for _ in range(50)} == {0}


def test_sampling_deterministic():
    seq = lambda: [sample_training_patch(np.zeros((1, 32, 32)), GRID, np.random.default_rng(5))[1]  # noqa: E731
                   for _ in range(3)]
    assert seq() == seq()


def test_forward_shapes_and_errors():
    m = RegionClassifierModel.init(GRID, 1, 2, "a", np.random.default_rng(0))
    out = m.forward(np.random.default_rng(1).random((3, 1, 8, 8)), [0, 5, 24])
    assert out.shape == (3, 2) and np.all(np.isfinite(out))
    with pytest.raises(IndexError):
        forward_with_region(m, np.zeros((1, 8, 8)), 25)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((1, 1, 7, 7)), [0])
    with pytest.raises(ConfigError):
        RegionClassifierModel.init(make_grid(30, 6, 5), 1, 2, "a", np.random.default_rng(0))


def test_zero_embedding_makes_index_irrelevant():
    m = RegionClassifierModel.init(GRID, 1, 2, "a", np.random.default_rng(0))
    m.embedding.data[...] = 0
    patch = np.random.default_rng(2).random((1, 8, 8))
    np.testing.assert_array_equal(forward_with_region(m, patch, 0), forward_with_region(m, patch, 17))


def test_embedding_is_live(trained):
    model, _ = trained
    patch = np.full((1, 8, 8), 0.5, np.float32)
    assert not np.allclose(forward_with_region(model, patch, 0), forward_with_region(model, patch, 24))


def test_region_gradients_including_embedding():
    rng = np.random.default_rng(3)
    m = RegionClassifierModel.init(make_grid(24, 16, 3), 1, 2, "a", rng, embed_dim=2)
    m.astype(np.float64)
    patches = rng.random((2, 1, 16, 16))
    idx = np.array([1, 7])
    y = np.array([0, 1])
    params = m.parameters()

    def loss_and_grad():
        _, d = cross_entropy_batch(m.forward(patches, idx, train=True), y, 0.1)
        for p in params.values():
            p.zero_grad()
        m.backward(d)

    worst = gradient_check(loss_and_grad, lambda: cross_entropy_batch(m.forward(patches, idx, True), y, 0.1)[0],
                           params, m.cnn, rng, max_coords=48)
    assert max(worst.values()) <= 1e-3, worst


def test_single_class_rejected():
    with pytest.raises(ConfigError):
        train_region_classifier(np.zeros((4, 1, 32, 32)), [1, 1, 1, 1], GRID, RegionTrainConfig(epochs=1))


def test_zero_epochs_gives_init(synth):
    train, held = synth
    model, log = train_region_classifier(train.images, train.manifest.column("confounder"), GRID,
                                         RegionTrainConfig(epochs=0), "confounder")
    assert log.epochs == []
    logits = predict_all_patches(model, held.images)
    assert np.all(np.isfinite(logits))


def test_training_learns_region(trained, synth):
    model, log = trained
    _, held = synth
    losses = log.losses()
    assert np.all(np.isfinite(losses)) and losses[-1] < losses[0]
    logits = predict_all_patches(model, held.images)
    labels = held.manifest.column("confounder")
    acc = (logits.argmax(axis=2) == labels[:, None]).mean(axis=0).reshape(5, 5)
    inside = cells_in_rect(GRID, held.region)
    # the square sits at a random spot inside the region, so single cells only see it partially;
    # the best region cell must still be reliable and the far corner near chance
    assert acc[inside].max() >= 0.9
    assert acc[4, 4] < 0.75
    assert acc[inside].mean() > acc[~inside].mean() + 0.15


def test_checkpoint_roundtrip_bit_exact(trained, synth, tmp_path):
    model, _ = trained
    _, held = synth
    path = tmp_path / "m.pwck"
    model.save(path)
    loaded = RegionClassifierModel.load(path)
    a = predict_all_patches(model, held.images)
    b = predict_all_patches(loaded, held.images)
    np.testing.assert_array_equal(a, b)
    assert loaded.digest() == model.digest()
    assert loaded.grid == model.grid and loaded.attribute_name == "confounder"


def test_same_seed_same_digest(synth):
    train, _ = synth
    cfg = RegionTrainConfig(epochs=2, batch_size=64, seed=4)
    a, _ = train_region_classifier(train.images, train.manifest.column("confounder"), GRID, cfg, "c")
    b, _ = train_region_classifier(train.images, train.manifest.column("confounder"), GRID, cfg, "c")
    assert a.digest() == b.digest()
