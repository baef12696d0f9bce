import numpy as np
import pytest

from tilefreq.codec import lowpass2d
from tilefreq.data import SynthConfig, site_coordinates, synth_generate
from tilefreq.losses import LossHyper, triplet
from tilefreq.lsh import LshParams, build, sample_triplets
from tilefreq.training import (
    Standardizer,
    Tile2VecConfig,
    TrainConfig,
    TrainConfigError,
    split_indices,
    train_classifier,
    train_probe,
    train_tile2vec,
)


@pytest.fixture(scope="module")
def clustered():
    ds = synth_generate(SynthConfig(numSites=800, numSpecies=20, numClusters=5, seed=0, testFraction=0.0))
    coords = site_coordinates(ds.records)
    ids = ds.labels.site_ids
    x = np.array([coords[int(s)] for s in ids])
    y = ds.labels.dense().astype(float)
    return x, y


def test_split_is_seeded_partition():
    tr, va = split_indices(100, 0.1, 3)
    assert len(va) == 10 and len(tr) == 90
    assert sorted(np.concatenate([tr, va])) == list(range(100))
    np.testing.assert_array_equal(split_indices(100, 0.1, 3)[1], va)


def test_split_empty_is_error():
    with pytest.raises(TrainConfigError):
        split_indices(3, 0.1, 0)


def test_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(val_fraction=0.0)
    with pytest.raises(TrainConfigError):
        TrainConfig(prediction_mode="argmax")


def test_zero_learning_rate_leaves_params(clustered):
    x, y = clustered
    from tilefreq.models import init_params

    cfg = TrainConfig(learning_rate=0.0, epochs=2)
    report = train_classifier(x, y, "linear", cfg)
    assert report.params == init_params("linear", {"in_features": 2, "num_classes": y.shape[1]}, cfg.seed)


def test_standardizer_uses_train_split_only(clustered):
    x, y = clustered
    report = train_classifier(x, y, "linear", TrainConfig(epochs=1, learning_rate=1.0))
    fitted = Standardizer.fit(x[report.train_idx])
    np.testing.assert_array_equal(report.scaler.mean, fitted.mean)
    np.testing.assert_array_equal(report.scaler.std, fitted.std)
    # validation features are transformed with the training statistics
    np.testing.assert_allclose(report.scaler(x[report.val_idx]), (x[report.val_idx] - fitted.mean) / fitted.std)
    assert not np.allclose(Standardizer.fit(x[report.val_idx]).mean, fitted.mean)


def test_training_deterministic(clustered):
    x, y = clustered
    cfg = TrainConfig(epochs=3, learning_rate=5.0, seed=2)
    a = train_classifier(x, y, "mlp256", cfg)
    b = train_classifier(x, y, "mlp256", cfg)
    assert a.train_loss == b.train_loss
    assert a.val_micro_f1 == b.val_micro_f1
    assert a.params == b.params


@pytest.mark.parametrize("loss,lr", [("bce", 2.0), ("asl", 5.0), ("hill", 5.0), ("sigmoidf1", 0.05)])
def test_training_loss_decreases(clustered, loss, lr):
    x, y = clustered
    cfg = TrainConfig(loss=LossHyper(name=loss), learning_rate=lr, epochs=5, geo_noise_mean=0.0)
    report = train_classifier(x, y, "mlp256", cfg)
    assert report.train_loss[4] < report.train_loss[0]


def test_best_epoch_params_returned(clustered, tmp_path):
    x, y = clustered
    report = train_classifier(x, y, "linear", TrainConfig(epochs=4, learning_rate=5.0))
    assert report.val_micro_f1[report.best_epoch - 1] == max(report.val_micro_f1)
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,trainLoss,valMicroF1" and len(lines) == 5


def test_bad_inputs():
    with pytest.raises(TrainConfigError):
        train_classifier(np.zeros((10, 2)), np.zeros((9, 3)), "linear", TrainConfig())


# ---------------------------------------------------------------- tile2vec


@pytest.fixture(scope="module")
def tiles():
    ds = synth_generate(SynthConfig(numSites=300, tileSize=16, channels=2, seed=1, testFraction=0.0))
    coords = site_coordinates(ds.records)
    blocks = {s: lowpass2d(ds.tiles[s], 8).coeffs for s in coords}
    index = build(coords, LshParams(50_000.0, 5, 0))
    return ds, blocks, index


def test_tile2vec_empty_triplets(tiles):
    _, blocks, _ = tiles
    with pytest.raises(TrainConfigError):
        train_tile2vec(blocks, [], Tile2VecConfig())


def test_tile2vec_zero_margin_identical_pair():
    za = np.ones((2, 4))
    loss, grads = triplet(za, za.copy(), za + 1.0, margin=0.0)
    assert loss == 0.0 and all(np.all(g == 0) for g in grads)


def test_tile2vec_separates_neighbors(tiles):
    ds, blocks, index = tiles
    trips = sample_triplets(index, blocks, 1500, max_dist=20_000.0, seed=0)
    cfg = Tile2VecConfig(learning_rate=0.01, epochs=3, latent=32, seed=0)
    result = train_tile2vec(blocks, trips[:1200], cfg)
    held = np.array(trips[1200:])
    emb = {s: e for s, e in zip(sorted(blocks), result.embed(np.stack([blocks[s] for s in sorted(blocks)])))}
    d_an = np.mean([np.linalg.norm(emb[a] - emb[n]) for a, n, _ in held])
    d_ad = np.mean([np.linalg.norm(emb[a] - emb[d]) for a, _, d in held])
    assert d_an < d_ad
    assert result.losses[-1] < result.losses[0]


def test_tile2vec_multiobjective_and_probe(tiles):
    ds, blocks, index = tiles
    trips = sample_triplets(index, blocks, 300, max_dist=20_000.0, seed=1)
    ids = sorted(blocks)
    dense = ds.labels.dense(np.array(ids)).astype(float)
    labels = dict(zip(ids, dense))
    cfg = Tile2VecConfig(learning_rate=0.01, epochs=1, latent=16, seed=0)
    result = train_tile2vec(blocks, trips, cfg, labels=labels)
    assert result.probe is not None
    report = train_probe(result, np.stack([blocks[s] for s in ids]), dense, TrainConfig(epochs=2, learning_rate=1.0))
    assert len(report.val_micro_f1) == 2
