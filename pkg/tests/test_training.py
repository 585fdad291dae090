import csv
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixtable.data import DatasetBundle, FeatureSchema, MetaDataset, compute_weights, fit_normalization
from mixtable.embedding import Embedder, HashProvider
from mixtable.errors import ConfigError, DataError, NumericError
from mixtable.model import LaTable, ModelConfig, load_checkpoint, save_checkpoint
from mixtable.toy import table_a, table_b
from mixtable.training import (
    TrainConfig,
    _RowQueue,
    epoch_schedule,
    finetune,
    sampling_probabilities,
    steps_per_epoch,
    train,
    write_loss_curve,
    zero_shot_generate,
)

D_F = 8
SMALL = ModelConfig(d_h=16, d_f=D_F, n_layers=1, n_heads=2, T_train=20, T_infer=5, seed=1)
EMB = Embedder(HashProvider(D_F))


def small_meta(n_a=60, n_b=40):
    return MetaDataset((fit_normalization(table_a(n_a, seed=1)), fit_normalization(table_b(n_b, seed=2))))


def states_equal(a, b):
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr0=-1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(dataset_weighting="inverse")


def test_zero_lr_leaves_parameters_unchanged():
    init = LaTable(SMALL)
    res = train(small_meta(), SMALL, TrainConfig(epochs=3, lr0=0.0, batch_size=16), EMB, init_model=init)
    assert states_equal(res.model.store.state_dict(), init.store.state_dict())
    assert all(row["lr"] == 0.0 for row in res.curve)


def test_same_seed_same_curve_and_parameters():
    cfg = TrainConfig(epochs=3, lr0=1e-3, batch_size=16, seed=4)
    r1 = train(small_meta(), SMALL, cfg, EMB)
    r2 = train(small_meta(), SMALL, cfg, EMB)
    assert r1.curve == r2.curve
    assert states_equal(r1.model.store.state_dict(), r2.model.store.state_dict())
    r3 = train(small_meta(), SMALL, TrainConfig(epochs=3, lr0=1e-3, batch_size=16, seed=5), EMB)
    assert r3.curve != r1.curve


def test_epoch_is_ceil_rows_over_batch():
    assert steps_per_epoch(small_meta(60, 40), 32) == 4
    res = train(small_meta(60, 40), SMALL, TrainConfig(epochs=1, lr0=1e-3, batch_size=32), EMB)
    assert len(res.curve) == 1


def test_sampling_probabilities_follow_sqrt_sizes():
    meta = compute_weights(small_meta(400, 100))
    np.testing.assert_allclose(sampling_probabilities(meta), [2 / 3, 1 / 3])
    # mean per-row weight is one
    assert np.isclose(np.dot(meta.sizes(), meta.weights), meta.sizes().sum())


def test_dataset_draws_match_sqrt_sizes_within_three_sigma():
    sizes = np.array([900, 100, 400])
    p = np.sqrt(sizes) / np.sqrt(sizes).sum()
    draws = epoch_schedule(p, 10_000, np.random.default_rng(0))
    counts = np.bincount(draws, minlength=3)
    sigma = np.sqrt(10_000 * p * (1 - p))
    assert np.all(np.abs(counts - 10_000 * p) <= 3 * sigma)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.integers(1, 500), st.integers(0, 2**31))
def test_epoch_schedule_counts_are_floor_or_ceil(weights, steps, seed):
    p = np.array(weights) / np.sum(weights)
    counts = np.bincount(epoch_schedule(p, steps, np.random.default_rng(seed)), minlength=len(p))
    assert counts.sum() == steps
    assert np.all(counts >= np.floor(steps * p) - 1e-9) and np.all(counts <= np.ceil(steps * p) + 1e-9)


def test_row_queue_covers_each_row_once_per_pass():
    q = _RowQueue(10, np.random.default_rng(0))
    first = np.concatenate([q.take(3) for _ in range(3)])
    assert len(set(first.tolist())) == 9
    assert len(q.take(3)) == 3  # pass exhausted, reshuffled


def test_smoothed_loss_decreases_on_two_table_toy():
    # 5-epoch windows of the loss curve; each window mean must undercut the previous one
    meta = MetaDataset((fit_normalization(table_a(4000, seed=0)), fit_normalization(table_b(4000, seed=0))))
    cfg = ModelConfig(d_h=64, d_f=32, n_layers=2, n_heads=4, T_train=200, T_infer=50)
    res = train(meta, cfg, TrainConfig(epochs=50, lr0=1e-5, batch_size=128, seed=0), Embedder(HashProvider(32)))
    losses = np.array([row["train_loss"] for row in res.curve])
    windows = losses.reshape(10, 5).mean(axis=1)
    decreasing = np.diff(windows) < 0
    assert decreasing.mean() >= 0.9, windows


def test_validation_selects_best_epoch():
    meta = small_meta()
    val = MetaDataset((fit_normalization(table_a(30, seed=9)),))
    res = train(meta, SMALL, TrainConfig(epochs=4, lr0=3e-3, batch_size=16), EMB, val_meta=val)
    vals = [row["val_loss"] for row in res.curve]
    assert res.best_epoch == int(np.argmin(vals)) + 1


def test_nan_loss_aborts_with_diagnostic():
    bad = LaTable(SMALL)
    bad.store["g_in.2.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match=r"epoch 1, step 0 .*dataset .*lr"):
        train(small_meta(), SMALL, TrainConfig(epochs=1, lr0=1e-3, batch_size=16), EMB, init_model=bad)


def test_train_rejects_unnormalized_and_mismatched_dims():
    raw = MetaDataset((table_a(20),))
    with pytest.raises(DataError):
        train(raw, SMALL, TrainConfig(epochs=1), EMB)
    with pytest.raises(ConfigError):
        train(small_meta(), SMALL, TrainConfig(epochs=1), Embedder(HashProvider(D_F * 2)))


def test_loss_curve_csv(tmp_path):
    res = train(small_meta(), SMALL, TrainConfig(epochs=2, lr0=1e-3, batch_size=16), EMB)
    path = tmp_path / "curve.csv"
    write_loss_curve(res.curve, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lr"]
    assert [r[0] for r in rows[1:]] == ["1", "2"] and rows[1][2] == ""


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "pre.ltbl"
    res = train(small_meta(), SMALL, TrainConfig(epochs=2, lr0=1e-3, batch_size=16), EMB, checkpoint_path=path)
    return path, res.model


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_finetune_leaves_source_and_yields_loadable_checkpoint(pretrained, tmp_path):
    path, _ = pretrained
    before = _digest(path)
    target = fit_normalization(table_a(300, seed=5))
    out = tmp_path / "ft.ltbl"
    res = finetune(path, target, 100, TrainConfig(epochs=2, lr0=1e-3, batch_size=16), EMB, checkpoint_path=out)
    assert _digest(path) == before
    loaded, extra = load_checkpoint(out)
    assert extra["best_epoch"] == res.best_epoch


def test_finetune_does_not_touch_model_argument(pretrained):
    _, model = pretrained
    state = model.store.state_dict()
    finetune(model, fit_normalization(table_a(50, seed=5)), 20, TrainConfig(epochs=1, lr0=1e-2, batch_size=8), EMB)
    assert states_equal(model.store.state_dict(), state)


def test_finetune_on_all_rows_equals_training_from_checkpoint(pretrained):
    path, _ = pretrained
    target = fit_normalization(table_a(64, seed=6))
    cfg = TrainConfig(epochs=2, lr0=1e-3, batch_size=16, seed=2)
    ft = finetune(path, target, target.n_rows, cfg, EMB)
    direct = train(MetaDataset((target,)), SMALL, cfg, EMB, init_model=load_checkpoint(path)[0])
    assert ft.curve == direct.curve
    assert states_equal(ft.model.store.state_dict(), direct.model.store.state_dict())


def test_finetune_sample_count_errors(pretrained):
    path, _ = pretrained
    target = fit_normalization(table_a(30))
    for n in (0, -5, 31):
        with pytest.raises(DataError):
            finetune(path, target, n, TrainConfig(epochs=1), EMB)


def test_zero_shot_unknown_names_gives_valid_rows(pretrained):
    _, model = pretrained
    feats = (
        FeatureSchema("blorp", "numerical", mean=10.0, std=2.0),
        FeatureSchema("zink", "categorical", ("p", "q", "r", "s")),
    )
    out = zero_shot_generate(model, feats, "never seen", EMB, 40, seed=3)
    again = zero_shot_generate(model, feats, "never seen", EMB, 40, seed=3)
    assert out.n_rows == 40 and not out.normalized
    assert set(np.unique(out.columns[1])) <= {0, 1, 2, 3}
    assert np.all(np.isfinite(out.columns[0]))
    for x, y in zip(out.columns, again.columns):
        assert x.tobytes() == y.tobytes()


def test_zero_shot_requires_stats(pretrained):
    _, model = pretrained
    with pytest.raises(DataError, match="mean/std"):
        zero_shot_generate(model, (FeatureSchema("x", "numerical"),), "", EMB, 5)


def test_zero_shot_on_training_schema_matches_training_mean():
    a = fit_normalization(table_a(1000, seed=0))
    cfg = ModelConfig(d_h=32, d_f=16, n_layers=2, n_heads=4, T_train=100, T_infer=25)
    emb = Embedder(HashProvider(16))
    res = train(MetaDataset((a,)), cfg, TrainConfig(epochs=15, lr0=2e-3, batch_size=32), emb)
    out = zero_shot_generate(res.model, a.features, a.description, emb, 2000, seed=1)
    real = a.denormalized().columns[0]
    assert abs(out.columns[0].mean() - real.mean()) <= 0.2 * real.std()


def test_checkpoint_survives_config_round_trip(tmp_path):
    m = LaTable(SMALL)
    save_checkpoint(m, tmp_path / "m.ltbl", extra={"note": "x"})
    loaded, extra = load_checkpoint(tmp_path / "m.ltbl")
    assert loaded.config == SMALL and extra == {"note": "x"}
