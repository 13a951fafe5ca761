import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiopt.data import synthetic_dataset
from spiopt.encoder import BINARY, GRAY, measure
from spiopt.evaluation import accuracy
from spiopt.nn import ParameterSet, Tensor, serialize
from spiopt.pipeline import (
    Checkpoint,
    PipelineError,
    PixelStats,
    RateSelection,
    SensingModel,
    TrainConfig,
    TrainingError,
    derive_rng,
    finetune_decoder,
    fit,
    measurement_stats,
    pattern_count_for_rate,
    random_selection,
    select_for_rate,
    train_joint,
    weight_band_selection,
)

SMALL = dict(batch_size=50, hidden=32, channels=8, learning_rate=3e-3)


@pytest.fixture(scope="module")
def synth():
    return synthetic_dataset(0, 400)


@pytest.fixture(scope="module")
def ckpt(synth):
    return train_joint(TrainConfig(epochs=2, fine_tune_epochs=2, **SMALL), synth)


def test_pattern_counts():
    assert pattern_count_for_rate(0.1, 784) == 78
    assert pattern_count_for_rate(1.0, 784) == 784
    assert pattern_count_for_rate(0.026, 784) == 20
    assert pattern_count_for_rate(0.001, 784) == 1
    assert pattern_count_for_rate(0.3, 10) == 3
    assert TrainConfig(stage_one_rate=0.1).pattern_count == 78
    assert TrainConfig(patterns=100).pattern_count == 100


def test_config_validation():
    for bad in (dict(stage_one_rate=0.0), dict(stage_one_rate=1.5), dict(task="segment"), dict(batch_size=0), dict(learning_rate=0.0), dict(epochs=-1)):
        with pytest.raises(PipelineError):
            TrainConfig(**bad)


def test_zero_epochs_is_initialization(synth):
    cfg = TrainConfig(epochs=0, **SMALL)
    ck = train_joint(cfg, synth)
    init = derive_rng(cfg.seed, "init").uniform(0.0, 1.0, size=(784, 784))
    assert np.array_equal(ck.gray.patterns, init)
    assert ck.gray.domain == GRAY and ck.binary.domain == BINARY
    assert ck.history == []
    assert sorted(ck.ranking.permutation.tolist()) == list(range(784))


def test_joint_training_is_deterministic(synth, ckpt):
    again = train_joint(ckpt.config, synth)
    assert serialize.dumps(again.arrays()) == serialize.dumps(ckpt.arrays())
    assert again.ranking.to_csv() == ckpt.ranking.to_csv()


def test_loss_decreases_on_synthetic(synth):
    ck = train_joint(TrainConfig(epochs=5, **SMALL), synth)
    assert ck.history[-1] < ck.history[0]


def test_bank_stays_in_unit_interval(ckpt):
    p = ckpt.gray.patterns
    assert p.min() >= 0.0 and p.max() <= 1.0
    assert set(np.unique(ckpt.binary.patterns)) <= {0.0, 1.0}


def test_measurement_stats_match_empirical(synth, ckpt):
    x = synth.flat
    y = measure(ckpt.binary, x)
    mean, std = measurement_stats(ckpt.binary.patterns, PixelStats.of(x))
    np.testing.assert_allclose(mean, y.mean(axis=0), rtol=1e-10)
    np.testing.assert_allclose(std - 1e-6, y.std(axis=0), rtol=1e-8, atol=1e-9)
    assert np.array_equal(ckpt.norm["binary_mean"], mean)


def test_non_finite_loss_aborts_with_position():
    params = ParameterSet()
    params.add("w", np.zeros(2))
    with pytest.raises(TrainingError, match="epoch 0 batch 0"):
        fit(params, lambda idx: Tensor(np.array(np.nan)), 10, 1, 5, 1e-3, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_selection_nesting(ckpt, a, b):
    lo, hi = sorted((a, b))
    small, big = select_for_rate(ckpt, lo), select_for_rate(ckpt, hi)
    assert np.array_equal(big.indices[: small.k], small.indices)
    assert np.array_equal(small.scale, ckpt.scores[small.indices])


def test_selection_is_top_of_ranking(ckpt):
    sel = select_for_rate(ckpt, 0.1)
    assert sel.k == 78
    assert np.array_equal(sel.indices, ckpt.ranking.permutation[:78])
    assert np.all(np.diff(sel.scale) <= 0)
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(PipelineError):
            select_for_rate(ckpt, bad)


def test_absolute_rate_selection_refuses_too_many(synth):
    ck = train_joint(TrainConfig(epochs=0, patterns=50, **SMALL), synth)
    assert select_for_rate(ck, 0.05, total=784).k == 39
    with pytest.raises(PipelineError):
        select_for_rate(ck, 0.1, total=784)


def test_weight_bands(synth):
    ck = train_joint(TrainConfig(epochs=0, patterns=100, **SMALL), synth)
    bands = [weight_band_selection(ck, s) for s in (0, 20, 40, 60, 80)]
    assert np.array_equal(bands[0].indices, ck.ranking.permutation[:20])
    allidx = np.concatenate([b.indices for b in bands])
    assert sorted(allidx.tolist()) == list(range(100))
    assert all(b.k == 20 and b.rate == 20 / 784 for b in bands)
    assert [b.label for b in bands] == ["band1", "band21", "band41", "band61", "band81"]
    rnd = random_selection(ck, 20, 0)
    assert len(set(rnd.indices.tolist())) == 20
    with pytest.raises(PipelineError):
        weight_band_selection(ck, 90)


def test_finetune_zero_epochs_keeps_deep_layers(synth, ckpt):
    model = finetune_decoder(ckpt, select_for_rate(ckpt, 0.1), synth, epochs=0)
    for name in ("fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"):
        assert np.array_equal(model.decoder[name], ckpt.decoder[name])
    assert model.decoder["fc1.weight"].shape == (32, 78)


def test_finetune_freezes_encoder_and_scores(synth, ckpt):
    before = serialize.dumps(ckpt.arrays())
    sel = select_for_rate(ckpt, 0.1)
    model = finetune_decoder(ckpt, sel, synth)
    assert serialize.dumps(ckpt.arrays()) == before
    assert np.array_equal(model.bank.patterns, ckpt.binary.patterns[sel.indices])
    assert np.array_equal(model.scale, ckpt.scores[sel.indices])
    assert np.array_equal(model.mean, ckpt.norm["binary_mean"][sel.indices])
    assert not any(k.startswith(("encoder", "head")) for k in model.decoder)


def test_finetune_rejects_foreign_selection(synth, ckpt):
    sel = select_for_rate(ckpt, 0.1)
    with pytest.raises(PipelineError):
        finetune_decoder(ckpt, RateSelection(0.1, 78, sel.indices, sel.scale * 2), synth)
    with pytest.raises(PipelineError):
        finetune_decoder(ckpt, RateSelection(0.1, 2, np.array([0, 0]), ckpt.scores[[0, 0]]), synth)
    with pytest.raises(PipelineError):
        finetune_decoder(ckpt, RateSelection(0.1, 1, np.array([9999]), np.ones(1)), synth)


def test_more_measurements_help_on_synthetic(synth):
    ck = train_joint(TrainConfig(epochs=3, fine_tune_epochs=8, **SMALL), synth)
    test = synthetic_dataset(1, 200, "test")
    acc = {r: accuracy(finetune_decoder(ck, select_for_rate(ck, r), synth).predict(test.images), test.labels) for r in (0.01, 0.1)}
    assert acc[0.1] > acc[0.01]


def test_checkpoint_round_trip(tmp_path, ckpt):
    ckpt.save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck")
    assert serialize.dumps(back.arrays()) == serialize.dumps(ckpt.arrays())
    assert back.config == ckpt.config
    assert (tmp_path / "ck" / "ranking.csv").read_text() == ckpt.ranking.to_csv()
    with pytest.raises(FileExistsError):
        ckpt.save(tmp_path / "ck")
    ckpt.save(tmp_path / "ck", force=True)
    manifest = (tmp_path / "ck" / "manifest.json").read_text()
    assert ckpt.config.hash() in manifest


def test_sensing_model_round_trip(tmp_path, synth, ckpt):
    model = finetune_decoder(ckpt, select_for_rate(ckpt, 0.05), synth, epochs=1)
    model.save(tmp_path / "m")
    back = SensingModel.load(tmp_path / "m")
    x = synth.images[:20]
    assert np.array_equal(back.predict(x), model.predict(x))
    with pytest.raises(PipelineError):
        Checkpoint.load(tmp_path / "m")
