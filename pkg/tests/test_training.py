import numpy as np
import pandas as pd
import pytest
import torch

from arsivae import training
from arsivae.dataset_io import parameter_digest
from arsivae.errors import CompatibilityError, ConfigurationError, ContractError, DataError, NumericalError
from arsivae.latent_classifier import load_classifier, predict
from arsivae.phantom_data import ImageDataset
from arsivae.settings import ClassifierConfig, Method, ModelConfig
from arsivae.training import (
    TRAIN_LOG_CSV,
    VALIDATION_CSV,
    TrainLog,
    batch_indices,
    latest_checkpoint,
    load_representation,
    train_classifier,
    train_representation,
)


def _with_method(cfg, method, **objective):
    return cfg.model_copy(update={"objective": cfg.objective.model_copy(update={"method": Method(method), **objective})})


def test_batch_indices_cover_and_fold_trailing_singleton():
    rng = np.random.default_rng(0)
    batches = batch_indices(9, 4, rng)
    assert [len(b) for b in batches] == [4, 5]
    assert sorted(np.concatenate(batches).tolist()) == list(range(9))
    assert [len(b) for b in batch_indices(10, 4, rng)] == [4, 4, 2]
    with pytest.raises(DataError):
        batch_indices(1, 4, rng)


def test_train_log_rejects_non_increasing_steps():
    log = TrainLog()
    log.add_step({"step": 1, "total": 0.0})
    with pytest.raises(ContractError):
        log.add_step({"step": 1, "total": 0.0})


@pytest.mark.parametrize("method", ["beta-vae", "attri-vae", "sivae", "ar-sivae"])
def test_one_epoch_logs_one_row_per_batch(small_dataset, small_train_config, method):
    ckpt, log = train_representation(_with_method(small_train_config, method), small_dataset)
    frame = log.step_frame()
    assert len(frame) == 5
    assert frame["step"].tolist() == [1, 2, 3, 4, 5]
    assert np.isfinite(frame["total"]).all()
    wall_time = ckpt.provenance.pop("wall_time_s")
    assert ckpt.provenance == {"method": method, "seed": 5, "epoch": 1, "step": 5}
    assert wall_time >= 0.0
    if method in ("sivae", "ar-sivae"):
        assert set(ckpt.training_state) == {"encoder", "decoder"}
        assert "decoder_total" in frame.columns
    else:
        assert set(ckpt.training_state) == {"joint"}
    if method in ("attri-vae", "ar-sivae"):
        assert {"attr_reg_lv_area", "attr_reg_myo_area", "attr_reg_rv_area"} <= set(frame.columns)
        assert ckpt.extra["dim_assignment"] == [0, 1, 2]


def test_training_is_bit_reproducible(small_dataset, small_train_config):
    a, log_a = train_representation(small_train_config, small_dataset)
    b, log_b = train_representation(small_train_config, small_dataset)
    assert a.parameters.keys() == b.parameters.keys()
    for name in a.parameters:
        assert np.array_equal(a.parameters[name], b.parameters[name]), name
    pd.testing.assert_frame_equal(log_a.step_frame(), log_b.step_frame())


def test_adversarial_step_freezes_the_other_network(small_dataset, small_train_config, monkeypatch):
    seen = {}
    real_encoder, real_decoder = training.sivae_encoder_loss, training.sivae_decoder_loss

    def encoder_spy(x, fake_z, model, *args, **kwargs):
        seen.setdefault("encoder", []).append(
            (all(p.requires_grad for p in model.enc.parameters()), any(p.requires_grad for p in model.dec.parameters()))
        )
        return real_encoder(x, fake_z, model, *args, **kwargs)

    def decoder_spy(x, fake_z, model, *args, **kwargs):
        seen.setdefault("decoder", []).append(
            (any(p.requires_grad for p in model.enc.parameters()), all(p.requires_grad for p in model.dec.parameters()))
        )
        return real_decoder(x, fake_z, model, *args, **kwargs)

    monkeypatch.setattr(training, "sivae_encoder_loss", encoder_spy)
    monkeypatch.setattr(training, "sivae_decoder_loss", decoder_spy)
    train_representation(_with_method(small_train_config, "sivae"), small_dataset)
    assert seen["encoder"] == [(True, False)] * 5
    assert seen["decoder"] == [(False, True)] * 5


def test_run_directory_layout(small_dataset, small_split, small_train_config, tmp_path):
    cfg = small_train_config.model_copy(update={"epochs": 2, "checkpoint_every": 1})
    val = small_dataset.subset(small_split.val)
    ckpt, log = train_representation(cfg, small_dataset, val_dataset=val, out_dir=tmp_path)

    assert (tmp_path / "ckpt" / "epoch_1").is_dir() and (tmp_path / "ckpt" / "epoch_2").is_dir()
    assert latest_checkpoint(tmp_path) == tmp_path / "ckpt" / "epoch_2"
    assert len(pd.read_csv(tmp_path / TRAIN_LOG_CSV)) == 10
    validation = pd.read_csv(tmp_path / VALIDATION_CSV)
    assert validation["epoch"].tolist() == [1, 2]
    assert set(validation.columns) == {"epoch", "val_recon", "val_kl", "val_neg_elbo"}
    assert len(log.validation) == 2

    model, restored_cfg, loaded = load_representation(tmp_path)
    assert restored_cfg == cfg
    assert loaded.provenance["epoch"] == 2
    for name, value in model.state_dict().items():
        assert np.array_equal(value.numpy(), ckpt.parameters[name])


@pytest.mark.parametrize("method", ["beta-vae", "ar-sivae"])
def test_resume_continues_exactly_like_an_uninterrupted_run(small_dataset, small_train_config, tmp_path, method):
    cfg = _with_method(small_train_config, method).model_copy(update={"epochs": 2, "checkpoint_every": 1})
    full, full_log = train_representation(cfg, small_dataset, out_dir=tmp_path / "full")

    _, _, after_first = load_representation(tmp_path / "full" / "ckpt" / "epoch_1")
    resumed, resumed_log = train_representation(cfg, small_dataset, out_dir=tmp_path / "resumed", resume_from=after_first)

    pd.testing.assert_frame_equal(
        resumed_log.step_frame(), full_log.step_frame().iloc[5:].reset_index(drop=True), check_exact=True
    )
    assert resumed.provenance["step"] == full.provenance["step"] == 10
    assert resumed.provenance["epoch"] == 2
    assert resumed.provenance["wall_time_s"] >= after_first.provenance["wall_time_s"]
    for name in full.parameters:
        assert np.array_equal(resumed.parameters[name], full.parameters[name]), name
    assert not (tmp_path / "resumed" / "ckpt" / "epoch_1").exists()


def test_resume_rejects_a_different_run(small_dataset, small_train_config):
    cfg = small_train_config.model_copy(update={"epochs": 2})
    first, _ = train_representation(small_train_config, small_dataset)
    with pytest.raises(CompatibilityError, match="seed"):
        train_representation(cfg.model_copy(update={"seed": 6}), small_dataset, resume_from=first)
    with pytest.raises(CompatibilityError):
        train_representation(_with_method(cfg, "sivae"), small_dataset, resume_from=first)
    with pytest.raises(ConfigurationError, match="epoch 1"):
        train_representation(small_train_config, small_dataset, resume_from=first)


def test_thread_count_is_restored_after_training(small_dataset, small_train_config):
    before = torch.get_num_threads()
    train_representation(small_train_config.model_copy(update={"deterministic": True}), small_dataset)
    assert torch.get_num_threads() == before

def test_rerun_replaces_stale_logs(small_dataset, small_train_config, tmp_path):
    train_representation(small_train_config, small_dataset, out_dir=tmp_path)
    train_representation(small_train_config, small_dataset, out_dir=tmp_path)
    assert len(pd.read_csv(tmp_path / TRAIN_LOG_CSV)) == 5


def test_image_size_mismatch_is_a_configuration_error(small_dataset, small_train_config):
    cfg = small_train_config.model_copy(update={"model": ModelConfig(latent_dim=4, channels=[4], image_size=8)})
    with pytest.raises(ConfigurationError):
        train_representation(cfg, small_dataset)


def test_regularised_method_needs_attributes(small_dataset, small_train_config):
    bare = ImageDataset(images=small_dataset.images, attributes=np.zeros((len(small_dataset), 0)))
    with pytest.raises(DataError):
        train_representation(_with_method(small_train_config, "attri-vae"), bare)
    train_representation(_with_method(small_train_config, "beta-vae"), bare)


def test_numerical_failure_carries_step_diagnostics(small_dataset, small_train_config, monkeypatch):
    def exploding(*args, **kwargs):
        raise NumericalError("non-finite ELBO(x)", {"term": "ELBO(x)"})

    monkeypatch.setattr(training, "betavae_loss", exploding)
    with pytest.raises(NumericalError) as info:
        train_representation(_with_method(small_train_config, "beta-vae"), small_dataset)
    diagnostics = info.value.diagnostics
    assert diagnostics["step"] == 1 and diagnostics["epoch"] == 1
    assert diagnostics["method"] == "beta-vae"
    assert diagnostics["rss_mb"] > 0
    assert "enc.mu.weight" in diagnostics["parameter_norms"]


@pytest.fixture
def trained(small_dataset, small_train_config):
    ckpt, _ = train_representation(_with_method(small_train_config, "beta-vae"), small_dataset)
    return ckpt


def test_train_classifier_leaves_encoder_untouched(trained, small_dataset, small_split):
    cfg = ClassifierConfig(hidden_sizes=[8], epochs=3, batch_size=8, seed=2)
    clf_ckpt = train_classifier(trained, small_dataset, small_dataset.labels, cfg, small_split)
    encoder, _, _ = load_representation(trained)
    assert clf_ckpt.kind == "classifier"
    assert clf_ckpt.extra["encoder_digest"] == parameter_digest(encoder)
    assert 1 <= clf_ckpt.extra["best_epoch"] <= 3
    assert len(clf_ckpt.extra["history"]) == 3

    clf = load_classifier(clf_ckpt)
    probs = predict(clf, np.zeros((2, 4)))
    assert probs.shape == (2, 5)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_train_classifier_detects_encoder_mutation(trained, small_dataset, small_split, monkeypatch):
    real_means = training.latent_means

    def mutating(model, images):
        with training.torch.no_grad():
            next(model.parameters()).add_(1.0)
        return real_means(model, images)

    monkeypatch.setattr(training, "latent_means", mutating)
    with pytest.raises(ContractError):
        train_classifier(trained, small_dataset, small_dataset.labels, ClassifierConfig(epochs=1), small_split)


def test_train_classifier_label_checks(trained, small_dataset, small_split):
    pathology = np.full(len(small_dataset), 4)
    with pytest.raises(ConfigurationError):
        train_classifier(trained, small_dataset, pathology, ClassifierConfig(task="binary", epochs=1), small_split)
    with pytest.raises(DataError):
        train_classifier(trained, small_dataset, pathology[:-1], ClassifierConfig(epochs=1), small_split)
