import json

import numpy as np
import pytest
import torch

from arsivae.dataset_io import (
    Checkpoint,
    apply_parameters,
    capture_optimizer,
    load_checkpoint,
    load_dataset,
    load_image_dataset,
    module_parameters,
    parameter_names_of,
    restore_optimizer,
    save_checkpoint,
    save_dataset,
    write_json,
)
from arsivae.errors import CompatibilityError, MissingArtifactError, PersistenceError, ShapeMismatchError
from arsivae.objectives import betavae_loss
from arsivae.phantom_data import assign_labels, split_dataset
from arsivae.settings import ObjectiveConfig
from arsivae.vae_model import build_model


def test_empty_dataset_round_trip(tmp_path):
    save_dataset([], None, tmp_path / "empty")
    samples, split = load_dataset(tmp_path / "empty")
    assert samples == [] and split is None


def test_dataset_round_trip_is_bitwise(tmp_path, small_samples):
    samples = small_samples[:10]
    split = split_dataset(10, (0.8, 0.1, 0.1), seed=0)
    save_dataset(samples, split, tmp_path / "ds")
    loaded, loaded_split = load_dataset(tmp_path / "ds")
    assert len(loaded) == 10
    for a, b in zip(samples, loaded):
        assert a.image.tobytes() == b.image.tobytes()
        assert np.array_equal(a.region_mask, b.region_mask) and b.region_mask.dtype == np.uint8
        assert a.attributes == b.attributes
    assert np.array_equal(split.train, loaded_split.train)


def test_labels_and_meta_are_stored(tmp_path, small_samples):
    attrs = np.array([s.attributes.as_tuple() for s in small_samples], dtype=float)
    labels = {"multi": assign_labels(attrs, "multi")}
    save_dataset(small_samples, split_dataset(len(small_samples)), tmp_path / "ds", labels=labels, meta={"note": "x"})
    dataset, split, stored, meta = load_image_dataset(tmp_path / "ds")
    assert dataset.images.shape == (len(small_samples), 1, 16, 16)
    assert np.array_equal(stored["multi"], labels["multi"])
    assert meta["note"] == "x" and split is not None


def test_truncated_blob_is_a_shape_mismatch(tmp_path, small_samples):
    save_dataset(small_samples[:3], None, tmp_path / "ds")
    blob = tmp_path / "ds" / "blobs" / "images.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ShapeMismatchError):
        load_dataset(tmp_path / "ds")


def test_missing_blob_and_unknown_version(tmp_path, small_samples):
    save_dataset(small_samples[:3], None, tmp_path / "ds")
    manifest = tmp_path / "ds" / "manifest.json"
    data = json.loads(manifest.read_text())
    data["format_version"] = "2.0"
    manifest.write_text(json.dumps(data))
    with pytest.raises(PersistenceError, match="format_version"):
        load_dataset(tmp_path / "ds")

    data["format_version"] = "1.0"
    manifest.write_text(json.dumps(data))
    (tmp_path / "ds" / "blobs" / "attributes.f32").unlink()
    with pytest.raises(PersistenceError, match="missing blob"):
        load_dataset(tmp_path / "ds")


def test_missing_directory(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nope")


def test_checkpoint_round_trip_gives_identical_forward(tmp_path, tiny_model_config):
    model = build_model(tiny_model_config, seed=1)
    save_checkpoint(Checkpoint(kind="representation", config={}, parameters=module_parameters(model)), tmp_path / "ck")
    restored = build_model(tiny_model_config, seed=2)
    apply_parameters(restored, load_checkpoint(tmp_path / "ck", kind="representation").parameters)
    x = torch.rand(3, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(model.encode(x).mu, restored.encode(x).mu)
        assert torch.equal(model.decode(model.encode(x).mu), restored.decode(restored.encode(x).mu))


def test_missing_parameter_is_incompatible(tiny_model_config):
    model = build_model(tiny_model_config)
    params = module_parameters(model)
    params.pop("dec.fc.bias")
    with pytest.raises(CompatibilityError, match="dec.fc.bias"):
        apply_parameters(model, params)


def test_wrong_checkpoint_kind(tmp_path, tiny_model_config):
    model = build_model(tiny_model_config)
    save_checkpoint(Checkpoint(kind="classifier", config={}, parameters=module_parameters(model)), tmp_path / "ck")
    with pytest.raises(CompatibilityError):
        load_checkpoint(tmp_path / "ck", kind="representation")


def test_optimizer_state_round_trip_resumes_identically(tmp_path, tiny_model_config):
    cfg = ObjectiveConfig(method="beta-vae")
    x = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(3))

    def step(model, opt, seed):
        opt.zero_grad()
        loss = betavae_loss(x, model, cfg, torch.Generator().manual_seed(seed))
        loss.total.backward()
        opt.step()
        return loss.total.item()

    model = build_model(tiny_model_config, seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    names = parameter_names_of([("", model)])
    step(model, opt, 1)
    ckpt = Checkpoint(
        kind="representation",
        config={},
        parameters=module_parameters(model),
        training_state={"joint": capture_optimizer(opt, names)},
    )
    save_checkpoint(ckpt, tmp_path / "ck")
    expected = step(model, opt, 2)

    loaded = load_checkpoint(tmp_path / "ck")
    resumed = build_model(tiny_model_config, seed=9)
    apply_parameters(resumed, loaded.parameters)
    resumed_opt = torch.optim.Adam(resumed.parameters(), lr=1e-2)
    restore_optimizer(resumed_opt, loaded.training_state["joint"], parameter_names_of([("", resumed)]))
    assert loaded.training_state["joint"].step == 1
    assert step(resumed, resumed_opt, 2) == expected
    for a, b in zip(model.parameters(), resumed.parameters()):
        assert torch.equal(a, b)


def test_missing_optimizer_moment_is_incompatible(tmp_path, tiny_model_config):
    model = build_model(tiny_model_config, seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    model.enc["mu"].weight.sum().backward()
    opt.step()
    ckpt = Checkpoint(
        kind="representation",
        config={},
        parameters=module_parameters(model),
        training_state={"joint": capture_optimizer(opt, parameter_names_of([("", model)]))},
    )
    save_checkpoint(ckpt, tmp_path / "ck")
    manifest = tmp_path / "ck" / "manifest.json"
    data = json.loads(manifest.read_text())
    data["tensors"] = [e for e in data["tensors"] if e["name"] != "optim.joint.enc.mu.weight.exp_avg_sq"]
    manifest.write_text(json.dumps(data))
    with pytest.raises(CompatibilityError, match="optim.joint.enc.mu.weight.exp_avg_sq"):
        load_checkpoint(tmp_path / "ck")

def test_write_json_uses_string_sentinels(tmp_path):
    path = write_json(tmp_path / "r.json", {"b": float("inf"), "a": float("nan"), "c": np.float32(0.5)})
    text = path.read_text()
    assert json.loads(text) == {"a": "nan", "b": "inf", "c": 0.5}
    assert text.index('"a"') < text.index('"b"')
