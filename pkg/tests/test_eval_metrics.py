import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from arsivae.errors import ContractError
from arsivae.eval_metrics import (
    MetricsReport,
    disentanglement_report,
    equal_frequency_bins,
    interpretability,
    latent_traversal,
    modularity,
    psnr,
    psnr_per_image,
    reconstruction_report,
    sap,
    scc,
    ssim,
    ssim_per_image,
)
from arsivae.settings import ModelConfig
from arsivae.vae_model import build_model


@pytest.fixture
def model16():
    return build_model(ModelConfig(latent_dim=4, channels=[2, 2], image_size=16), seed=1)


# ---------------------------------------------------------------------------
# Image quality


def test_psnr_examples():
    x = np.zeros((8, 8))
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    assert psnr(x, x) == float("inf")
    assert psnr(x, x + 0.1, data_range=2.0) == pytest.approx(20.0 + 20 * np.log10(2.0))
    with pytest.raises(ContractError):
        psnr(x, np.zeros((8, 9)))


def test_psnr_per_image_on_channel_batches():
    x = np.zeros((3, 1, 8, 8))
    y = x.copy()
    y[1] += 0.1
    y[2] += 0.01
    np.testing.assert_allclose(psnr_per_image(x, y), [np.inf, 20.0, 40.0])


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(2, 24, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert ssim(x, y) < 1.0


def test_ssim_of_constant_images_matches_the_closed_form():
    a, b = 0.2, 0.6
    c1 = (0.01 * 1.0) ** 2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, rel=1e-9)


def test_ssim_is_negative_for_inverted_checkerboard():
    x = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)
    assert ssim(x, 1.0 - x) < 0.0


def test_ssim_window_contracts():
    with pytest.raises(ContractError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ContractError):
        ssim(np.zeros((16, 16)), np.zeros((16, 16)), window=4)
    assert ssim_per_image(np.ones((2, 1, 16, 16)), np.ones((2, 1, 16, 16))).shape == (2,)


def test_reconstruction_report(model16):
    images = np.random.default_rng(1).uniform(size=(6, 1, 16, 16)).astype(np.float32)
    report = reconstruction_report(model16, images)
    assert set(report.scalars) == {"psnr_mean", "psnr_std", "ssim_mean", "ssim_std"}
    assert report.scalars["ssim_mean"] <= 1.0
    assert np.isfinite(report.scalars["psnr_mean"])
    assert "lpips" in report.unavailable
    assert report.diagnostics["n_images"] == 6


# ---------------------------------------------------------------------------
# Disentanglement


def test_scc_is_rank_based_and_sign_free():
    a = np.linspace(1, 10, 12)
    latents = np.column_stack([np.exp(a), -a, np.zeros(12)])
    attrs = np.column_stack([a, a, a])
    mean, per = scc(latents, attrs, [0, 1, 2])
    assert per == pytest.approx([1.0, 1.0, 0.0])
    assert mean == pytest.approx(2.0 / 3.0)


def test_oracle_encoder_scores_near_one(oracle_latents):
    latents, attrs = oracle_latents
    assert interpretability(latents, attrs)[0] > 0.99
    assert sap(latents, attrs)[0] > 0.98
    assert scc(latents, attrs, [0, 1, 2])[0] > 0.99
    score, per_dim, mi = modularity(latents, attrs)
    assert score > 0.95
    assert mi.shape == (8, 3)
    assert np.isfinite(per_dim[:3]).all()


def test_sap_needs_two_dims():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        sap(rng.normal(size=(20, 1)), rng.normal(size=(20, 2)))


def test_interpretability_needs_ten_rows():
    with pytest.raises(ContractError):
        interpretability(np.zeros((9, 2)), np.zeros((9, 1)))


def test_modularity_of_a_dim_shared_by_two_identical_attributes_is_zero():
    a = np.random.default_rng(2).normal(size=400)
    score, per_dim, _ = modularity(a[:, None], np.column_stack([a, a]), n_bins=10)
    assert per_dim[0] == pytest.approx(0.0, abs=1e-12)
    assert score == pytest.approx(0.0, abs=1e-12)


def test_modularity_single_attribute_and_uninformative_latents():
    rng = np.random.default_rng(3)
    a = rng.normal(size=500)
    assert modularity(np.column_stack([a, a**3]), a[:, None], n_bins=10)[0] == 1.0

    score, per_dim, mi = modularity(rng.normal(size=(2000, 3)), rng.normal(size=(2000, 2)))
    assert score == 0.0
    assert np.isnan(per_dim).all()
    assert (mi == 0).all()


def test_equal_frequency_bins():
    assert equal_frequency_bins(np.arange(10.0)[::-1], 5).tolist() == [4, 4, 3, 3, 2, 2, 1, 1, 0, 0]
    assert np.unique(equal_frequency_bins(np.zeros(12), 4)).size == 1
    tied = equal_frequency_bins(np.array([3.0, 1.0, 3.0, 2.0, 3.0, 1.0]), 3)
    assert tied[0] == tied[2] == tied[4]
    assert tied[1] == tied[5] == 0


def test_disentanglement_report_writes_json_and_csv(oracle_latents, tmp_path):
    latents, attrs = oracle_latents
    report = disentanglement_report(latents[:500], attrs[:500], [0, 1, 2], n_bins=10)
    assert set(report.scalars) == {"interpretability", "scc", "sap", "modularity"}
    assert report.per_attribute["myo_area"]["dim"] == 1
    json_path, csv_path = report.write(tmp_path)

    payload = json.loads(json_path.read_text())
    assert len(payload["diagnostics"]["r2_matrix"]) == 8
    frame = pd.read_csv(csv_path)
    assert len(frame) == 1
    assert list(frame.columns) == sorted(report.scalars)


def test_metrics_report_merge_keeps_both_sides():
    left = MetricsReport(scalars={"psnr_mean": 30.0}, unavailable={"lpips": "n/a"})
    right = MetricsReport(scalars={"sap": 0.5}, per_attribute={"lv_area": {"sap": 0.5}})
    merged = left.merge(right)
    assert merged.scalars == {"psnr_mean": 30.0, "sap": 0.5}
    assert merged.per_attribute == {"lv_area": {"sap": 0.5}}
    assert merged.unavailable == {"lpips": "n/a"}
    assert left.scalars == {"psnr_mean": 30.0}


# ---------------------------------------------------------------------------
# Traversal


def test_zero_span_traversal_repeats_the_center(tiny_model_config):
    model = build_model(tiny_model_config, seed=2)
    result = latent_traversal(model, dim=1, center=np.array([0.1, 0.2, 0.3, 0.4]), span=0.0, steps=5)
    assert result.images.shape == (5, 8, 8)
    for frame in result.images[1:]:
        np.testing.assert_allclose(frame, result.images[0], atol=1e-7)
    np.testing.assert_allclose(result.values, 0.2)


def test_two_step_traversal_hits_both_ends(tiny_model_config):
    model = build_model(tiny_model_config, seed=2)
    result = latent_traversal(model, dim=0, center=np.zeros(4), span=3.0, steps=2)
    assert result.values.tolist() == [-3.0, 3.0]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"dim": 4},
        {"dim": -1},
        {"steps": 1},
        {"span": -0.5},
        {"center": np.zeros(3)},
    ],
)
def test_traversal_contracts(tiny_model_config, kwargs):
    model = build_model(tiny_model_config)
    args = {"dim": 0, "center": np.zeros(4), "span": 1.0, "steps": 4, **kwargs}
    with pytest.raises(ContractError):
        latent_traversal(model, **args)


def test_traversal_writes_strip_and_readout(tiny_model_config, tmp_path):
    model = build_model(tiny_model_config, seed=2)
    result = latent_traversal(model, 2, np.zeros(4), 2.0, 6, intensity_levels=(0.0, 0.3, 0.6, 0.9))
    png, csv = result.write(tmp_path)
    with Image.open(png) as strip:
        assert strip.size == (48, 8)
    readout = pd.read_csv(csv)
    assert list(readout.columns) == ["step", "value", "lv_area", "myo_area", "rv_area"]
    assert (readout[["lv_area", "myo_area", "rv_area"]].sum(axis=1) <= 64).all()


def test_independent_latents_score_near_zero():
    rng = np.random.default_rng(9)
    latents, attrs = rng.normal(size=(1000, 4)), rng.normal(size=(1000, 3))
    assert interpretability(latents, attrs)[0] < 0.05
    assert scc(latents, attrs, [0, 1, 2])[0] < 0.1
    assert sap(latents, attrs)[0] < 0.05


def test_affine_dim_is_fully_interpretable_and_duplicates_kill_sap():
    rng = np.random.default_rng(10)
    a = rng.normal(size=200)
    noise = rng.normal(size=200)
    assert interpretability(np.column_stack([noise, 2 * a + 3]), a)[0] == pytest.approx(1.0)
    assert sap(np.column_stack([a, a, noise]), a)[0] == pytest.approx(0.0, abs=1e-12)


def test_metrics_are_invariant_to_row_permutation(oracle_latents):
    latents, attrs = oracle_latents
    latents, attrs = latents[:300], attrs[:300]
    order = np.random.default_rng(11).permutation(300)
    for metric in (interpretability, sap):
        assert metric(latents[order], attrs[order])[0] == pytest.approx(metric(latents, attrs)[0], abs=1e-12)
    assert scc(latents[order], attrs[order], [0, 1, 2])[0] == pytest.approx(scc(latents, attrs, [0, 1, 2])[0])


def test_modularity_is_invariant_to_row_permutation_with_tied_attributes():
    rng = np.random.default_rng(7)
    attrs = rng.integers(100, 104, size=(400, 3)).astype(np.float64)
    latents = np.column_stack([attrs[:, 0] + 0.3 * rng.normal(size=400), attrs[:, 1] + attrs[:, 2], rng.normal(size=400)])
    order = rng.permutation(400)
    score, per_dim, mi = modularity(latents, attrs, n_bins=10)
    score_p, per_dim_p, mi_p = modularity(latents[order], attrs[order], n_bins=10)
    assert score_p == pytest.approx(score, abs=1e-12)
    np.testing.assert_allclose(per_dim_p, per_dim, atol=1e-12)
    np.testing.assert_allclose(mi_p, mi, atol=1e-12)
