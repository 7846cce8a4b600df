import numpy as np
import pytest
import torch

from arsivae.errors import ConfigurationError, ContractError
from arsivae.settings import ModelConfig, validate
from arsivae.vae_model import LatentStats, build_model, latent_means, reparameterize


@pytest.fixture
def model():
    return build_model(ModelConfig(latent_dim=6, channels=[4, 8], image_size=16), seed=0)


def test_encode_shapes_and_identical_rows(model):
    x = torch.rand(3, 1, 16, 16, generator=torch.Generator().manual_seed(0))
    x[2] = x[0]
    stats = model.encode(x)
    assert stats.mu.shape == (3, 6) and stats.logvar.shape == (3, 6)
    assert torch.equal(stats.mu[0], stats.mu[2])
    assert torch.isfinite(stats.logvar).all()


def test_zero_heads_give_standard_posterior(model):
    with torch.no_grad():
        for head in (model.enc["mu"], model.enc["logvar"]):
            head.weight.zero_()
            head.bias.zero_()
    stats = model.encode(torch.rand(4, 1, 16, 16))
    assert torch.count_nonzero(stats.mu) == 0 and torch.count_nonzero(stats.logvar) == 0


def test_encode_contract(model):
    with pytest.raises(ContractError):
        model.encode(torch.rand(2, 1, 8, 8))
    with pytest.raises(ContractError, match=r"\[0, 1\]"):
        model.encode(torch.full((1, 1, 16, 16), 1.5))


def test_decode_range_shape_and_determinism(model):
    z = torch.randn(5, 6, generator=torch.Generator().manual_seed(1)) * 3
    images = model.decode(z)
    assert images.shape == (5, 1, 16, 16)
    assert (images > 0).all() and (images < 1).all()
    assert torch.equal(images, model.decode(z))
    with pytest.raises(ContractError):
        model.decode(torch.zeros(5, 5))


def test_default_architecture_decodes_64px():
    model = build_model(ModelConfig(), seed=0)
    assert model.decode(torch.zeros(5, 16)).shape == (5, 1, 64, 64)
    assert "enc.stage3.weight" in model.parameter_names()


def test_reparameterize_examples():
    mu = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    z = reparameterize(LatentStats(mu=mu, logvar=torch.full_like(mu, -50.0)), torch.Generator().manual_seed(0))
    assert torch.allclose(z, mu, atol=1e-9, rtol=0)

    eps = torch.tensor([[0.5, -2.0]])
    zero = torch.zeros(1, 2)
    assert torch.equal(reparameterize(LatentStats(mu=zero, logvar=zero), eps=eps), eps)


def test_reparameterize_monte_carlo_mean():
    mu = torch.ones(100_000, 1, dtype=torch.float64)
    z = reparameterize(LatentStats(mu=mu, logvar=torch.zeros_like(mu)), torch.Generator().manual_seed(5))
    assert abs(z.mean().item() - 1.0) < 0.01


def test_sample_prior(model):
    a = model.sample_prior(1, torch.Generator().manual_seed(7))
    b = model.sample_prior(1, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)
    draws = model.sample_prior(100_000, torch.Generator().manual_seed(8)).double()
    cov = torch.cov(draws.T)
    assert torch.allclose(cov, torch.eye(6, dtype=torch.float64), atol=0.02)
    with pytest.raises(ContractError):
        model.sample_prior(0)


def test_build_model_is_seeded_and_leaves_global_rng_alone():
    cfg = ModelConfig(latent_dim=4, channels=[2, 2], image_size=8)
    state = torch.random.get_rng_state()
    a, b = build_model(cfg, seed=3), build_model(cfg, seed=3)
    assert torch.equal(torch.random.get_rng_state(), state)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_model_config_invariants():
    with pytest.raises(ConfigurationError):
        validate(ModelConfig, {"latent_dim": 4, "regularized_dims": [0, 0, 1]})
    with pytest.raises(ConfigurationError):
        validate(ModelConfig, {"latent_dim": 2, "regularized_dims": [0, 5]})
    with pytest.raises(ConfigurationError):
        ModelConfig(latent_dim=2).assignment(3)
    assert ModelConfig(latent_dim=5, regularized_dims=[4, 2, 0]).assignment(3) == [4, 2, 0]


def test_latent_means_matches_encode(model):
    images = np.random.default_rng(0).random((7, 1, 16, 16)).astype(np.float32)
    mu = latent_means(model, images, batch_size=3)
    with torch.no_grad():
        expected = model.encode(torch.as_tensor(images)).mu.numpy()
    assert mu.shape == (7, 6)
    np.testing.assert_allclose(mu, expected, rtol=1e-6, atol=1e-6)
