import numpy as np
import pytest
import torch

from arsivae.phantom_data import ImageDataset, assign_labels, generate_phantom, split_dataset
from arsivae.settings import ModelConfig, PhantomSpec, TrainConfig


@pytest.fixture
def tiny_model_config():
    """8x8 images, D=4, 311 parameters; ELU keeps the objectives smooth for gradient checks."""
    return ModelConfig(latent_dim=4, channels=[2, 2], image_size=8, activation="elu")


@pytest.fixture
def small_spec():
    return PhantomSpec(
        image_size=16,
        lv_radius_range=(1.5, 2.5),
        myo_thickness_range=(1.0, 1.5),
        rv_scale_range=(0.5, 0.8),
        center_jitter=0.5,
        seed=3,
    )


@pytest.fixture
def small_samples(small_spec):
    return generate_phantom(small_spec, 40)


@pytest.fixture
def small_dataset(small_samples):
    dataset = ImageDataset.from_samples(small_samples)
    dataset.labels = assign_labels(dataset.attributes, "multi")
    return dataset


@pytest.fixture
def small_split(small_dataset):
    return split_dataset(len(small_dataset), (0.6, 0.2, 0.2), seed=1)


@pytest.fixture
def small_train_config():
    return TrainConfig(
        model=ModelConfig(latent_dim=4, channels=[4, 4], image_size=16),
        batch_size=8,
        epochs=1,
        seed=5,
        checkpoint_every=0,
    )


@pytest.fixture
def real_batch():
    gen = torch.Generator().manual_seed(11)
    return 0.1 + 0.8 * torch.rand(5, 1, 8, 8, generator=gen, dtype=torch.float64)


@pytest.fixture
def distinct_attrs():
    # distinct values per column so every off-diagonal sign is +-1
    rng = np.random.default_rng(4)
    return torch.as_tensor(np.stack([rng.permutation(5) for _ in range(3)], axis=1) + 0.5, dtype=torch.float64)


@pytest.fixture
def oracle_latents():
    """z[:, a] = standardized attribute a + small noise; the remaining dims are independent noise."""
    rng = np.random.default_rng(0)
    n, n_attrs, d = 2000, 3, 8
    attrs = rng.normal(size=(n, n_attrs)) * [3.0, 1.0, 10.0] + [50.0, 20.0, 80.0]
    standardized = (attrs - attrs.mean(0)) / attrs.std(0)
    latents = rng.normal(size=(n, d))
    latents[:, :n_attrs] = standardized + 0.01 * rng.normal(size=(n, n_attrs))
    return latents, attrs
