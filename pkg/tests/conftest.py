import pytest
import torch

from face_tracer.config import ModelConfig, RunConfig, DataConfig, TrainConfig, EvalConfig
from face_tracer.data import SyntheticSpec, generate_synthetic
from face_tracer.training import init_params

"""
Shared fixtures: the desk-scale model configuration, a seeded network, and
small synthetic corpora written under pytest's tmp_path.
"""


@pytest.fixture
def desk_config():
    """Desk-scale model configuration (32 px, channels 16-128, 64-d vectors)."""
    return ModelConfig.desk_scale()


@pytest.fixture
def desk_network(desk_config):
    """A seed-42 desk-scale network."""
    return init_params(desk_config, seed=42)


@pytest.fixture
def random_images():
    """Factory for seeded N x 3 x R x R image batches in [0, 1]."""
    def make(n=2, resolution=32, seed=0, dtype=torch.float32):
        generator = torch.Generator().manual_seed(seed)
        return torch.rand(n, 3, resolution, resolution, generator=generator, dtype=dtype)
    return make


@pytest.fixture
def desk_run_config():
    """Run configuration for desk-scale training on a tiny corpus."""
    return RunConfig(
        seed=3,
        data=DataConfig(synthetic=SyntheticSpec(n_identities=4, frames_per_identity=4, resolution=32, seed=7)),
        model=ModelConfig.desk_scale(),
        train=TrainConfig(batch_size=4, epochs=2, checkpoint_every=1, log_every=1),
        eval=EvalConfig(grid=2, failure_cases=2, batch_size=4),
    )


@pytest.fixture
def tiny_corpus(tmp_path):
    """A 4 identities x 4 frames synthetic corpus at 32 px with a 25% test split."""
    spec = SyntheticSpec(n_identities=4, frames_per_identity=4, resolution=32, seed=7)
    return generate_synthetic(spec, tmp_path / "corpus", test_fraction=0.25)
