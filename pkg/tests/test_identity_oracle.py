import logging
import numpy as np
import pytest
import torch

from face_tracer.data import SyntheticSpec, identity_pattern, sample_transform, apply_transform, to_tensor
from face_tracer.errors import ShapeError, DataError, ConfigurationError, DegenerateInputError
from face_tracer.identity_oracle import (
    BackboneSpec, builtin_frozen, embed, save_backbone, load_external, resolve_backbone,
    cosine_similarity, resample_to,
)

"""
Tests for the frozen identity embedder: determinism, normalization, persistence
and its ability to separate the synthetic identities.
"""


def test_builtin_deterministic(random_images):
    """Two backbones from the same seed embed identically."""
    image = random_images(resolution=32)
    a = builtin_frozen(7, 64, input_resolution=32)
    b = builtin_frozen(7, 64, input_resolution=32)
    assert torch.equal(embed(image, a), embed(image, b))


def test_builtin_seeds_differ(random_images):
    """Different seeds give different embedders."""
    image = random_images(n=1, resolution=32)
    a = embed(image, builtin_frozen(7, 64, input_resolution=32, normalize_output=True))
    b = embed(image, builtin_frozen(8, 64, input_resolution=32, normalize_output=True))
    assert cosine_similarity(a, b).item() < 0.99


def test_output_dim_and_normalization(random_images):
    """Normalized output has the declared length and unit norm."""
    vectors = embed(random_images(n=3, resolution=32), builtin_frozen(1, 128, 32, normalize_output=True))
    assert vectors.shape == (3, 128)
    assert torch.allclose(vectors.norm(dim=-1), torch.ones(3), atol=1e-5)


def test_backbone_is_frozen(random_images):
    """Parameters take no gradient and embeddings carry no graph."""
    backbone = builtin_frozen(1, 16, 32)
    assert not any(p.requires_grad for p in backbone.parameters())
    image = random_images(resolution=32).requires_grad_(True)
    assert not embed(image, backbone).requires_grad


def test_resolution_mismatch(random_images):
    """Embedding at the wrong resolution raises ShapeError."""
    with pytest.raises(ShapeError):
        embed(random_images(resolution=64), builtin_frozen(1, 16, 32))


def test_resample_to_matches_backbone(random_images):
    """Resampled batches fit the backbone and stay in [0, 1]."""
    resized = resample_to(random_images(resolution=64), 32)
    assert resized.shape == (2, 3, 32, 32)
    assert 0.0 <= resized.min().item() and resized.max().item() <= 1.0
    assert embed(resized, builtin_frozen(1, 16, 32)).shape == (2, 16)


def test_separates_synthetic_identities():
    """Same-identity renders are closer than different-identity renders on average."""
    spec = SyntheticSpec(n_identities=8, frames_per_identity=4, resolution=32, seed=11)
    rng = np.random.default_rng(0)
    images, labels = [], []
    for identity in range(spec.n_identities):
        pattern = identity_pattern(identity, spec)
        for _ in range(spec.frames_per_identity):
            images.append(apply_transform(pattern, sample_transform(rng, spec.resolution)))
            labels.append(identity)
    vectors = embed(to_tensor(images), builtin_frozen(3, 64, 32, normalize_output=True))
    similarity = vectors @ vectors.T
    labels = torch.tensor(labels)
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~torch.eye(len(labels), dtype=torch.bool)
    intra = similarity[same & off_diagonal].mean().item()
    inter = similarity[~same].mean().item()
    assert intra > inter

    patterns = to_tensor([identity_pattern(i, spec) for i in range(spec.n_identities)])
    canonical = embed(patterns, builtin_frozen(3, 64, 32, normalize_output=True))
    cross = canonical @ canonical.T
    assert cross[~torch.eye(spec.n_identities, dtype=torch.bool)].max().item() <= 0.999


def test_save_and_load_round_trip(tmp_path, random_images):
    """A saved backbone reloads with identical embeddings."""
    backbone = builtin_frozen(5, 32, 32, normalize_output=True)
    path = save_backbone(backbone, tmp_path / "backbone.safetensors")
    loaded = load_external(path)
    assert loaded.spec == backbone.spec
    image = random_images(resolution=32)
    assert torch.equal(embed(image, loaded), embed(image, backbone))


def test_load_missing_file(tmp_path):
    """A missing weights file is a data error."""
    with pytest.raises(DataError):
        load_external(tmp_path / "absent.safetensors")


def test_load_truncated_file(tmp_path):
    """A truncated weights file is reported as corrupt."""
    path = save_backbone(builtin_frozen(5, 32, 32), tmp_path / "backbone.safetensors")
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(DataError, match="Corrupt"):
        load_external(path)


def test_load_spec_mismatch(tmp_path):
    """Weights that do not fit the declared spec are a configuration error."""
    path = save_backbone(builtin_frozen(5, 32, 32), tmp_path / "backbone.safetensors")
    with pytest.raises(ConfigurationError):
        load_external(path, spec=BackboneSpec(input_resolution=32, output_dim=16))


def test_resolve_falls_back_with_warning(tmp_path, caplog):
    """A configured but absent path falls back to the built-in embedder with a warning."""
    with caplog.at_level(logging.WARNING):
        backbone = resolve_backbone(str(tmp_path / "missing.safetensors"), 9, 16, 32, True)
    assert backbone.output_dim == 16
    assert "falling back" in caplog.text


def test_resolve_loads_existing(tmp_path, random_images):
    """An existing path is loaded instead of the stand-in."""
    saved = builtin_frozen(2, 16, 32, normalize_output=True)
    path = save_backbone(saved, tmp_path / "backbone.safetensors")
    backbone = resolve_backbone(str(path), 9, 16, 32, True)
    image = random_images(resolution=32)
    assert torch.equal(embed(image, backbone), embed(image, saved))


@pytest.mark.parametrize("a, b, expected", [
    ((1.0, 0.0), (1.0, 0.0), 1.0),
    ((1.0, 0.0), (0.0, 1.0), 0.0),
    ((1.0, 0.0), (1.0, 1.0), 0.7071),
])
def test_cosine_similarity_examples(a, b, expected):
    """Hand-checked cosine values."""
    value = cosine_similarity(torch.tensor(a), torch.tensor(b)).item()
    assert value == pytest.approx(expected, abs=1e-4)


def test_cosine_similarity_errors():
    """Length mismatch and zero vectors are rejected."""
    with pytest.raises(ShapeError):
        cosine_similarity(torch.ones(3), torch.ones(2))
    with pytest.raises(DegenerateInputError):
        cosine_similarity(torch.zeros(2), torch.ones(2))
