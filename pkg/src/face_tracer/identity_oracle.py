import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F
from safetensors.torch import save_file, load_file

from face_tracer.errors import ShapeError, ConfigurationError, DataError
from face_tracer.losses import cosine_rows

logger = logging.getLogger(__name__)

SPEC_SUFFIX = ".spec.json"
BACKBONE_CHANNELS = (32, 64)
BACKBONE_SLOPE = 0.2


@dataclass(frozen=True)
class BackboneSpec:
    """Sidecar record describing an embedder's expected input and output."""
    input_resolution: int
    output_dim: int
    normalize_output: bool = False


class IdentityBackbone(nn.Module):
    """
    Frozen identity embedder.

    A small bias-free convolutional network followed by global average pooling
    and a fixed projection. Without biases the network is positively homogeneous,
    so a uniform brightness change scales the embedding without turning it.

    Attributes:
        spec (BackboneSpec): Input resolution, output length and normalization flag.
    """
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c1, c2 = BACKBONE_CHANNELS
        self.conv1 = nn.Conv2d(3, c1, 5, stride=2, padding=2, bias=False)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1, bias=False)
        self.projection = nn.Linear(c2, spec.output_dim, bias=False)

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    @property
    def normalize_output(self) -> bool:
        return self.spec.normalize_output

    def freeze(self) -> "IdentityBackbone":
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        return self.eval()

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return embed(image, self)


def embed(image: torch.Tensor, backbone: IdentityBackbone) -> torch.Tensor:
    """
    Embeds an image batch with a frozen backbone.

    Args:
        image (torch.Tensor): N x 3 x R x R batch at the backbone's input resolution.
        backbone (IdentityBackbone): The embedder.

    Returns:
        torch.Tensor: N x output_dim vectors (unit L2 norm when normalize_output is set).

    Raises:
        ShapeError: If the image resolution differs from the backbone's.
    """
    r = backbone.spec.input_resolution
    if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (r, r):
        raise ShapeError(f"❌ Backbone expects N x 3 x {r} x {r} input, got {tuple(image.shape)}.")
    with torch.no_grad():
        x = image.to(backbone.conv1.weight.dtype)
        x = F.leaky_relu(backbone.conv1(x), BACKBONE_SLOPE)
        x = F.leaky_relu(backbone.conv2(x), BACKBONE_SLOPE)
        vector = backbone.projection(x.mean(dim=(2, 3)))
        if backbone.spec.normalize_output:
            vector = F.normalize(vector, dim=-1)
    return vector


def resample_to(images: torch.Tensor, resolution: int) -> torch.Tensor:
    """Bilinearly resamples an image batch to a square resolution (no-op when it already matches)."""
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    resized = F.interpolate(images, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return resized.clamp(0.0, 1.0)


def builtin_frozen(
    seed: int,
    output_dim: int,
    input_resolution: int = 128,
    normalize_output: bool = False,
) -> IdentityBackbone:
    """
    Builds the seeded stand-in recognizer.

    Convolution weights are Kaiming-normal; projection rows are centered so the
    all-positive common component of pooled activations does not dominate
    every cosine. Identical seeds give bit-identical backbones.
    """
    backbone = IdentityBackbone(BackboneSpec(input_resolution, output_dim, normalize_output))
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for conv in (backbone.conv1, backbone.conv2):
            fan_in = conv.weight[0].numel()
            std = (2.0 / ((1.0 + BACKBONE_SLOPE ** 2) * fan_in)) ** 0.5
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * std)
        projection = torch.randn(backbone.projection.weight.shape, generator=generator)
        projection -= projection.mean(dim=1, keepdim=True)
        backbone.projection.weight.copy_(projection / projection.shape[1] ** 0.5)
    return backbone.freeze()


def save_backbone(backbone: IdentityBackbone, path: str | Path) -> Path:
    """Writes backbone weights to the checkpoint container plus a spec sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.detach().cpu().contiguous() for name, t in backbone.state_dict().items()}
    save_file(tensors, str(path), metadata={"kind": "identity-backbone"})
    spec_path = path.with_name(path.name + SPEC_SUFFIX)
    spec_path.write_text(json.dumps(asdict(backbone.spec), sort_keys=True), encoding="utf-8")
    logger.info(f"💾 Backbone saved to {path}")
    return path


def load_external(path: str | Path, spec: Optional[BackboneSpec] = None) -> IdentityBackbone:
    """
    Wraps externally trained weights as a frozen backbone.

    Args:
        path (str | Path): Checkpoint container file.
        spec (Optional[BackboneSpec]): Expected spec; read from the sidecar when omitted.

    Returns:
        IdentityBackbone: The frozen backbone.

    Raises:
        DataError: If the file or sidecar is missing or corrupt.
        ConfigurationError: If the weights do not fit the declared spec.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"❌ Backbone weights not found: {path}", path=str(path))
    if spec is None:
        spec_path = path.with_name(path.name + SPEC_SUFFIX)
        try:
            spec = BackboneSpec(**json.loads(spec_path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise DataError(f"❌ Backbone spec sidecar missing or invalid: {spec_path}", path=str(spec_path)) from e
    try:
        tensors = load_file(str(path))
    except Exception as e:
        logger.exception(f"Failed to read backbone weights: {path.name}")
        raise DataError(f"❌ Corrupt backbone weights: {path}", path=str(path)) from e

    backbone = IdentityBackbone(spec)
    try:
        backbone.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise ConfigurationError(f"❌ Backbone weights do not match spec {spec}: {e}") from e
    return backbone.freeze()


def resolve_backbone(
    path: Optional[str],
    seed: int,
    output_dim: int,
    input_resolution: int,
    normalize_output: bool,
) -> IdentityBackbone:
    """
    Loads external weights when a path is configured and present, otherwise
    falls back to the built-in stand-in with a warning.
    """
    if path:
        if Path(path).exists():
            logger.info(f"Loading external identity backbone from {path}")
            return load_external(path)
        logger.warning(f"⚠️ Backbone weights not found at {path}; falling back to built-in stand-in (seed {seed}).")
    return builtin_frozen(seed, output_dim, input_resolution, normalize_output)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity of two embeddings (row-wise for batches), in [-1, 1].

    Raises:
        ShapeError: If the lengths differ.
        DegenerateInputError: If either vector is (near) zero.
    """
    return cosine_rows(a, b, "cosine_similarity").clamp(-1.0, 1.0)
