"""
Disentangling reversing network.

Two UNet-style encoders (identity and attribute) share one decoder. Each encoder
produces a four-level feature pyramid plus a flatten+FC supervision vector; the
decoder consumes the channel-concatenated pyramids through skip connections.

Images are N x 3 x H x W float tensors with values in [0, 1].
"""
import logging
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from face_tracer.config import ModelConfig
from face_tracer.errors import ShapeError, ConfigurationError, NumericFault

logger = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    """Ordered per-scale encoder outputs, shallowest first."""
    levels: list[torch.Tensor]

    @property
    def deepest_map(self) -> torch.Tensor:
        return self.levels[-1]

    @property
    def scales(self) -> list[int]:
        return [level.shape[-1] for level in self.levels]

    @property
    def channels(self) -> list[int]:
        return [level.shape[1] for level in self.levels]


@dataclass
class FusedRepresentation:
    """Per-scale channel concatenation of an identity and an attribute pyramid."""
    levels: list[torch.Tensor]

    @property
    def scales(self) -> list[int]:
        return [level.shape[-1] for level in self.levels]

    @property
    def channels(self) -> list[int]:
        return [level.shape[1] for level in self.levels]


def _check_finite(tensor: torch.Tensor, where: str, stage: int):
    if not bool(torch.isfinite(tensor).all()):
        raise NumericFault(f"❌ Non-finite activation in {where} stage {stage}.", stage=stage)


def validate_face_image(image: torch.Tensor, resolution: int):
    """
    Checks the FaceImage contract at a model boundary.

    Raises:
        ShapeError: If the batch is not N x 3 x resolution x resolution.
        ConfigurationError: If values fall outside [0, 1].
    """
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"❌ Expected an N x 3 x H x W image batch, got shape {tuple(image.shape)}.")
    if image.shape[-2] != resolution or image.shape[-1] != resolution:
        raise ShapeError(
            f"❌ Image is {image.shape[-2]}x{image.shape[-1]} but the model resolution is {resolution}."
        )
    if image.numel() and (float(image.min()) < 0.0 or float(image.max()) > 1.0):
        raise ConfigurationError("❌ Image values must lie in [0, 1].")


class EncoderStage(nn.Module):
    """Two 3x3 convolutions with LeakyReLU; the first one strided when the stage down-samples."""
    def __init__(self, in_channels: int, out_channels: int, downsample: bool, slope: float):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2 if downsample else 1, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.conv1(x), self.slope)
        return F.leaky_relu(self.conv2(x), self.slope)


class Encoder(nn.Module):
    """
    Four-stage encoder with a flatten+FC supervision head.

    Stages 1-3 halve the resolution and stage 4 preserves it, so a 128-pixel
    input ends in a 512 x 16 x 16 map under the default channel schedule.

    Attributes:
        stages (nn.ModuleList): The four encoder stages.
        head (nn.Linear): Maps the flattened deepest map to the embedding.
    """
    def __init__(self, config: ModelConfig, embed_dim: int):
        super().__init__()
        self.config = config
        in_channels = [3] + list(config.channels[:-1])
        self.stages = nn.ModuleList(
            EncoderStage(cin, cout, downsample=index < 3, slope=config.leaky_slope)
            for index, (cin, cout) in enumerate(zip(in_channels, config.channels))
        )
        deepest = config.level_scales[-1]
        self.head = nn.Linear(config.channels[-1] * deepest * deepest, embed_dim)

    def forward(self, image: torch.Tensor) -> tuple[FeaturePyramid, torch.Tensor]:
        validate_face_image(image, self.config.resolution)
        levels = []
        x = image
        for index, stage in enumerate(self.stages):
            x = stage(x)
            _check_finite(x, "encoder", index)
            levels.append(x)
        embedding = self.head(torch.flatten(x, start_dim=1))
        _check_finite(embedding, "encoder head", len(self.stages))
        return FeaturePyramid(levels), embedding


def encode(image: torch.Tensor, encoder: Encoder) -> tuple[FeaturePyramid, torch.Tensor]:
    """
    Runs one encoder over an image batch.

    Args:
        image (torch.Tensor): N x 3 x R x R batch in [0, 1].
        encoder (Encoder): Identity or attribute encoder.

    Returns:
        tuple[FeaturePyramid, torch.Tensor]: The pyramid and the N x D supervision vectors.

    Raises:
        ShapeError: If the image does not match the configured resolution.
        NumericFault: If any stage produces a non-finite value.
    """
    return encoder(image)


def fuse(id_pyr: FeaturePyramid, attr_pyr: FeaturePyramid) -> FusedRepresentation:
    """
    Concatenates two pyramids level by level along channels, identity first.

    Raises:
        ShapeError: If the pyramids differ in depth, batch size or spatial scale at any level.
    """
    if len(id_pyr.levels) != len(attr_pyr.levels):
        raise ShapeError(
            f"❌ Pyramid depth mismatch: {len(id_pyr.levels)} identity levels vs "
            f"{len(attr_pyr.levels)} attribute levels."
        )
    fused = []
    for index, (id_map, attr_map) in enumerate(zip(id_pyr.levels, attr_pyr.levels)):
        if id_map.shape[0] != attr_map.shape[0] or id_map.shape[-2:] != attr_map.shape[-2:]:
            raise ShapeError(
                f"❌ Scale mismatch at level {index}: identity {tuple(id_map.shape)} vs "
                f"attribute {tuple(attr_map.shape)}."
            )
        fused.append(torch.cat([id_map, attr_map], dim=1))
    return FusedRepresentation(fused)


class DecoderBlock(nn.Module):
    """Optional nearest-neighbour doubling followed by two 3x3 convolutions with LeakyReLU."""
    def __init__(self, in_channels: int, out_channels: int, upsample: bool, slope: float):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.conv1(x), self.slope)
        return F.leaky_relu(self.conv2(x), self.slope)


class Decoder(nn.Module):
    """
    Shared five-block decoder.

    Block 1 works at the deepest scale on the fused deepest map; blocks 2-4 double
    the resolution, each first concatenating the fused skip map of the matching
    encoder scale; block 5 projects to three channels through a sigmoid.
    """
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.channels
        slope = config.leaky_slope
        self.blocks = nn.ModuleList([
            DecoderBlock(2 * c4, c3, upsample=False, slope=slope),
            DecoderBlock(c3 + 2 * c3, c2, upsample=True, slope=slope),
            DecoderBlock(c2 + 2 * c2, c1, upsample=True, slope=slope),
            DecoderBlock(c1 + 2 * c1, c1, upsample=True, slope=slope),
        ])
        self.project = nn.Conv2d(c1, 3, 3, padding=1)

    def expected_levels(self) -> list[tuple[int, int]]:
        """(scale, channels) the decoder expects for each fused level."""
        return [(scale, 2 * channels) for scale, channels in zip(self.config.level_scales, self.config.channels)]

    def _check_alignment(self, fused: FusedRepresentation):
        expected = self.expected_levels()
        if len(fused.levels) != len(expected):
            raise ShapeError(f"❌ Decoder needs {len(expected)} fused levels, got {len(fused.levels)}.")
        for index, (level, (scale, channels)) in enumerate(zip(fused.levels, expected)):
            if level.shape[1] != channels or level.shape[-1] != scale or level.shape[-2] != scale:
                raise ShapeError(
                    f"❌ Skip level {index} is {tuple(level.shape[1:])}, expected ({channels}, {scale}, {scale})."
                )

    def forward(self, fused: FusedRepresentation) -> torch.Tensor:
        self._check_alignment(fused)
        skips = fused.levels
        x = self.blocks[0](skips[3])
        _check_finite(x, "decoder", 0)
        for index, skip in zip((1, 2, 3), (skips[2], skips[1], skips[0])):
            x = self.blocks[index](torch.cat([x, skip], dim=1))
            _check_finite(x, "decoder", index)
        image = torch.sigmoid(self.project(x))
        _check_finite(image, "decoder", 4)
        return image


def decode(fused: FusedRepresentation, decoder: Decoder) -> torch.Tensor:
    """Decodes a fused representation into an N x 3 x R x R image batch in [0, 1]."""
    return decoder(fused)


class TracingNetwork(nn.Module):
    """
    The full model: identity encoder, attribute encoder and shared decoder.

    Both forward paths use these same three modules; the identity encoder also
    extracts the identity of the traced face.
    """
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.id_encoder = Encoder(config, config.id_dim)
        self.attr_encoder = Encoder(config, config.attr_dim)
        self.decoder = Decoder(config)

    def reconstruct_original(self, I_ori: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Disentangle-and-reconstruct path on original faces.

        Returns:
            tuple: (I_recon, f_ori_id, f_ori_attr).
        """
        id_pyr, f_ori_id = encode(I_ori, self.id_encoder)
        attr_pyr, f_ori_attr = encode(I_ori, self.attr_encoder)
        I_recon = decode(fuse(id_pyr, attr_pyr), self.decoder)
        return I_recon, f_ori_id, f_ori_attr

    def trace(self, I_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Reverse-trace path on fake faces.

        Returns:
            tuple: (I_tra, f_gen_ori_id, f_fake_attr, f_tra_id).
        """
        id_pyr, f_gen_ori_id = encode(I_fake, self.id_encoder)
        attr_pyr, f_fake_attr = encode(I_fake, self.attr_encoder)
        I_tra = decode(fuse(id_pyr, attr_pyr), self.decoder)
        _, f_tra_id = encode(I_tra, self.id_encoder)
        return I_tra, f_gen_ori_id, f_fake_attr, f_tra_id

    def forward(self, I_fake: torch.Tensor) -> torch.Tensor:
        return self.trace(I_fake)[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
