import math
import logging
from dataclasses import dataclass, asdict
from typing import Mapping, Union

import torch

from face_tracer.errors import ShapeError, DegenerateInputError, NumericFault, ConfigurationError

logger = logging.getLogger(__name__)

REDUNDANCY_MODES = ("raw", "absolute")
PART_NAMES = ("id", "redun", "recon", "map", "gen", "cycle", "attr")
NORM_FLOOR = 1e-12

Scalar = Union[torch.Tensor, float]


@dataclass(frozen=True)
class LossWeights:
    """
    Coefficients of the weighted total loss.

    The six published terms default to 1 except the cycle term (5); the
    attribute-consistency term is opt-in and defaults to 0.
    """
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 5.0
    lambda_attr: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"❌ Invalid loss weight {name}={value}: weights must be >= 0.")

    def coefficients(self) -> dict[str, float]:
        """Maps each loss part name to its weight."""
        return {
            "id": self.lambda1,
            "redun": self.lambda2,
            "recon": self.lambda3,
            "map": self.lambda4,
            "gen": self.lambda5,
            "cycle": self.lambda6,
            "attr": self.lambda_attr,
        }


@dataclass(frozen=True)
class LossBreakdown:
    id: float
    redun: float
    recon: float
    map: float
    gen: float
    cycle: float
    attr: float
    total: float

    def parts(self) -> dict[str, float]:
        """The seven named parts without the total."""
        return {name: getattr(self, name) for name in PART_NAMES}

    def as_record(self) -> dict[str, float]:
        return asdict(self)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"❌ Shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}.")


def _l1(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    _check_same_shape(a, b, what)
    return (a - b).abs().mean()


def _squared_l2(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    _check_same_shape(a, b, what)
    return ((a - b) ** 2).mean()


def loss_id(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """
    Identity supervision: mean absolute difference between the identity
    encoder's vector and the frozen recognizer's vector.

    Args:
        pred (torch.Tensor): Identity vectors, shape (D,) or (N, D).
        ref (torch.Tensor): Reference vectors of the same shape.

    Returns:
        torch.Tensor: Scalar loss, >= 0.

    Raises:
        ShapeError: If the shapes differ.
    """
    return _l1(pred, ref, "loss_id")


def cosine_rows(a: torch.Tensor, b: torch.Tensor, what: str = "cosine") -> torch.Tensor:
    """
    Row-wise cosine similarity along the last dimension with plain L2 norms.

    Raises:
        ShapeError: If the shapes differ.
        DegenerateInputError: If any row has norm below 1e-12.
    """
    _check_same_shape(a, b, what)
    norm_a = torch.linalg.vector_norm(a, dim=-1)
    norm_b = torch.linalg.vector_norm(b, dim=-1)
    if bool((norm_a < NORM_FLOOR).any()) or bool((norm_b < NORM_FLOOR).any()):
        raise DegenerateInputError(f"❌ Degenerate input to {what}: a vector has norm below {NORM_FLOOR}.")
    return (a * b).sum(dim=-1) / (norm_a * norm_b)


def loss_redun(
    id_ori: torch.Tensor,
    attr_ori: torch.Tensor,
    id_fake: torch.Tensor,
    attr_fake: torch.Tensor,
    mode: str = "raw",
) -> torch.Tensor:
    """
    Redundancy between identity and attribute vectors of the original and the fake.

    Sum of two cosines (batch-averaged): cos(id_ori, attr_ori) + cos(id_fake, attr_fake).
    In "absolute" mode each cosine is replaced by its magnitude.

    Returns:
        torch.Tensor: Scalar in [-2, 2] (raw) or [0, 2] (absolute).
    """
    if mode not in REDUNDANCY_MODES:
        raise ConfigurationError(f"❌ Unknown redundancy mode: '{mode}'.")
    cos_ori = cosine_rows(id_ori, attr_ori, "loss_redun (original)")
    cos_fake = cosine_rows(id_fake, attr_fake, "loss_redun (fake)")
    if mode == "absolute":
        cos_ori, cos_fake = cos_ori.abs(), cos_fake.abs()
    return cos_ori.mean() + cos_fake.mean()


def loss_recon(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pixel fidelity of the reconstructed original: mean squared difference."""
    return _squared_l2(a, b, "loss_recon")


def loss_map(id_ori: torch.Tensor, id_fake: torch.Tensor) -> torch.Tensor:
    """Fake-to-original identity mapping: mean absolute difference."""
    return _l1(id_ori, id_fake, "loss_map")


def loss_gen(I_ori: torch.Tensor, I_tra: torch.Tensor) -> torch.Tensor:
    """Pixel fidelity of the traced face against the original: mean squared difference."""
    return _squared_l2(I_ori, I_tra, "loss_gen")


def loss_cycle(id_ori: torch.Tensor, id_tra: torch.Tensor) -> torch.Tensor:
    """Identity of the traced face against the original identity: mean absolute difference."""
    return _l1(id_ori, id_tra, "loss_cycle")


def loss_attr(attr_ori: torch.Tensor, attr_fake: torch.Tensor) -> torch.Tensor:
    """Attribute consistency between original and fake: mean absolute difference."""
    return _l1(attr_ori, attr_fake, "loss_attr")


def _as_float(value: Scalar) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach().item())
    return float(value)


def total_loss(parts: Mapping[str, Scalar], w: LossWeights) -> LossBreakdown:
    """
    Assembles the weighted total from the seven named parts.

    Args:
        parts (Mapping[str, Scalar]): Values for id, redun, recon, map, gen, cycle and attr
            ("attr" may be omitted, meaning 0).
        w (LossWeights): The weights.

    Returns:
        LossBreakdown: Parts as floats plus the weighted total.

    Raises:
        NumericFault: If any part is NaN or infinite (names the first such part).
        ShapeError: If a required part is missing.
    """
    values = {}
    for name in PART_NAMES:
        if name not in parts:
            if name == "attr":
                values[name] = 0.0
                continue
            raise ShapeError(f"❌ Missing loss part: '{name}'.")
        value = _as_float(parts[name])
        if not math.isfinite(value):
            raise NumericFault(f"❌ Non-finite loss term '{name}': {value}", term=name)
        values[name] = value

    coefficients = w.coefficients()
    total = 0.0
    for name in PART_NAMES:
        total += coefficients[name] * values[name]
    return LossBreakdown(total=total, **values)


def weighted_sum(parts: Mapping[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    """Differentiable counterpart of total_loss, used for the backward pass."""
    coefficients = w.coefficients()
    total = None
    for name in PART_NAMES:
        if name not in parts:
            continue
        term = coefficients[name] * parts[name]
        total = term if total is None else total + term
    return total
