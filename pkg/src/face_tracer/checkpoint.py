import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from safetensors.torch import save_file, load_file, safe_open

from face_tracer.errors import DataError, ConfigurationError

logger = logging.getLogger(__name__)

FORMAT_TAG = "face-tracer-checkpoint/1"
PARAM_PREFIX = "params."
OPTIM_PREFIX = "optim."
RNG_KEY = "rng.torch"
OPTIM_STATE_KEYS = ("exp_avg", "exp_avg_sq", "step")


@dataclass
class Checkpoint:
    """
    Everything needed to resume or reuse a run.

    Attributes:
        params (dict[str, torch.Tensor]): Model state dict keyed by dotted names.
        optimizer_state (dict[str, dict[str, torch.Tensor]]): Adam moments and step per parameter name.
        epoch (int): Number of completed epochs.
        step (int): Number of completed optimizer steps.
        rng_state (Optional[torch.Tensor]): Global torch RNG state at save time.
        config (dict): Run configuration snapshot.
    """
    params: dict[str, torch.Tensor]
    optimizer_state: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: Optional[torch.Tensor] = None
    config: dict = field(default_factory=dict)


def capture(
    network: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer],
    epoch: int,
    step: int,
    config: dict,
) -> Checkpoint:
    """Snapshots a live network and optimizer into a Checkpoint (tensors copied to CPU)."""
    params = {name: t.detach().cpu().clone() for name, t in network.state_dict().items()}
    optimizer_state = {}
    if optimizer is not None:
        names = {id(p): name for name, p in network.named_parameters()}
        for group in optimizer.param_groups:
            for parameter in group["params"]:
                state = optimizer.state.get(parameter)
                if not state:
                    continue
                optimizer_state[names[id(parameter)]] = {
                    key: torch.as_tensor(state[key]).detach().cpu().clone() for key in OPTIM_STATE_KEYS
                }
    return Checkpoint(
        params=params,
        optimizer_state=optimizer_state,
        epoch=epoch,
        step=step,
        rng_state=torch.get_rng_state(),
        config=config,
    )


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """
    Writes a checkpoint container: named little-endian tensors plus a metadata record.

    Args:
        checkpoint (Checkpoint): What to save.
        path (str | Path): Destination file.

    Returns:
        Path: The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {PARAM_PREFIX + name: t.contiguous() for name, t in checkpoint.params.items()}
    for name, state in checkpoint.optimizer_state.items():
        for key, value in state.items():
            tensors[f"{OPTIM_PREFIX}{name}.{key}"] = value.reshape(-1).contiguous() if value.dim() == 0 else value.contiguous()
    if checkpoint.rng_state is not None:
        tensors[RNG_KEY] = checkpoint.rng_state.contiguous()
    metadata = {
        "format": FORMAT_TAG,
        "epoch": str(checkpoint.epoch),
        "step": str(checkpoint.step),
        "config": json.dumps(checkpoint.config, sort_keys=True),
    }
    save_file(tensors, str(path), metadata=metadata)
    logger.info(f"💾 Checkpoint saved: {path} (epoch {checkpoint.epoch}, step {checkpoint.step})")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Reads a checkpoint container.

    Raises:
        DataError: If the file is missing, truncated or not a face tracer checkpoint.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"❌ Checkpoint not found: {path}", path=str(path))
    try:
        with safe_open(str(path), framework="pt") as handle:
            metadata = handle.metadata() or {}
        tensors = load_file(str(path))
    except Exception as e:
        logger.exception(f"Failed to read checkpoint: {path.name}")
        raise DataError(f"❌ Corrupt checkpoint: {path}", path=str(path)) from e
    if metadata.get("format") != FORMAT_TAG:
        raise DataError(f"❌ Not a face tracer checkpoint: {path}", path=str(path))

    params, optimizer_state, rng_state = {}, {}, None
    for key, value in tensors.items():
        if key.startswith(PARAM_PREFIX):
            params[key[len(PARAM_PREFIX):]] = value
        elif key.startswith(OPTIM_PREFIX):
            name, _, state_key = key[len(OPTIM_PREFIX):].rpartition(".")
            if state_key == "step":
                value = value.reshape(())
            optimizer_state.setdefault(name, {})[state_key] = value
        elif key == RNG_KEY:
            rng_state = value
    return Checkpoint(
        params=params,
        optimizer_state=optimizer_state,
        epoch=int(metadata.get("epoch", 0)),
        step=int(metadata.get("step", 0)),
        rng_state=rng_state,
        config=json.loads(metadata.get("config", "{}")),
    )


def restore_network(checkpoint: Checkpoint, network: torch.nn.Module):
    """
    Loads checkpoint params into a network built for the same configuration.

    Raises:
        ConfigurationError: If names or shapes do not match the network.
    """
    try:
        network.load_state_dict(checkpoint.params, strict=True)
    except RuntimeError as e:
        raise ConfigurationError(f"❌ Checkpoint does not match the model configuration: {e}") from e


def restore_optimizer(checkpoint: Checkpoint, network: torch.nn.Module, optimizer: torch.optim.Optimizer):
    """Rebuilds Adam moments and step counts from a checkpoint."""
    if not checkpoint.optimizer_state:
        return
    index_of = {name: index for index, (name, _) in enumerate(network.named_parameters())}
    state_dict = optimizer.state_dict()
    state_dict["state"] = {
        index_of[name]: {key: value.clone() for key, value in state.items()}
        for name, state in checkpoint.optimizer_state.items()
    }
    optimizer.load_state_dict(state_dict)
