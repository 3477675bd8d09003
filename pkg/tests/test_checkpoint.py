import pytest
import torch

from face_tracer.checkpoint import capture, save_checkpoint, load_checkpoint, restore_network, restore_optimizer
from face_tracer.config import ModelConfig, TrainConfig
from face_tracer.errors import DataError, ConfigurationError
from face_tracer.training import init_params, build_optimizer

"""
Tests for the checkpoint container: exact round trips of params, Adam state
and RNG state, plus rejection of corrupt or mismatched files.
"""


def _stepped(desk_network, random_images):
    optimizer = build_optimizer(desk_network, TrainConfig())
    optimizer.zero_grad()
    desk_network.trace(random_images())[0].mean().backward()
    optimizer.step()
    return optimizer


def test_round_trip_bit_exact(tmp_path, desk_network, random_images):
    """Params, optimizer moments, counters and config survive a save/load unchanged."""
    optimizer = _stepped(desk_network, random_images)
    original = capture(desk_network, optimizer, epoch=3, step=17, config={"seed": 5, "model": {"resolution": 32}})
    loaded = load_checkpoint(save_checkpoint(original, tmp_path / "ckpt.safetensors"))

    assert loaded.epoch == 3 and loaded.step == 17
    assert loaded.config == {"seed": 5, "model": {"resolution": 32}}
    assert loaded.params.keys() == original.params.keys()
    for name, tensor in original.params.items():
        assert torch.equal(loaded.params[name], tensor)
    assert loaded.optimizer_state.keys() == original.optimizer_state.keys()
    for name, state in original.optimizer_state.items():
        for key, value in state.items():
            assert torch.equal(loaded.optimizer_state[name][key], value)
    assert torch.equal(loaded.rng_state, original.rng_state)


def test_restore_continues_identically(tmp_path, desk_config, desk_network, random_images):
    """A restored network and optimizer take the same next step as the originals."""
    optimizer = _stepped(desk_network, random_images)
    path = save_checkpoint(capture(desk_network, optimizer, 1, 1, {}), tmp_path / "ckpt.safetensors")

    clone = init_params(desk_config, seed=0)
    clone_optimizer = build_optimizer(clone, TrainConfig())
    checkpoint = load_checkpoint(path)
    restore_network(checkpoint, clone)
    restore_optimizer(checkpoint, clone, clone_optimizer)

    for network, opt in ((desk_network, optimizer), (clone, clone_optimizer)):
        opt.zero_grad()
        network.trace(random_images(seed=9))[0].mean().backward()
        opt.step()
    for (name, a), (_, b) in zip(desk_network.named_parameters(), clone.named_parameters()):
        assert torch.equal(a, b), name


def test_missing_file(tmp_path):
    """A missing checkpoint is a data error."""
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.safetensors")


def test_truncated_file(tmp_path, desk_network):
    """A truncated checkpoint is reported as corrupt."""
    path = save_checkpoint(capture(desk_network, None, 0, 0, {}), tmp_path / "ckpt.safetensors")
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(DataError, match="Corrupt"):
        load_checkpoint(path)


def test_foreign_container_rejected(tmp_path):
    """A valid container without the checkpoint format tag is rejected."""
    from safetensors.torch import save_file
    path = tmp_path / "foreign.safetensors"
    save_file({"w": torch.zeros(2)}, str(path))
    with pytest.raises(DataError, match="Not a face tracer checkpoint"):
        load_checkpoint(path)


def test_restore_into_mismatched_network(tmp_path, desk_network):
    """Params saved for one configuration do not load into another."""
    path = save_checkpoint(capture(desk_network, None, 0, 0, {}), tmp_path / "ckpt.safetensors")
    other = init_params(ModelConfig(resolution=32, channels=(8, 16, 32, 64), id_dim=64, attr_dim=64), seed=0)
    with pytest.raises(ConfigurationError):
        restore_network(load_checkpoint(path), other)
