import json
import math
import time
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import torch
from torch import nn

from face_tracer.config import ModelConfig, RunConfig, TrainConfig, derive_seed
from face_tracer.errors import ConfigurationError
from face_tracer.model import TracingNetwork
from face_tracer.losses import (
    LossBreakdown, loss_id, loss_redun, loss_recon, loss_map, loss_gen, loss_cycle, loss_attr,
    total_loss, weighted_sum, PART_NAMES,
)
from face_tracer.identity_oracle import IdentityBackbone, embed, resample_to, resolve_backbone
from face_tracer.data import Manifest, PairBatch, load_batch
from face_tracer.checkpoint import (
    Checkpoint, capture, save_checkpoint, load_checkpoint, restore_network, restore_optimizer,
)

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.jsonl"
SUMMARY_NAME = "summary.txt"
FINAL_CHECKPOINT_NAME = "checkpoint_final.safetensors"


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_epoch{epoch:04d}.safetensors"


def init_params(config: ModelConfig, seed: int) -> TracingNetwork:
    """
    Builds a network with Kaiming-normal weights (fan-in, LeakyReLU gain) and zero biases.

    Args:
        config (ModelConfig): Model shape configuration.
        seed (int): Initialization seed; the global RNG is left untouched.

    Returns:
        TracingNetwork: Freshly initialized parameters.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = TracingNetwork(config)
        for module in network.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, a=config.leaky_slope, mode="fan_in", nonlinearity="leaky_relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
    return network


def build_optimizer(network: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    """Adam with the configured betas; no weight decay, no schedule."""
    return torch.optim.Adam(
        network.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=0.0,
    )


def build_supervisor(config: RunConfig) -> IdentityBackbone:
    """The frozen, unnormalized embedder behind the identity supervision term."""
    return resolve_backbone(
        config.train.supervisor_path,
        seed=config.train.supervisor_seed,
        output_dim=config.model.id_dim,
        input_resolution=config.model.resolution,
        normalize_output=False,
    )


def compute_losses(
    network: TracingNetwork,
    originals: torch.Tensor,
    fakes: torch.Tensor,
    supervisor: IdentityBackbone,
    redundancy_mode: str = "raw",
) -> dict[str, torch.Tensor]:
    """
    Runs both forward paths and returns the seven differentiable loss parts.

    Args:
        network (TracingNetwork): The model.
        originals (torch.Tensor): Original faces, N x 3 x R x R.
        fakes (torch.Tensor): Paired fake faces, same shape.
        supervisor (IdentityBackbone): Frozen identity embedder.
        redundancy_mode (str): "raw" or "absolute".

    Returns:
        dict[str, torch.Tensor]: Scalar tensors keyed by part name.
    """
    I_recon, f_ori_id, f_ori_attr = network.reconstruct_original(originals)
    I_tra, f_gen_ori_id, f_fake_attr, f_tra_id = network.trace(fakes)
    reference = embed(resample_to(originals, supervisor.spec.input_resolution), supervisor).to(f_ori_id.dtype)
    return {
        "id": loss_id(f_ori_id, reference),
        "redun": loss_redun(f_ori_id, f_ori_attr, f_gen_ori_id, f_fake_attr, mode=redundancy_mode),
        "recon": loss_recon(originals, I_recon),
        "map": loss_map(f_ori_id, f_gen_ori_id),
        "gen": loss_gen(originals, I_tra),
        "cycle": loss_cycle(f_ori_id, f_tra_id),
        "attr": loss_attr(f_ori_attr, f_fake_attr),
    }


def train_step(
    network: TracingNetwork,
    optimizer: torch.optim.Optimizer,
    batch: PairBatch,
    config: TrainConfig,
    supervisor: IdentityBackbone,
) -> LossBreakdown:
    """
    One joint Adam update over both forward paths.

    Params and optimizer state are updated in place.

    Returns:
        LossBreakdown: The parts and weighted total before the update.

    Raises:
        NumericFault: If a loss term is non-finite (the update is not applied).
    """
    network.train()
    optimizer.zero_grad(set_to_none=True)
    parts = compute_losses(network, batch.originals, batch.fakes, supervisor, config.redundancy_mode)
    breakdown = total_loss(parts, config.weights)
    weighted_sum(parts, config.weights).backward()
    optimizer.step()
    return breakdown


@dataclass
class TrainLog:
    """Per-step loss records and per-epoch aggregates of one fit call."""
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def totals(self) -> list[float]:
        return [record["total"] for record in self.steps]

    def epoch_means(self) -> list[float]:
        return [record["total"] for record in self.epochs]

    def convergence_epoch(self, tolerance: float, patience: int) -> Optional[int]:
        """
        First epoch (1-based) after which the epoch-mean total stopped improving
        by more than `tolerance` (relative) for `patience` consecutive epochs.
        """
        means = self.epoch_means()
        for start in range(len(means) - patience):
            best = means[start]
            if all(means[start + k] > best - tolerance * abs(best) for k in range(1, patience + 1)):
                return self.epochs[start]["epoch"]
        return None


def _epoch_record(epoch: int, records: list[dict], elapsed: float) -> dict:
    aggregate = {"kind": "epoch", "epoch": epoch, "steps": len(records), "wall_clock": round(elapsed, 3)}
    for name in PART_NAMES + ("total",):
        aggregate[name] = sum(r[name] for r in records) / len(records)
    return aggregate


def fit(
    config: RunConfig,
    manifest: Manifest,
    output_dir: str | Path,
    resume_from: Optional[str | Path] = None,
    supervisor: Optional[IdentityBackbone] = None,
) -> tuple[Checkpoint, TrainLog]:
    """
    Trains on the manifest's train split for the configured number of epochs.

    Each epoch runs ceil(n / batch_size) steps over a permutation seeded by
    (shuffle seed, epoch), so a resumed run replays exactly the batches an
    uninterrupted run would have seen.

    Args:
        config (RunConfig): Run configuration (seeds are resolved here if unset).
        manifest (Manifest): Pair corpus.
        output_dir (str | Path): Destination of checkpoints, log and summary.
        resume_from (Optional[str | Path]): Checkpoint to continue from.
        supervisor (Optional[IdentityBackbone]): Identity supervisor; built from config if omitted.

    Returns:
        tuple[Checkpoint, TrainLog]: The final checkpoint and this call's log.

    Raises:
        ConfigurationError: If the train split is empty.
    """
    config = config.resolved()
    train_config = config.train
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_indices = manifest.indices("train")
    if not train_indices:
        raise ConfigurationError("❌ Manifest has an empty train split; nothing to fit.")

    network = init_params(config.model, train_config.seed)
    optimizer = build_optimizer(network, train_config)
    supervisor = supervisor or build_supervisor(config)

    start_epoch, step = 0, 0
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        restore_network(checkpoint, network)
        restore_optimizer(checkpoint, network, optimizer)
        if checkpoint.rng_state is not None:
            torch.set_rng_state(checkpoint.rng_state)
        start_epoch, step = checkpoint.epoch, checkpoint.step
        logger.info(f"♻️  Resuming from {resume_from} at epoch {start_epoch}, step {step}")

    n = len(train_indices)
    batch_size = train_config.batch_size
    steps_per_epoch = math.ceil(n / batch_size)
    shuffle_seed = derive_seed(train_config.seed, "shuffle")
    config_snapshot = config.to_dict()
    logger.info(
        f"🚀 Training on {n} pairs: {train_config.epochs} epochs x {steps_per_epoch} steps "
        f"(batch {batch_size}, lr {train_config.learning_rate})"
    )

    log = TrainLog()
    started = time.perf_counter()
    log_path = out / TRAIN_LOG_NAME
    if resume_from is not None:
        _truncate_log(log_path, step, start_epoch)
    with open(log_path, "a" if resume_from is not None else "w", encoding="utf-8") as log_file:
        for epoch in range(start_epoch, train_config.epochs):
            generator = torch.Generator().manual_seed(shuffle_seed + epoch)
            order = torch.randperm(n, generator=generator).tolist()
            epoch_records = []
            for offset in range(0, n, batch_size):
                indices = [train_indices[i] for i in order[offset:offset + batch_size]]
                batch = load_batch(manifest, indices, config.model.resolution)
                breakdown = train_step(network, optimizer, batch, train_config, supervisor)
                step += 1
                record = {"kind": "step", "step": step, "epoch": epoch + 1, **breakdown.as_record()}
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log.steps.append(record)
                epoch_records.append(record)
                if step % train_config.log_every == 0:
                    logger.info(f"step {step} | epoch {epoch + 1} | total {breakdown.total:.5f}")

            aggregate = _epoch_record(epoch + 1, epoch_records, time.perf_counter() - started)
            log_file.write(json.dumps(aggregate, sort_keys=True) + "\n")
            log_file.flush()
            log.epochs.append(aggregate)
            logger.info(
                f"✅ Epoch {epoch + 1}/{train_config.epochs}: mean total {aggregate['total']:.5f} "
                f"(recon {aggregate['recon']:.5f}, gen {aggregate['gen']:.5f})"
            )
            if (epoch + 1) % train_config.checkpoint_every == 0:
                save_checkpoint(capture(network, optimizer, epoch + 1, step, config_snapshot), out / checkpoint_name(epoch + 1))

    final = capture(network, optimizer, max(start_epoch, train_config.epochs), step, config_snapshot)
    save_checkpoint(final, out / FINAL_CHECKPOINT_NAME)
    log.wall_clock = time.perf_counter() - started
    _write_summary(out / SUMMARY_NAME, log, train_config)
    return final, log


def _truncate_log(path: Path, step: int, epoch: int):
    """Drops log records written after the resume point so step indices keep increasing."""
    if not path.exists():
        return
    kept, dropped = [], 0
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if (record["kind"] == "step" and record["step"] <= step) or (record["kind"] == "epoch" and record["epoch"] <= epoch):
            kept.append(line)
        else:
            dropped += 1
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
    if dropped:
        logger.info(f"♻️  Dropped {dropped} log records past step {step} from {path.name}")


def _write_summary(path: Path, log: TrainLog, config: TrainConfig):
    converged = log.convergence_epoch(config.convergence_tolerance, config.convergence_patience)
    lines = [
        "Training summary",
        f"steps: {len(log.steps)}",
        f"epochs: {len(log.epochs)}",
        f"wall clock: {log.wall_clock:.1f} s",
    ]
    if log.steps:
        lines.append(f"first total: {log.steps[0]['total']:.6f}")
        lines.append(f"last total: {log.steps[-1]['total']:.6f}")
    lines.append(f"converged after epoch: {converged if converged is not None else 'not yet'}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines[1:]:
        logger.info(f"   {line}")


def load_network(path: str | Path) -> tuple[TracingNetwork, Checkpoint]:
    """
    Rebuilds a network from a checkpoint, using the model config stored inside it.

    Raises:
        DataError: If the checkpoint cannot be read.
        ConfigurationError: If the stored config or params are inconsistent.
    """
    checkpoint = load_checkpoint(path)
    model_config = RunConfig.from_dict({"model": checkpoint.config.get("model", {})}).model
    network = TracingNetwork(model_config)
    restore_network(checkpoint, network)
    network.eval()
    return network, checkpoint


# --- Gradient validation ---

@dataclass
class GradCheckReport:
    groups: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.groups.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _sample_indices(numel: int, max_elements: int) -> list[int]:
    if numel <= max_elements:
        return list(range(numel))
    return sorted({round(i * (numel - 1) / (max_elements - 1)) for i in range(max_elements)})


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-4,
    max_elements: int = 8,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """
    Compares autograd gradients with central finite differences.

    Args:
        loss_fn (Callable[[], torch.Tensor]): Recomputes the scalar loss from the current params.
        params (Mapping[str, torch.Tensor]): Named leaf tensors to check (use float64).
        tolerance (float): Pass threshold on the max relative error.
        step (float): Finite-difference step.
        max_elements (int): Evenly spaced elements checked per tensor.
        abs_floor (float): Lower bound on the relative-error denominator.

    Returns:
        GradCheckReport: Max relative error per parameter group.
    """
    tensors = list(params.values())
    loss = loss_fn()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)

    groups = {}
    for (name, tensor), grad in zip(params.items(), grads):
        analytic = torch.zeros_like(tensor) if grad is None else grad.detach()
        flat, flat_grad = tensor.data.view(-1), analytic.reshape(-1)
        worst = 0.0
        for index in _sample_indices(flat.numel(), max_elements):
            original = flat[index].item()
            with torch.no_grad():
                flat[index] = original + step
                plus = loss_fn().item()
                flat[index] = original - step
                minus = loss_fn().item()
                flat[index] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = flat_grad[index].item()
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
            worst = max(worst, error)
        groups[name] = worst
    report = GradCheckReport(groups=groups, tolerance=tolerance)
    logger.info(f"Gradient check: max relative error {report.max_error:.2e} over {len(groups)} groups")
    return report
