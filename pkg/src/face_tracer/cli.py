import sys
import json
import logging
import argparse
import dataclasses
from pathlib import Path
from typing import Optional

import torch

from face_tracer.config import RunConfig, load_run_config, settings
from face_tracer.errors import TracerError, ConfigurationError, DataError, exit_code_for, EXIT_OK
from face_tracer.data import Manifest, generate_synthetic, build_manifest, read_image, to_tensor, write_png, to_raster, MANIFEST_NAME
from face_tracer.training import fit, load_network
from face_tracer.identity_oracle import resolve_backbone
from face_tracer.evaluation import evaluate, write_report, render_grid, trace_pairs, GRID_NAME, FAILURE_GRID_NAME

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Applies command-line flags on top of the file configuration (flags win)."""
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "resolution", None) is not None:
        config = dataclasses.replace(
            config,
            model=dataclasses.replace(config.model, resolution=args.resolution),
            data=dataclasses.replace(
                config.data, synthetic=dataclasses.replace(config.data.synthetic, resolution=args.resolution)
            ),
        )
    train = config.train
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    if getattr(args, "redundancy_mode", None) is not None:
        train = dataclasses.replace(train, redundancy_mode=args.redundancy_mode)
    if getattr(args, "attr_loss_weight", None) is not None:
        train = dataclasses.replace(train, weights=dataclasses.replace(train.weights, lambda_attr=args.attr_loss_weight))
    config = dataclasses.replace(config, train=train)
    if getattr(args, "grid", None) is not None:
        config = dataclasses.replace(config, eval=dataclasses.replace(config.eval, grid=args.grid))
    return config


def _output_dir(args: argparse.Namespace, command: str) -> Path:
    out = Path(args.output) if args.output else settings.run_dir(command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigurationError(f"❌ Missing Configuration: {flag} is required for this command.")
    return value


def cmd_synth(config: RunConfig, output: Path) -> Manifest:
    """Generates the synthetic ground-truth corpus into the output directory."""
    config = config.resolved()
    config.archive(output)
    return generate_synthetic(
        config.data.synthetic, output, test_fraction=config.data.test_fraction, split_seed=config.data.split_seed
    )


def cmd_prepare(root: str, convention: Optional[str], config: RunConfig, output: Path) -> Manifest:
    """Samples and pairs frames of a real dataset into a manifest."""
    if convention is not None:
        config = dataclasses.replace(config, data=dataclasses.replace(config.data, convention=convention))
    config = config.resolved()
    config.archive(output)
    return build_manifest(
        root,
        config.data.convention,
        seed=config.data.split_seed,
        test_fraction=config.data.test_fraction,
        output_dir=output,
        interval=config.data.frame_interval,
    )


def cmd_train(config: RunConfig, manifest_path: str, output: Path, resume: Optional[str] = None):
    """Fits the network on a manifest; checkpoints and logs go to the output directory."""
    config = config.resolved()
    config.archive(output)
    manifest = Manifest.load(manifest_path, seed=config.data.split_seed)
    return fit(config, manifest, output, resume_from=resume)


def _trace_file(network, source: Path, destination: Path, resolution: int):
    image = to_tensor([read_image(source, resolution)])
    with torch.no_grad():
        traced = network.trace(image)[0][0]
    write_png(destination, to_raster(traced))


def cmd_trace(checkpoint: str, input_path: str, output: Path, config: Optional[RunConfig] = None) -> list[Path]:
    """
    Traces one image or every image under a directory.

    A directory's relative layout is mirrored in the output; outputs are PNG.
    The configuration is archived with the checkpoint path and the model shape it holds.
    """
    network, _ = load_network(checkpoint)
    resolution = network.config.resolution
    config = dataclasses.replace(config or RunConfig(), model=network.config, checkpoint=str(checkpoint))
    config.archive(output)
    source = Path(input_path)
    if source.is_file():
        jobs = [(source, output / f"{source.stem}.png")]
    elif source.is_dir():
        jobs = [
            (path, (output / path.relative_to(source)).with_suffix(".png"))
            for path in sorted(source.rglob("*"))
            if path.suffix.lower() in IMAGE_SUFFIXES
        ]
    else:
        raise DataError(f"❌ Input not found: {source}", path=str(source))
    logger.info(f"🚀 Tracing {len(jobs)} image(s) with {checkpoint}")
    for src, dst in jobs:
        _trace_file(network, src, dst, resolution)
    logger.info(f"✅ Traced faces written to {output}")
    return [dst for _, dst in jobs]


def cmd_eval(checkpoint: str, manifest_path: str, config: RunConfig, output: Path):
    """Scores the test split, writes the report, the summary table and the grids."""
    network, _ = load_network(checkpoint)
    config = dataclasses.replace(config, model=network.config, checkpoint=str(checkpoint)).resolved()
    config.archive(output)
    manifest = Manifest.load(manifest_path, seed=config.data.split_seed)
    backbone = resolve_backbone(
        config.eval.backbone_path,
        seed=config.eval.backbone_seed,
        output_dim=config.model.id_dim,
        input_resolution=config.model.resolution,
        normalize_output=True,
    )
    report = evaluate(
        network, manifest, backbone, config.model.resolution,
        batch_size=config.eval.batch_size, config=config.to_dict(),
    )
    write_report(report, output)

    resolution = config.model.resolution
    if config.eval.grid:
        chosen = [r["pair_id"] for r in report.records[:config.eval.grid]]
        _render(network, manifest, chosen, resolution, output / GRID_NAME)
    if config.eval.failure_cases:
        worst = sorted(report.records, key=lambda r: (r["psnr"], r["pair_id"]))[:config.eval.failure_cases]
        _render(network, manifest, [r["pair_id"] for r in worst], resolution, output / FAILURE_GRID_NAME)
    return report


def _render(network, manifest: Manifest, indices: list[int], resolution: int, path: Path):
    batch, traced = trace_pairs(network, manifest, indices, resolution)
    samples = [(batch.fakes[i], batch.originals[i], traced[i]) for i in range(len(indices))]
    render_grid(samples, path)
    logger.info(f"💾 Grid with {len(samples)} rows written to {path}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="YAML run configuration (sections data, model, train, eval).")
    common.add_argument("--seed", type=int, help="Top-level seed; per-module seeds are derived from it.")
    common.add_argument("--output", type=str, help="Output directory (default: under $FACE_TRACER_CACHE_DIR).")
    common.add_argument("--resolution", type=int, help="Model and synthetic corpus resolution.")

    parser = argparse.ArgumentParser(
        prog="face-tracer",
        description="Trace deepfake faces back to their original faces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Generate the synthetic ground-truth corpus.")

    prepare = sub.add_parser("prepare", parents=[common], help="Sample and pair frames of a real dataset.")
    prepare.add_argument("--root", type=str, required=True, help="Dataset root in its published layout.")
    prepare.add_argument("--convention", type=str, choices=["celebdf", "ffpp"], help="Video naming convention.")

    train = sub.add_parser("train", parents=[common], help="Train the network on a manifest.")
    train.add_argument("--manifest", type=str, help=f"Manifest file (default: <output>/{MANIFEST_NAME}).")
    train.add_argument("--epochs", type=int, help="Override train.epochs.")
    train.add_argument("--resume", type=str, help="Checkpoint to resume from.")
    train.add_argument("--redundancy-mode", type=str, choices=["raw", "absolute"], help="Cosine redundancy form.")
    train.add_argument("--attr-loss-weight", type=float, help="Weight of the attribute-consistency term.")

    trace = sub.add_parser("trace", parents=[common], help="Trace fake face image(s).")
    trace.add_argument("--checkpoint", type=str, required=True, help="Trained checkpoint.")
    trace.add_argument("--input", type=str, required=True, help="Image file or directory of images.")

    evaluation = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on the test split.")
    evaluation.add_argument("--checkpoint", type=str, required=True, help="Trained checkpoint.")
    evaluation.add_argument("--manifest", type=str, required=True, help="Manifest with a test split.")
    evaluation.add_argument("--grid", type=int, help="Rows in the comparison grid.")
    return parser


def run(args: argparse.Namespace) -> int:
    config = apply_overrides(load_run_config(args.config), args)
    output = _output_dir(args, args.command)
    if args.command == "synth":
        cmd_synth(config, output)
    elif args.command == "prepare":
        cmd_prepare(args.root, args.convention, config, output)
    elif args.command == "train":
        manifest = args.manifest or str(output / MANIFEST_NAME)
        cmd_train(config, manifest, output, resume=args.resume)
    elif args.command == "trace":
        cmd_trace(args.checkpoint, args.input, output, config)
    elif args.command == "eval":
        cmd_eval(args.checkpoint, _require(args.manifest, "--manifest"), config, output)
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%H:%M:%S"
    )
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except TracerError as e:
        code = exit_code_for(e)
        logger.error(f"❌ {args.command} failed: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}), file=sys.stderr)
        return code
    except Exception as e:
        logger.exception(f"❌ {args.command} failed unexpectedly: {e}")
        code = exit_code_for(e)
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
