import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from face_tracer.errors import ConfigurationError, ShapeError, DegenerateInputError
from face_tracer.identity_oracle import IdentityBackbone, embed, resample_to, cosine_similarity
from face_tracer.data import Manifest, load_batch, to_raster, to_uint8, write_png

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0

REPORT_NAME = "eval_report.jsonl"
SUMMARY_NAME = "eval_summary.md"
GRID_NAME = "grid.png"
FAILURE_GRID_NAME = "failure_cases.png"
TABLE_HEADER = ("Dataset", "PSNR (dB)", "SSIM", "Facial Similarity (%)")

# Published results at 128 px on the full datasets; shown for reference, never asserted.
REFERENCE_RESULTS = {
    "Celeb-DF-v2": {"psnr": 33.16, "ssim": 0.9008, "facial_similarity": 81.17},
    "FaceForensics++": {"psnr": 30.60, "ssim": 0.7710, "facial_similarity": 71.32},
}


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"❌ Shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}.")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """
    Peak signal-to-noise ratio in dB for images in [0, 1] (peak 1.0).

    Identical images map to the 99 dB cap.
    """
    _check_pair(a, b, "psnr")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(DYNAMIC_RANGE ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Normalized 2-D Gaussian window (float64)."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """
    Single-scale SSIM between two 3 x H x W images.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.0,
    evaluated at every fully-contained window position per channel and averaged.

    Raises:
        ShapeError: If the shapes differ.
        ConfigurationError: If either side is smaller than the window.
    """
    _check_pair(a, b, "ssim")
    if a.dim() != 3:
        raise ShapeError(f"❌ ssim expects a single 3 x H x W image, got {tuple(a.shape)}.")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ConfigurationError(
            f"❌ Image {tuple(a.shape[-2:])} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window."
        )
    channels = a.shape[0]
    window = gaussian_window().expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()
    x = a.double().unsqueeze(0)
    y = b.double().unsqueeze(0)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((numerator / denominator).mean())


def facial_similarity(a: torch.Tensor, b: torch.Tensor, backbone: IdentityBackbone) -> float:
    """Recognizer cosine similarity between two 3 x H x W faces, as a percentage in [-100, 100]."""
    r = backbone.spec.input_resolution
    pair = resample_to(torch.stack([a, b]).float(), r)
    vectors = embed(pair, backbone)
    return 100.0 * float(cosine_similarity(vectors[0], vectors[1]))


def _similarity_or_none(a: torch.Tensor, b: torch.Tensor, backbone: IdentityBackbone) -> Optional[float]:
    # A zero embedding (e.g. an all-black frame) has no direction to compare.
    try:
        return facial_similarity(a, b, backbone)
    except DegenerateInputError:
        return None


def difference_mask(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Grayscale H x W mask: channel-mean absolute difference of two 3 x H x W images."""
    _check_pair(a, b, "difference_mask")
    return (a - b).abs().mean(dim=0).clamp(0.0, 1.0)


@dataclass
class EvalReport:
    records: list[dict]
    aggregates: dict[str, dict[str, float]]
    config: dict = field(default_factory=dict)


def _aggregate(records: list[dict]) -> dict[str, dict[str, float]]:
    datasets = sorted({r["dataset"] for r in records})
    aggregates = {}
    for dataset in datasets:
        rows = [r for r in records if r["dataset"] == dataset]
        aggregates[dataset] = {
            "count": len(rows),
            **{key: sum(r[key] for r in rows) / len(rows) for key in ("psnr", "ssim", "facial_similarity", "fake_similarity")},
            "degenerate": sum(1 for r in rows if r["degenerate"]),
        }
    return aggregates


def trace_pairs(network, manifest: Manifest, indices: Sequence[int], resolution: int):
    """Traces the fakes of the given pairs; returns (batch, traced) with traced detached."""
    batch = load_batch(manifest, indices, resolution)
    with torch.no_grad():
        traced = network.trace(batch.fakes)[0]
    return batch, traced.detach()


def evaluate(
    network,
    manifest: Manifest,
    backbone: IdentityBackbone,
    resolution: int,
    batch_size: int = 32,
    config: Optional[dict] = None,
) -> EvalReport:
    """
    Traces every test fake and scores it against its paired original.

    Args:
        network: Object exposing trace(fakes) -> (traced, ...), e.g. a TracingNetwork.
        manifest (Manifest): Corpus whose test split is evaluated.
        backbone (IdentityBackbone): Evaluation recognizer (unit-normalized).
        resolution (int): Model resolution.
        batch_size (int): Pairs traced per forward pass.
        config (Optional[dict]): Configuration snapshot stored with the report.

    Returns:
        EvalReport: Per-pair records in manifest order plus per-dataset means.
            Pairs where a face embeds to a zero vector score 0 similarity and
            are flagged "degenerate"; the aggregates count them.

    Raises:
        ConfigurationError: If the test split is empty.
    """
    test_indices = manifest.indices("test")
    if not test_indices:
        raise ConfigurationError("❌ Manifest has an empty test split; nothing to evaluate.")
    logger.info(f"🚀 Evaluating {len(test_indices)} test pairs")
    if hasattr(network, "eval"):
        network.eval()

    records = []
    for offset in range(0, len(test_indices), batch_size):
        chunk = test_indices[offset:offset + batch_size]
        batch, traced = trace_pairs(network, manifest, chunk, resolution)
        for position, pair_id in enumerate(chunk):
            original, fake, tra = batch.originals[position], batch.fakes[position], traced[position]
            traced_similarity = _similarity_or_none(tra, original, backbone)
            fake_similarity = _similarity_or_none(fake, original, backbone)
            degenerate = traced_similarity is None or fake_similarity is None
            if degenerate:
                logger.warning(
                    f"⚠️ Pair {pair_id} ({batch.records[position].fake_path}): a face embeds to a zero vector, "
                    "similarity recorded as 0."
                )
            records.append({
                "pair_id": pair_id,
                "dataset": batch.records[position].source,
                "fake_path": batch.records[position].fake_path,
                "psnr": psnr(tra, original),
                "ssim": ssim(tra, original),
                "facial_similarity": traced_similarity or 0.0,
                "fake_similarity": fake_similarity or 0.0,
                "degenerate": degenerate,
            })

    report = EvalReport(records=records, aggregates=_aggregate(records), config=config or {})
    for dataset, row in report.aggregates.items():
        logger.info(
            f"✅ {dataset}: PSNR {row['psnr']:.2f} dB | SSIM {row['ssim']:.4f} | "
            f"similarity {row['facial_similarity']:.2f}% (fake {row['fake_similarity']:.2f}%)"
        )
    return report


def render_summary_table(report: EvalReport) -> str:
    """Markdown table with the columns Dataset, PSNR (dB), SSIM, Facial Similarity (%)."""
    def table(rows: dict[str, dict[str, float]]) -> list[str]:
        lines = ["| " + " | ".join(TABLE_HEADER) + " |", "|" + "---|" * len(TABLE_HEADER)]
        for dataset, row in rows.items():
            lines.append(f"| {dataset} | {row['psnr']:.2f} | {row['ssim']:.4f} | {row['facial_similarity']:.2f} |")
        return lines

    lines = ["# Tracing results", ""] + table(report.aggregates)
    lines += ["", "## Published reference (full datasets, 128 px)", ""] + table(REFERENCE_RESULTS)
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, output_dir: str | Path) -> tuple[Path, Path]:
    """Writes the per-pair JSON Lines report and the summary table."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / REPORT_NAME
    lines = [json.dumps({"kind": "pair", **r}, sort_keys=True) for r in report.records]
    lines += [
        json.dumps({"kind": "aggregate", "dataset": dataset, **row}, sort_keys=True)
        for dataset, row in report.aggregates.items()
    ]
    report_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    summary_path = out / SUMMARY_NAME
    summary_path.write_text(render_summary_table(report), encoding="utf-8")
    logger.info(f"💾 Report written to {report_path}")
    return report_path, summary_path


def render_grid(samples: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]], path: Optional[str | Path] = None) -> np.ndarray:
    """
    Lays out one row per sample: fake, original, traced, difference mask.

    Args:
        samples: (fake, original, traced) triples of 3 x R x R tensors.
        path (Optional[str | Path]): PNG destination, if the panel should be written.

    Returns:
        np.ndarray: (rows * R) x (4 * R) x 3 uint8 panel.

    Raises:
        ConfigurationError: If there are no samples.
    """
    if not samples:
        raise ConfigurationError("❌ Cannot render an empty grid.")
    rows = []
    for fake, original, traced in samples:
        mask = difference_mask(original, traced).unsqueeze(0).expand(3, -1, -1)
        tiles = [to_uint8(to_raster(t)) for t in (fake, original, traced, mask)]
        rows.append(np.concatenate(tiles, axis=1))
    panel = np.concatenate(rows, axis=0)
    if path is not None:
        write_png(Path(path), panel)
    return panel
