import re
import json
import math
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset

from face_tracer.errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SYNTHETIC_META_NAME = "synthetic_meta.json"
BUILD_REPORT_NAME = "build_report.json"
SPLITS = ("train", "test")
CONVENTIONS = ("celebdf", "ffpp")

# Published pair counts after one-frame-per-second sampling; documentation only.
DATASET_CONSTANTS = {
    "Celeb-DF-v2": {"pairs": 74118, "train_pairs": 67513, "original_videos": 590, "fake_videos": 5639, "subjects": 62},
    "FaceForensics++": {"pairs": 29388, "train_pairs": 26506, "original_videos": 1000, "fake_videos": 3000},
}

ROTATION_RANGE = (-20.0, 20.0)
BRIGHTNESS_RANGE = (0.7, 1.3)
MAX_SHIFT_FRACTION = 0.1
SHAPES_PER_IDENTITY = 5
BLUR_SIGMA_FRACTION = 1.0 / 24.0
PALETTE_RANGE = (40, 216)

_CELEBDF_ORIGINAL = re.compile(r"^id(\d+)_(\d{4})$")
_CELEBDF_FAKE = re.compile(r"^id(\d+)_id(\d+)_(\d{4})$")
_FFPP_ORIGINAL = re.compile(r"^(\d{3})$")
_FFPP_FAKE = re.compile(r"^(\d{3})_(\d{3})$")


@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int = 16
    frames_per_identity: int = 32
    resolution: int = 128
    blend_alpha: float = 0.3
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n_identities < 2:
            raise ConfigurationError(
                f"❌ Invalid synthetic.n_identities: {self.n_identities} (a forgery needs a distinct target, use >= 2)."
            )
        if self.frames_per_identity < 1:
            raise ConfigurationError(f"❌ Invalid synthetic.frames_per_identity: {self.frames_per_identity}.")
        if self.resolution < 8:
            raise ConfigurationError(f"❌ Invalid synthetic.resolution: {self.resolution}.")
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ConfigurationError(f"❌ Invalid synthetic.blend_alpha: {self.blend_alpha} must be in [0, 1].")


@dataclass(frozen=True)
class PairSample:
    """One fake/original pair; paths are relative to the manifest directory."""
    fake_path: str
    original_path: str
    original_identity: str
    target_identity: str
    source: str
    split: str
    timestamp_index: int

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class BuildReport:
    pairs: int = 0
    orphans_skipped: int = 0
    errors: list[dict] = field(default_factory=list)


@dataclass
class Manifest:
    """
    Ordered pair records plus the seed that assigned their splits.

    Attributes:
        records (list[PairSample]): Pair descriptors in deterministic order.
        seed (int): Split seed.
        root (Path): Directory that record paths are relative to.
        report (Optional[BuildReport]): Build diagnostics, when built from videos.
    """
    records: list[PairSample]
    seed: int
    root: Path
    report: Optional[BuildReport] = None

    @property
    def counts(self) -> dict[str, int]:
        return {split: sum(1 for r in self.records if r.split == split) for split in SPLITS}

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def save(self, path: Optional[Path] = None) -> Path:
        """Writes one JSON object per record, sorted keys, UTF-8."""
        path = Path(path) if path else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r.to_record(), sort_keys=True) for r in self.records]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        logger.info(f"💾 Manifest with {len(self.records)} pairs written to {path} ({self.counts})")
        return path

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "Manifest":
        """
        Reads a manifest file; record paths resolve against the file's directory.

        Raises:
            DataError: If the file is missing or a line is not a valid record.
        """
        path = Path(path)
        if not path.exists():
            raise DataError(f"❌ Manifest not found: {path}", path=str(path))
        records = []
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(PairSample(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise DataError(f"❌ Malformed manifest record at {path}:{number}: {e}", path=str(path)) from e
        return cls(records=records, seed=seed, root=path.parent)

    def resolve(self, relative: str) -> Path:
        return self.root / relative


def assign_splits(n: int, test_fraction: float, seed: int) -> list[str]:
    """
    Assigns each of n records to train or test exactly once.

    The test set is the first round(n * test_fraction) positions of a seeded permutation.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f"❌ Invalid test_fraction: {test_fraction} must be in [0, 1).")
    n_test = int(round(n * test_fraction))
    order = np.random.default_rng(seed).permutation(n)
    splits = ["train"] * n
    for index in order[:n_test]:
        splits[int(index)] = "test"
    return splits


# --- Image I/O ---

def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantizes an H x W x 3 float raster in [0, 1] to 8 bits."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_png(path: Path, image: np.ndarray):
    """Writes an RGB raster (uint8 or float in [0, 1]) as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raster = image if image.dtype == np.uint8 else to_uint8(image)
    if raster.ndim == 3:
        raster = cv2.cvtColor(raster, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), raster):
        raise DataError(f"❌ Failed to write image: {path}", path=str(path))


def read_image(path: Path, resolution: Optional[int] = None) -> np.ndarray:
    """
    Reads an image as an H x W x 3 float32 RGB raster in [0, 1].

    Args:
        path (Path): Image file.
        resolution (Optional[int]): If given, the raster is bilinearly resized to this square size.

    Raises:
        DataError: If the file cannot be decoded.
    """
    raster = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raster is None:
        raise DataError(f"❌ Unreadable image: {path}", path=str(path))
    raster = cv2.cvtColor(raster, cv2.COLOR_BGR2RGB)
    if resolution is not None and raster.shape[:2] != (resolution, resolution):
        raster = cv2.resize(raster, (resolution, resolution), interpolation=cv2.INTER_LINEAR)
    return raster.astype(np.float32) / 255.0


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stacks H x W x 3 rasters into an N x 3 x H x W float32 tensor."""
    return torch.from_numpy(np.stack([np.ascontiguousarray(i.transpose(2, 0, 1)) for i in images]))


def to_raster(image: torch.Tensor) -> np.ndarray:
    """Converts one 3 x H x W tensor to an H x W x 3 float raster."""
    return image.detach().cpu().float().numpy().transpose(1, 2, 0)


# --- Videos ---

def sample_frames(video_path: str | Path, interval: float = 1.0) -> list[tuple[int, np.ndarray]]:
    """
    Samples one frame per full interval from a video.

    A video of duration d yields floor(d / interval) frames, taken at t = k * interval.

    Args:
        video_path (str | Path): Video file.
        interval (float): Seconds between sampled frames.

    Returns:
        list[tuple[int, np.ndarray]]: (timestamp index, H x W x 3 uint8 RGB frame) in time order.

    Raises:
        DataError: If the stream cannot be opened or reports no frame rate.
        ConfigurationError: If the interval is shorter than one frame period.
    """
    path = Path(video_path)
    capture = cv2.VideoCapture(str(path))
    try:
        if not capture.isOpened():
            raise DataError(f"❌ Undecodable video: {path}", path=str(path))
        fps = capture.get(cv2.CAP_PROP_FPS)
        frame_count = int(capture.get(cv2.CAP_PROP_FRAME_COUNT))
        if not fps or fps <= 0:
            raise DataError(f"❌ Video has no usable frame rate: {path}", path=str(path))
        if interval * fps < 1.0:
            raise ConfigurationError(
                f"❌ Invalid frame interval {interval}s: shorter than one frame at {fps:g} fps ({path.name})."
            )
        n_samples = int(math.floor(frame_count / fps / interval + 1e-9))
        wanted = {int(round(k * interval * fps)): k for k in range(n_samples)}

        frames = []
        position = 0
        while len(frames) < n_samples:
            ok, frame = capture.read()
            if not ok:
                break
            if position in wanted:
                frames.append((wanted[position], cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)))
            position += 1
    finally:
        capture.release()

    if len(frames) < n_samples:
        logger.warning(f"⚠️ {path.name}: stream ended early, sampled {len(frames)}/{n_samples} frames.")
    return frames


@dataclass(frozen=True)
class _VideoName:
    key: str
    original_key: str
    original_identity: str
    target_identity: str


def _parse_name(stem: str, convention: str, is_fake: bool) -> _VideoName:
    if convention == "celebdf":
        if is_fake:
            match = _CELEBDF_FAKE.match(stem)
            if match:
                a, b, clip = match.groups()
                return _VideoName(stem, f"id{a}_{clip}", f"id{a}", f"id{b}")
        else:
            match = _CELEBDF_ORIGINAL.match(stem)
            if match:
                return _VideoName(stem, stem, f"id{match.group(1)}", f"id{match.group(1)}")
    elif convention == "ffpp":
        if is_fake:
            match = _FFPP_FAKE.match(stem)
            if match:
                a, b = match.groups()
                return _VideoName(stem, a, a, b)
        else:
            match = _FFPP_ORIGINAL.match(stem)
            if match:
                return _VideoName(stem, stem, stem, stem)
    else:
        raise ConfigurationError(f"❌ Unknown naming convention: '{convention}'.")
    raise ValueError(f"name '{stem}' does not follow the {convention} convention")


def _discover(root: Path, convention: str) -> tuple[list[Path], list[tuple[Path, str]]]:
    """Returns original videos and (fake video, source tag) pairs, sorted."""
    if convention == "celebdf":
        # YouTube-real clips have no forged counterparts.
        originals = sorted((root / "Celeb-real").glob("*.mp4"))
        fakes = [(p, "Celeb-synthesis") for p in sorted((root / "Celeb-synthesis").glob("*.mp4"))]
    elif convention == "ffpp":
        originals = sorted((root / "original_sequences").rglob("*.mp4"))
        fakes = []
        for p in sorted((root / "manipulated_sequences").rglob("*.mp4")):
            method = p.relative_to(root / "manipulated_sequences").parts[0]
            fakes.append((p, method))
    else:
        raise ConfigurationError(f"❌ Unknown naming convention: '{convention}'.")
    return originals, fakes


def build_manifest(
    dataset_root: str | Path,
    convention: str,
    seed: int,
    test_fraction: float,
    output_dir: str | Path,
    interval: float = 1.0,
) -> Manifest:
    """
    Samples frames from a real dataset and pairs every fake frame with the
    same-timestamp frame of the original video it was forged from.

    Args:
        dataset_root (str | Path): Root of the dataset in its published layout.
        convention (str): "celebdf" or "ffpp".
        seed (int): Split seed.
        test_fraction (float): Fraction of pairs assigned to the test split.
        output_dir (str | Path): Where frames, the manifest and the build report are written.
        interval (float): Seconds between sampled frames.

    Returns:
        Manifest: The saved manifest, with its build report attached.

    Raises:
        DataError: If the dataset root does not exist.
    """
    root = Path(dataset_root)
    out = Path(output_dir)
    if not root.is_dir():
        raise DataError(f"❌ Dataset root not found: {root}", path=str(root))
    logger.info(f"🚀 Building {convention} manifest from {root}")

    report = BuildReport()
    original_paths, fake_paths = _discover(root, convention)

    originals: dict[str, Path] = {}
    for path in original_paths:
        try:
            name = _parse_name(path.stem, convention, is_fake=False)
        except ValueError as e:
            report.errors.append({"path": str(path.relative_to(root)), "error": str(e)})
            continue
        originals[name.key] = path

    frame_cache: dict[Path, list[str]] = {}

    def frames_for(video: Path) -> list[str]:
        if video not in frame_cache:
            folder = Path("frames") / video.relative_to(root).with_suffix("")
            written = []
            for index, frame in sample_frames(video, interval):
                relative = folder / f"{index:05d}.png"
                write_png(out / relative, frame)
                written.append(relative.as_posix())
            frame_cache[video] = written
        return frame_cache[video]

    drafts = []
    for fake_path, source in fake_paths:
        try:
            name = _parse_name(fake_path.stem, convention, is_fake=True)
        except ValueError as e:
            report.errors.append({"path": str(fake_path.relative_to(root)), "error": str(e)})
            continue
        original_path = originals.get(name.original_key)
        if original_path is None:
            report.orphans_skipped += 1
            logger.warning(f"⚠️ Orphan fake video skipped (no original '{name.original_key}'): {fake_path.name}")
            continue
        fake_frames = frames_for(fake_path)
        original_frames = frames_for(original_path)
        for index in range(min(len(fake_frames), len(original_frames))):
            drafts.append((fake_frames[index], original_frames[index], name, source, index))

    splits = assign_splits(len(drafts), test_fraction, seed)
    records = [
        PairSample(
            fake_path=fake,
            original_path=original,
            original_identity=name.original_identity,
            target_identity=name.target_identity,
            source=source,
            split=split,
            timestamp_index=index,
        )
        for (fake, original, name, source, index), split in zip(drafts, splits)
    ]
    report.pairs = len(records)
    manifest = Manifest(records=records, seed=seed, root=out, report=report)
    manifest.save()
    (out / BUILD_REPORT_NAME).write_text(json.dumps(asdict(report), indent=2, sort_keys=True), encoding="utf-8")
    logger.info(
        f"✅ {report.pairs} pairs, {report.orphans_skipped} orphans skipped, {len(report.errors)} malformed names."
    )
    return manifest


# --- Synthetic corpus ---

def identity_pattern(identity: int, spec: SyntheticSpec) -> np.ndarray:
    """
    Seeded procedural texture standing in for a person's identity.

    A colored background with filled ellipses, rectangles and circles whose
    colors and layout depend only on (spec.seed, identity), softened by a
    Gaussian blur with sigma resolution / 24 so no edge is a hard step.
    """
    rng = np.random.default_rng([spec.seed, identity])
    r = spec.resolution
    canvas = np.empty((r, r, 3), dtype=np.uint8)
    canvas[:] = rng.integers(PALETTE_RANGE[0], PALETTE_RANGE[1], size=3, dtype=np.uint8)
    for _ in range(SHAPES_PER_IDENTITY):
        color = tuple(int(c) for c in rng.integers(PALETTE_RANGE[0], PALETTE_RANGE[1], size=3))
        kind = int(rng.integers(0, 3))
        cx, cy = (int(v) for v in rng.integers(r // 6, r - r // 6, size=2))
        if kind == 0:
            axes = tuple(int(v) for v in rng.integers(max(2, r // 10), max(3, r // 4), size=2))
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(canvas, (cx, cy), axes, angle, 0, 360, color, thickness=-1, lineType=cv2.LINE_AA)
        elif kind == 1:
            half = int(rng.integers(max(2, r // 12), max(3, r // 5)))
            cv2.rectangle(canvas, (cx - half, cy - half), (cx + half, cy + half), color, thickness=-1)
        else:
            radius = int(rng.integers(max(2, r // 12), max(3, r // 5)))
            cv2.circle(canvas, (cx, cy), radius, color, thickness=-1, lineType=cv2.LINE_AA)
    pattern = canvas.astype(np.float32) / 255.0
    return cv2.GaussianBlur(pattern, (0, 0), sigmaX=r * BLUR_SIGMA_FRACTION, borderType=cv2.BORDER_REFLECT)


def sample_transform(rng: np.random.Generator, resolution: int) -> dict[str, float]:
    """Draws one attribute transform: rotation, brightness and translation."""
    shift = MAX_SHIFT_FRACTION * resolution
    return {
        "rotation": float(rng.uniform(*ROTATION_RANGE)),
        "brightness": float(rng.uniform(*BRIGHTNESS_RANGE)),
        "shift_x": float(rng.uniform(-shift, shift)),
        "shift_y": float(rng.uniform(-shift, shift)),
    }


def apply_transform(pattern: np.ndarray, transform: dict[str, float]) -> np.ndarray:
    """Renders an identity pattern under pose (rotation + shift) and illumination (brightness)."""
    r = pattern.shape[0]
    matrix = cv2.getRotationMatrix2D((r / 2.0, r / 2.0), transform["rotation"], 1.0)
    matrix[0, 2] += transform["shift_x"]
    matrix[1, 2] += transform["shift_y"]
    warped = cv2.warpAffine(pattern, matrix, (r, r), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    return np.clip(warped * transform["brightness"], 0.0, 1.0)


def render_pair(
    spec: SyntheticSpec,
    source: int,
    target: int,
    transform: dict[str, float],
    patterns: Optional[dict[int, np.ndarray]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Renders an (original, fake) pair as uint8 rasters.

    The fake shows the target's identity under the original's transform, blended
    with the original by spec.blend_alpha (the share of the original kept).
    """
    patterns = patterns if patterns is not None else {}
    for identity in (source, target):
        if identity not in patterns:
            patterns[identity] = identity_pattern(identity, spec)
    original = apply_transform(patterns[source], transform)
    swapped = apply_transform(patterns[target], transform)
    fake = (1.0 - spec.blend_alpha) * swapped + spec.blend_alpha * original
    return to_uint8(original), to_uint8(fake)


def generate_synthetic(
    spec: SyntheticSpec,
    output_dir: str | Path,
    test_fraction: float = 0.1,
    split_seed: Optional[int] = None,
) -> Manifest:
    """
    Generates a ground-truth forgery corpus: originals, fakes, manifest and metadata sidecar.

    Args:
        spec (SyntheticSpec): Corpus parameters; spec.seed must be set.
        output_dir (str | Path): Corpus directory.
        test_fraction (float): Fraction of pairs in the test split.
        split_seed (Optional[int]): Split seed; defaults to spec.seed.

    Returns:
        Manifest: The saved manifest.

    Raises:
        ConfigurationError: If the spec has no seed.
    """
    if spec.seed is None:
        raise ConfigurationError("❌ Missing Configuration: synthetic.seed must be resolved before generation.")
    out = Path(output_dir)
    logger.info(
        f"🚀 Generating synthetic corpus: {spec.n_identities} identities x {spec.frames_per_identity} frames "
        f"at {spec.resolution}px (seed {spec.seed})"
    )
    rng = np.random.default_rng(spec.seed)
    patterns: dict[int, np.ndarray] = {}
    drafts = []
    pair_meta = []
    for source in range(spec.n_identities):
        for frame in range(spec.frames_per_identity):
            target = int(rng.integers(0, spec.n_identities - 1))
            if target >= source:
                target += 1
            transform = sample_transform(rng, spec.resolution)
            original, fake = render_pair(spec, source, target, transform, patterns)
            original_rel = f"originals/id{source:03d}_f{frame:03d}.png"
            fake_rel = f"fakes/id{source:03d}_id{target:03d}_f{frame:03d}.png"
            write_png(out / original_rel, original)
            write_png(out / fake_rel, fake)
            drafts.append((fake_rel, original_rel, source, target, frame))
            pair_meta.append({
                "fake_path": fake_rel,
                "original_transform": transform,
                "fake_transform": dict(transform),
            })

    seed = spec.seed if split_seed is None else split_seed
    splits = assign_splits(len(drafts), test_fraction, seed)
    records = [
        PairSample(
            fake_path=fake_rel,
            original_path=original_rel,
            original_identity=f"id{source:03d}",
            target_identity=f"id{target:03d}",
            source="synthetic",
            split=split,
            timestamp_index=frame,
        )
        for (fake_rel, original_rel, source, target, frame), split in zip(drafts, splits)
    ]
    manifest = Manifest(records=records, seed=seed, root=out)
    manifest.save()
    meta = {"spec": asdict(spec), "test_fraction": test_fraction, "split_seed": seed, "pairs": pair_meta}
    (out / SYNTHETIC_META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"✅ Synthetic corpus ready at {out} ({len(records)} pairs).")
    return manifest


# --- Loading ---

@dataclass
class PairBatch:
    originals: torch.Tensor
    fakes: torch.Tensor
    records: list[PairSample]


def load_batch(manifest: Manifest, indices: Sequence[int], resolution: int) -> PairBatch:
    """
    Loads pairs by manifest index, in index order.

    Images are decoded, bilinearly resized to the resolution and scaled to [0, 1].

    Raises:
        ConfigurationError: If an index is out of range.
        DataError: If an image cannot be read (the message names the path).
    """
    originals, fakes, records = [], [], []
    for index in indices:
        if not 0 <= index < len(manifest.records):
            raise ConfigurationError(f"❌ Pair index {index} out of range (manifest has {len(manifest.records)}).")
        record = manifest.records[index]
        originals.append(read_image(manifest.resolve(record.original_path), resolution))
        fakes.append(read_image(manifest.resolve(record.fake_path), resolution))
        records.append(record)
    if not records:
        empty = torch.empty(0, 3, resolution, resolution)
        return PairBatch(empty, empty.clone(), [])
    return PairBatch(to_tensor(originals), to_tensor(fakes), records)


class PairDataset(Dataset):
    """Map-style dataset over one split of a manifest, yielding (original, fake) tensors."""
    def __init__(self, manifest: Manifest, split: str, resolution: int):
        self.manifest = manifest
        self.indices = manifest.indices(split)
        self.resolution = resolution

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, item: int) -> tuple[torch.Tensor, torch.Tensor]:
        batch = load_batch(self.manifest, [self.indices[item]], self.resolution)
        return batch.originals[0], batch.fakes[0]
