"""Procedural clear-weather scenes, aligned weather triplets and their on-disk form.

A scene is a textured ground plane with a few discs, boxes and triangles
standing on it. Depth falls from ``far_depth`` at the top row to
``near_depth`` at the bottom row, and every object takes the ground depth at
its base. Triplets pair the clear scene (source) with the same scene rendered
in the target weather at Large intensity and in the other weather (auxiliary).

On disk a split is ``<root>/<split>.json`` (the manifest) plus
``<root>/<split>/`` holding PNGs and ``annotations.jsonl``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from .errors import DatasetError, InputError
from .weathergen import (
    FogParams,
    Intensity,
    RainSpec,
    Weather,
    check_depth,
    check_image,
    load_depth_png,
    load_image_png,
    quantize_depth,
    quantize_image,
    render_weather,
    save_depth_png,
    save_image_png,
)

logger = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ("disc", "box", "triangle")
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class AnnotatedImage:
    image: np.ndarray                 # H x W x 3, float32 in [0, 1]
    boxes: np.ndarray                 # N x 4 (x_min, y_min, x_max, y_max), pixels
    labels: np.ndarray                # N class ids
    depth: np.ndarray | None = None   # metres; clear images only
    masks: tuple[np.ndarray, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self) -> None:
        check_image(self.image)
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise InputError(f"{len(self.boxes)} boxes but {len(self.labels)} labels")
        height, width = self.image.shape[:2]
        if len(self.boxes):
            x0, y0, x1, y1 = self.boxes.T
            if np.any(x0 >= x1) or np.any(y0 >= y1):
                raise InputError("boxes must satisfy x_min < x_max and y_min < y_max")
            if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x1 > width) or np.any(y1 > height):
                raise InputError(f"boxes must lie within the {width}x{height} image")
            if np.any(self.labels < 0):
                raise InputError("class ids must be non-negative")
        if self.depth is not None:
            check_depth(self.depth, (height, width))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def same_annotations(self, other: AnnotatedImage) -> bool:
        return np.array_equal(self.boxes, other.boxes) and np.array_equal(
            self.labels, other.labels
        )


@dataclass
class AlignedTriplet:
    source: AnnotatedImage
    auxiliary: AnnotatedImage
    target: AnnotatedImage
    target_weather: Weather = Weather.FOG
    sample_id: str = ""

    def __post_init__(self) -> None:
        self.target_weather = Weather(self.target_weather)
        shapes = {self.source.shape, self.auxiliary.shape, self.target.shape}
        if len(shapes) != 1:
            raise InputError(f"triplet images differ in size: {sorted(shapes)}")
        if not (self.source.same_annotations(self.auxiliary)
                and self.source.same_annotations(self.target)):
            raise InputError("triplet members must share one annotation set")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 96
    height: int = 96
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    object_count: tuple[int, int] = (1, 6)
    object_size: tuple[int, int] = (12, 32)
    near_depth: float = 10.0
    far_depth: float = 300.0
    object_depth_offset: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self) -> None:
        if self.width < 16 or self.height < 16:
            raise InputError(f"scene must be at least 16x16, got {self.width}x{self.height}")
        lo, hi = self.object_count
        if lo < 0 or lo > hi:
            raise InputError(f"bad object_count range {self.object_count}")
        smin, smax = self.object_size
        if smin < 4 or smin > smax or smax > min(self.width, self.height):
            raise InputError(f"bad object_size range {self.object_size}")
        if not 0 <= self.near_depth < self.far_depth:
            raise InputError("depth range must satisfy 0 <= near_depth < far_depth")
        if not self.class_names:
            raise InputError("at least one class is required")
        if len(self.class_names) > len(DEFAULT_CLASS_NAMES):
            raise InputError(
                f"scenes draw {len(DEFAULT_CLASS_NAMES)} shape kinds "
                f"{DEFAULT_CLASS_NAMES}, got {len(self.class_names)} class names"
            )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def fingerprint(self, *extra: Any) -> str:
        payload = json.dumps([dataclasses.asdict(self), *extra], sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def mask_to_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight box around a boolean mask, with exclusive max edges."""
    ys, xs = np.nonzero(mask)
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def _draw_shape(kind: int, x0: int, y0: int, size: int, height: int,
                canvas: tuple[int, int]) -> np.ndarray:
    layer = Image.new("L", canvas, 0)
    draw = ImageDraw.Draw(layer)
    x1, y1 = x0 + size - 1, y0 + height - 1
    if kind == 0:
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif kind == 1:
        draw.rectangle([x0, y0, x1, y1], fill=255)
    else:
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2, y0)], fill=255)
    return np.asarray(layer) > 0


def _overlaps(box: tuple[float, ...], placed: list[tuple[float, ...]], margin: float) -> bool:
    for other in placed:
        if (box[0] < other[2] + margin and other[0] < box[2] + margin
                and box[1] < other[3] + margin and other[1] < box[3] + margin):
            return True
    return False


def gen_scene(rng: np.random.Generator, spec: SceneSpec = SceneSpec()) -> AnnotatedImage:
    height, width = spec.height, spec.width
    rows = np.arange(height, dtype=np.float32) / np.float32(height - 1)
    ground = spec.far_depth - (spec.far_depth - spec.near_depth) * rows
    depth = np.repeat(ground[:, None], width, axis=1).astype(np.float32)

    base = rng.uniform(0.2, 0.5, size=3).astype(np.float32)
    shade = (0.75 + 0.5 * rows)[:, None, None]
    image = base * shade + rng.normal(0.0, 0.03, size=(height, width, 3)).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    wanted = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    boxes: list[tuple[float, ...]] = []
    labels: list[int] = []
    masks: list[np.ndarray] = []
    attempts = 0
    while len(boxes) < wanted and attempts < 50 * max(wanted, 1):
        attempts += 1
        kind = int(rng.integers(spec.num_classes))
        size = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        tall = size if kind != 1 else max(4, int(round(size * rng.uniform(0.6, 1.0))))
        x0 = int(rng.integers(0, width - size + 1))
        y0 = int(rng.integers(0, height - tall + 1))
        mask = _draw_shape(kind, x0, y0, size, tall, (width, height))
        if not mask.any():
            continue
        box = mask_to_box(mask)
        # Non-overlapping placement keeps every object fully visible.
        if _overlaps(box, boxes, margin=1.0):
            continue
        color = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
        color[int(rng.integers(3))] *= np.float32(0.3)
        base_row = int(box[3]) - 1
        offset = np.float32(rng.uniform(*spec.object_depth_offset))
        image[mask] = color
        depth[mask] = max(float(ground[base_row] + offset), 0.0)
        boxes.append(box)
        labels.append(kind)
        masks.append(mask)

    if len(boxes) < wanted:
        logger.debug("placed %d of %d objects", len(boxes), wanted)
    return AnnotatedImage(
        image=quantize_image(image),
        boxes=np.array(boxes, dtype=np.float32).reshape(-1, 4),
        labels=np.array(labels, dtype=np.int64),
        depth=quantize_depth(depth),
        masks=tuple(masks),
    )


# ---------------------------------------------------------------------------
# Triplets
# ---------------------------------------------------------------------------


def render_weather_image(
    clear: AnnotatedImage,
    weather: Weather | str,
    level: Intensity | str,
    seed: int,
    *,
    fog_params: FogParams | None = None,
    rain_spec: RainSpec | None = None,
) -> AnnotatedImage:
    if clear.depth is None:
        raise InputError("weather rendering needs a clear image with a depth map")
    rendered = render_weather(
        clear.image, clear.depth, weather, level, seed,
        fog_params=fog_params, rain_spec=rain_spec,
    )
    return AnnotatedImage(
        image=quantize_image(rendered), boxes=clear.boxes.copy(), labels=clear.labels.copy()
    )


def build_triplet(
    clear: AnnotatedImage,
    target_weather: Weather | str,
    *,
    target_level: Intensity | str = Intensity.LARGE,
    auxiliary_level: Intensity | str = Intensity.LARGE,
    seed: int = 0,
    fog_params: FogParams | None = None,
    rain_spec: RainSpec | None = None,
    sample_id: str = "",
) -> AlignedTriplet:
    """Pair ``clear`` with its target-weather and other-weather renders."""
    if clear.depth is None:
        raise InputError("build_triplet needs a clear image with a depth map")
    target_weather = Weather(target_weather)
    render = dict(fog_params=fog_params, rain_spec=rain_spec)
    target = render_weather_image(clear, target_weather, target_level, seed, **render)
    auxiliary = render_weather_image(clear, target_weather.other, auxiliary_level, seed, **render)
    return AlignedTriplet(
        source=clear,
        auxiliary=auxiliary,
        target=target,
        target_weather=target_weather,
        sample_id=sample_id,
    )


# ---------------------------------------------------------------------------
# Manifest and dataset I/O
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    id: str
    source: str
    auxiliary: str
    target: str
    depth: str


@dataclass
class DatasetManifest:
    split: str
    records: list[SampleRecord]
    class_names: tuple[str, ...]
    seed: int
    spec_hash: str
    target_weather: str = Weather.FOG.value
    target_level: str = Intensity.LARGE.value
    auxiliary_level: str = Intensity.LARGE.value
    root: Path = field(default=Path("."), compare=False)
    annotations: dict[str, tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False
    )

    @property
    def path(self) -> Path:
        return self.root / f"{self.split}.json"

    @property
    def annotations_path(self) -> Path:
        return self.root / self.split / "annotations.jsonl"

    def to_json(self) -> dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "class_names": list(self.class_names),
            "seed": self.seed,
            "spec_hash": self.spec_hash,
            "target_weather": self.target_weather,
            "target_level": self.target_level,
            "auxiliary_level": self.auxiliary_level,
            "annotations": f"{self.split}/annotations.jsonl",
            "records": [dataclasses.asdict(r) for r in self.records],
        }


def write_dataset(
    samples: Sequence[AlignedTriplet],
    directory: Path,
    split: str = "train",
    *,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
    seed: int = 0,
    spec_hash: str = "",
    target_level: Intensity | str = Intensity.LARGE,
    auxiliary_level: Intensity | str = Intensity.LARGE,
) -> DatasetManifest:
    directory = Path(directory)
    split_dir = directory / split
    split_dir.mkdir(parents=True, exist_ok=True)
    weather = samples[0].target_weather if samples else Weather.FOG

    records: list[SampleRecord] = []
    lines: list[str] = []
    for index, sample in enumerate(samples):
        if sample.source.depth is None:
            raise InputError(f"sample {index} has no depth map on its source image")
        sample_id = sample.sample_id or f"{split}-{index:05d}"
        rel = {m: f"{split}/{sample_id}_{m}.png" for m in ("source", "auxiliary", "target", "depth")}
        save_image_png(sample.source.image, directory / rel["source"])
        save_image_png(sample.auxiliary.image, directory / rel["auxiliary"])
        save_image_png(sample.target.image, directory / rel["target"])
        save_depth_png(sample.source.depth, directory / rel["depth"])
        records.append(SampleRecord(id=sample_id, **rel))
        lines.append(json.dumps({
            "id": sample_id,
            "boxes": sample.source.boxes.tolist(),
            "labels": sample.source.labels.tolist(),
        }))

    manifest = DatasetManifest(
        split=split,
        records=records,
        class_names=tuple(class_names),
        seed=seed,
        spec_hash=spec_hash,
        target_weather=Weather(weather).value,
        target_level=Intensity(target_level).value,
        auxiliary_level=Intensity(auxiliary_level).value,
        root=directory,
    )
    manifest.annotations_path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    manifest.path.write_text(json.dumps(manifest.to_json(), indent=2), encoding="utf-8")
    manifest.annotations = {
        s_id: (s.source.boxes.copy(), s.source.labels.copy())
        for s_id, s in zip((r.id for r in records), samples)
    }
    logger.info("wrote %d samples to %s", len(records), manifest.path)
    return manifest


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise DatasetError(path, "missing file")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(path, f"cannot decode JSON ({exc})") from exc


def load_manifest(path: Path | str) -> DatasetManifest:
    """Read a manifest and its annotations; every referenced file must exist."""
    path = Path(path)
    raw = _read_json(path)
    root = path.parent
    try:
        records = [SampleRecord(**r) for r in raw["records"]]
        manifest = DatasetManifest(
            split=raw["split"],
            records=records,
            class_names=tuple(raw["class_names"]),
            seed=int(raw["seed"]),
            spec_hash=raw["spec_hash"],
            target_weather=raw.get("target_weather", Weather.FOG.value),
            target_level=raw.get("target_level", Intensity.LARGE.value),
            auxiliary_level=raw.get("auxiliary_level", Intensity.LARGE.value),
            root=root,
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(path, f"malformed manifest ({exc})") from exc

    for record in records:
        for rel in (record.source, record.auxiliary, record.target, record.depth):
            if not (root / rel).exists():
                raise DatasetError(root / rel, "missing file")

    ann_path = manifest.annotations_path
    if not ann_path.exists():
        raise DatasetError(ann_path, "missing file")
    for lineno, line in enumerate(ann_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            boxes = np.asarray(entry["boxes"], dtype=np.float32).reshape(-1, 4)
            labels = np.asarray(entry["labels"], dtype=np.int64)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DatasetError(ann_path, f"bad annotation on line {lineno} ({exc})") from exc
        if len(labels) and labels.max() >= len(manifest.class_names):
            raise DatasetError(ann_path, f"class id out of range on line {lineno}")
        manifest.annotations[entry["id"]] = (boxes, labels)
    missing = [r.id for r in records if r.id not in manifest.annotations]
    if missing:
        raise DatasetError(ann_path, f"no annotations for {missing[:3]}")
    return manifest


def read_sample(manifest: DatasetManifest, index: int) -> AlignedTriplet:
    record = manifest.records[index]
    boxes, labels = manifest.annotations[record.id]
    root = manifest.root

    def member(rel: str, depth: np.ndarray | None = None) -> AnnotatedImage:
        return AnnotatedImage(
            image=load_image_png(root / rel), boxes=boxes.copy(), labels=labels.copy(), depth=depth
        )

    return AlignedTriplet(
        source=member(record.source, load_depth_png(root / record.depth)),
        auxiliary=member(record.auxiliary),
        target=member(record.target),
        target_weather=Weather(manifest.target_weather),
        sample_id=record.id,
    )


def read_dataset(manifest: DatasetManifest | Path | str) -> list[AlignedTriplet]:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    return [read_sample(manifest, i) for i in range(len(manifest.records))]


class TripletDataset(Dataset):
    """Lazily decoded triplets of one split, in manifest order."""

    def __init__(self, manifest: DatasetManifest | Path | str) -> None:
        if not isinstance(manifest, DatasetManifest):
            manifest = load_manifest(manifest)
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.manifest.records)

    def __getitem__(self, index: int) -> AlignedTriplet:
        return read_sample(self.manifest, index)


# ---------------------------------------------------------------------------
# Split synthesis
# ---------------------------------------------------------------------------

VAL_LEVEL_SPLITS = {
    Intensity.SMALL: "val-small",
    Intensity.MEDIUM: "val-medium",
    Intensity.LARGE: "val-large",
}


def synthesize_splits(
    directory: Path,
    *,
    n_train: int,
    n_val: int,
    target_weather: Weather | str = Weather.FOG,
    seed: int = 0,
    scene_spec: SceneSpec = SceneSpec(),
    rain_spec: RainSpec | None = None,
    levels: Sequence[Intensity] = tuple(Intensity),
    train_level: Intensity | str = Intensity.LARGE,
    auxiliary_level: Intensity | str = Intensity.LARGE,
) -> dict[str, DatasetManifest]:
    """Generate the training split and one validation split per target level.

    Training and validation scenes come from disjoint children of one seed
    sequence. The level splits share their scenes and differ only in target
    intensity.
    """
    target_weather = Weather(target_weather)
    rain_spec = rain_spec or RainSpec()
    spec_hash = scene_spec.fingerprint(dataclasses.asdict(rain_spec), target_weather.value)
    train_seq, val_seq = np.random.SeedSequence(seed).spawn(2)
    common = dict(class_names=scene_spec.class_names, seed=seed, spec_hash=spec_hash)

    def triplets(seeds: list[np.random.SeedSequence], split: str, level: Intensity):
        out: list[AlignedTriplet] = []
        for i, child in enumerate(seeds):
            clear = gen_scene(np.random.default_rng(child), scene_spec)
            render_seed = int(child.generate_state(1)[0])
            out.append(build_triplet(
                clear, target_weather, target_level=level, auxiliary_level=auxiliary_level,
                seed=render_seed, rain_spec=rain_spec, sample_id=f"{split}-{i:05d}",
            ))
        return out

    manifests = {
        "train": write_dataset(
            triplets(train_seq.spawn(n_train), "train", Intensity(train_level)),
            directory, "train", target_level=train_level, auxiliary_level=auxiliary_level,
            **common,
        )
    }
    val_seeds = val_seq.spawn(n_val)
    for level in levels:
        split = VAL_LEVEL_SPLITS[Intensity(level)]
        manifests[split] = write_dataset(
            triplets(val_seeds, split, Intensity(level)),
            directory, split, target_level=level, auxiliary_level=auxiliary_level,
            **common,
        )
    return manifests
