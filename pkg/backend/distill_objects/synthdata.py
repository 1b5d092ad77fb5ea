"""
Synthetic Instance Segmentation Dataset

This file generates scenes of coloured, possibly occluding geometric shapes together with
their visible-region instance masks, and manages the on-disk dataset built from them:
- `generate_scene` draws one scene, a pure function of (seed, SceneConfig),
- `build_dataset` writes `total` scenes to disk (sample seeds are seed + index),
- `split_dataset` partitions the ids into a labeled and an unlabeled set,
- `load_sample` reads a sample back, with or without its annotations,
- `SampleStore` is the cached, instrumented loader used by the training loop.

Disk layout under a dataset root:
    images/<id>.png              8-bit RGB image
    annotations/<id>.json        {"classes": [...], "masks": ["<id>_<k>.png", ...]}
    annotations/<id>_<k>.png     1-bit mask of instance k
    manifest.json                DatasetManifest (without the root path)

Unlabeled samples are handed out as `ImageSample`, which has no annotation field, and
`load_sample` refuses to read annotations of an unlabeled id.
"""

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field, ValidationError, model_validator

from .config import SceneConfig
from .errors import (
    AnnotationAccessError,
    AnnotationError,
    ConfigError,
    DatasetWriteError,
    UnknownSampleError,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IMAGES_DIR = "images"
ANNOTATIONS_DIR = "annotations"

# Placement attempts per instance when occlusion is disabled
MAX_PLACEMENT_ATTEMPTS = 20


@dataclass
class InstanceSet:
    """n boolean H×W masks and their n class indices."""

    masks: List[np.ndarray] = field(default_factory=list)
    classes: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.masks) != len(self.classes):
            raise ValueError(
                f"instance set has {len(self.masks)} masks but {len(self.classes)} classes"
            )

    def __len__(self) -> int:
        return len(self.classes)

    def stacked(self, size: Tuple[int, int]) -> np.ndarray:
        """Masks as one (n, H, W) boolean array; size is needed when n == 0."""

        if not self.masks:
            return np.zeros((0, *size), dtype=bool)

        return np.stack(self.masks).astype(bool)


@dataclass
class ImageSample:
    sample_id: str
    image: np.ndarray


@dataclass
class LabeledSample(ImageSample):
    instances: InstanceSet


class DatasetManifest(BaseModel):
    """
    Ids of a generated dataset and how they are split.

    root_path is where the dataset lives on disk; it is never written to manifest.json so
    that rebuilding a dataset elsewhere produces identical files.
    """

    labeled_ids: List[str]
    unlabeled_ids: List[str] = Field(default_factory=list)
    root_path: Optional[Path] = Field(default=None, exclude=True)
    generator_seed: int
    class_names: List[str]
    scene_config: SceneConfig
    split_seed: Optional[int] = None
    labeled_fraction: Optional[float] = None

    @model_validator(mode="after")
    def _check_partition(self):
        labeled, unlabeled = set(self.labeled_ids), set(self.unlabeled_ids)
        if len(labeled) != len(self.labeled_ids) or len(unlabeled) != len(self.unlabeled_ids):
            raise ValueError("manifest contains duplicate sample ids")
        if labeled & unlabeled:
            raise ValueError("labeled and unlabeled ids overlap")
        return self

    @property
    def total(self) -> int:
        return len(self.labeled_ids) + len(self.unlabeled_ids)

    @property
    def sample_ids(self) -> List[str]:
        """All ids in generation order."""

        return sorted(self.labeled_ids + self.unlabeled_ids, key=_id_order)

    def require_root(self) -> Path:
        if self.root_path is None:
            raise ConfigError("manifest has no root path; load it with load_manifest")
        return self.root_path


def _id_order(sample_id: str):
    suffix = sample_id.rsplit("_", 1)[-1]
    return (int(suffix), sample_id) if suffix.lstrip("-").isdigit() else (0, sample_id)


def sample_id_for_seed(seed: int) -> str:
    return f"scene_{seed:08d}"


def _shape_polygon(kind: str, center: Tuple[float, float], size: float, aspect: float,
                   angle: float) -> List[Tuple[float, float]]:
    """Vertices of a polygonal shape of the given kind, rotated by angle (radians)."""

    cx, cy = center
    half = size / 2.0

    if kind == "rectangle":
        corners = [(-half, -half * aspect), (half, -half * aspect),
                   (half, half * aspect), (-half, half * aspect)]
    elif kind == "triangle":
        corners = [(half * math.cos(a), half * math.sin(a))
                   for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    elif kind == "diamond":
        corners = [(0.0, -half), (half * aspect, 0.0), (0.0, half), (-half * aspect, 0.0)]
    else:
        raise ValueError(f"no polygon for shape kind {kind!r}")

    cos_a, sin_a = math.cos(angle), math.sin(angle)

    return [(cx + x * cos_a - y * sin_a, cy + x * sin_a + y * cos_a) for x, y in corners]


def _rasterise(kind: str, center: Tuple[float, float], size: float, aspect: float,
               angle: float, image_size: Tuple[int, int]) -> np.ndarray:
    height, width = image_size
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)

    if kind == "circle":
        cx, cy = center
        radius = size / 2.0
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=255)
    else:
        draw.polygon(_shape_polygon(kind, center, size, aspect, angle), fill=255)

    return np.asarray(canvas) > 0


def generate_scene(seed: int, scene_config: SceneConfig) -> LabeledSample:
    """
    Draws one synthetic scene.

    Shapes are painted back-to-front, so a later shape hides the parts of earlier shapes it
    covers; the annotation keeps only visible regions and drops fully hidden instances.

    Parameters:
        seed (int): Seed of the scene; equal seeds and configs give identical samples.
        scene_config (SceneConfig): Image size, classes, instance and size ranges.

    Returns:
        LabeledSample: The image (float32 in [0, 1], exactly representable in 8 bits) and
        its instances.
    """

    rng = np.random.default_rng(seed)
    height, width = scene_config.image_size
    min_count, max_count = scene_config.instance_range
    min_size, max_size = scene_config.size_range

    background = rng.integers(0, 80, size=3)
    noise = rng.normal(0.0, scene_config.background_noise * 255.0, size=(height, width, 3))
    canvas = np.clip(background[None, None, :] + noise, 0, 255)

    visible: List[np.ndarray] = []
    classes: List[int] = []
    occupied = np.zeros((height, width), dtype=bool)

    for _ in range(int(rng.integers(min_count, max_count + 1))):
        class_id = int(rng.integers(len(scene_config.class_names)))
        kind = scene_config.class_names[class_id]
        colour = rng.integers(100, 256, size=3)

        mask = None
        attempts = 1 if scene_config.allow_occlusion else MAX_PLACEMENT_ATTEMPTS

        for _attempt in range(attempts):
            size = float(rng.uniform(min_size, max_size))
            aspect = float(rng.uniform(0.5, 1.0))
            angle = float(rng.uniform(0.0, 2.0 * math.pi))
            half = size / 2.0
            center = (float(rng.uniform(half, width - half)), float(rng.uniform(half, height - half)))
            candidate = _rasterise(kind, center, size, aspect, angle, (height, width))

            if scene_config.allow_occlusion or not (candidate & occupied).any():
                mask = candidate
                break

        if mask is None or not mask.any():
            continue

        for k in range(len(visible)):
            visible[k] &= ~mask

        visible.append(mask.copy())
        classes.append(class_id)
        occupied |= mask
        canvas[mask] = colour

    keep = [k for k, m in enumerate(visible) if m.any()]
    instances = InstanceSet(masks=[visible[k] for k in keep], classes=[classes[k] for k in keep])
    image = np.round(canvas).astype(np.uint8).astype(np.float32) / 255.0

    return LabeledSample(sample_id=sample_id_for_seed(seed), image=image, instances=instances)


def write_sample(root: Path, sample: LabeledSample) -> None:
    """Writes one sample in the dataset layout; OSError becomes DatasetWriteError."""

    sid = sample.sample_id

    try:
        pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(root / IMAGES_DIR / f"{sid}.png")

        mask_names = []
        for k, mask in enumerate(sample.instances.masks):
            name = f"{sid}_{k}.png"
            Image.fromarray(np.asarray(mask, dtype=bool)).save(root / ANNOTATIONS_DIR / name)
            mask_names.append(name)

        annotation = {"classes": [int(c) for c in sample.instances.classes], "masks": mask_names}
        (root / ANNOTATIONS_DIR / f"{sid}.json").write_text(json.dumps(annotation))
    except OSError as exc:
        raise DatasetWriteError(sid, str(exc)) from exc


def build_dataset(total: int, seed: int, scene_config: SceneConfig, root_path: Union[str, Path],
                  workers: int = 1) -> DatasetManifest:
    """
    Generates and writes `total` scenes under root_path.

    Parameters:
        total (int): Number of samples, at least 2.
        seed (int): Base seed; sample i uses seed + i.
        scene_config (SceneConfig): Scene generator configuration.
        root_path (str | Path): Dataset root, created if needed.
        workers (int): Parallel writer threads; output does not depend on it.

    Returns:
        DatasetManifest: All ids labeled, root_path set.
    """

    if total < 2:
        raise ConfigError(f"a dataset needs at least 2 samples, got {total}")
    if seed < 0:
        raise ConfigError(f"dataset seed must be non-negative, got {seed}")

    root = Path(root_path)

    try:
        (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
        (root / ANNOTATIONS_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetWriteError("<root>", str(exc)) from exc

    def build_one(index: int) -> str:
        sample = generate_scene(seed + index, scene_config)
        write_sample(root, sample)
        return sample.sample_id

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ids = list(pool.map(build_one, range(total)))
    else:
        ids = [build_one(index) for index in range(total)]

    manifest = DatasetManifest(
        labeled_ids=ids,
        unlabeled_ids=[],
        root_path=root,
        generator_seed=seed,
        class_names=list(scene_config.class_names),
        scene_config=scene_config,
    )
    save_manifest(manifest)

    logger.info("Wrote %d samples to %s", total, root)

    return manifest


def split_dataset(manifest: DatasetManifest, labeled_fraction: float, split_seed: int) -> DatasetManifest:
    """
    Selects floor(labeled_fraction × total) ids uniformly at random as labeled.

    Parameters:
        manifest (DatasetManifest): Manifest to split; its current split is ignored.
        labeled_fraction (float): Fraction in (0, 1].
        split_seed (int): Seed of the selection.

    Returns:
        DatasetManifest: A new manifest; the input is left unchanged.
    """

    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled fraction must lie in (0, 1], got {labeled_fraction}")

    ids = manifest.sample_ids
    count = math.floor(labeled_fraction * len(ids) + 1e-9)

    if count == 0:
        raise ConfigError(
            f"labeled fraction {labeled_fraction} of {len(ids)} samples leaves no labeled sample"
        )

    rng = np.random.default_rng(split_seed)
    chosen = set(int(i) for i in rng.choice(len(ids), size=count, replace=False))

    return manifest.model_copy(update={
        "labeled_ids": [sid for i, sid in enumerate(ids) if i in chosen],
        "unlabeled_ids": [sid for i, sid in enumerate(ids) if i not in chosen],
        "split_seed": split_seed,
        "labeled_fraction": labeled_fraction,
    })


def save_manifest(manifest: DatasetManifest, root_path: Optional[Path] = None) -> Path:
    root = Path(root_path) if root_path is not None else manifest.require_root()
    path = root / MANIFEST_NAME

    try:
        path.write_text(manifest.model_dump_json(indent=2))
    except OSError as exc:
        raise DatasetWriteError(MANIFEST_NAME, str(exc)) from exc

    return path


def load_manifest(root_path: Union[str, Path]) -> DatasetManifest:
    root = Path(root_path)
    path = root / MANIFEST_NAME

    try:
        manifest = DatasetManifest.model_validate_json(path.read_text())
    except OSError as exc:
        raise ConfigError(f"no dataset manifest at {path}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"invalid dataset manifest {path}: {exc}") from exc

    return manifest.model_copy(update={"root_path": root})


def load_sample(manifest: DatasetManifest, sample_id: str,
                with_labels: bool = True) -> Union[LabeledSample, ImageSample]:
    """
    Reads a sample from disk.

    Parameters:
        manifest (DatasetManifest): Manifest with root_path set.
        sample_id (str): Id of the sample.
        with_labels (bool): Also read the annotations; refused for unlabeled ids.

    Returns:
        LabeledSample when with_labels is set, ImageSample otherwise.
    """

    if sample_id in manifest.unlabeled_ids:
        if with_labels:
            raise AnnotationAccessError(sample_id)
    elif sample_id not in manifest.labeled_ids:
        raise UnknownSampleError(sample_id)

    root = manifest.require_root()

    try:
        with Image.open(root / IMAGES_DIR / f"{sample_id}.png") as handle:
            image = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise AnnotationError(sample_id, f"unreadable image: {exc}") from exc

    if not with_labels:
        return ImageSample(sample_id=sample_id, image=image)

    return LabeledSample(sample_id=sample_id, image=image,
                         instances=_read_annotation(root, sample_id, image.shape[:2],
                                                    len(manifest.class_names)))


def _read_annotation(root: Path, sample_id: str, size: Tuple[int, int], num_classes: int) -> InstanceSet:
    try:
        annotation = json.loads((root / ANNOTATIONS_DIR / f"{sample_id}.json").read_text())
        classes = [int(c) for c in annotation["classes"]]
        names = list(annotation["masks"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise AnnotationError(sample_id, f"unreadable annotation: {exc}") from exc

    if len(classes) != len(names):
        raise AnnotationError(sample_id, f"{len(names)} masks but {len(classes)} classes")

    masks = []
    for name in names:
        try:
            with Image.open(root / ANNOTATIONS_DIR / name) as handle:
                mask = np.asarray(handle.convert("1"), dtype=bool)
        except OSError as exc:
            raise AnnotationError(sample_id, f"unreadable mask {name}: {exc}") from exc

        if mask.shape != tuple(size):
            raise AnnotationError(sample_id, f"mask {name} has shape {mask.shape}, image {size}")
        if not mask.any():
            raise AnnotationError(sample_id, f"mask {name} is empty")

        masks.append(mask)

    if any(c < 0 or c >= num_classes for c in classes):
        raise AnnotationError(sample_id, f"class index outside [0, {num_classes - 1}]")

    return InstanceSet(masks=masks, classes=classes)


class SampleStore:
    """
    Cached access to the samples of one manifest.

    labeled(i) and unlabeled(i) index into the manifest's id lists; the load counters count
    every request, cached or not, so tests can assert which split a training run touched.
    """

    def __init__(self, manifest: DatasetManifest, cache: bool = True):
        manifest.require_root()
        self.manifest = manifest
        self.cache = cache
        self.labeled_loads = 0
        self.unlabeled_loads = 0
        self._samples: Dict[Tuple[str, bool], ImageSample] = {}
        self._lock = threading.Lock()

    @property
    def num_labeled(self) -> int:
        return len(self.manifest.labeled_ids)

    @property
    def num_unlabeled(self) -> int:
        return len(self.manifest.unlabeled_ids)

    @property
    def class_names(self) -> List[str]:
        return self.manifest.class_names

    def _get(self, sample_id: str, with_labels: bool) -> ImageSample:
        key = (sample_id, with_labels)

        with self._lock:
            if key in self._samples:
                return self._samples[key]

        sample = load_sample(self.manifest, sample_id, with_labels=with_labels)

        if self.cache:
            with self._lock:
                self._samples[key] = sample

        return sample

    def labeled(self, index: int) -> LabeledSample:
        with self._lock:
            self.labeled_loads += 1
        return self._get(self.manifest.labeled_ids[index], True)

    def unlabeled(self, index: int) -> ImageSample:
        with self._lock:
            self.unlabeled_loads += 1
        return self._get(self.manifest.unlabeled_ids[index], False)
