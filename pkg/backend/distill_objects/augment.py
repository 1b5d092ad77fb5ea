"""
Teacher and student views of training images.

The teacher sees a weakly augmented view (random sized crop and horizontal flip), the
student sees the same crop and flip plus photometric noise (colour jitter, grayscale,
blur). Both views of an image share one `GeometricTransform`, so teacher pseudo-masks are
already aligned with the student's view. `cutout_augment` and the other `AugmentMode`s
exist for the augmentation ablation.

Images inside the pipeline are float tensors in CHW layout with values in [0, 1]; every
random choice is drawn from a `numpy.random.Generator` passed in by the caller.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .config import AugmentConfig
from .enums import AugmentMode
from .synthdata import InstanceSet

ImageLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class GeometricTransform:
    """
    A crop (x0, y0, w, h) in source pixels, resized to output_size (H, W), then an
    optional horizontal flip.
    """

    crop_box: Tuple[int, int, int, int]
    hflip: bool
    output_size: Tuple[int, int]
    source_size: Tuple[int, int]

    def __post_init__(self):
        x0, y0, w, h = self.crop_box
        height, width = self.source_size
        if x0 < 0 or y0 < 0 or x0 + w > width or y0 + h > height:
            raise ValueError(f"crop box {self.crop_box} outside a {width}x{height} image")
        if min(w, h) < min(16, width, height):
            raise ValueError(f"crop box {self.crop_box} is smaller than 16 pixels")

    @classmethod
    def identity(cls, size: Tuple[int, int]) -> "GeometricTransform":
        height, width = size
        return cls(crop_box=(0, 0, width, height), hflip=False, output_size=(height, width),
                   source_size=(height, width))

    @property
    def keeps_resolution(self) -> bool:
        x0, y0, w, h = self.crop_box
        return (x0, y0) == (0, 0) and (h, w) == tuple(self.source_size) == tuple(self.output_size)


@dataclass
class AugmentedPair:
    teacher_view: torch.Tensor
    student_view: torch.Tensor
    shared_geometry: GeometricTransform


def to_tensor_image(image: ImageLike) -> torch.Tensor:
    """H×W×3 array (or CHW tensor) to a float32 CHW tensor."""

    if isinstance(image, torch.Tensor):
        return image.float()

    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))


def to_numpy_image(image: torch.Tensor) -> np.ndarray:
    return image.detach().cpu().numpy().transpose(1, 2, 0)


def apply_geometry(image: ImageLike, geometry: GeometricTransform) -> torch.Tensor:
    """Bilinear crop-and-resize followed by the flip; an identity crop is left untouched."""

    tensor = to_tensor_image(image)
    x0, y0, w, h = geometry.crop_box

    if not geometry.keeps_resolution:
        tensor = TF.resized_crop(tensor, top=y0, left=x0, height=h, width=w,
                                 size=list(geometry.output_size),
                                 interpolation=InterpolationMode.BILINEAR, antialias=False)

    if geometry.hflip:
        tensor = TF.hflip(tensor)

    return tensor


def sample_geometry(source_size: Tuple[int, int], rng: np.random.Generator, cfg: AugmentConfig,
                    output_size: Optional[Tuple[int, int]] = None) -> GeometricTransform:
    height, width = source_size
    low, high = cfg.crop_scale

    crop_w = int(min(width, max(cfg.min_crop, round(width * rng.uniform(low, high)))))
    crop_h = int(min(height, max(cfg.min_crop, round(height * rng.uniform(low, high)))))
    x0 = int(rng.integers(0, width - crop_w + 1))
    y0 = int(rng.integers(0, height - crop_h + 1))
    hflip = bool(rng.random() < cfg.hflip_prob)

    return GeometricTransform(crop_box=(x0, y0, crop_w, crop_h), hflip=hflip,
                              output_size=tuple(output_size or source_size),
                              source_size=(height, width))


def weak_augment(image: ImageLike, rng: np.random.Generator, cfg: AugmentConfig,
                 output_size: Optional[Tuple[int, int]] = None) -> Tuple[torch.Tensor, GeometricTransform]:
    """
    Random sized crop (each side scaled by a factor in cfg.crop_scale) resized back to
    output_size, then a horizontal flip with probability cfg.hflip_prob.

    Returns:
        tuple: The augmented CHW tensor and the transform that produced it.
    """

    tensor = to_tensor_image(image)
    geometry = sample_geometry(tuple(tensor.shape[-2:]), rng, cfg, output_size)

    return apply_geometry(tensor, geometry), geometry


def photometric_augment(image: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    """
    Brightness, contrast, saturation and hue jitter, random grayscale and random Gaussian
    blur, in that order. All draws happen up front so the stream does not depend on which
    operations fire; neutral factors are skipped.
    """

    brightness = rng.uniform(*cfg.brightness)
    contrast = rng.uniform(*cfg.contrast)
    saturation = rng.uniform(*cfg.saturation)
    hue = rng.uniform(*cfg.hue)
    grayscale = rng.random() < cfg.grayscale_prob
    blur = rng.random() < cfg.blur_prob
    sigma = float(rng.uniform(*cfg.blur_sigma))

    out = image

    if brightness != 1.0:
        out = TF.adjust_brightness(out, float(brightness))
    if contrast != 1.0:
        out = TF.adjust_contrast(out, float(contrast))
    if saturation != 1.0:
        out = TF.adjust_saturation(out, float(saturation))
    if hue != 0.0:
        out = TF.adjust_hue(out, float(hue))
    if grayscale:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if blur:
        kernel = 2 * math.ceil(3.0 * sigma) + 1
        kernel = min(kernel, 2 * (min(out.shape[-2:]) // 2) - 1)
        out = TF.gaussian_blur(out, kernel_size=[kernel, kernel], sigma=[sigma, sigma])

    return out.clamp(0.0, 1.0)


def strong_augment(image: ImageLike, geometry: GeometricTransform, rng: np.random.Generator,
                   cfg: AugmentConfig) -> torch.Tensor:
    """
    Applies the weak view's geometry to the source image, then photometric noise only.

    Parameters:
        image: Source image (the one weak_augment was called on).
        geometry (GeometricTransform): Transform returned by weak_augment.
        rng (Generator): Random stream for the photometric draws.
        cfg (AugmentConfig): Magnitudes and probabilities.

    Returns:
        torch.Tensor: Student view, values in [0, 1].
    """

    return photometric_augment(apply_geometry(image, geometry), rng, cfg)


def cutout_augment(image: ImageLike, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    """Zeroes cfg.cutout_count rectangles, each covering a cfg.cutout_area share of the image."""

    out = to_tensor_image(image).clone()
    height, width = out.shape[-2:]
    low, high = cfg.cutout_count

    for _ in range(int(rng.integers(low, high + 1))):
        area = rng.uniform(*cfg.cutout_area) * height * width
        aspect = rng.uniform(*cfg.cutout_aspect)
        box_h = int(min(height, max(1, round(math.sqrt(area * aspect)))))
        box_w = int(min(width, max(1, round(math.sqrt(area / aspect)))))
        y0 = int(rng.integers(0, height - box_h + 1))
        x0 = int(rng.integers(0, width - box_w + 1))
        out[:, y0:y0 + box_h, x0:x0 + box_w] = 0.0

    return out


def transform_instances(instances: InstanceSet, geometry: GeometricTransform) -> InstanceSet:
    """
    Moves masks into the augmented view: crop, nearest-neighbour resize, flip. Instances
    left without a foreground pixel are dropped.
    """

    x0, y0, w, h = geometry.crop_box
    masks, classes = [], []

    for mask, class_id in zip(instances.masks, instances.classes):
        out = np.asarray(mask, dtype=bool)

        if not geometry.keeps_resolution:
            crop = torch.from_numpy(out[y0:y0 + h, x0:x0 + w].astype(np.float32))[None, None]
            out = F.interpolate(crop, size=tuple(geometry.output_size), mode="nearest")[0, 0].numpy() > 0.5

        if geometry.hflip:
            out = out[:, ::-1]

        if out.any():
            masks.append(np.ascontiguousarray(out))
            classes.append(class_id)

    return InstanceSet(masks=masks, classes=classes)


def resize_instances(instances: InstanceSet, size: Tuple[int, int]) -> InstanceSet:
    """Area-averaged downsampling of masks to `size`, thresholded at 0.5; vanished instances are dropped."""

    if not instances.masks or tuple(instances.masks[0].shape) == tuple(size):
        return instances

    stacked = torch.from_numpy(np.stack(instances.masks).astype(np.float32))[None]
    resized = (F.interpolate(stacked, size=tuple(size), mode="area")[0] >= 0.5).numpy()

    keep = [k for k in range(len(instances)) if resized[k].any()]

    return InstanceSet(masks=[resized[k] for k in keep], classes=[instances.classes[k] for k in keep])


def make_views(image: ImageLike, rng: np.random.Generator, cfg: AugmentConfig,
               output_size: Optional[Tuple[int, int]] = None) -> AugmentedPair:
    """
    Teacher and student views of one unlabeled image under cfg.mode:
    OURS gives weak/strong, POLITE_TEACHER_CUTOUT adds cutout to the strong view,
    SAME_AS_TEACHER hands the weak view to both, NONE leaves the image untouched.
    """

    source = to_tensor_image(image)

    if cfg.mode == AugmentMode.NONE:
        geometry = GeometricTransform.identity(tuple(source.shape[-2:]))
        view = apply_geometry(source, geometry)
        return AugmentedPair(teacher_view=view, student_view=view.clone(), shared_geometry=geometry)

    teacher_view, geometry = weak_augment(source, rng, cfg, output_size)

    if cfg.mode == AugmentMode.SAME_AS_TEACHER:
        student_view = teacher_view.clone()
    else:
        student_view = strong_augment(source, geometry, rng, cfg)
        if cfg.mode == AugmentMode.POLITE_TEACHER_CUTOUT:
            student_view = cutout_augment(student_view, rng, cfg)

    return AugmentedPair(teacher_view=teacher_view, student_view=student_view, shared_geometry=geometry)


def labeled_view(image: ImageLike, instances: InstanceSet, rng: np.random.Generator,
                 cfg: AugmentConfig) -> Tuple[torch.Tensor, InstanceSet]:
    """Weakly augmented labeled image with its instances moved along; NONE mode is the identity."""

    source = to_tensor_image(image)

    if cfg.mode == AugmentMode.NONE:
        return source, instances

    view, geometry = weak_augment(source, rng, cfg)

    return view, transform_instances(instances, geometry)
