"""Image preprocessing: resize the shorter side, center crop, normalize.

Matches the published preprocessing of the default vision encoder
(deit-base-patch16-224): shorter side to 256 with bicubic resampling,
224x224 center crop, scale to [0, 1], then per-channel mean/std
normalization with the ImageNet constants.
"""
from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


class ImageDecodeError(Exception):
    """The file could not be decoded as an image."""


def preprocess_image(path, resize_to: int = 256, crop_to: int = 224,
                     mean=IMAGE_MEAN, std=IMAGE_STD) -> np.ndarray:
    """Decode and normalize one image to a float32 CHW tensor (3, crop, crop)."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            scale = resize_to / min(img.size)
            new_size = (round(img.width * scale), round(img.height * scale))
            img = img.resize(new_size, Image.Resampling.BICUBIC)
            left = (img.width - crop_to) // 2
            top = (img.height - crop_to) // 2
            img = img.crop((left, top, left + crop_to, top + crop_to))
            pixels = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise ImageDecodeError(f"{path}: {e}") from e
    pixels = (pixels - np.asarray(mean, dtype=np.float32)) / np.asarray(
        std, dtype=np.float32
    )
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))
