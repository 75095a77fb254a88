"""
Raster I/O. Images are ``uint8`` arrays of shape (height, width, 3).
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import LoadError

PathLike = Union[str, Path]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def find_image(image_dir: PathLike, image_id: str) -> Path:
    """Locate ``<image_id>.<ext>`` in ``image_dir``."""
    image_dir = Path(image_dir)
    for suffix in IMAGE_SUFFIXES:
        candidate = image_dir / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    raise LoadError(f"image for '{image_id}' not found in {image_dir} (tried {', '.join(IMAGE_SUFFIXES)})")


def image_size(path: PathLike) -> Tuple[int, int]:
    """(width, height) from the file header without decoding pixels."""
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, UnidentifiedImageError) as e:
        raise LoadError(f"{path}: cannot read image ({e})") from None


def read_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as e:
        raise LoadError(f"{path}: cannot read image ({e})") from None


def write_png(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma in [0, 1] as float64, shape (height, width)."""
    rgb = image.astype(np.float64) / 255.0
    return rgb @ np.array([0.299, 0.587, 0.114])


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    pil = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    return np.asarray(pil.resize((width, height), Image.Resampling.BILINEAR), dtype=np.uint8).copy()
