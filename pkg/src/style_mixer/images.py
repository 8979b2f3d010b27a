"""Image I/O and tensor conversion. RGB, float32, values in [0,1]."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def load_image(path):
    """Read a PNG/JPEG file as an HxWx3 float32 array in [0,1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(image, path):
    """Write an HxWx3 array (or CHW tensor) in [0,1] as an 8-bit image."""
    arr = _to_hwc(image)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)
    return path


def _to_hwc(image):
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = np.transpose(arr, (1, 2, 0))
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an RGB image, got shape {arr.shape}")
    return arr


def to_batch(image):
    """HWC array in [0,1] -> 1x3xHxW float32 tensor."""
    arr = _to_hwc(image)
    return torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1))))[None]


def from_batch(batch):
    """1x3xHxW tensor -> HWC float32 array."""
    if batch.dim() == 4:
        batch = batch.squeeze(0)
    return np.transpose(batch.detach().cpu().numpy(), (1, 2, 0))


def snap_to_stride(image, stride=16):
    """Resize so both sides are multiples of ``stride`` (rounded down).

    Keeps the encoder/decoder shape contract exact: the decoded output then
    matches the resized input resolution.
    """
    arr = _to_hwc(image)
    h, w = arr.shape[:2]
    nh, nw = (h // stride) * stride, (w // stride) * stride
    if nh < stride or nw < stride:
        raise ValueError(f"image {h}x{w} too small for stride {stride}")
    if (nh, nw) == (h, w):
        return arr
    pil = Image.fromarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8))
    resized = pil.resize((nw, nh), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0
