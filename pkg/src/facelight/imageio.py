"""Image files: PFM linear float (the format of record) and 8-bit PNG
with the standard 2.4-exponent piecewise display transfer.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image: np.ndarray):
    """Color ('PF') or grayscale ('Pf') PFM, little-endian, bottom-up rows."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
        channels = 1
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        channels = 3
    else:
        raise ValueError("PFM supports (H, W) or (H, W, 3) images")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")  # negative scale: little-endian
        fh.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: header {header!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * channels * 4), dtype=dtype)
    img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    img = np.flipud(img).astype(np.float64)
    if scale not in (-1.0, 1.0):
        img = img * abs(scale)
    return img


def linear_to_display(x: np.ndarray) -> np.ndarray:
    """Piecewise linear/2.4-exponent transfer from linear to display values."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    lo = x * 12.92
    hi = 1.055 * np.power(np.maximum(x, 1e-12), 1.0 / 2.4) - 0.055
    return np.where(x <= 0.0031308, lo, hi)


def display_to_linear(y: np.ndarray) -> np.ndarray:
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    lo = y / 12.92
    hi = np.power((y + 0.055) / 1.055, 2.4)
    return np.where(y <= 0.04045, lo, hi)


def write_png(path, image: np.ndarray):
    """Linear RGB in [0, 1] -> display transfer -> 8-bit PNG."""
    disp = linear_to_display(image)
    arr = (np.round(disp * 255.0)).astype(np.uint8)
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(Path(path))


def read_png_linear(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return display_to_linear(arr)
