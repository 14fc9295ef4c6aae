"""Image files: lossless PNG and a raw float32 fixture format.

Raw layout: ``uint32 H, uint32 W`` (little endian) followed by row-major
little-endian float32 samples; the channel count is implied by the size.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def write_raw(path, img):
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_raw(path):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    h, w = struct.unpack("<II", data[:8])
    body = np.frombuffer(data, dtype="<f4", offset=8)
    if h == 0 or w == 0 or body.size % (h * w):
        raise ValueError(f"{path}: payload of {body.size} floats does not fit {h}x{w}")
    return body.reshape(h, w, body.size // (h * w)).astype(np.float32)


def write_png(path, img):
    """Write a float image in [0, 1] as 8-bit RGB/grey PNG."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def read_image(path):
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png(path)
    return read_raw(path)
