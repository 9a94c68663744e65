"""Image file helpers: PNG for color/alpha, PFM for float depth maps."""
from __future__ import annotations

import numpy as np
from PIL import Image

from ..errors import InvalidArgumentError


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp a float image in [0, 1] to uint8 levels (round half away)."""
    arr = np.asarray(img, dtype=np.float64)
    return (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]; RGB kept, palettes expanded."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_pfm(path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float32 PFM, little-endian, rows
    bottom-up per the format convention."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise InvalidArgumentError("PFM data must be (H, W) or (H, W, 3)")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise InvalidArgumentError(f"not a PFM file: header {header!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.ascontiguousarray(raw.reshape(shape)[::-1]).astype(np.float32)
