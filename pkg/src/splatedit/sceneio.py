"""Bit-exact single-file scene persistence plus PNG image helpers.

A scene file is one little-endian container:

    magic "GSED" | version u16 | N u32 | embed_dim u16 | sh_degree u16
    x, scale, q, alpha, sh, embed as float32 arrays in that order
    object_id as int32 | active flags packed 8 per byte (LSB first)
    trailer length u32 | JSON trailer | CRC32 of all preceding bytes

The JSON trailer carries everything that is not a per-Gaussian array:
the embedding codec, an optional camera, backend metadata, the run seed,
the background color, the object registry and the applied edit log, so a
scene travels with its semantics and its editing history atomically.
Loading never re-derives anything: parameter bytes are copied verbatim,
which is what makes save/load round trips reproducible bit for bit.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from ._backend import active_backend
from .errors import (
    InvalidArgumentError,
    SceneFileChecksumError,
    SceneFileFormatError,
    SceneFileVersionError,
)
from .scene import PARAM_DTYPE, Camera, GaussianScene, SceneObject, sh_dim
from .semantics import EmbeddingCodec

MAGIC = b"GSED"
VERSION = 1
_HEADER = struct.Struct("<4sHIHH")
_U32 = struct.Struct("<I")
# header + trailer length + "{}" + checksum is the smallest legal file
_MIN_FILE = _HEADER.size + _U32.size + 2 + _U32.size

_ARRAY_ORDER = ("x", "scale", "q", "alpha", "sh", "embed")


def _array_dtypes(n: int, embed_dim: int, sh_coeffs: int):
    return {
        "x": ("<f4", (n, 3)),
        "scale": ("<f4", (n, 3)),
        "q": ("<f4", (n, 4)),
        "alpha": ("<f4", (n,)),
        "sh": ("<f4", (n, sh_coeffs)),
        "embed": ("<f4", (n, embed_dim)),
    }


def to_bytes(scene: GaussianScene, codec=None, *,
             camera: Camera | None = None, metadata: dict | None = None,
             seed: int | None = None) -> bytes:
    """Serialize the scene and its codec into the container bytes.

    codec may be None, in which case the scene's own codec (if any) is
    persisted.  The result is a snapshot: arrays are copied into the
    buffer immediately.
    """
    if codec is None:
        codec = scene.codec
    specs = _array_dtypes(scene.n, scene.embed_dim, scene.sh_coeffs)
    parts = [_HEADER.pack(MAGIC, VERSION, scene.n, scene.embed_dim,
                          scene.sh_degree)]
    for name in _ARRAY_ORDER:
        dtype, shape = specs[name]
        arr = getattr(scene, name)
        if arr.shape != shape:
            raise InvalidArgumentError(
                f"{name} has shape {arr.shape}, expected {shape}")
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    parts.append(np.ascontiguousarray(scene.object_id,
                                      dtype="<i4").tobytes())
    parts.append(np.packbits(scene.active, bitorder="little").tobytes())

    meta = {"backend": active_backend(), "param_dtype": "float32"}
    if metadata:
        meta.update(metadata)
    trailer = json.dumps({
        "codec": codec.to_json() if codec is not None else None,
        "camera": camera.to_json() if camera is not None else None,
        "metadata": meta,
        "seed": None if seed is None else int(seed),
        "background": [float(v) for v in scene.background],
        "objects": [obj.to_json() for _, obj in sorted(scene.objects.items())],
        "edit_log": scene.edit_log,
    }, separators=(",", ":")).encode("utf-8")
    parts.append(_U32.pack(len(trailer)))
    parts.append(trailer)
    blob = b"".join(parts)
    return blob + _U32.pack(zlib.crc32(blob) & 0xFFFFFFFF)


def save(scene: GaussianScene, codec, path, *, camera: Camera | None = None,
         metadata: dict | None = None, seed: int | None = None) -> int:
    """Write the scene and its codec to path; returns the byte count."""
    data = to_bytes(scene, codec, camera=camera, metadata=metadata, seed=seed)
    Path(path).write_bytes(data)
    return len(data)


def _take(data: bytes, offset: int, count: int, dtype: str) -> tuple:
    """Copy count items of dtype starting at offset; (array, new offset)."""
    itemsize = np.dtype(dtype).itemsize
    end = offset + count * itemsize
    if end > len(data):
        raise SceneFileChecksumError("scene file ends inside an array")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
    return arr, end


def from_bytes(data: bytes) -> tuple:
    """Parse container bytes back into (scene, codec).

    The loaded scene starts at revision 0 with empty undo history; the
    edit log, object registry, background and codec come back exactly as
    saved.  Camera, metadata and seed from the trailer are exposed under
    scene.aux.
    """
    if len(data) >= 4 and data[:4] != MAGIC:
        raise SceneFileFormatError(
            f"not a scene file: magic {data[:4]!r}")
    if len(data) < _MIN_FILE:
        raise SceneFileChecksumError("scene file truncated")
    magic, version, n, embed_dim, sh_degree = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise SceneFileVersionError(
            f"scene file version {version}, this build reads {VERSION}")
    stored = _U32.unpack_from(data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise SceneFileChecksumError("scene file checksum mismatch")

    sh_coeffs = sh_dim(sh_degree)
    offset = _HEADER.size
    arrays = {}
    specs = _array_dtypes(n, embed_dim, sh_coeffs)
    for name in _ARRAY_ORDER:
        dtype, shape = specs[name]
        flat, offset = _take(data, offset, int(np.prod(shape)), dtype)
        arrays[name] = flat.astype(PARAM_DTYPE, copy=False).reshape(shape)
    object_id, offset = _take(data, offset, n, "<i4")
    packed, offset = _take(data, offset, (n + 7) // 8, "u1")
    active = np.unpackbits(packed, bitorder="little")[:n].astype(bool)

    if offset + _U32.size > len(data) - 4:
        raise SceneFileChecksumError("scene file ends inside the trailer")
    trailer_len = _U32.unpack_from(data, offset)[0]
    offset += _U32.size
    if offset + trailer_len != len(data) - 4:
        raise SceneFileFormatError("trailer length does not match the file")
    try:
        trailer = json.loads(data[offset:offset + trailer_len])
    except json.JSONDecodeError as exc:
        raise SceneFileFormatError(f"bad trailer JSON: {exc}") from exc

    scene = GaussianScene(embed_dim=max(embed_dim, 1), sh_degree=sh_degree,
                          background=trailer.get("background", [0, 0, 0]))
    for name in _ARRAY_ORDER:
        setattr(scene, name, arrays[name])
    scene.object_id = object_id.astype(np.int32, copy=False)
    scene.active = active
    scene.objects = {
        int(obj["object_id"]): SceneObject.from_json(obj)
        for obj in trailer.get("objects", [])
    }
    scene.edit_log = list(trailer.get("edit_log", []))
    codec_json = trailer.get("codec")
    codec = EmbeddingCodec.from_json(codec_json) if codec_json else None
    scene.codec = codec
    camera_json = trailer.get("camera")
    if camera_json:
        scene.aux["camera"] = Camera.from_json(camera_json)
    scene.aux["metadata"] = trailer.get("metadata", {})
    scene.aux["seed"] = trailer.get("seed")
    return scene, codec


def load(path) -> tuple:
    """Read a scene file from path; see from_bytes for the result shape."""
    return from_bytes(Path(path).read_bytes())


def image_to_png_bytes(image: np.ndarray) -> bytes:
    """Encode a unit-range (H, W, 3) float image as PNG bytes."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError("expected an (H, W, 3) image")
    u8 = np.clip(np.rint(img * 255.0), 0.0, 255.0).astype(np.uint8)
    from io import BytesIO
    buf = BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, image: np.ndarray) -> None:
    Path(path).write_bytes(image_to_png_bytes(image))


def read_png(path_or_bytes) -> np.ndarray:
    """Decode a PNG (path or raw bytes) to a unit-range (H, W, 3) array."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        from io import BytesIO
        img = Image.open(BytesIO(path_or_bytes))
    else:
        img = Image.open(path_or_bytes)
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb
