"""Serialization helpers: named-array containers, PFM density maps, PNG images
and the JSON-lines dataset manifest.

Named-array container layout (all integers little-endian)::

    magic      4 bytes  b"SCNA"
    version    uint32   1
    n_arrays   uint32
    repeated n_arrays times:
        name_len  uint16, name (utf-8)
        ndim      uint8, dims uint32 * ndim
        data      float32 * prod(dims), C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

MAGIC = b"SCNA"
VERSION = 1


class ContainerError(IOError):
    """Raised when a named-array container is missing or malformed."""


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise ContainerError(f"array container not found: {path}")
    data = path.read_bytes()
    try:
        if data[:4] != MAGIC:
            raise ValueError("bad magic")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ValueError(f"unsupported version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = 4 * size
            if off + nbytes > len(data):
                raise ValueError(f"truncated array {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += nbytes
        if off != len(data):
            raise ValueError("trailing bytes")
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise ContainerError(f"corrupt array container {path}: {exc}") from exc
    return out


def write_pfm(path, values: np.ndarray) -> None:
    """Write a single-channel little-endian Portable Float Map.

    Rows are stored bottom-to-top as the format requires.
    """
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 1 if header == b"Pf" else 3
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


def read_image(path) -> np.ndarray:
    """Decode an image file to an ``H x W x 3`` uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(mask, 0, 1) * 255).astype(np.uint8)).save(path)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a uint8 RGB image."""
    image = np.asarray(image, dtype=np.uint8)
    if image.shape[:2] == (height, width):
        return image.copy()
    im = Image.fromarray(image).resize((width, height), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8)


def resize_field(field: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a float 2-D field (values, not mass, are interpolated)."""
    field = np.asarray(field, dtype=np.float32)
    if field.shape == (height, width):
        return field.copy()
    im = Image.fromarray(field, mode="F").resize((width, height), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32)


def resize_density(density: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a density map, rescaling values by the area ratio so mass is
    approximately preserved."""
    density = np.asarray(density, dtype=np.float32)
    if density.shape == (height, width):
        return density.copy()
    h0, w0 = density.shape
    return resize_field(density, height, width) * np.float32((h0 * w0) / (height * width))


def write_manifest(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
