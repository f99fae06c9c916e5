"""PFM and PNG image files, plus tonemapping for LDR output."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def write_pfm(path, img) -> None:
    """Write a float image as little-endian PFM (``PF`` for RGB, ``Pf`` for one channel).

    Rows are stored bottom-to-top as the format requires; the array is
    top-to-bottom.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ImageFormatError(f"cannot store shape {a.shape} as PFM")
    h, w = a.shape[:2]
    data = np.ascontiguousarray(np.flipud(a), dtype="<f4")
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(data.tobytes())


_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if not m:
        raise ImageFormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    offset = m.end()
    if len(data) - offset < 4 * count:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    a = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float64)
    a = a.reshape((h, w, 3) if channels == 3 else (h, w))
    return np.flipud(a).copy()


def srgb_encode(linear) -> np.ndarray:
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def srgb_decode(encoded) -> np.ndarray:
    x = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def to_ldr(img) -> np.ndarray:
    """Clamp to [0, 1], sRGB-encode, quantize to 8 bits."""
    return np.round(srgb_encode(img) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    Image.fromarray(to_ldr(img)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Linear float image from an 8-bit sRGB PNG."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return srgb_decode(a.astype(np.float64) / 255.0)


def read_image(path) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p)
    if p.suffix.lower() == ".png":
        return read_png(p)
    raise ImageFormatError(f"unsupported image type {p.suffix!r}")


def write_image(path, img) -> None:
    p = Path(path)
    if p.suffix.lower() == ".png":
        write_png(p, img)
    else:
        write_pfm(p, img)
