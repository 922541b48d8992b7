"""Image and perturbation value types plus portable tensor I/O.

Images live in normalized [0, 1] floating point; perturbations are signed
values in [-1, 1] with the same shape as the image they modify. Both are
immutable after construction so they can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FLAT_MAGIC = b"PTEN"
# magic, height, width, channels, reserved u16, then zero padding to 16 bytes
_FLAT_HEADER = struct.Struct("<4sHHHH4x")


class ShapeError(ValueError):
    """Arrays with incompatible height/width/channels."""


class TensorFormatError(ValueError):
    """Unreadable, truncated, or out-of-contract tensor files."""


def _as_hwc(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected HxWxC data, got ndim={arr.ndim}")
    if arr.shape[2] not in (1, 3):
        raise ShapeError(f"unsupported channel count {arr.shape[2]} (need 1 or 3)")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"degenerate spatial shape {arr.shape[:2]}")
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C intensity grid with every value in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_hwc(self.data)
        if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
            raise ValueError("image intensities must be finite and within [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ImageTensor":
        # Fast path for arrays already known to satisfy the invariants.
        obj = object.__new__(cls)
        arr.flags.writeable = False
        object.__setattr__(obj, "data", arr)
        return obj

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Perturbation:
    """A signed H x W x C offset with every value in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_hwc(self.data)
        if np.any(arr < -1.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
            raise ValueError("perturbation values must be finite and within [-1, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Perturbation":
        obj = object.__new__(cls)
        arr.flags.writeable = False
        object.__setattr__(obj, "data", arr)
        return obj

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 1) -> "Perturbation":
        return cls._wrap(np.zeros((height, width, channels), dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def apply_perturbation(base: ImageTensor, pert: Perturbation) -> ImageTensor:
    """Add the perturbation to the image and clamp back into [0, 1]."""
    if base.shape != pert.shape:
        raise ShapeError(f"image shape {base.shape} != perturbation shape {pert.shape}")
    out = np.clip(base.data + pert.data, 0.0, 1.0)
    return ImageTensor._wrap(out)


def save_png(tensor: ImageTensor, path) -> None:
    """Write an 8-bit gray or RGB PNG (quantizes to 1/255 steps)."""
    arr = np.rint(tensor.data * 255.0).astype(np.uint8)
    if tensor.channels == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        img = Image.fromarray(arr, mode="RGB")
    img.save(path, format="PNG")


def load_png(path) -> ImageTensor:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64)[:, :, None]
            elif img.mode in ("RGB", "RGBA", "LA", "P", "I", "F"):
                converted = img.convert("L") if img.mode in ("LA", "I", "F") else img.convert("RGB")
                arr = np.asarray(converted, dtype=np.float64)
                if arr.ndim == 2:
                    arr = arr[:, :, None]
            else:
                raise TensorFormatError(f"unsupported PNG mode {img.mode!r}")
    except (OSError, SyntaxError) as exc:
        raise TensorFormatError(f"cannot read PNG {path}: {exc}") from exc
    return ImageTensor(arr / 255.0)


def _save_flat_array(arr: np.ndarray, path) -> None:
    h, w, c = arr.shape
    if max(h, w, c) > 0xFFFF:
        raise TensorFormatError("dimension exceeds u16 range of the flat format")
    header = _FLAT_HEADER.pack(FLAT_MAGIC, h, w, c, 0)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _load_flat_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FLAT_HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, h, w, c, _ = _FLAT_HEADER.unpack_from(raw)
    if magic != FLAT_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    expected = _FLAT_HEADER.size + 4 * h * w * c
    if len(raw) != expected:
        raise TensorFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_FLAT_HEADER.size)
    return flat.astype(np.float64).reshape(h, w, c)


def save_flat(tensor: ImageTensor, path) -> None:
    """Write the 16-byte-header flat binary format (float32 payload)."""
    _save_flat_array(tensor.data, path)


def load_flat(path) -> ImageTensor:
    return ImageTensor(_load_flat_array(path))


def save_perturbation(pert: Perturbation, path) -> None:
    """Perturbations reuse the flat container; values are signed."""
    _save_flat_array(pert.data, path)


def load_perturbation(path) -> Perturbation:
    return Perturbation(_load_flat_array(path))


def save_image(tensor: ImageTensor, path, format: str | None = None) -> None:
    """Save as "png" or "flat"; inferred from the extension when omitted."""
    fmt = format or _infer_format(path)
    if fmt == "png":
        save_png(tensor, path)
    elif fmt == "flat":
        save_flat(tensor, path)
    else:
        raise TensorFormatError(f"unknown format {fmt!r}")


def load_image(path, format: str | None = None) -> ImageTensor:
    fmt = format or _infer_format(path)
    if fmt == "png":
        return load_png(path)
    if fmt == "flat":
        return load_flat(path)
    raise TensorFormatError(f"unknown format {fmt!r}")


def _infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return "png"
    if suffix in (".pten", ".bin", ".flat"):
        return "flat"
    raise TensorFormatError(f"cannot infer tensor format from {path}")
