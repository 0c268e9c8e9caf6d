"""Binary PGM/PPM images, CIFAR record files, and SOD directory pairing."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DatasetError,
    HeaderError,
    LabelRangeError,
    MaxvalError,
    RecordLengthError,
    ShapeError,
    TruncatedError,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm")
MAX_PIXELS = 1 << 28
CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (c, h, w) in [0, 1]
    path: str | None = None
    maxval: int = 255

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def bit_depth(self) -> int:
        return 8 if self.maxval < 256 else 16


# ---------------------------------------------------------------------------
# PGM / PPM


def _header_tokens(data: bytes, count: int, where: str) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens after the magic, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that ends the header.
    """
    tokens, pos, n = [], 2, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise TruncatedError(f"{where}: header ends after {len(tokens)} of {count} fields")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n:
        raise TruncatedError(f"{where}: no payload after header")
    if not data[pos:pos + 1].isspace():
        raise HeaderError(f"{where}: header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_image(data: bytes, where: str = "image") -> ImageRecord:
    if len(data) < 2:
        raise TruncatedError(f"{where}: file is {len(data)} bytes, too short for a magic number")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"{where}: expected binary PGM (P5) or PPM (P6) magic, got {magic!r}")
    channels = 1 if magic == b"P5" else 3
    tokens, offset = _header_tokens(data, 3, where)
    try:
        width, height, maxval = (int(t.decode("ascii")) for t in tokens)
    except (UnicodeDecodeError, ValueError):
        raise HeaderError(f"{where}: non-numeric header fields {tokens}") from None
    if width <= 0 or height <= 0:
        raise HeaderError(f"{where}: non-positive dimensions {width}x{height}")
    if width * height > MAX_PIXELS:
        raise HeaderError(f"{where}: dimensions {width}x{height} exceed the {MAX_PIXELS}-pixel limit")
    if not 1 <= maxval <= 65535:
        raise MaxvalError(f"{where}: maxval {maxval} outside 1..65535")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedError(f"{where}: payload has {len(payload)} bytes, header implies {need}")
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    if raw.max(initial=0) > maxval:
        raise HeaderError(f"{where}: sample value {int(raw.max())} exceeds maxval {maxval}")
    pixels = raw.transpose(2, 0, 1).astype(np.float64) / maxval
    return ImageRecord(pixels, where, maxval)


def load_image(path) -> ImageRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    return decode_image(data, str(path))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to 8-bit codes, rounding halves up."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_image(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ShapeError(f"image must be (h, w), (1, h, w) or (3, h, w), got {pixels.shape}")
    c, h, w = pixels.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(pixels).transpose(1, 2, 0).tobytes()


def save_image(pixels, path) -> None:
    if isinstance(pixels, ImageRecord):
        pixels = pixels.pixels
    Path(path).write_bytes(encode_image(pixels))


def binarize_mask(pixels: np.ndarray, where: str = "mask", threshold: float = 0.5) -> np.ndarray:
    if np.any((pixels > 0) & (pixels < 1)):
        warnings.warn(f"{where}: mask has non-binary values; binarized at {threshold}", stacklevel=2)
    return (pixels >= threshold).astype(np.float64)


def load_mask(path, threshold: float = 0.5) -> np.ndarray:
    """Single-channel mask as an ``(h, w)`` array of 0/1."""
    rec = load_image(path)
    if rec.channels != 1:
        raise DatasetError(f"{path}: masks must be single-channel PGM")
    return binarize_mask(rec.pixels[0], str(path), threshold)


def load_rgb(path) -> np.ndarray:
    """Image as ``(3, h, w)``; grayscale inputs are replicated across channels."""
    rec = load_image(path)
    return np.repeat(rec.pixels, 3, axis=0) if rec.channels == 1 else rec.pixels


# ---------------------------------------------------------------------------
# CIFAR


@dataclass
class CifarRecord:
    label: int
    image: np.ndarray  # (3, 32, 32) in [0, 1]
    coarse_label: int | None = None


def _cifar_layout(num_classes: int) -> int:
    if num_classes == 10:
        return 1
    if num_classes == 100:
        return 2
    raise ValueError(f"num_classes must be 10 or 100, got {num_classes}")


def decode_cifar(data: bytes, num_classes: int = 10, where: str = "cifar") -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Decode a CIFAR binary file into ``(images uint8 (n,3,32,32), labels, coarse labels)``."""
    label_bytes = _cifar_layout(num_classes)
    rec = label_bytes + CIFAR_PIXELS
    if len(data) == 0 or len(data) % rec:
        raise RecordLengthError(f"{where}: length {len(data)} is not a positive multiple of the {rec}-byte record")
    table = np.frombuffer(data, dtype=np.uint8).reshape(-1, rec)
    labels = table[:, label_bytes - 1].astype(np.int64)
    coarse = table[:, 0].astype(np.int64) if label_bytes == 2 else None
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise LabelRangeError(f"{where}: record {bad[0]} has label {labels[bad[0]]} >= {num_classes}")
    images = table[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels, coarse


def load_cifar_arrays(path, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Images as float64 ``(n, 3, 32, 32)`` in [0, 1] and integer labels."""
    images, labels, _ = decode_cifar(Path(path).read_bytes(), num_classes, str(path))
    return images.astype(np.float64) / 255.0, labels


def load_cifar(path, num_classes: int = 10) -> list[CifarRecord]:
    images, labels, coarse = decode_cifar(Path(path).read_bytes(), num_classes, str(path))
    scaled = images.astype(np.float64) / 255.0
    return [
        CifarRecord(int(labels[i]), scaled[i], None if coarse is None else int(coarse[i]))
        for i in range(len(labels))
    ]


def encode_cifar(records: list[CifarRecord], num_classes: int = 10) -> bytes:
    label_bytes = _cifar_layout(num_classes)
    out = bytearray()
    for r in records:
        if not 0 <= r.label < num_classes:
            raise LabelRangeError(f"label {r.label} outside [0, {num_classes})")
        if r.image.shape != (3, 32, 32):
            raise ShapeError(f"CIFAR images must be (3, 32, 32), got {r.image.shape}")
        if label_bytes == 2:
            out.append(r.coarse_label or 0)
        out.append(r.label)
        out += np.rint(np.clip(r.image, 0, 1) * 255.0).astype(np.uint8).tobytes()
    return bytes(out)


def save_cifar(records: list[CifarRecord], path, num_classes: int = 10) -> None:
    Path(path).write_bytes(encode_cifar(records, num_classes))


# ---------------------------------------------------------------------------
# SOD datasets


def _by_stem(directory: Path, suffixes) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in suffixes and p.is_file()}


def pair_sod_dataset(image_dir, mask_dir) -> list[tuple[Path, Path]]:
    """Pair images with masks by filename stem, sorted by stem.

    Unmatched files on either side are reported in one warning; no pairs at
    all is an error.
    """
    images = _by_stem(Path(image_dir), IMAGE_SUFFIXES)
    masks = _by_stem(Path(mask_dir), (".pgm",))
    common = sorted(images.keys() & masks.keys())
    only_img = sorted(images.keys() - masks.keys())
    only_mask = sorted(masks.keys() - images.keys())
    if not common:
        raise DatasetError(
            f"no image/mask pairs between {image_dir} and {mask_dir} "
            f"(images without masks: {only_img}, masks without images: {only_mask})"
        )
    if only_img or only_mask:
        warnings.warn(
            f"unpaired files skipped: images without masks {only_img}, masks without images {only_mask}",
            stacklevel=2,
        )
    return [(images[s], masks[s]) for s in common]


def load_sod_dataset(pairs, size: tuple[int, int] | None = None, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Stack paired files into ``images (n, 3, h, w)`` and ``masks (n, 1, h, w)``.

    With ``size`` every pair is resized (bilinear for images, nearest for
    masks); otherwise all pairs must share one resolution.
    """
    from .kernels import resize_bilinear, resize_nearest

    imgs, masks = [], []
    for img_path, mask_path in pairs:
        img = load_rgb(img_path)
        mask = load_mask(mask_path)
        if img.shape[1:] != mask.shape:
            raise DatasetError(f"{img_path} is {img.shape[1:]} but its mask is {mask.shape}")
        if size is not None and img.shape[1:] != tuple(size):
            img = resize_bilinear(img[None], *size)[0][0]
            mask = resize_nearest(mask[None, None], *size)[0, 0]
        imgs.append(img)
        masks.append(mask[None])
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise DatasetError(f"dataset mixes resolutions {sorted(shapes)}; pass a target size")
    return np.stack(imgs).astype(dtype), np.stack(masks).astype(dtype)
