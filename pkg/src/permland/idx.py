"""Reader and writer for the IDX container used by MNIST.

Layout: two zero bytes, a type code (0x08 = unsigned byte), the number of
dimensions, that many big-endian uint32 sizes, then the payload.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Dataset

IMAGE_MAGIC = 2051  # 0x00000803
LABEL_MAGIC = 2049  # 0x00000801
UBYTE = 0x08


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxFormatError(IdxError):
    """Bad magic number or header."""


class IdxLengthError(IdxError):
    """Payload shorter or longer than the header promises."""


@dataclass(frozen=True)
class IdxTensor:
    magic: int
    dims: tuple
    data: np.ndarray  # uint8, shaped by dims

    @property
    def n_dims(self) -> int:
        return len(self.dims)


def parse_idx(raw: bytes, expect_magic: int | None = None) -> IdxTensor:
    if len(raw) < 4:
        raise IdxFormatError("file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if raw[0] != 0 or raw[1] != 0 or raw[2] != UBYTE:
        raise IdxFormatError(f"unsupported IDX magic 0x{magic:08x}")
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"magic {magic} does not match expected {expect_magic}")
    n_dims = raw[3]
    if magic == IMAGE_MAGIC and n_dims != 3 or magic == LABEL_MAGIC and n_dims != 1:
        raise IdxFormatError(f"magic {magic} with {n_dims} dimensions")
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise IdxLengthError("truncated IDX header")
    dims = struct.unpack(f">{n_dims}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = len(raw) - header
    if payload != size:
        raise IdxLengthError(f"payload has {payload} bytes, header promises {size}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()
    return IdxTensor(magic, tuple(int(d) for d in dims), data)


def load_idx(path, expect_magic: int | None = None) -> IdxTensor:
    """Read an IDX file (optionally gzip-compressed when the name ends in .gz)."""
    path = Path(path)
    if path.suffix == ".gz":
        import gzip
        raw = gzip.decompress(path.read_bytes())
    else:
        raw = path.read_bytes()
    return parse_idx(raw, expect_magic)


def encode_idx(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.dtype != np.uint8:
        raise TypeError("only unsigned byte payloads are supported")
    head = bytes([0, 0, UBYTE, data.ndim]) + struct.pack(f">{data.ndim}I", *data.shape)
    return head + np.ascontiguousarray(data).tobytes()


def write_idx(path, data: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(data))


def mean_pool(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool (N, H, W) images over factor x factor blocks."""
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    return images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


DOWNSAMPLE = {"none": 1, "2x": 2, "4x": 4}


def load_mnist_pair(images_path, labels_path, downsample: str = "4x", limit: int | None = 2000,
                    one_hot: bool = True) -> Dataset:
    """Images scaled to [0, 1], pooled and flattened; targets one-hot labels.

    Args:
        downsample: "none", "2x" (28 -> 14) or "4x" (28 -> 7).
        limit: keep the first ``limit`` samples (None keeps all).
    """
    if downsample not in DOWNSAMPLE:
        raise ValueError(f"downsample must be one of {sorted(DOWNSAMPLE)}")
    imgs = load_idx(images_path, IMAGE_MAGIC)
    labs = load_idx(labels_path, LABEL_MAGIC)
    if imgs.dims[0] != labs.dims[0]:
        raise IdxLengthError(f"{imgs.dims[0]} images but {labs.dims[0]} labels")
    x = imgs.data.astype(np.float64) / 255.0
    y = labs.data.astype(np.int64)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    f = DOWNSAMPLE[downsample]
    if f > 1:
        x = mean_pool(x, f)
    x = x.reshape(x.shape[0], -1)
    targets = np.eye(10)[y] if one_hot else y[:, None].astype(np.float64)
    return Dataset(x, targets, labels=y)
