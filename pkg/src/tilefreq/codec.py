"""Orthonormal DCT-II codec for tiles and time series.

Transforms up to ``MATRIX_MAX`` points use a cached orthonormal basis matrix;
longer vectors (the row-major demonstration flattens a whole tile) go through
``scipy.fft.dct`` with ``norm="ortho"``, which computes the same transform.
"""

import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft

MATRIX_MAX = 256
STORE_MAGIC = b"TFC1"


class CodecDomainError(ValueError):
    pass


@lru_cache(maxsize=None)
def dct_basis(n):
    """Orthonormal DCT-II matrix ``C`` with ``C @ x`` the transform of ``x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    basis.flags.writeable = False
    return basis


def _check_vector(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] == (0,) or x.ndim == 0:
        raise CodecDomainError("transform input must be non-empty")
    if not np.all(np.isfinite(x)):
        raise CodecDomainError("transform input must be finite")
    return x


def dct1d(signal):
    """DCT-II along the last axis."""
    x = _check_vector(signal)
    n = x.shape[-1]
    if n <= MATRIX_MAX:
        return x @ dct_basis(n).T
    return scipy.fft.dct(x, type=2, norm="ortho", axis=-1)


def idct1d(coeffs):
    """DCT-III (inverse of :func:`dct1d`) along the last axis."""
    x = _check_vector(coeffs)
    n = x.shape[-1]
    if n <= MATRIX_MAX:
        return x @ dct_basis(n)
    return scipy.fft.idct(x, type=2, norm="ortho", axis=-1)


def dct2d(plane):
    """Separable 2D DCT-II over the last two axes (rows, then columns)."""
    x = _check_vector(plane)
    if x.ndim < 2:
        raise CodecDomainError("dct2d needs a 2D grid")
    return np.swapaxes(dct1d(np.swapaxes(dct1d(x), -1, -2)), -1, -2)


def idct2d(coeffs):
    x = _check_vector(coeffs)
    if x.ndim < 2:
        raise CodecDomainError("idct2d needs a 2D grid")
    return np.swapaxes(idct1d(np.swapaxes(idct1d(x), -1, -2)), -1, -2)


# ---------------------------------------------------------------- tile blocks


@dataclass
class CoeffBlock:
    """Retained top-left ``k x k`` DCT coefficients of every channel of a tile."""

    coeffs: np.ndarray
    source_height: int
    source_width: int

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3:
            raise CodecDomainError("coeffs must be channels x k x k")
        kh, kw = self.coeffs.shape[1:]
        if kh > self.source_height or kw > self.source_width:
            raise CodecDomainError("block larger than its source tile")

    @property
    def channels(self):
        return self.coeffs.shape[0]

    @property
    def k(self):
        return self.coeffs.shape[1]


def _as_tile(tile):
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim == 2:
        tile = tile[None]
    if tile.ndim != 3:
        raise CodecDomainError("tile must be channels x height x width")
    return tile


def lowpass2d(tile, k=8):
    """Compress a tile to its ``k x k`` lowest-frequency DCT coefficients per channel.

    Only the first ``k`` basis rows are applied, which yields exactly the
    top-left corner of the full 2D transform.
    """
    tile = _as_tile(tile)
    _, h, w = tile.shape
    if k < 1 or k > min(h, w):
        raise CodecDomainError(f"k={k} outside [1, {min(h, w)}]")
    if not np.all(np.isfinite(tile)):
        raise CodecDomainError("tile must be finite")
    if h <= MATRIX_MAX and w <= MATRIX_MAX:
        coeffs = dct_basis(h)[:k] @ tile @ dct_basis(w)[:k].T
    else:
        coeffs = dct2d(tile)[:, :k, :k]
    return CoeffBlock(coeffs, h, w)


def reconstruct(block):
    """Zero-pad a block to its source size and invert the 2D DCT."""
    c, k = block.channels, block.k
    h, w = block.source_height, block.source_width
    if h <= MATRIX_MAX and w <= MATRIX_MAX:
        return dct_basis(h)[:k].T @ block.coeffs @ dct_basis(w)[:k]
    full = np.zeros((c, h, w))
    full[:, :k, : block.coeffs.shape[2]] = block.coeffs
    return idct2d(full)


def lowpass1d_rowmajor(tile, n=64):
    """Keep the first ``n`` 1D DCT coefficients of each row-major-flattened channel."""
    tile = _as_tile(tile)
    flat = tile.reshape(tile.shape[0], -1)
    if n < 1 or n > flat.shape[1]:
        raise CodecDomainError(f"n={n} outside [1, {flat.shape[1]}]")
    return dct1d(flat)[:, :n]


def reconstruct1d_rowmajor(coeffs, shape):
    """Inverse of :func:`lowpass1d_rowmajor` for a tile of ``shape`` (C, H, W)."""
    c, h, w = shape
    full = np.zeros((c, h * w))
    full[:, : coeffs.shape[1]] = coeffs
    return idct1d(full).reshape(c, h, w)


def mse(a, b):
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


# ---------------------------------------------------------------- time series


@dataclass
class SeriesCoeffs:
    coeffs: np.ndarray
    source_length: int

    @property
    def bands(self):
        return self.coeffs.shape[0]

    @property
    def n(self):
        return self.coeffs.shape[1]

    def as_grid(self):
        """Row-major ``bands x 8 x 8`` view for use as convolutional input."""
        side = int(round(np.sqrt(self.n)))
        if side * side != self.n:
            raise CodecDomainError(f"{self.n} coefficients are not a square grid")
        return self.coeffs.reshape(self.bands, side, side)


def ts_compress(series, missing_mask=None, n=64):
    """Zero-fill missing steps, DCT each band and keep the first ``n`` coefficients.

    Series shorter than ``n`` are zero-padded to length ``n`` first.
    """
    x = np.array(series, dtype=np.float64, ndmin=2)
    if x.shape[1] < 1:
        raise CodecDomainError("series must have at least one timestep")
    if missing_mask is not None:
        x[np.broadcast_to(np.asarray(missing_mask, dtype=bool), x.shape)] = 0.0
    x = np.where(np.isfinite(x), x, 0.0)
    length = x.shape[1]
    if length < n:
        x = np.pad(x, ((0, 0), (0, n - length)))
    return SeriesCoeffs(dct1d(x)[:, :n], length)


def ts_reconstruct(sc):
    length = max(sc.source_length, sc.n)
    full = np.zeros((sc.bands, length))
    full[:, : sc.n] = sc.coeffs
    return idct1d(full)[:, : sc.source_length]


# ---------------------------------------------------------------- augmentations


def _signs(k):
    return np.where(np.arange(k) % 2 == 0, 1.0, -1.0)


def aug_flip_rows(block):
    """Flip the tile along its vertical pixel axis: negate odd coefficient rows."""
    return replace(block, coeffs=block.coeffs * _signs(block.coeffs.shape[1])[:, None])


def aug_flip_cols(block):
    """Mirror the tile left-right: negate odd coefficient columns."""
    return replace(block, coeffs=block.coeffs * _signs(block.coeffs.shape[2])[None, :])


def aug_transpose(block):
    if block.coeffs.shape[1] != block.coeffs.shape[2]:
        raise CodecDomainError("transpose requires a square block")
    return CoeffBlock(
        np.swapaxes(block.coeffs, 1, 2).copy(), block.source_width, block.source_height
    )


def aug_rot90(block):
    """Counter-clockwise quarter turn (``np.rot90`` on each channel)."""
    return aug_flip_rows(aug_transpose(block))


# ---------------------------------------------------------------- coefficient store


def write_coeff_store(path, blocks):
    """Write ``{surveyId: CoeffBlock}`` to a TFC1 file, ordered by surveyId."""
    with Path(path).open("wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<I", len(blocks)))
        for sid in sorted(blocks):
            b = blocks[sid]
            fh.write(struct.pack("<5I", sid, b.channels, b.k, b.source_height, b.source_width))
            fh.write(np.ascontiguousarray(b.coeffs, dtype="<f8").tobytes())


def read_coeff_store(path):
    data = Path(path).read_bytes()
    if data[:4] != STORE_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    blocks = {}
    for _ in range(count):
        sid, c, k, h, w = struct.unpack_from("<5I", data, offset)
        offset += 20
        size = c * k * k
        coeffs = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(c, k, k)
        offset += 8 * size
        blocks[sid] = CoeffBlock(coeffs.astype(np.float64), h, w)
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return blocks
