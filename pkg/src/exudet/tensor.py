"""Dense tensor primitives on top of numpy.

The carrier type for every numeric value in the package is a plain
``numpy.ndarray`` in row-major (C) order.  This module adds the small set of
operations the layers are built on: validated construction, rank-2 matrix
multiplication, the im2col/col2im pair that turns convolution into a matmul,
and a raw binary serialization used by model checkpoints.

Precision is selected per call site: ``float32`` ("single") for training,
``float64`` ("double") for gradient checking.

Determinism: matrix products go through the linked BLAS, whose blocked
summation order is fixed for a given installation and thread configuration,
so repeated runs on the same machine are bit-identical.  Pin
``OPENBLAS_NUM_THREADS`` (or the equivalent for your BLAS) if you need
reproducibility across different thread counts.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

TENSOR_MAGIC = b"EXT1"


def resolve_dtype(precision) -> np.dtype:
    """Map 'single'/'double' (or a numpy dtype) to the element dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ShapeError(f"unknown precision {precision!r}; use 'single' or 'double'")
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported element dtype {dt}")
    return dt


def check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    for d in shape:
        if d < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def new_tensor(shape: Sequence[int], fill: float = 0.0, dtype="single") -> np.ndarray:
    """Allocate a tensor of the given shape with every element set to ``fill``."""
    return np.full(check_shape(shape), fill, dtype=resolve_dtype(dtype))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product [m,k] x [k,n] -> [m,n] with explicit shape checks."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def conv_output_hw(hw: tuple, kernel: tuple, stride: int) -> tuple:
    """Output height/width of a valid (unpadded) convolution."""
    h, w = hw
    kh, kw = kernel
    if kh < 1 or kw < 1 or stride < 1:
        raise ShapeError(f"kernel {kernel} and stride {stride} must be positive")
    if h < kh or w < kw:
        raise ShapeError(f"kernel {kernel} larger than input {hw}")
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def im2col(image: np.ndarray, kernel: tuple, stride: int = 1) -> np.ndarray:
    """Unfold a [C,H,W] image into columns of receptive fields.

    Returns [C*kh*kw, Ho*Wo]; column j is the patch feeding output position j,
    laid out channel-major then row-major within the patch.
    """
    if image.ndim != 3:
        raise ShapeError(f"im2col expects [C,H,W], got {image.shape}")
    return im2col_batch(image[None], kernel, stride)


def im2col_batch(x: np.ndarray, kernel: tuple, stride: int = 1) -> np.ndarray:
    """Batched im2col: [N,C,H,W] -> [C*kh*kw, N*Ho*Wo], columns n-major."""
    if x.ndim != 4:
        raise ShapeError(f"im2col_batch expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    kh, kw = kernel
    ho, wo = conv_output_hw((h, w), kernel, stride)
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: (c, kh, kw); columns: (n, ho, wo)
    cols = patches.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, image_shape: tuple, kernel: tuple, stride: int = 1) -> np.ndarray:
    """Exact adjoint of :func:`im2col`: scatter-add columns back to [C,H,W]."""
    if len(image_shape) != 3:
        raise ShapeError(f"col2im expects a [C,H,W] target shape, got {image_shape}")
    c, h, w = image_shape
    return col2im_batch(cols, (1, c, h, w), kernel, stride)[0]


def col2im_batch(cols: np.ndarray, x_shape: tuple, kernel: tuple, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`; overlapping patches accumulate."""
    n, c, h, w = x_shape
    kh, kw = kernel
    ho, wo = conv_output_hw((h, w), kernel, stride)
    if cols.shape != (c * kh * kw, n * ho * wo):
        raise ShapeError(
            f"cols shape {cols.shape} inconsistent with input {x_shape}, "
            f"kernel {kernel}, stride {stride}"
        )
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                cols6[:, i, j].transpose(1, 0, 2, 3)
            )
    return out


# --- serialization -----------------------------------------------------------
#
# Tensor stream layout (all integers little-endian unsigned 64-bit):
#
#   bytes 0..3   magic "EXT1"
#   u64          rank
#   u64 * rank   dims
#   payload      raw little-endian elements, row-major; 4 bytes each for
#                single precision, 8 for double (inferred on load)


def save_tensor(arr: np.ndarray, dest: BinaryIO | str) -> None:
    dt = resolve_dtype(arr.dtype)
    if isinstance(dest, str):
        with open(dest, "wb") as fh:
            save_tensor(arr, fh)
        return
    dest.write(TENSOR_MAGIC)
    dest.write(struct.pack("<Q", arr.ndim))
    for d in arr.shape:
        dest.write(struct.pack("<Q", d))
    dest.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def _read_exact(src: BinaryIO, count: int) -> bytes:
    data = src.read(count)
    if len(data) != count:
        raise FormatError(f"truncated tensor stream: wanted {count} bytes, got {len(data)}")
    return data


def load_tensor(src: BinaryIO | str) -> np.ndarray:
    """Read one tensor from a stream holding exactly one tensor.

    Element precision is inferred from the payload length (4 vs 8 bytes per
    element), so the stream must end where the tensor ends; containers that
    embed several tensors length-prefix each blob and use
    :func:`load_tensor_bytes` on the slice.
    """
    if isinstance(src, str):
        with open(src, "rb") as fh:
            return load_tensor(fh)
    if _read_exact(src, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic (expected EXT1)")
    (rank,) = struct.unpack("<Q", _read_exact(src, 8))
    if rank == 0 or rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = tuple(struct.unpack("<Q", _read_exact(src, 8))[0] for _ in range(rank))
    count = 1
    for d in shape:
        if d < 1:
            raise FormatError(f"invalid dimension {d} in tensor header")
        count *= d
    payload = _read_exact(src, count * 4)
    # Single precision occupies exactly count*4 bytes; double has 4 more per
    # element still in the stream.
    probe = src.read(count * 4)
    if len(probe) == 0:
        dt = "<f4"
    elif len(probe) == count * 4:
        payload += probe
        dt = "<f8"
    else:
        raise FormatError("tensor payload length matches neither single nor double precision")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="))


def load_tensor_bytes(data: bytes) -> np.ndarray:
    return load_tensor(io.BytesIO(data))
