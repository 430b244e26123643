"""
T4 tensor container: a 3-byte magic "T4\\n", a dtype code byte, a rank byte,
rank little-endian u64 dims, then the row-major little-endian payload.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from src.errors import BadMagicError, ShapeError, TruncatedPayloadError, UnknownDtypeError
from src.tensor import MAX_RANK, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"T4\n"
DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<i4"),
    2: np.dtype("u1"),
}
CODE_FOR_DTYPE = {dt: code for code, dt in DTYPE_CODES.items()}


def header_size(rank: int) -> int:
    return len(MAGIC) + 2 + 8 * rank


def encode_t4(values: Union[np.ndarray, Tensor]) -> bytes:
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    code = CODE_FOR_DTYPE.get(np.dtype(dtype))
    if code is None:
        raise UnknownDtypeError(f"T4 stores f32, i32 and u8 only, got {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"T4 stores rank <= {MAX_RANK}, got rank {arr.ndim}")
    header = MAGIC + bytes([code, arr.ndim]) + np.asarray(arr.shape, dtype="<u8").tobytes()
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_t4(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    if len(raw) < len(MAGIC) + 2:
        raise TruncatedPayloadError(f"{source}: header is cut short")
    code, rank = raw[3], raw[4]
    if code not in DTYPE_CODES:
        raise UnknownDtypeError(f"{source}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise ShapeError(f"{source}: rank {rank} exceeds {MAX_RANK}")
    start = header_size(rank)
    if len(raw) < start:
        raise TruncatedPayloadError(f"{source}: header is cut short")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype="<u8", count=rank, offset=5))
    dtype = DTYPE_CODES[code]
    expected = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - start
    if payload != expected:
        raise TruncatedPayloadError(f"{source}: payload has {payload} bytes, dims {dims} need {expected}")
    arr = np.frombuffer(raw, dtype=dtype, offset=start).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_t4(path: Union[str, Path], values: Union[np.ndarray, Tensor]):
    path = Path(path)
    path.write_bytes(encode_t4(values))
    logger.debug(f"T4: wrote {path}")


def read_t4(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    return decode_t4(path.read_bytes(), source=str(path))


def read_t4_header(path: Union[str, Path]) -> tuple[np.dtype, tuple[int, ...]]:
    """(dtype, dims) of a T4 file without reading its payload."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(MAGIC) + 2)
        if head[: len(MAGIC)] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {head[:len(MAGIC)]!r}, expected {MAGIC!r}")
        if len(head) < len(MAGIC) + 2:
            raise TruncatedPayloadError(f"{path}: header is cut short")
        code, rank = head[3], head[4]
        if code not in DTYPE_CODES:
            raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise ShapeError(f"{path}: rank {rank} exceeds {MAX_RANK}")
        raw_dims = f.read(8 * rank)
    if len(raw_dims) != 8 * rank:
        raise TruncatedPayloadError(f"{path}: header is cut short")
    dims = tuple(int(d) for d in np.frombuffer(raw_dims, dtype="<u8"))
    return DTYPE_CODES[code], dims
