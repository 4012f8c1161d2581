"""Latent full-precision weights with a {-1,+1} forward view.

The optimizer owns the latent matrix; the sign view is recomputed on every
forward pass and never stored back. Gradient routing to the latents uses the
clipped straight-through estimator (identity inside [-1, 1], zero outside).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ContractViolation, DataError

FLAG_CLIP = 0x1
FLAG_BIAS = 0x2
FLAG_PACKED = 0x4


class LatentWeightMatrix:
    """Dense weight matrix of shape ``(rows, cols)`` = (fan-out, fan-in)."""

    def __init__(self, latent: np.ndarray, *, clip_enabled: bool = True,
                 bias: np.ndarray | None = None):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 2:
            raise ContractViolation(f"latent weights must be 2-d, got shape {latent.shape}")
        self.latent = latent
        self.clip_enabled = bool(clip_enabled)
        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64)
            if bias.shape != (latent.shape[0],):
                raise ContractViolation(
                    f"bias shape {bias.shape} does not match fan-out {latent.shape[0]}"
                )
        self.bias = bias

    @property
    def rows(self) -> int:
        return self.latent.shape[0]

    @property
    def cols(self) -> int:
        return self.latent.shape[1]


def binarize_view(m: LatentWeightMatrix) -> np.ndarray:
    """Fresh sign matrix: +1 where latent >= 0, else -1 (never 0)."""
    if not np.all(np.isfinite(m.latent)):
        raise ContractViolation("latent weights contain non-finite entries")
    return np.where(m.latent >= 0.0, 1.0, -1.0)


def ste_backward(grad_wrt_binary: np.ndarray, m: LatentWeightMatrix) -> np.ndarray:
    """Clipped straight-through routing from the sign view to the latents."""
    g = np.asarray(grad_wrt_binary, dtype=np.float64)
    if g.shape != m.latent.shape:
        raise ContractViolation(
            f"gradient shape {g.shape} does not match latent shape {m.latent.shape}"
        )
    return np.where(np.abs(m.latent) <= 1.0, g, 0.0)


def init_dense(rows: int, cols: int, rng: np.random.Generator, *,
               clip_enabled: bool = True, with_bias: bool = True) -> LatentWeightMatrix:
    """Uniform init on [-sqrt(1/cols), +sqrt(1/cols)]; bias drawn the same way."""
    if rows < 1 or cols < 1:
        raise ContractViolation("rows and cols must be >= 1")
    bound = np.sqrt(1.0 / cols)
    latent = rng.uniform(-bound, bound, size=(rows, cols))
    bias = rng.uniform(-bound, bound, size=rows) if with_bias else None
    return LatentWeightMatrix(latent, clip_enabled=clip_enabled, bias=bias)


def clip_latent(m: LatentWeightMatrix) -> None:
    """Clamp latents into [-1, +1]; no-op when clipping is disabled."""
    if m.clip_enabled:
        np.clip(m.latent, -1.0, 1.0, out=m.latent)


# ---------------------------------------------------------------------------
# Serialization: header (rows, cols, flags) + payload
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<III")


def pack_signs(m: LatentWeightMatrix) -> bytes:
    """Pack the sign view 1 bit per weight, row-major, zero-padded to a byte.

    Bit value 1 encodes +1, bit value 0 encodes -1; the first weight occupies
    the most significant bit of the first byte.
    """
    bits = (binarize_view(m) > 0.0).astype(np.uint8).reshape(-1)
    return np.packbits(bits).tobytes()


def unpack_signs(data: bytes, rows: int, cols: int) -> np.ndarray:
    n = rows * cols
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n)
    return np.where(bits > 0, 1.0, -1.0).reshape(rows, cols)


def write_weight_block(fh: BinaryIO, m: LatentWeightMatrix, *, packed: bool = False) -> None:
    """Serialize one matrix: little-endian header, then latents (or packed signs).

    Packed export drops the latent precision by design; the bias, when present,
    is always stored at full precision after the weight payload.
    """
    flags = 0
    if m.clip_enabled:
        flags |= FLAG_CLIP
    if m.bias is not None:
        flags |= FLAG_BIAS
    if packed:
        flags |= FLAG_PACKED
    fh.write(_HEADER.pack(m.rows, m.cols, flags))
    if packed:
        fh.write(pack_signs(m))
    else:
        fh.write(np.ascontiguousarray(m.latent, dtype="<f8").tobytes())
    if m.bias is not None:
        fh.write(np.ascontiguousarray(m.bias, dtype="<f8").tobytes())


def read_weight_block(fh: BinaryIO) -> LatentWeightMatrix:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise DataError("truncated weight block header")
    rows, cols, flags = _HEADER.unpack(head)
    if rows < 1 or cols < 1:
        raise DataError(f"corrupt weight block header: rows={rows} cols={cols}")
    if flags & FLAG_PACKED:
        nbytes = (rows * cols + 7) // 8
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise DataError("truncated packed weight payload")
        latent = unpack_signs(payload, rows, cols)
    else:
        nbytes = rows * cols * 8
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise DataError("truncated latent weight payload")
        latent = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    bias = None
    if flags & FLAG_BIAS:
        payload = fh.read(rows * 8)
        if len(payload) != rows * 8:
            raise DataError("truncated bias payload")
        bias = np.frombuffer(payload, dtype="<f8").copy()
    return LatentWeightMatrix(latent, clip_enabled=bool(flags & FLAG_CLIP), bias=bias)
