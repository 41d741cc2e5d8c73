"""Diagonal complex linear recurrences, h_k = lam * h_{k-1} + b_k.

Two evaluation routes are provided. :func:`seq_scan` walks the time axis one
step at a time and is the reference. :func:`par_scan` treats each step as an
affine map ``(a, b)`` and composes them with an inclusive work-efficient
(Brent-Kung) scan, blocked along time so that the reduction tree only depends
on ``(N, block_size)``.

Arrays follow the layout ``(..., N, n)``: leading batch axes, then time, then
the hidden width.  Every ``(batch, width)`` position is an independent lane.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_BLOCK_SIZE = 256
CHUNK_BYTES = 1 << 20


class Direction(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    MERGED = "merged"


@dataclass(frozen=True)
class ScanElement:
    """One affine step ``h -> a * h + b`` with elementwise complex ``a``, ``b``."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.complex128)
        b = np.asarray(self.b, dtype=np.complex128)
        if a.shape != b.shape:
            raise DimensionError(f"scan element widths differ: a{a.shape} vs b{b.shape}")
        if a.ndim == 0 or a.shape[-1] < 1:
            raise DimensionError("scan element needs width n >= 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, n: int) -> "ScanElement":
        return cls(np.ones(n), np.zeros(n))

    @property
    def width(self) -> int:
        return self.a.shape[-1]


@dataclass(frozen=True)
class HiddenSequence:
    """Hidden states with shape ``(..., N, n)`` and the direction that produced them."""

    values: np.ndarray
    direction: Direction = Direction.FORWARD

    def __post_init__(self):
        if self.values.ndim < 2 or self.values.shape[-2] < 1:
            raise DimensionError(f"hidden sequence needs shape (..., N>=1, n), got {self.values.shape}")
        object.__setattr__(self, "direction", Direction(self.direction))

    @property
    def length(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


def combine(e1: ScanElement, e2: ScanElement) -> ScanElement:
    """Compose ``e1`` followed by ``e2``: ``(a2 a1, a2 b1 + b2)``."""
    if e1.a.shape != e2.a.shape:
        raise DimensionError(f"cannot combine widths {e1.a.shape} and {e2.a.shape}")
    return ScanElement(e2.a * e1.a, e2.a * e1.b + e2.b)


def _prepare(lam, b, h0):
    lam = np.asarray(lam, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if b.ndim < 2:
        raise DimensionError(f"b must have shape (..., N, n), got {b.shape}")
    if b.shape[-2] < 1:
        raise DimensionError("sequence length N must be >= 1")
    if lam.ndim == 0 or lam.shape[-1] != b.shape[-1]:
        raise DimensionError(f"eigenvalue width {lam.shape} does not match input width {b.shape[-1]}")
    batch = b.shape[:-2]
    try:
        np.broadcast_shapes(lam.shape, batch + (b.shape[-1],))
    except ValueError:
        raise DimensionError(f"eigenvalues {lam.shape} do not broadcast against inputs {b.shape}") from None
    if h0 is not None:
        h0 = np.asarray(h0, dtype=np.complex128)
        if h0.ndim == 0 or h0.shape[-1] != b.shape[-1]:
            raise DimensionError(f"initial state width {h0.shape} does not match input width {b.shape[-1]}")
    for name, arr in (("lambda", lam), ("b", b), ("h0", h0)):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")
    return lam, b, h0


def seq_scan(lam, b, h0=None) -> HiddenSequence:
    """Evaluate the recurrence step by step (reference route)."""
    lam, b, h0 = _prepare(lam, b, h0)
    out = np.empty(np.broadcast_shapes(b.shape, lam[..., None, :].shape), dtype=np.complex128)
    h = np.zeros(out.shape[:-2] + out.shape[-1:], dtype=np.complex128)
    if h0 is not None:
        h = h + h0
    for k in range(b.shape[-2]):
        h = lam * h + b[..., k, :]
        out[..., k, :] = h
    return HiddenSequence(out, Direction.FORWARD)


def _brent_kung(a: np.ndarray, b: np.ndarray) -> None:
    """In-place inclusive scan along axis -2; its length must be a power of two."""
    length = a.shape[-2]
    s = 1
    while s < length:
        right = slice(2 * s - 1, None, 2 * s)
        left = slice(s - 1, length - s, 2 * s)
        ar = a[..., right, :]
        b[..., right, :] = ar * b[..., left, :] + b[..., right, :]
        a[..., right, :] = ar * a[..., left, :]
        s *= 2
    s //= 4
    while s >= 1:
        right = slice(3 * s - 1, None, 2 * s)
        left = slice(2 * s - 1, length - s, 2 * s)
        ar = a[..., right, :]
        b[..., right, :] = ar * b[..., left, :] + b[..., right, :]
        a[..., right, :] = ar * a[..., left, :]
        s //= 2


def _pad_identity(a, b, length):
    extra = length - a.shape[-2]
    if extra == 0:
        return a, b
    pad = [(0, 0)] * a.ndim
    pad[-2] = (0, extra)
    return np.pad(a, pad, constant_values=1.0), np.pad(b, pad, constant_values=0.0)


def affine_scan(a: np.ndarray, b: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """Inclusive scan of per-step affine maps along axis -2; returns the ``b`` prefixes.

    ``a`` and ``b`` must share a shape.  The time axis is cut into blocks of
    ``block_size`` steps (a power of two).  Each block is scanned in place, the
    block totals are scanned recursively and then carried into the blocks.
    """
    if block_size < 2 or block_size & (block_size - 1):
        raise ValueError(f"block_size must be a power of two >= 2, got {block_size}")
    a = np.array(a, dtype=np.complex128)
    b = np.array(b, dtype=np.complex128)
    n_steps = a.shape[-2]
    if n_steps <= block_size:
        a, b = _pad_identity(a, b, 1 << (n_steps - 1).bit_length())
        _brent_kung(a, b)
        return b[..., :n_steps, :]

    n_blocks = -(-n_steps // block_size)
    a, b = _pad_identity(a, b, n_blocks * block_size)
    lead, width = a.shape[:-2], a.shape[-1]
    a = a.reshape(lead + (n_blocks, block_size, width))
    b = b.reshape(lead + (n_blocks, block_size, width))
    # blocks are independent here; scanning a cache-sized group at a time keeps
    # the per-element cost flat as N grows
    flat_a = a.reshape(-1, block_size, width)
    flat_b = b.reshape(-1, block_size, width)
    step = max(1, CHUNK_BYTES // (32 * block_size * width))
    for lo in range(0, flat_a.shape[0], step):
        _brent_kung(flat_a[lo:lo + step], flat_b[lo:lo + step])
    # state at the end of each block, with all earlier blocks folded in
    carry = affine_scan(a[..., -1, :], b[..., -1, :], block_size)
    b[..., 1:, :, :] += a[..., 1:, :, :] * carry[..., :-1, None, :]
    return b.reshape(lead + (n_blocks * block_size, width))[..., :n_steps, :]


def par_scan(lam, b, h0=None, block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> HiddenSequence:
    """Evaluate the recurrence with a blocked parallel prefix scan.

    Same contract as :func:`seq_scan`.  With ``workers > 1`` the hidden width
    is split into lane groups that are scanned on a thread pool; every lane
    keeps the same reduction tree, so the result does not depend on
    ``workers``.
    """
    lam, b, h0 = _prepare(lam, b, h0)
    shape = np.broadcast_shapes(b.shape, lam[..., None, :].shape)
    a = np.broadcast_to(lam[..., None, :], shape)
    b = np.array(np.broadcast_to(b, shape))
    if h0 is not None:
        # inclusive scan with no prepended element: fold h0 into the first step
        b[..., 0, :] += lam * h0

    width = shape[-1]
    if workers <= 1 or width < 2:
        return HiddenSequence(affine_scan(a, b, block_size), Direction.FORWARD)

    groups = np.array_split(np.arange(width), min(workers, width))
    out = np.empty(shape, dtype=np.complex128)
    with ThreadPoolExecutor(max_workers=len(groups)) as pool:
        results = pool.map(lambda g: affine_scan(a[..., g], b[..., g], block_size), groups)
        for g, res in zip(groups, results):
            out[..., g] = res
    return HiddenSequence(out, Direction.FORWARD)


def reverse_scan(lam, b, h_end=None, block_size: int = DEFAULT_BLOCK_SIZE, workers: int = 1) -> HiddenSequence:
    """Evaluate ``h_k = lam * h_{k+1} + b_k`` from the last step back to the first."""
    b = np.asarray(b)
    if b.ndim < 2:
        raise DimensionError(f"b must have shape (..., N, n), got {b.shape}")
    fwd = par_scan(lam, np.flip(b, axis=-2), h_end, block_size=block_size, workers=workers)
    return HiddenSequence(np.ascontiguousarray(np.flip(fwd.values, axis=-2)), Direction.BACKWARD)
