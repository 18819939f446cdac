"""Field conditioning: masked statistics, standardization, log scaling, padding, partitioning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOG_FLOOR = 1e-6


class ConstantFieldError(ValueError):
    """Valid data has zero spread; callers should store the constant directly."""


@dataclass
class FieldStats:
    mean: float
    std: float
    min: float
    max: float
    valid_count: int
    log_scaled: bool = False
    log_offset: float = 0.0


@dataclass
class BlockPlan:
    original_shape: tuple[int, int]
    padded_shape: tuple[int, int]
    block_size: int
    overlap: int
    origins: list[tuple[int, int]] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.block_size - self.overlap

    @property
    def grid(self) -> tuple[int, int]:
        return (len({o[0] for o in self.origins}), len({o[1] for o in self.origins}))


@dataclass
class Block:
    origin: tuple[int, int]
    data: np.ndarray
    mask: np.ndarray


def _valid(field_: np.ndarray, mask) -> np.ndarray:
    f = np.asarray(field_)
    if mask is None:
        return f.reshape(-1)
    return f[np.asarray(mask, dtype=bool)]


def compute_stats(field_: np.ndarray, mask=None) -> FieldStats:
    """Mean and population standard deviation over valid points only."""
    vals = _valid(field_, mask).astype(np.float64)
    if vals.size == 0:
        raise ValueError("compute_stats: no valid points")
    mu = float(vals.mean())
    sigma = float(np.sqrt(np.mean((vals - mu) ** 2)))
    stats = FieldStats(mean=mu, std=sigma, min=float(vals.min()), max=float(vals.max()), valid_count=int(vals.size))
    if sigma == 0.0:
        raise ConstantFieldError(f"compute_stats: constant field (value {mu}); use the constant-field shortcut")
    return stats


def standardize(field_: np.ndarray, stats: FieldStats) -> np.ndarray:
    if not stats.std > 0:
        raise ValueError(f"standardize: std must be positive, got {stats.std}")
    return (np.asarray(field_, dtype=np.float64) - stats.mean) / stats.std


def destandardize(field_: np.ndarray, stats: FieldStats) -> np.ndarray:
    if not stats.std > 0:
        raise ValueError(f"destandardize: std must be positive, got {stats.std}")
    return np.asarray(field_, dtype=np.float64) * stats.std + stats.mean


def log_offset_for(min_value: float) -> float:
    return LOG_FLOOR - min_value if min_value <= 0 else 0.0


def log_scale(field_: np.ndarray, mask=None, offset: float | None = None) -> tuple[np.ndarray, float]:
    """``ln(x + offset)`` on valid points; returns the transformed field and the offset used.

    Masked-out points are left untouched.
    """
    f = np.asarray(field_, dtype=np.float64)
    vals = _valid(f, mask)
    if vals.size == 0:
        raise ValueError("log_scale: no valid points")
    if offset is None:
        offset = log_offset_for(float(vals.min()))
    if (vals + offset <= 0).any():
        raise ValueError(f"log_scale: non-positive value after offset {offset}")
    out = f.copy()
    if mask is None:
        out = np.log(f + offset)
    else:
        m = np.asarray(mask, dtype=bool)
        out[m] = np.log(f[m] + offset)
    return out, float(offset)


def inverse_log_scale(field_: np.ndarray, offset: float) -> np.ndarray:
    return np.exp(np.asarray(field_, dtype=np.float64)) - offset


def build_mask_and_fill(field_: np.ndarray, missing: float | Callable[[np.ndarray], np.ndarray] | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Mark missing cells (exact fill value or predicate) and replace them with the valid mean.

    Returns ``(filled_field, mask)`` where mask is a uint8 plane, 1 = valid.
    """
    f = np.asarray(field_)
    if missing is None:
        miss = ~np.isfinite(f)
    elif callable(missing):
        miss = np.asarray(missing(f), dtype=bool) | ~np.isfinite(f)
    elif np.isnan(missing):
        miss = ~np.isfinite(f)
    else:
        miss = (f == missing) | ~np.isfinite(f)
    mask = (~miss).astype(np.uint8)
    if not mask.any():
        raise ValueError("build_mask_and_fill: every value is missing")
    filled = f.copy()
    if miss.any():
        filled[miss] = f[~miss].astype(np.float64).mean()
    return filled, mask


def below(threshold: float) -> Callable[[np.ndarray], np.ndarray]:
    """Predicate marking values strictly below ``threshold`` as missing."""
    return lambda a: a < threshold


def pad_cyclic(field_: np.ndarray, mask, target: tuple[int, int]) -> tuple[np.ndarray, np.ndarray | None]:
    """Extend each axis at its high end with a wrapped copy from the low end."""
    f = np.asarray(field_)
    if any(t < s for t, s in zip(target, f.shape)):
        raise ValueError(f"pad_cyclic: target {target} smaller than field {f.shape}")
    widths = [(0, t - s) for t, s in zip(target, f.shape)]
    out = np.pad(f, widths, mode="wrap")
    m = None if mask is None else np.pad(np.asarray(mask), widths, mode="wrap")
    return out, m


def _axis_origins(n: int, b: int, v: int) -> list[int]:
    step = b - v
    origins = [0]
    while origins[-1] + b < n:
        origins.append(origins[-1] + step)
    return origins


def plan_partition(shape: tuple[int, ...], block_size: int, overlap: int = 0) -> BlockPlan:
    """Tile ``shape`` with blocks whose origins advance by ``block_size - overlap``."""
    b, v = int(block_size), int(overlap)
    if b < 1 or b & (b - 1):
        raise ValueError(f"block size must be a power of two, got {b}")
    if not 0 <= v < b:
        raise ValueError(f"overlap must satisfy 0 <= v < B, got v={v}, B={b}")
    if len(shape) == 1:
        shape = (1, shape[0])
    h, w = (int(s) for s in shape)
    rows = _axis_origins(h, b, v)
    cols = _axis_origins(w, b, v)
    padded = (rows[-1] + b, cols[-1] + b)
    return BlockPlan((h, w), padded, b, v, [(r, c) for r in rows for c in cols])


def extract_blocks(field_: np.ndarray, mask, plan: BlockPlan) -> list[Block]:
    f = np.asarray(field_)
    if f.shape != plan.original_shape:
        raise ValueError(f"extract_blocks: field {f.shape} does not match plan {plan.original_shape}")
    m = np.ones(f.shape, dtype=np.uint8) if mask is None else np.asarray(mask)
    pf, pm = pad_cyclic(f, m, plan.padded_shape)
    b = plan.block_size
    return [Block((r, c), pf[r : r + b, c : c + b].copy(), pm[r : r + b, c : c + b].copy()) for r, c in plan.origins]


def reassemble(blocks, plan: BlockPlan, dtype=None) -> np.ndarray:
    """Write blocks back in plan order (later blocks win on overlap) and crop the padding."""
    blocks = list(blocks)
    if len(blocks) != len(plan.origins):
        raise ValueError(f"reassemble: {len(blocks)} blocks for a plan of {len(plan.origins)}")
    first = blocks[0].data if isinstance(blocks[0], Block) else np.asarray(blocks[0])
    out = np.empty(plan.padded_shape, dtype=dtype or first.dtype)
    b = plan.block_size
    for (r, c), blk in zip(plan.origins, blocks):
        data = blk.data if isinstance(blk, Block) else np.asarray(blk)
        if data.shape != (b, b):
            raise ValueError(f"reassemble: block shaped {data.shape}, expected {(b, b)}")
        out[r : r + b, c : c + b] = data
    h, w = plan.original_shape
    return out[:h, :w]
