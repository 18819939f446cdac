"""Whole-field compression: preprocessing, per-block inference, entropy coding and the error-bound pass."""
from __future__ import annotations

import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import preprocess as pp
from .archive import ArchiveError, ArchiveParts, deserialize_archive, serialize_archive
from .checkpoint import model_hash
from .model import HierarchicalVQModel

STACK_MAGIC = b"HVQS"
STACK_VERSION = 1


class CodecError(ValueError):
    pass


class ModelMismatchError(CodecError):
    """The archive was produced with a different model."""


@dataclass
class CodecConfig:
    tau: float | None = None
    block_size: int = 256
    workers: int = 1
    log_scale: bool = False

    def __post_init__(self):
        if self.tau is not None and not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"error bound must be a positive finite number, got {self.tau}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def check_model(self, model: HierarchicalVQModel) -> None:
        stride = model.config.total_stride
        if self.block_size % stride:
            raise CodecError(f"block size {self.block_size} is not divisible by the model stride {stride}")


@dataclass
class Metrics:
    mse: float
    psnr: float
    bit_rate: Fraction
    compression_ratio: Fraction
    compress_throughput: float
    decompress_throughput: float
    outlier_fraction: float
    archive_bytes: int
    elements: int

    @property
    def expanded(self) -> bool:
        """True when the archive is larger than the raw f32 data."""
        return self.bit_rate > 32

    def line(self) -> str:
        """One stable key=value line for scripts."""
        return (f"bit_rate={float(self.bit_rate):.6f} ratio={float(self.compression_ratio):.4f} "
                f"psnr={self.psnr:.4f} mse={self.mse:.6e} outlier_fraction={self.outlier_fraction:.6f} "
                f"bytes={self.archive_bytes} elements={self.elements} "
                f"compress_mbps={self.compress_throughput:.3f} decompress_mbps={self.decompress_throughput:.3f}")


# -- metrics -------------------------------------------------------------------

def psnr(x, x_hat, mask=None) -> float:
    """10·log10(range²/mse) over valid points, range taken from the valid originals; +inf when exact."""
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(x_hat, dtype=np.float64)
    if x.shape != xh.shape:
        raise ValueError(f"psnr: shapes differ {x.shape} vs {xh.shape}")
    valid = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if not valid.any():
        raise ValueError("psnr: no valid points")
    xv = x[valid]
    rng = float(xv.max() - xv.min())
    if rng == 0.0:
        raise ValueError("psnr: valid data has zero range")
    mse = float(np.mean((xv - xh[valid]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(rng * rng / mse)


def masked_mse(x, x_hat, mask=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(x_hat, dtype=np.float64)
    valid = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    return float(np.mean((x[valid] - xh[valid]) ** 2))


def bit_rate_and_ratio(archive_bytes: int, element_count: int) -> tuple[Fraction, Fraction]:
    """Exact bits/element and the f32 compression ratio (their product is exactly 32)."""
    if element_count <= 0:
        raise ValueError("element count must be positive")
    rate = Fraction(8 * int(archive_bytes), int(element_count))
    ratio = Fraction(32) / rate if rate else Fraction(0)
    return rate, ratio


def ratio_for_bit_rate(bit_rate) -> Fraction:
    return Fraction(32) / Fraction(str(bit_rate))


def measure_throughput(fn, nbytes: int):
    """Run ``fn()`` and return (result, MB/s); zero bytes reports 0."""
    t0 = time.perf_counter()
    result = fn()
    elapsed = time.perf_counter() - t0
    if nbytes <= 0:
        return result, 0.0
    return result, nbytes / 1e6 / max(elapsed, 1e-12)


def throughput(nbytes: int, seconds: float) -> float:
    if nbytes <= 0:
        return 0.0
    return nbytes / 1e6 / max(seconds, 1e-12)


# -- error-bound pass ----------------------------------------------------------

def outlier_pass(x, x_hat, mask, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices (sorted) and original values of valid points with |x - x̂| > τ.

    Non-finite reconstructions count as outliers.
    """
    x = np.asarray(x)
    err = np.abs(x.astype(np.float64) - np.asarray(x_hat, dtype=np.float64))
    bad = ~(err <= tau)
    if mask is not None:
        bad &= np.asarray(mask).astype(bool)
    idx = np.flatnonzero(bad).astype(np.uint64)
    return idx, x.reshape(-1)[idx.astype(np.int64)].astype(np.float32)


# -- pipeline ------------------------------------------------------------------

def _encode_blocks(model, blocks: list[np.ndarray], workers: int) -> list[list[np.ndarray]]:
    def one(b):
        return model.encode_indices(b[None, None].astype(np.float32))

    if workers == 1:
        return [one(b) for b in blocks]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, blocks))


def _decode_blocks(model, per_block: list[list[np.ndarray]], workers: int) -> list[np.ndarray]:
    def one(idx):
        return model.decode_indices(idx)[0, 0]

    if workers == 1:
        return [one(i) for i in per_block]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, per_block))


def _split_streams(parts: ArchiveParts, model: HierarchicalVQModel, nblocks: int) -> list[list[np.ndarray]]:
    b = parts.block_size
    grids = model.index_grid_shapes(b, b)
    if len(parts.streams) != len(grids):
        raise ArchiveError(f"archive has {len(parts.streams)} index streams, model has {len(grids)} levels")
    per_level = []
    for stream, (h, w), k in zip(parts.streams, grids, model.config.codebook_sizes):
        if stream.size != nblocks * h * w:
            raise ArchiveError(f"index stream holds {stream.size} symbols, expected {nblocks * h * w}")
        if stream.size and stream.max() >= k:
            raise ArchiveError("index stream refers past the codebook")
        per_level.append(stream.reshape(nblocks, 1, h, w))
    return [[lvl[i] for lvl in per_level] for i in range(nblocks)]


def _fill_value(parts: ArchiveParts) -> np.float32:
    """Masked cells decode to the stored mean (mapped back through the log when flagged)."""
    mu = parts.mean
    if parts.log_scaled:
        mu = float(pp.inverse_log_scale(np.array(mu), parts.log_offset))
    return np.float32(mu)


def _reconstruct(parts: ArchiveParts, model: HierarchicalVQModel, workers: int) -> np.ndarray:
    """Field reconstruction before outlier correction; shared by compress and decompress."""
    shape = tuple(parts.shape)
    if parts.constant is not None:
        out = np.full(shape, np.float32(parts.constant), dtype=np.float32)
    else:
        plan = pp.plan_partition(shape, parts.block_size, 0)
        per_block = _split_streams(parts, model, len(plan.origins))
        blocks = _decode_blocks(model, per_block, workers)
        std_field = pp.reassemble(blocks, plan, dtype=np.float32)
        stats = pp.FieldStats(parts.mean, parts.std, 0.0, 0.0, 0)
        out = pp.destandardize(std_field, stats)
        if parts.log_scaled:
            out = pp.inverse_log_scale(out, parts.log_offset)
        out = out.astype(np.float32)
    if parts.mask is not None:
        out[parts.mask == 0] = _fill_value(parts)
    return out


def _apply_outliers(field: np.ndarray, parts: ArchiveParts) -> np.ndarray:
    if parts.outlier_index.size:
        flat = field.reshape(-1)
        flat[parts.outlier_index.astype(np.int64)] = parts.outlier_value
    return field


def compress_parts(field, model: HierarchicalVQModel, config: CodecConfig | None = None, mask=None,
                   missing=None) -> ArchiveParts:
    """Build the archive contents for a 2D field (f32 semantics)."""
    config = config or CodecConfig()
    config.check_model(model)
    x = np.asarray(field, dtype=np.float32)
    if x.ndim != 2:
        raise CodecError(f"compress_parts expects a 2D field, got shape {x.shape}")
    filled, auto_mask = pp.build_mask_and_fill(x, missing)
    m = auto_mask if mask is None else (np.asarray(mask).astype(bool) & auto_mask.astype(bool)).astype(np.uint8)
    if not m.any():
        raise CodecError("field has no valid points")
    if mask is not None and not np.array_equal(m, auto_mask):
        filled = filled.copy()
        filled[m == 0] = filled[m == 1].astype(np.float64).mean()
    work = filled.astype(np.float64)
    offset = 0.0
    if config.log_scale:
        work, offset = pp.log_scale(work, m)
    store_mask = None if m.all() else m
    try:
        stats = pp.compute_stats(work, m)
    except pp.ConstantFieldError:
        value = float(work[m.astype(bool)][0])
        if config.log_scale:
            value = float(pp.inverse_log_scale(np.array(value), offset))
        return ArchiveParts(model_hash=model_hash(model), shape=x.shape, block_size=config.block_size,
                            mean=float(value), std=0.0, mask=store_mask, constant=value, tau=config.tau)
    standardized = pp.standardize(work, stats)
    if store_mask is not None:
        standardized[m == 0] = 0.0
    plan = pp.plan_partition(x.shape, config.block_size, 0)
    blocks = [b.data for b in pp.extract_blocks(standardized, m, plan)]
    per_block = _encode_blocks(model, blocks, config.workers)
    streams = [np.concatenate([pb[l].reshape(-1) for pb in per_block]) for l in range(model.config.levels)]
    parts = ArchiveParts(model_hash=model_hash(model), shape=x.shape, block_size=config.block_size,
                         mean=stats.mean, std=stats.std, log_offset=offset, log_scaled=config.log_scale,
                         tau=config.tau, mask=store_mask, streams=streams,
                         alphabet_sizes=list(model.config.codebook_sizes))
    if config.tau is not None:
        recon = _reconstruct(parts, model, config.workers)
        parts.outlier_index, parts.outlier_value = outlier_pass(x, recon, m, config.tau)
    return parts


def decompress_parts(parts: ArchiveParts, model: HierarchicalVQModel, workers: int = 1
                     ) -> tuple[np.ndarray, np.ndarray]:
    if parts.model_hash != model_hash(model):
        raise ModelMismatchError("archive was written with a different model (hash mismatch)")
    field = _apply_outliers(_reconstruct(parts, model, workers), parts)
    mask = np.ones(parts.shape, dtype=np.uint8) if parts.mask is None else parts.mask.astype(np.uint8)
    return field, mask


def pack_stack(archives: list[bytes]) -> bytes:
    head = STACK_MAGIC + struct.pack("<HI", STACK_VERSION, len(archives))
    head += struct.pack(f"<{len(archives)}Q", *(len(a) for a in archives))
    return head + b"".join(archives)


def unpack_stack(blob: bytes) -> list[bytes]:
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != STACK_VERSION:
            raise ArchiveError(f"unsupported stack version {version}")
        lengths = struct.unpack_from(f"<{count}Q", blob, 10)
    except struct.error as exc:
        raise ArchiveError(f"stack header truncated: {exc}") from None
    pos = 10 + 8 * count
    if pos + sum(lengths) != len(blob):
        raise ArchiveError("stack lengths do not match the file size")
    out = []
    for n in lengths:
        out.append(blob[pos : pos + n])
        pos += n
    return out


def compress(field, model: HierarchicalVQModel, config: CodecConfig | None = None, mask=None,
             missing=None) -> bytes:
    """Compress a 2D field to an archive; 3D input is compressed slice by slice along axis 0."""
    x = np.asarray(field)
    if x.ndim == 3:
        masks = [None] * x.shape[0] if mask is None else list(np.asarray(mask))
        return pack_stack([compress(s, model, config, m, missing) for s, m in zip(x, masks)])
    return serialize_archive(compress_parts(x, model, config, mask, missing))


def decompress(blob: bytes, model: HierarchicalVQModel, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`compress`; returns (field as f32, validity mask)."""
    if blob[:4] == STACK_MAGIC:
        pieces = [decompress(b, model, workers) for b in unpack_stack(blob)]
        return np.stack([p[0] for p in pieces]), np.stack([p[1] for p in pieces])
    return decompress_parts(deserialize_archive(blob), model, workers)


def compress_with_metrics(field, model: HierarchicalVQModel, config: CodecConfig | None = None, mask=None,
                          missing=None) -> tuple[bytes, np.ndarray, Metrics]:
    """Compress, decompress and report rate/distortion and throughput on the valid points."""
    config = config or CodecConfig()
    x = np.asarray(field, dtype=np.float32)
    raw_bytes = 4 * x.size
    blob, c_mbps = measure_throughput(lambda: compress(x, model, config, mask, missing), raw_bytes)
    (recon, valid), d_mbps = measure_throughput(lambda: decompress(blob, model, config.workers), raw_bytes)
    rate, ratio = bit_rate_and_ratio(len(blob), x.size)
    outliers = count_outliers(blob) if config.tau is not None else 0
    nvalid = int(valid.sum())
    try:
        score = psnr(x, recon, valid)
    except ValueError:
        score = math.inf
    metrics = Metrics(mse=masked_mse(x, recon, valid), psnr=score, bit_rate=rate, compression_ratio=ratio,
                      compress_throughput=c_mbps, decompress_throughput=d_mbps,
                      outlier_fraction=outliers / nvalid if nvalid else 0.0,
                      archive_bytes=len(blob), elements=x.size)
    return blob, recon, metrics


def count_outliers(blob: bytes) -> int:
    if blob[:4] == STACK_MAGIC:
        return sum(count_outliers(b) for b in unpack_stack(blob))
    return int(deserialize_archive(blob).outlier_index.size)


def max_bound_violation(x, recon, mask, tau: float) -> float:
    """Largest amount by which |x - x̂| exceeds τ on valid points (<= 0 means the bound holds)."""
    err = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(recon, dtype=np.float64))
    valid = np.asarray(mask).astype(bool)
    if not valid.any():
        return -tau
    e = err[valid]
    if not np.isfinite(e).all():
        return math.inf
    return float(e.max() - tau)
