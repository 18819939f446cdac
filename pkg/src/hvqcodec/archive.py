"""The "HVQC" compressed archive container.

Layout (little-endian)::

    b"HVQC" u16 version u16 flags  32s model_hash
    u16 ndim  u64 x ndim shape     u32 block_size
    f64 mean  f64 std  f64 log_offset  f64 log_flag   f32 tau (NaN = disabled)
    u16 nsections  {4s tag, u64 offset, u64 length} x nsections
    u32 payload_crc  u32 header_crc
    payload: sections back to back, offsets absolute from file start

Known tags: MASK (run-length varints), TABL (Huffman code lengths),
IDX0/IDX1/... (Huffman bitstreams, level 0 first), OUTL (u64 count then
(u64 flat index, f32 value) pairs), CNST (f64 value of a constant field).
Unknown tags are skipped.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .entropy import (
    EntropyError,
    HuffmanTable,
    huffman_build,
    huffman_decode,
    huffman_encode,
    rle_mask_decode,
    rle_mask_encode,
)

MAGIC = b"HVQC"
VERSION = 1

FLAG_CONSTANT = 1
FLAG_MASKED = 2
FLAG_LOG = 4
FLAG_BOUNDED = 8

_FIXED = struct.Struct("<4sHH32sH")
_STATS = struct.Struct("<IddddfH")
_SECTION = struct.Struct("<4sQQ")
_CRC = struct.Struct("<II")


class ArchiveError(ValueError):
    """Base class for unreadable archives."""


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class SectionError(ArchiveError):
    """Section table entries overlap, leave the file, or are missing."""


class ChecksumError(ArchiveError):
    pass


@dataclass
class ArchiveParts:
    model_hash: bytes
    shape: tuple[int, ...]
    block_size: int
    mean: float
    std: float
    log_offset: float = 0.0
    log_scaled: bool = False
    tau: float | None = None
    mask: np.ndarray | None = None
    streams: list[np.ndarray] = field(default_factory=list)
    alphabet_sizes: list[int] = field(default_factory=list)
    outlier_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    outlier_value: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    constant: float | None = None
    version: int = VERSION

    @property
    def flags(self) -> int:
        f = 0
        if self.constant is not None:
            f |= FLAG_CONSTANT
        if self.mask is not None:
            f |= FLAG_MASKED
        if self.log_scaled:
            f |= FLAG_LOG
        if self.tau is not None:
            f |= FLAG_BOUNDED
        return f

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class ArchiveInfo:
    """Header fields plus raw section extents, for inspection."""

    version: int
    flags: int
    header_bytes: int
    total_bytes: int
    sections: dict[str, tuple[int, int]]


def _tables_blob(tables: list[HuffmanTable], counts: list[int]) -> bytes:
    out = [struct.pack("<H", len(tables))]
    for t, n in zip(tables, counts):
        out.append(struct.pack("<IQ", t.num_symbols, n))
        out.append(t.to_bytes())
    return b"".join(out)


def _parse_tables(blob: bytes) -> list[tuple[HuffmanTable, int]]:
    try:
        (n,) = struct.unpack_from("<H", blob, 0)
        pos = 2
        out = []
        for _ in range(n):
            k, count = struct.unpack_from("<IQ", blob, pos)
            pos += 12
            if pos + k > len(blob):
                raise ArchiveError("TABL section truncated")
            out.append((HuffmanTable.from_bytes(blob[pos : pos + k]), count))
            pos += k
    except struct.error as exc:
        raise ArchiveError(f"TABL section truncated: {exc}") from None
    except EntropyError as exc:
        raise ArchiveError(f"TABL section invalid: {exc}") from None
    if pos != len(blob):
        raise ArchiveError("TABL section has trailing bytes")
    return out


def _outlier_blob(index: np.ndarray, value: np.ndarray) -> bytes:
    rec = np.empty(index.size, dtype=[("i", "<u8"), ("v", "<f4")])
    rec["i"] = index
    rec["v"] = value
    return struct.pack("<Q", index.size) + rec.tobytes()


def _parse_outliers(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < 8:
        raise ArchiveError("OUTL section truncated")
    (n,) = struct.unpack_from("<Q", blob, 0)
    if len(blob) != 8 + 12 * n:
        raise ArchiveError(f"OUTL section length {len(blob)} does not hold {n} records")
    rec = np.frombuffer(blob, dtype=[("i", "<u8"), ("v", "<f4")], count=n, offset=8)
    return rec["i"].astype(np.uint64), rec["v"].astype(np.float32)


def build_sections(parts: ArchiveParts) -> list[tuple[bytes, bytes]]:
    sections: list[tuple[bytes, bytes]] = []
    if parts.constant is not None:
        sections.append((b"CNST", struct.pack("<d", parts.constant)))
    if parts.mask is not None:
        sections.append((b"MASK", rle_mask_encode(parts.mask)))
    if parts.streams:
        tables = []
        payloads = []
        for stream, k in zip(parts.streams, parts.alphabet_sizes):
            s = np.asarray(stream, dtype=np.int64).reshape(-1)
            freqs = np.bincount(s, minlength=k) if s.size else np.ones(k, dtype=np.int64)
            t = huffman_build(freqs)
            tables.append(t)
            payloads.append(huffman_encode(s, t))
        sections.append((b"TABL", _tables_blob(tables, [int(np.size(s)) for s in parts.streams])))
        for level, p in enumerate(payloads):
            sections.append((f"IDX{level}".encode(), p))
    if parts.tau is not None:
        sections.append((b"OUTL", _outlier_blob(parts.outlier_index, parts.outlier_value)))
    return sections


def serialize_archive(parts: ArchiveParts) -> bytes:
    return assemble_archive(parts, build_sections(parts))


def assemble_archive(parts: ArchiveParts, sections: list[tuple[bytes, bytes]]) -> bytes:
    """Header for ``parts`` followed by ``sections`` (tag, payload) in the given order."""
    shape = tuple(int(s) for s in parts.shape)
    tau = float("nan") if parts.tau is None else parts.tau
    head = bytearray()
    head += _FIXED.pack(MAGIC, parts.version, parts.flags, parts.model_hash, len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape)
    head += _STATS.pack(parts.block_size, parts.mean, parts.std, parts.log_offset,
                        1.0 if parts.log_scaled else 0.0, tau, len(sections))
    header_len = len(head) + _SECTION.size * len(sections) + _CRC.size
    offset = header_len
    for tag, blob in sections:
        head += _SECTION.pack(tag, offset, len(blob))
        offset += len(blob)
    payload = b"".join(blob for _, blob in sections)
    payload_crc = zlib.crc32(payload)
    head += struct.pack("<I", payload_crc)
    head += struct.pack("<I", zlib.crc32(bytes(head)))
    return bytes(head) + payload


def read_header(data: bytes) -> tuple[dict, dict[bytes, tuple[int, int]], int]:
    """Parse and validate the header; returns (fields, sections, header_length)."""
    if len(data) < _FIXED.size or data[:4] != MAGIC:
        raise BadMagicError("not an HVQC archive (bad magic)")
    try:
        magic, version, flags, mhash, ndim = _FIXED.unpack_from(data, 0)
        pos = _FIXED.size
        if ndim < 1 or ndim > 8:
            raise ArchiveError(f"implausible dimensionality {ndim}")
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        block, mean, std, log_offset, log_flag, tau, nsec = _STATS.unpack_from(data, pos)
        pos += _STATS.size
        sections: dict[bytes, tuple[int, int]] = {}
        for _ in range(nsec):
            tag, off, length = _SECTION.unpack_from(data, pos)
            pos += _SECTION.size
            sections[tag] = (off, length)
        payload_crc, header_crc = _CRC.unpack_from(data, pos)
    except struct.error as exc:
        raise ArchiveError(f"header truncated: {exc}") from None
    if zlib.crc32(data[: pos + 4]) != header_crc:
        raise ChecksumError("header checksum mismatch")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported archive version {version}")
    header_len = pos + _CRC.size
    extents = sorted(sections.values())
    cursor = header_len
    for off, length in extents:
        if off < cursor:
            raise SectionError("sections overlap or intrude into the header")
        if off + length > len(data):
            raise SectionError("section extends past end of file")
        cursor = off + length
    if zlib.crc32(data[header_len:]) != payload_crc:
        raise ChecksumError("payload checksum mismatch")
    fields = dict(version=version, flags=flags, model_hash=mhash, shape=tuple(int(s) for s in shape),
                  block_size=block, mean=mean, std=std, log_offset=log_offset, log_flag=log_flag, tau=tau)
    return fields, sections, header_len


def deserialize_archive(data: bytes) -> ArchiveParts:
    fields, sections, _ = read_header(data)

    def sec(tag: bytes) -> bytes | None:
        if tag not in sections:
            return None
        off, length = sections[tag]
        return data[off : off + length]

    flags = fields["flags"]
    shape = fields["shape"]
    count = int(np.prod(shape))
    parts = ArchiveParts(model_hash=fields["model_hash"], shape=shape, block_size=fields["block_size"],
                         mean=fields["mean"], std=fields["std"], log_offset=fields["log_offset"],
                         log_scaled=bool(flags & FLAG_LOG),
                         tau=None if math.isnan(fields["tau"]) else float(fields["tau"]),
                         version=fields["version"])
    try:
        if flags & FLAG_CONSTANT:
            blob = sec(b"CNST")
            if blob is None or len(blob) != 8:
                raise SectionError("constant archive without a valid CNST section")
            (parts.constant,) = struct.unpack("<d", blob)
        if flags & FLAG_MASKED:
            blob = sec(b"MASK")
            if blob is None:
                raise SectionError("MASK section missing")
            parts.mask = rle_mask_decode(blob, count).reshape(shape)
        tables_blob = sec(b"TABL")
        if tables_blob is not None:
            for level, (table, n) in enumerate(_parse_tables(tables_blob)):
                blob = sec(f"IDX{level}".encode())
                if blob is None:
                    raise SectionError(f"IDX{level} section missing")
                parts.streams.append(huffman_decode(blob, table, n))
                parts.alphabet_sizes.append(table.num_symbols)
        elif not flags & FLAG_CONSTANT:
            raise SectionError("TABL section missing")
        if flags & FLAG_BOUNDED:
            blob = sec(b"OUTL")
            if blob is None:
                raise SectionError("OUTL section missing")
            parts.outlier_index, parts.outlier_value = _parse_outliers(blob)
            if parts.outlier_index.size and int(parts.outlier_index.max()) >= count:
                raise ArchiveError("outlier index outside the field")
    except EntropyError as exc:
        raise ArchiveError(str(exc)) from None
    return parts


def inspect_archive(data: bytes) -> ArchiveInfo:
    fields, sections, header_len = read_header(data)
    return ArchiveInfo(
        version=fields["version"], flags=fields["flags"], header_bytes=header_len, total_bytes=len(data),
        sections={tag.decode("ascii", "replace"): ext for tag, ext in sections.items()},
    )
