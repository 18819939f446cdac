"""Canonical Huffman coding of index streams and run-length coding of mask planes."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

MAX_CODE_LENGTH = 32


class EntropyError(ValueError):
    """Malformed or truncated entropy-coded data."""


@dataclass(frozen=True)
class HuffmanTable:
    """Code lengths per symbol (0 = symbol absent); canonical codes follow from them."""

    lengths: np.ndarray

    @property
    def num_symbols(self) -> int:
        return int(self.lengths.size)

    @property
    def max_length(self) -> int:
        return int(self.lengths.max()) if self.lengths.size else 0

    def codes(self) -> np.ndarray:
        lengths = self.lengths.astype(np.int64)
        codes = np.zeros(lengths.size, dtype=np.uint64)
        order = sorted((int(l), s) for s, l in enumerate(lengths) if l > 0)
        code = 0
        prev = order[0][0] if order else 0
        for l, s in order:
            code <<= l - prev
            codes[s] = code
            code += 1
            prev = l
        return codes

    def kraft_sum(self) -> float:
        used = self.lengths[self.lengths > 0].astype(np.float64)
        return float(np.sum(2.0 ** -used))

    def to_bytes(self) -> bytes:
        return self.lengths.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> HuffmanTable:
        lengths = np.frombuffer(blob, dtype=np.uint8).copy()
        if lengths.size and lengths.max() > MAX_CODE_LENGTH:
            raise EntropyError("code length table exceeds the maximum code length")
        table = cls(lengths)
        if lengths.any() and table.kraft_sum() > 1.0:
            raise EntropyError("code length table violates the Kraft inequality")
        return table


def _code_lengths(freqs: np.ndarray) -> np.ndarray:
    symbols = [int(s) for s in np.flatnonzero(freqs)]
    lengths = np.zeros(freqs.size, dtype=np.int64)
    if len(symbols) == 1:
        lengths[symbols[0]] = 1
        return lengths
    # heap items: (weight, tiebreak, members); leaves tie-break on symbol value
    heap = [(int(freqs[s]), s, [s]) for s in symbols]
    heapq.heapify(heap)
    tiebreak = freqs.size
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        for s in a:
            lengths[s] += 1
        for s in b:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, tiebreak, a + b))
        tiebreak += 1
    return lengths


def huffman_build(frequencies) -> HuffmanTable:
    """Optimal prefix code lengths for ``frequencies`` (length-limited to 32 bits)."""
    freqs = np.asarray(frequencies, dtype=np.int64)
    if freqs.ndim != 1 or (freqs < 0).any():
        raise ValueError("huffman_build: frequencies must be a 1-D array of non-negative counts")
    if not freqs.any():
        raise ValueError("huffman_build: all frequencies are zero")
    lengths = _code_lengths(freqs)
    while lengths.max() > MAX_CODE_LENGTH:
        # flatten the distribution until the deepest code fits
        freqs = np.where(freqs > 0, np.maximum(1, freqs >> 1), 0)
        lengths = _code_lengths(freqs)
    return HuffmanTable(lengths.astype(np.uint8))


def huffman_encode(symbols, table: HuffmanTable) -> bytes:
    """Concatenate codes MSB-first and pad the final byte with zero bits."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if sym.size == 0:
        return b""
    if sym.min() < 0 or sym.max() >= table.num_symbols:
        raise EntropyError("huffman_encode: symbol outside the table alphabet")
    lens = table.lengths.astype(np.int64)[sym]
    if (lens == 0).any():
        raise EntropyError("huffman_encode: symbol has no code in this table")
    codes = table.codes()[sym]
    total = int(lens.sum())
    starts = np.cumsum(lens) - lens
    rep_len = np.repeat(lens, lens)
    pos = np.arange(total, dtype=np.int64) - np.repeat(starts, lens)
    shift = (rep_len - 1 - pos).astype(np.uint64)
    bits = ((np.repeat(codes, lens) >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits).tobytes()


def huffman_decode(data: bytes, table: HuffmanTable, count: int) -> np.ndarray:
    """Decode exactly ``count`` symbols; raises :class:`EntropyError` on truncation or invalid codes."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if not table.lengths.any():
        raise EntropyError("huffman_decode: empty code table")
    maxlen = table.max_length
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    nbits = bits.size
    padded = np.concatenate([bits, np.zeros(maxlen, dtype=np.uint8)]).astype(np.uint64)
    window = np.zeros(nbits + 1, dtype=np.uint64)
    for j in range(maxlen):
        window += padded[j : j + nbits + 1] << np.uint64(maxlen - 1 - j)

    lengths = table.lengths.astype(np.int64)
    counts = np.bincount(lengths[lengths > 0], minlength=maxlen + 1)
    first = np.zeros(maxlen + 1, dtype=np.int64)
    offsets = np.zeros(maxlen + 1, dtype=np.int64)
    code = 0
    seen = 0
    for l in range(1, maxlen + 1):
        first[l] = code
        offsets[l] = seen
        seen += counts[l]
        code = (code + counts[l]) << 1
    limits = np.array([(first[l] + counts[l]) << (maxlen - l) for l in range(1, maxlen + 1)], dtype=np.uint64)
    sorted_syms = np.array(sorted(range(lengths.size), key=lambda s: (lengths[s], s)), dtype=np.int64)[-seen:] \
        if seen else np.zeros(0, dtype=np.int64)

    # per bit position: the code length and symbol a code starting there would have
    lvec = np.searchsorted(limits, window, side="right") + 1
    bad = lvec > maxlen
    lclip = np.minimum(lvec, maxlen)
    prefix = (window >> (np.uint64(maxlen) - lclip.astype(np.uint64))).astype(np.int64)
    slot = offsets[lclip] + prefix - first[lclip]
    slot = np.where(bad, 0, np.clip(slot, 0, max(seen - 1, 0)))
    step_len = np.where(bad, 0, lvec).tolist()
    sym_at = sorted_syms[slot].tolist()

    out = [0] * count
    p = 0
    for i in range(count):
        l = step_len[p] if p <= nbits else 0
        if l == 0:
            raise EntropyError(f"huffman_decode: invalid code at bit {p}")
        if p + l > nbits:
            raise EntropyError("huffman_decode: bitstream truncated")
        out[i] = sym_at[p]
        p += l
    return np.asarray(out, dtype=np.int64)


def entropy_bits(symbols, num_symbols: int | None = None) -> float:
    """Empirical zeroth-order entropy in bits/symbol."""
    sym = np.asarray(symbols).reshape(-1)
    if sym.size == 0:
        return 0.0
    counts = np.bincount(sym, minlength=num_symbols or 0).astype(np.float64)
    p = counts[counts > 0] / sym.size
    return float(-(p * np.log2(p)).sum())


# -- run-length mask coding --------------------------------------------------------

def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise EntropyError("varint truncated")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise EntropyError("varint longer than 64 bits")


def mask_runs(mask) -> list[int]:
    """Alternating run lengths starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask).reshape(-1).astype(bool)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return runs


def rle_mask_encode(mask) -> bytes:
    return b"".join(_varint(r) for r in mask_runs(mask))


def rle_mask_decode(data: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`rle_mask_encode`; ``count`` is the number of mask cells."""
    runs = []
    pos = 0
    total = 0
    while pos < len(data):
        r, pos = read_varint(data, pos)
        runs.append(r)
        total += r
        if total > count:
            raise EntropyError("mask runs exceed the mask size")
    if total != count:
        raise EntropyError(f"mask runs cover {total} cells, expected {count}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8)
