import struct
import zlib

import numpy as np
import pytest

from hvqcodec.archive import (
    MAGIC,
    ArchiveError,
    ArchiveParts,
    BadMagicError,
    ChecksumError,
    SectionError,
    UnsupportedVersionError,
    assemble_archive,
    build_sections,
    deserialize_archive,
    inspect_archive,
    read_header,
    serialize_archive,
)


def make_parts(rng, outliers=0, masked=True, tau=0.5):
    shape = (40, 50)
    mask = (rng.random(shape) > 0.25).astype(np.uint8) if masked else None
    idx = np.sort(rng.choice(2000, outliers, replace=False)).astype(np.uint64)
    return ArchiveParts(
        model_hash=bytes(range(32)), shape=shape, block_size=64, mean=1.25, std=3.5,
        log_offset=0.0, log_scaled=False, tau=tau, mask=mask,
        streams=[rng.integers(0, 64, 1024), rng.integers(0, 32, 256)], alphabet_sizes=[64, 32],
        outlier_index=idx, outlier_value=rng.standard_normal(outliers).astype(np.float32),
    )


def assert_parts_equal(a, b):
    assert a.model_hash == b.model_hash
    assert tuple(a.shape) == tuple(b.shape)
    assert (a.block_size, a.mean, a.std, a.log_offset, a.log_scaled) == (b.block_size, b.mean, b.std,
                                                                         b.log_offset, b.log_scaled)
    assert (a.tau is None) == (b.tau is None)
    if a.tau is not None:
        assert np.float32(a.tau) == np.float32(b.tau)
    assert (a.mask is None) == (b.mask is None)
    if a.mask is not None:
        assert np.array_equal(a.mask, b.mask)
    assert len(a.streams) == len(b.streams)
    for x, y in zip(a.streams, b.streams):
        assert np.array_equal(x, y)
    assert list(a.alphabet_sizes) == list(b.alphabet_sizes)
    assert np.array_equal(a.outlier_index, b.outlier_index)
    assert np.array_equal(a.outlier_value, b.outlier_value)
    assert a.constant == b.constant


def rewrite_header(blob, edit):
    """Apply ``edit(bytearray_header)`` and fix the header checksum so only the edit is tested."""
    _, _, header_len = read_header(blob)
    head = bytearray(blob[:header_len])
    edit(head)
    head[-4:] = struct.pack("<I", zlib.crc32(bytes(head[:-4])))
    return bytes(head) + blob[header_len:]


class TestRoundTrip:
    def test_minimal_archive(self, rng):
        parts = make_parts(rng, masked=False, tau=None)
        assert_parts_equal(parts, deserialize_archive(serialize_archive(parts)))

    def test_full_archive(self, rng):
        parts = make_parts(rng, outliers=17)
        parts.log_scaled = True
        parts.log_offset = 2.5
        assert_parts_equal(parts, deserialize_archive(serialize_archive(parts)))

    def test_constant_archive(self):
        parts = ArchiveParts(model_hash=b"\x01" * 32, shape=(3, 4), block_size=256, mean=7.0, std=0.0,
                             constant=7.0)
        back = deserialize_archive(serialize_archive(parts))
        assert back.constant == 7.0 and back.streams == []

    def test_three_outliers_layout(self, rng):
        parts = make_parts(rng, outliers=3)
        blob = serialize_archive(parts)
        off, length = inspect_archive(blob).sections["OUTL"]
        sec = blob[off : off + length]
        assert length == 8 + 3 * 12
        assert struct.unpack_from("<Q", sec, 0)[0] == 3
        for i in range(3):
            index, value = struct.unpack_from("<Qf", sec, 8 + 12 * i)
            assert index == parts.outlier_index[i]
            assert np.float32(value) == parts.outlier_value[i]

    def test_size_is_header_plus_sections(self, rng):
        blob = serialize_archive(make_parts(rng, outliers=5))
        info = inspect_archive(blob)
        assert info.total_bytes == len(blob)
        assert info.header_bytes + sum(n for _, n in info.sections.values()) == len(blob)

    def test_unknown_sections_are_skipped(self, rng):
        parts = make_parts(rng, outliers=2)
        sections = build_sections(parts)
        sections.insert(1, (b"ZZZZ", b"from a future version"))
        blob = assemble_archive(parts, sections)
        assert_parts_equal(parts, deserialize_archive(blob))

    def test_deterministic(self, rng):
        parts = make_parts(rng, outliers=4)
        assert serialize_archive(parts) == serialize_archive(parts)


class TestCorruption:
    def test_bad_magic(self, rng):
        blob = serialize_archive(make_parts(rng))
        with pytest.raises(BadMagicError):
            deserialize_archive(b"XXXX" + blob[4:])
        with pytest.raises(BadMagicError):
            deserialize_archive(b"")

    def test_unsupported_version(self, rng):
        parts = make_parts(rng)
        parts.version = 9
        with pytest.raises(UnsupportedVersionError):
            deserialize_archive(serialize_archive(parts))

    def test_overlapping_sections(self, rng):
        blob = serialize_archive(make_parts(rng, outliers=2))
        info = inspect_archive(blob)
        fixed = 4 + 2 + 2 + 32 + 2 + 8 * 2 + struct.calcsize("<IddddfH")
        second_offset_pos = fixed + 20 + 4

        def edit(head):
            first_off = struct.unpack_from("<Q", head, fixed + 4)[0]
            struct.pack_into("<Q", head, second_offset_pos, first_off + 1)

        with pytest.raises(SectionError):
            deserialize_archive(rewrite_header(blob, edit))
        assert len(info.sections) >= 2

    def test_section_past_end(self, rng):
        blob = serialize_archive(make_parts(rng))
        fixed = 4 + 2 + 2 + 32 + 2 + 8 * 2 + struct.calcsize("<IddddfH")

        def edit(head):
            struct.pack_into("<Q", head, fixed + 12, 10 ** 9)

        with pytest.raises(SectionError):
            deserialize_archive(rewrite_header(blob, edit))

    def test_payload_flip_detected(self, rng):
        blob = bytearray(serialize_archive(make_parts(rng, outliers=3)))
        blob[-5] ^= 0x10
        with pytest.raises(ChecksumError):
            deserialize_archive(bytes(blob))

    def test_every_single_byte_header_flip_fails_cleanly(self, rng):
        blob = serialize_archive(make_parts(rng, outliers=3))
        header_len = inspect_archive(blob).header_bytes
        for pos in range(header_len):
            for bit in (0x01, 0x80):
                bad = bytearray(blob)
                bad[pos] ^= bit
                with pytest.raises(ArchiveError):
                    deserialize_archive(bytes(bad))

    def test_random_garbage_never_crashes(self, rng):
        good = serialize_archive(make_parts(rng, outliers=3))
        for _ in range(300):
            n = int(rng.integers(0, 200))
            blob = MAGIC + rng.integers(0, 256, n, dtype=np.uint8).tobytes()
            with pytest.raises(ArchiveError):
                deserialize_archive(blob)
            cut = int(rng.integers(0, len(good)))
            with pytest.raises(ArchiveError):
                deserialize_archive(good[:cut])
