"""Raw little-endian f32 arrays with a key=value text sidecar.

Sidecar example::

    shape = 180,360
    dtype = f32
    fill_value = -9.96921e36
    log_scale = false

NetCDF-style sources convert with one line of numpy, e.g.
``ds["sst"][...].filled(fill).astype("<f4").tofile(path)``, plus the sidecar above.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

SIDECAR_SUFFIX = ".meta"
_DTYPES = {"f32": "<f4", "float32": "<f4"}


class DataError(ValueError):
    """The data file or its sidecar is unusable."""


@dataclass
class Sidecar:
    shape: tuple[int, ...]
    dtype: str = "f32"
    fill_value: float | None = None
    log_scale: bool = False

    def to_text(self) -> str:
        lines = [f"shape = {','.join(str(s) for s in self.shape)}", f"dtype = {self.dtype}"]
        if self.fill_value is not None:
            lines.append(f"fill_value = {self.fill_value!r}")
        lines.append(f"log_scale = {'true' if self.log_scale else 'false'}")
        return "\n".join(lines) + "\n"


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def default_sidecar_path(data_path) -> str:
    return os.fspath(data_path) + SIDECAR_SUFFIX


def read_sidecar(path) -> Sidecar:
    try:
        with open(path) as fh:
            kv = parse_key_values(fh.read(), os.fspath(path))
    except FileNotFoundError:
        raise DataError(f"sidecar not found: {path}") from None
    try:
        unknown = set(kv) - {"shape", "dtype", "fill_value", "log_scale"}
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)}")
        if "shape" not in kv:
            raise ValueError("missing 'shape'")
        shape = tuple(int(s) for s in kv["shape"].replace("x", ",").split(",") if s.strip())
        if not shape or any(s <= 0 for s in shape):
            raise ValueError(f"bad shape {kv['shape']!r}")
        dtype = kv.get("dtype", "f32").lower()
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r} (only f32)")
        fill = kv.get("fill_value")
        return Sidecar(shape, dtype, None if fill in (None, "", "none") else float(fill),
                       parse_bool(kv.get("log_scale", "false")))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_raw(data_path, sidecar_path=None) -> tuple[np.ndarray, Sidecar]:
    side = read_sidecar(sidecar_path or default_sidecar_path(data_path))
    try:
        size = os.path.getsize(data_path)
    except OSError:
        raise DataError(f"data file not found: {data_path}") from None
    expected = 4 * int(np.prod(side.shape))
    if size != expected:
        raise DataError(f"{data_path}: {size} bytes, sidecar shape {side.shape} needs {expected}")
    field = np.fromfile(data_path, dtype=_DTYPES[side.dtype]).astype(np.float32).reshape(side.shape)
    return field, side


def mask_for(field: np.ndarray, side: Sidecar, source="<data>") -> np.ndarray:
    """1 where valid; 0 at the sidecar's fill value and at non-finite cells."""
    mask = np.isfinite(field)
    if side.fill_value is not None:
        mask &= field != np.float32(side.fill_value)
    if not mask.any():
        raise DataError(f"{source}: every value is missing")
    return mask.astype(np.uint8)


def load_raw_dataset(data_path, sidecar_path=None) -> tuple[np.ndarray, np.ndarray]:
    """(field, mask) for a raw file and its sidecar."""
    field, side = load_raw(data_path, sidecar_path)
    return field, mask_for(field, side, data_path)


def save_raw(path, field, fill_value: float | None = None, log_scale: bool = False) -> None:
    arr = np.asarray(field, dtype="<f4")
    arr.tofile(path)
    with open(default_sidecar_path(path), "w") as fh:
        fh.write(Sidecar(arr.shape, "f32", fill_value, log_scale).to_text())
