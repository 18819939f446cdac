"""Command line: ``hvqc train | compress | decompress | eval | inspect``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure
(diverged training or a violated error bound), 5 model hash mismatch, 6 corrupt archive.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .archive import ArchiveError, deserialize_archive, inspect_archive
from .checkpoint import CheckpointError, load_model, save_model
from .codec import (
    STACK_MAGIC,
    CodecConfig,
    CodecError,
    ModelMismatchError,
    bit_rate_and_ratio,
    compress,
    compress_with_metrics,
    count_outliers,
    decompress,
    max_bound_violation,
    psnr,
    unpack_stack,
)
from .entropy import entropy_bits
from .model import HierarchicalVQModel, ModelConfig
from .rawio import DataError, load_raw, load_raw_dataset, mask_for, parse_bool, parse_key_values, save_raw
from .synthetic import make_corpus
from .trainer import TrainConfig, TrainingDivergedError, blocks_from_fields, model_config_for, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5
EXIT_CORRUPT = 6

log = logging.getLogger("hvqcodec")


class ConfigError(ValueError):
    pass


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- training configuration ------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Keys accepted by ``train`` config files that are not model or optimizer settings."""

    data: str = ""
    synthetic_fields: int = 16
    synthetic_shape: str = "128,128"
    synthetic_corr: float = 12.0
    synthetic_land: float = 0.2
    output: str = "model.hvqm"
    trace: str = "trace.csv"
    checkpoint: str = ""


_SECTIONS = (("run", RunConfig), ("train", TrainConfig), ("model", ModelConfig))


def _convert(value: str, annotation) -> object:
    hint = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    hint = hint.replace(" ", "")
    if hint.startswith("tuple"):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if hint == "bool":
        return parse_bool(value)
    if hint == "int":
        return int(value)
    if hint == "float":
        return float(value)
    return value


def resolve_train_config(text: str, overrides: list[str], source: str = "<config>"
                         ) -> tuple[RunConfig, TrainConfig, ModelConfig]:
    """Parse a flat key=value config; ``overrides`` (key=value) win over the file."""
    try:
        kv = parse_key_values(text, source)
        kv.update(parse_key_values("\n".join(overrides), "--override"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    values: dict[str, dict] = {name: {} for name, _ in _SECTIONS}
    for key, raw in kv.items():
        for name, cls in _SECTIONS:
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if key in fields:
                try:
                    values[name][key] = _convert(raw, fields[key].type)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from None
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        run = RunConfig(**values["run"])
        tcfg = TrainConfig(**values["train"])
        base = ModelConfig(**values["model"])
        mcfg = model_config_for(base, tcfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return run, tcfg, mcfg


def format_resolved(run: RunConfig, tcfg: TrainConfig, mcfg: ModelConfig) -> str:
    lines = []
    for obj in (run, tcfg, mcfg):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines)


def _training_fields(run: RunConfig, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if run.data:
        out = []
        for path in (p.strip() for p in run.data.split(",") if p.strip()):
            field, mask = load_raw_dataset(path)
            if field.ndim == 3:
                out += list(zip(field, mask))
            elif field.ndim == 2:
                out.append((field, mask))
            else:
                raise DataError(f"{path}: expected a 2D or 3D array, got shape {field.shape}")
        return out
    try:
        shape = tuple(int(s) for s in run.synthetic_shape.split(","))
    except ValueError:
        raise ConfigError(f"bad synthetic_shape {run.synthetic_shape!r}") from None
    return make_corpus(run.synthetic_fields, shape, run.synthetic_corr, seed=seed, land_fraction=run.synthetic_land)


def cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    run, tcfg, mcfg = resolve_train_config(text, overrides, args.config or "<defaults>")
    if args.out:
        run = dataclasses.replace(run, output=args.out)
    if args.trace:
        run = dataclasses.replace(run, trace=args.trace)
    mcfg = dataclasses.replace(mcfg, seed=tcfg.seed)
    print(format_resolved(run, tcfg, mcfg))
    fields = _training_fields(run, tcfg.seed)
    blocks = blocks_from_fields(fields, tcfg)
    model = HierarchicalVQModel(mcfg)
    t0 = time.perf_counter()
    try:
        result = train(model, blocks, tcfg, trace_path=run.trace or None, checkpoint_path=run.checkpoint or None)
    except TrainingDivergedError as exc:
        if exc.last_good is not None and run.checkpoint:
            Path(run.checkpoint).write_bytes(exc.last_good)
        raise CliFailure(EXIT_NUMERIC, f"{exc} (last good state at step "
                                       f"{'none' if exc.last_good is None else run.checkpoint})") from None
    digest = save_model(model, run.output)
    last = result.trace[-1] if result.trace else {}
    print(f"steps={tcfg.steps} blocks={len(blocks)} final_total={last.get('total', math.nan):.6f} "
          f"seconds={time.perf_counter() - t0:.1f} model={run.output} hash={digest.hex()}")
    return EXIT_OK


# -- codec commands --------------------------------------------------------------

def _load_model(path) -> HierarchicalVQModel:
    try:
        return load_model(path)
    except FileNotFoundError:
        raise CliFailure(EXIT_DATA, f"model not found: {path}") from None
    except CheckpointError as exc:
        raise CliFailure(EXIT_DATA, f"{path}: {exc}") from None


def cmd_compress(args) -> int:
    model = _load_model(args.model)
    field, side = load_raw(args.input, args.sidecar)
    mask = mask_for(field, side, args.input)
    tau = args.tau
    if args.tau_sigma is not None:
        valid = field[mask.astype(bool)].astype(np.float64)
        tau = args.tau_sigma * float(valid.std())
        if not tau > 0:
            raise CliFailure(EXIT_DATA, "cannot derive a relative error bound from a constant field")
    config = CodecConfig(tau=tau, block_size=args.block_size, workers=args.workers,
                         log_scale=args.log_scale or side.log_scale)
    print(f"config input={args.input} model={args.model} tau={tau} block_size={config.block_size} "
          f"workers={config.workers} log_scale={config.log_scale}")
    t0 = time.perf_counter()
    blob = compress(field, model, config, mask=mask)
    seconds = time.perf_counter() - t0
    Path(args.out).write_bytes(blob)
    rate, ratio = bit_rate_and_ratio(len(blob), field.size)
    outliers = count_outliers(blob)
    nvalid = int(mask.sum())
    parts = [f"bit_rate={float(rate):.6f}", f"ratio={float(ratio):.4f}", f"bytes={len(blob)}",
             f"outlier_fraction={outliers / nvalid:.6f}", f"seconds={seconds:.3f}"]
    code = EXIT_OK
    if args.verify:
        recon, valid = decompress(blob, model, config.workers)
        try:
            score = psnr(field, recon, valid)
        except ValueError:
            score = math.inf
        parts.insert(2, f"psnr={score:.4f}")
        if tau is not None:
            excess = max_bound_violation(field, recon, valid, tau)
            parts.append(f"bound_ok={'true' if excess <= 0 else 'false'}")
            if excess > 0:
                code = EXIT_NUMERIC
    print("metrics " + " ".join(parts))
    if code != EXIT_OK:
        print("error: error bound violated", file=sys.stderr)
    return code


def _read_archive(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise CliFailure(EXIT_DATA, f"archive not found: {path}") from None


def cmd_decompress(args) -> int:
    model = _load_model(args.model)
    blob = _read_archive(args.archive)
    t0 = time.perf_counter()
    field, mask = decompress(blob, model, args.workers)
    seconds = time.perf_counter() - t0
    fill = None
    if not mask.all():
        fill = float(field[mask == 0].flat[0])
    save_raw(args.out, field, fill_value=fill)
    print(f"metrics shape={','.join(str(s) for s in field.shape)} bytes={4 * field.size} seconds={seconds:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    for path in args.inputs:
        field, side = load_raw(path)
        mask = mask_for(field, side, path)
        tau = args.tau
        config = CodecConfig(tau=tau, block_size=args.block_size, workers=args.workers, log_scale=side.log_scale)
        _, _, metrics = compress_with_metrics(field, model, config, mask=mask)
        print(f"eval file={path} {metrics.line()}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    blob = _read_archive(args.archive)
    pieces = [blob]
    if blob[:4] == STACK_MAGIC:
        pieces = unpack_stack(blob)
        print(f"stack slices={len(pieces)} bytes={len(blob)}")
    for i, piece in enumerate(pieces):
        info = inspect_archive(piece)
        parts = deserialize_archive(piece)
        prefix = f"slice {i}: " if len(pieces) > 1 else ""
        payload = info.total_bytes - info.header_bytes
        print(f"{prefix}version={info.version} flags={info.flags:#06x} shape={','.join(map(str, parts.shape))} "
              f"block_size={parts.block_size} mean={parts.mean!r} std={parts.std!r} "
              f"log_scaled={parts.log_scaled} tau={parts.tau} model={parts.model_hash.hex()[:16]}")
        print(f"{prefix}header_bytes={info.header_bytes} payload_bytes={payload} total_bytes={info.total_bytes}")
        for tag, (off, length) in sorted(info.sections.items(), key=lambda kv: kv[1][0]):
            share = 100.0 * length / payload if payload else 0.0
            print(f"{prefix}section {tag} offset={off} bytes={length} share={share:.2f}%")
        if "OUTL" not in info.sections:
            print(f"{prefix}section OUTL bytes=0 share=0.00% (error bound disabled)")
        print(f"{prefix}outliers={parts.outlier_index.size}")
        for level, (stream, k) in enumerate(zip(parts.streams, parts.alphabet_sizes)):
            h = entropy_bits(stream, k)
            print(f"{prefix}level {level} symbols={stream.size} alphabet={k} entropy_bits={h:.4f} "
                  f"fixed_bits={math.ceil(math.log2(k)) if k > 1 else 0}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvqc", description="Hierarchical vector-quantized codec for 2D float fields.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--override", action="append", metavar="KEY=VALUE", help="config override (repeatable, wins)")
    t.add_argument("--seed", type=int, help="seed for data, initialization and batch order")
    t.add_argument("--out", help="model checkpoint path (overrides 'output')")
    t.add_argument("--trace", help="loss trace CSV path (overrides 'trace')")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="compress a raw f32 file")
    c.add_argument("input", help="raw little-endian f32 data file")
    c.add_argument("--sidecar", help="sidecar path (default: <input>.meta)")
    c.add_argument("--model", required=True, help="model checkpoint")
    c.add_argument("--out", required=True, help="archive path")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--tau", type=float, help="absolute error bound in data units")
    g.add_argument("--tau-sigma", type=float, help="error bound as a multiple of the valid-data std")
    c.add_argument("--block-size", type=int, default=256, help="compression block size (default 256)")
    c.add_argument("--workers", type=int, default=1, help="worker threads (1 = serial)")
    c.add_argument("--log-scale", action="store_true", help="log-scale before standardizing")
    c.add_argument("--verify", action="store_true", help="decompress, report psnr and check the bound")
    c.add_argument("--seed", type=int, help="accepted for symmetry; compression is deterministic")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decompress an archive to raw f32 + sidecar")
    d.add_argument("archive")
    d.add_argument("--model", required=True)
    d.add_argument("--out", required=True, help="raw output path; sidecar written to <out>.meta")
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="round-trip raw files and report metrics")
    e.add_argument("inputs", nargs="+", help="raw f32 files (sidecars at <file>.meta)")
    e.add_argument("--model", required=True)
    e.add_argument("--tau", type=float)
    e.add_argument("--block-size", type=int, default=256)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="describe an archive")
    i.add_argument("archive")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CodecError) as exc:
        if isinstance(exc, ModelMismatchError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_MISMATCH
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArchiveError as exc:
        print(f"error: corrupt archive: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (FloatingPointError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
