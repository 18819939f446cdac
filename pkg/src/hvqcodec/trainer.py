"""Training loop, evaluation and the ablation harness."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import state_from_bytes, state_to_bytes
from .model import HierarchicalVQModel, ModelConfig, objective
from .optim import Adam
from .preprocess import ConstantFieldError, compute_stats, extract_blocks, plan_partition, standardize

log = logging.getLogger(__name__)

MASKING_MODES = ("uniform", "weighted")
PARTITION_MODES = ("overlap", "discrete")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, step: int, last_good: bytes | None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-4
    block_size: int = 64
    overlap: int = 8
    stages: int = 2
    masking: str = "uniform"
    partition: str = "overlap"
    fft: bool = False
    lambda_fft: float = 1e-3
    important_weight: float = 2.0
    background_weight: float = 0.5
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.masking not in MASKING_MODES:
            raise ValueError(f"masking must be one of {MASKING_MODES}")
        if self.partition not in PARTITION_MODES:
            raise ValueError(f"partition must be one of {PARTITION_MODES}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    @property
    def effective_overlap(self) -> int:
        return self.overlap if self.partition == "overlap" else 0

    def digest(self) -> str:
        """Hash of the fields that change the optimization path (step budget and logging excluded)."""
        d = {k: v for k, v in asdict(self).items() if k not in ("steps", "checkpoint_every", "log_every")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class BlockSet:
    data: np.ndarray          # [M, 1, B, B] standardized float32
    mask: np.ndarray          # [M, 1, B, B] uint8
    weight: np.ndarray | None = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def subset(self, idx) -> BlockSet:
        return BlockSet(self.data[idx], self.mask[idx], None if self.weight is None else self.weight[idx])

    @classmethod
    def concat(cls, sets: list[BlockSet]) -> BlockSet:
        weights = [s.weight for s in sets]
        w = None if any(x is None for x in weights) else np.concatenate(weights)
        return cls(np.concatenate([s.data for s in sets]), np.concatenate([s.mask for s in sets]), w)


def importance_plane(shape: tuple[int, int], important: float, background: float) -> np.ndarray:
    """Per-pixel weights: the central latitude band (middle half of rows) counts as important."""
    h, w = shape
    plane = np.full(shape, background, dtype=np.float32)
    plane[h // 4 : h - h // 4] = important
    return plane


def make_training_blocks(field_: np.ndarray, mask, config: TrainConfig, overlap: int | None = None,
                         weight: np.ndarray | None = None) -> BlockSet:
    """Standardize, mean-fill, pad and partition one field; blocks without valid points are dropped."""
    f = np.asarray(field_)
    m = np.ones(f.shape, dtype=np.uint8) if mask is None else np.asarray(mask, dtype=np.uint8)
    try:
        stats = compute_stats(f, m)
        st = standardize(np.where(m.astype(bool), f, np.float32(stats.mean)), stats)
    except ConstantFieldError:
        st = np.zeros(f.shape, dtype=np.float32)
    st[m == 0] = 0.0
    v = config.effective_overlap if overlap is None else overlap
    plan = plan_partition(f.shape, config.block_size, v)
    blocks = extract_blocks(st, m, plan)
    wblocks = extract_blocks(weight, m, plan) if weight is not None else None
    keep = [i for i, b in enumerate(blocks) if b.mask.any()]
    b = config.block_size
    data = np.stack([blocks[i].data for i in keep]).reshape(-1, 1, b, b).astype(np.float32)
    masks = np.stack([blocks[i].mask for i in keep]).reshape(-1, 1, b, b).astype(np.uint8)
    w = None
    if wblocks is not None:
        w = np.stack([wblocks[i].data for i in keep]).reshape(-1, 1, b, b).astype(np.float32)
    return BlockSet(data, masks, w)


def blocks_from_fields(fields, config: TrainConfig, overlap: int | None = None) -> BlockSet:
    sets = []
    for f, m in fields:
        weight = None
        if config.masking == "weighted":
            weight = importance_plane(np.shape(f), config.important_weight, config.background_weight)
        sets.append(make_training_blocks(f, m, config, overlap=overlap, weight=weight))
    return BlockSet.concat(sets)


def model_config_for(base: ModelConfig, config: TrainConfig) -> ModelConfig:
    """Adapt ``base`` to the ablation selectors of ``config`` (stage count, FFT loss)."""
    n = config.stages
    chans = list(base.stage_channels)
    strides = list(base.stage_strides)
    sizes = list(base.codebook_sizes)
    while len(chans) < n:
        chans.append(chans[-1])
        strides.append(2)
        sizes.append(sizes[-1])
    return replace(base, stage_channels=tuple(chans[:n]), stage_strides=tuple(strides[:n]),
                   codebook_sizes=tuple(sizes[:n]), lambda_fft=config.lambda_fft if config.fft else 0.0,
                   block_size_train=config.block_size, overlap=config.overlap,
                   block_size_compress=max(base.block_size_compress, config.block_size))


@dataclass
class TrainResult:
    model: HierarchicalVQModel
    trace: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None
    rng_state: dict | None = None


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train(model: HierarchicalVQModel, blocks: BlockSet, config: TrainConfig, trace_path=None,
          checkpoint_path=None, optimizer: Adam | None = None, start_step: int = 0,
          rng_state: dict | None = None) -> TrainResult:
    """Optimize ``model`` on ``blocks``; EMA codebook updates follow every optimizer step."""
    if len(blocks) == 0:
        raise ValueError("train: empty block set")
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    opt = optimizer or Adam(model.parameters(), lr=config.lr)
    params = model.parameters()
    cfg = model.config
    trace: list[dict] = []
    last_good = None
    bs = min(config.batch_size, len(blocks))

    for step in range(start_step, config.steps):
        idx = np.sort(rng.choice(len(blocks), size=bs, replace=False))
        x = blocks.data[idx]
        m = blocks.mask[idx]
        w = blocks.weight[idx] if (config.masking == "weighted" and blocks.weight is not None) else None
        try:
            x_hat, hier = model(Tensor(x))
            loss = objective(x, x_hat, m, hier.commitment, cfg, weight=w)
        except ag.NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite values at step {step}: {exc}", step, last_good) from exc
        values = loss.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDivergedError(f"non-finite loss at step {step}: {values}", step, last_good)
        ag.zero_grad(params)
        loss.total.backward()
        opt.step()
        model.ema_update(hier)
        trace.append({"step": step, **values})
        if config.log_every and step % config.log_every == 0:
            log.info("step %d total %.5f recon %.5f l_q %.5f", step, values["total"], values["l_recon"], values["l_q"])
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            last_good = state_to_bytes(model, opt, step + 1, {"rng": _rng_state(rng), "config": config.digest()})
            if checkpoint_path is not None:
                with open(checkpoint_path, "wb") as fh:
                    fh.write(last_good)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return TrainResult(model, trace, opt, _rng_state(rng))


def resume(blob: bytes, blocks: BlockSet, config: TrainConfig, **kwargs) -> TrainResult:
    model, opt, step, extra = state_from_bytes(blob)
    if extra.get("config") not in (None, config.digest()):
        raise ValueError("training state was produced with a different TrainConfig")
    return train(model, blocks, config, optimizer=opt, start_step=step, rng_state=extra.get("rng"), **kwargs)


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_recon", "l_q", "l_fft", "total"])
        for row in trace:
            writer.writerow([row["step"], repr(row["l_recon"]), repr(row["l_q"]), repr(row["l_fft"]), repr(row["total"])])


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    block_mse: np.ndarray
    block_psnr: np.ndarray
    valid_counts: np.ndarray
    mse: float
    psnr: float


def reconstruct_blocks(model: HierarchicalVQModel, data: np.ndarray, batch: int = 16) -> np.ndarray:
    outs = []
    with ag.no_grad():
        for i in range(0, data.shape[0], batch):
            x_hat, _ = model(Tensor(data[i : i + batch]))
            outs.append(x_hat.data)
    return np.concatenate(outs)


def evaluate(model: HierarchicalVQModel, blocks: BlockSet) -> EvalReport:
    """Masked MSE/PSNR per block (standardized units) and valid-count-weighted aggregates."""
    if len(blocks) == 0:
        raise ValueError("evaluate: empty evaluation set")
    x_hat = reconstruct_blocks(model, blocks.data).astype(np.float64)
    x = blocks.data.astype(np.float64)
    m = blocks.mask.astype(bool)
    n = blocks.mask.reshape(len(blocks), -1).sum(axis=1).astype(np.float64)
    sq = np.where(m, (x - x_hat) ** 2, 0.0).reshape(len(blocks), -1).sum(axis=1)
    mse = sq / np.maximum(n, 1)
    psnr = np.empty(len(blocks))
    for i in range(len(blocks)):
        vals = x[i][m[i]]
        rng_ = vals.max() - vals.min() if vals.size else 0.0
        psnr[i] = math.inf if mse[i] == 0 else (10 * math.log10(rng_ ** 2 / mse[i]) if rng_ > 0 else -math.inf)
    agg = float(sq.sum() / max(n.sum(), 1))
    xs = x[m]
    rng_all = float(xs.max() - xs.min())
    agg_psnr = math.inf if agg == 0 else 10 * math.log10(rng_all ** 2 / agg)
    return EvalReport(mse, psnr, n, agg, agg_psnr)


# -- ablation --------------------------------------------------------------------

@dataclass
class AblationRow:
    name: str
    stages: int
    partition: str
    masking: str
    fft: bool
    test_mse: float
    train_seconds: float = 0.0


def ablation_name(cfg: TrainConfig) -> str:
    depth = {1: "Single", 2: "Two", 3: "Three"}.get(cfg.stages, f"{cfg.stages}-")
    mask = "weighted masking" if cfg.masking == "weighted" else "masking"
    extra = " + fft loss" if cfg.fft else ""
    return f"{depth} Stage Quantization, {mask} + {cfg.partition} partition{extra}"


def run_ablation(grid: list[TrainConfig], base_model: ModelConfig, train_fields, test_fields) -> list[AblationRow]:
    """Train one model per config on shared data and report masked testing MSE (discrete test blocks)."""
    rows = []
    for cfg in grid:
        mcfg = model_config_for(base_model, cfg)
        model = HierarchicalVQModel(mcfg)
        train_blocks = blocks_from_fields(train_fields, cfg)
        test_blocks = blocks_from_fields(test_fields, replace(cfg, masking="uniform"), overlap=0)
        t0 = time.perf_counter()
        train(model, train_blocks, cfg)
        elapsed = time.perf_counter() - t0
        rep = evaluate(model, test_blocks)
        rows.append(AblationRow(ablation_name(cfg), cfg.stages, cfg.partition, cfg.masking, cfg.fft, rep.mse, elapsed))
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'Model'.ljust(width)}  Testing MSE", f"{'-' * width}  -----------"]
    lines += [f"{r.name.ljust(width)}  {r.test_mse:.6f}" for r in rows]
    return "\n".join(lines)


def ablation_grid(base: TrainConfig, stages=(1, 2, 3), partitions=PARTITION_MODES, maskings=MASKING_MODES,
                  ffts=(False,)) -> list[TrainConfig]:
    return [replace(base, stages=s, partition=p, masking=mk, fft=f)
            for s in stages for p in partitions for mk in maskings for f in ffts]
