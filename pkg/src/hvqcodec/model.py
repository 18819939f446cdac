"""Hierarchical VQ autoencoder: encoder stages, top-down quantization, mirrored decoder."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import ConvLayer, Module, ResidualBlock
from .vq import Codebook, QuantizeResult, dequantize, quantize


@dataclass
class ModelConfig:
    base_channels: int = 32
    stage_channels: tuple[int, ...] = (64, 128)
    stage_strides: tuple[int, ...] = (2, 2)
    codebook_sizes: tuple[int, ...] = (128, 128)
    codebook_dim: int = 64
    blocks_per_stage: int = 3
    kernel_size: int = 5
    pre_kernel: int = 4
    lambda_recon: float = 2.0
    lambda_q: float = 0.25
    lambda_fft: float = 0.0
    block_size_train: int = 64
    block_size_compress: int = 256
    overlap: int = 8
    ema_decay: float = 0.99
    reseed_dead_codes: bool = False
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        self.codebook_sizes = tuple(int(k) for k in self.codebook_sizes)
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.stage_channels)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))

    def level_stride(self, level: int) -> int:
        return int(np.prod(self.stage_strides[: level + 1]))

    def validate(self) -> None:
        n = len(self.stage_channels)
        if n < 1:
            raise ValueError("at least one stage is required")
        if len(self.stage_strides) != n or len(self.codebook_sizes) != n:
            raise ValueError("stage_channels, stage_strides and codebook_sizes must have equal length")
        for s in self.stage_strides:
            if s < 1 or s & (s - 1):
                raise ValueError(f"stage strides must be powers of two, got {s}")
        for b in (self.block_size_train, self.block_size_compress):
            if b % self.total_stride:
                raise ValueError(f"block size {b} is not divisible by total stride {self.total_stride}")
        if not 0 <= self.overlap < self.block_size_train:
            raise ValueError("overlap must satisfy 0 <= overlap < block_size_train")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        return cls(**json.loads(text))


@dataclass
class LossBreakdown:
    total: Tensor
    l_recon: Tensor
    l_q: Tensor
    l_fft: Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        return {
            "l_recon": self.l_recon.item(),
            "l_q": self.l_q.item(),
            "l_fft": self.l_fft.item() if self.l_fft is not None else 0.0,
            "total": self.total.item(),
        }


@dataclass
class HierarchyResult:
    """Output of top-down quantization; lists are ordered level 0 (finest) first."""

    indices: list[np.ndarray]
    z_q_combined: Tensor
    commitment: Tensor
    levels: list[QuantizeResult] = field(default_factory=list)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class HierarchicalVQModel(Module):
    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        b, d, k = cfg.base_channels, cfg.codebook_dim, cfg.kernel_size
        chans = cfg.stage_channels
        pk = cfg.pre_kernel
        ppad = ((pk - 1) // 2, pk - 1 - (pk - 1) // 2) * 2
        ppad = (ppad[0], ppad[1], ppad[0], ppad[1])

        self.pre1 = ConvLayer(1, b, pk, padding=ppad, rng=rng)
        self.pre2 = ConvLayer(b, b, pk, padding=ppad, rng=rng)
        self.enc_stages = []
        self.enc_bridges = []
        prev = b
        for c, s in zip(chans, cfg.stage_strides):
            blocks = [ResidualBlock(prev, c, s, kernel_size=k, rng=rng)]
            blocks += [ResidualBlock(c, c, 1, kernel_size=k, rng=rng) for _ in range(cfg.blocks_per_stage - 1)]
            self.enc_stages.append(Sequential(*blocks))
            self.enc_bridges.append(ConvLayer(c, d, 1, padding=0, rng=rng))
            prev = c

        top = cfg.levels - 1
        # fuse[l] mixes the level-l latent with the prior u coming from level l+1
        self.fuse = [ConvLayer(d + chans[l], d, 1, padding=0, rng=rng) for l in range(top)]
        self.dec_bridges = []
        self.dec_stages = []
        for l, (c, s) in enumerate(zip(chans, cfg.stage_strides)):
            cin = d if l == top else d + c
            self.dec_bridges.append(ConvLayer(cin, c, 1, padding=0, rng=rng))
            out = chans[l - 1] if l > 0 else b
            blocks = [ResidualBlock(c, out, s, transposed=True, kernel_size=k, rng=rng)]
            blocks += [ResidualBlock(out, out, 1, transposed=True, kernel_size=k, rng=rng)
                       for _ in range(cfg.blocks_per_stage - 1)]
            self.dec_stages.append(Sequential(*blocks))
        self.post1 = ConvLayer(b, b, pk, padding=ppad, rng=rng)
        self.post2 = ConvLayer(b, 1, pk, padding=ppad, rng=rng)

        self.codebooks = [
            Codebook(kk, d, decay=cfg.ema_decay, rng=rng, reseed_dead=cfg.reseed_dead_codes)
            for kk in cfg.codebook_sizes
        ]
        self._check_mirror()

    # -- structure -----------------------------------------------------------
    def stage_shapes(self, h: int, w: int) -> tuple[list[tuple], list[tuple]]:
        """Encoder stage output shapes and decoder stage output shapes (level order)."""
        cfg = self.config
        enc = [(cfg.base_channels, h, w)]
        for l, c in enumerate(cfg.stage_channels):
            s = cfg.level_stride(l)
            enc.append((c, h // s, w // s))
        dec = []
        for l in range(cfg.levels):
            hh, ww = h // cfg.level_stride(l), w // cfg.level_stride(l)
            for blk in self.dec_stages[l].layers:
                hh, ww = blk.conv1.output_shape(hh, ww)
            dec.append((blk.conv2.out_ch, hh, ww))
        return enc, dec

    def _check_mirror(self) -> None:
        n = self.config.block_size_train
        enc, dec = self.stage_shapes(n, n)
        # decoder stage l must reproduce the encoder shape one level up
        for l, shape in enumerate(dec):
            if shape != enc[l]:
                raise ValueError(f"decoder stage {l} yields {shape}, encoder expects {enc[l]}")

    # -- forward pieces --------------------------------------------------------
    def encode(self, x: Tensor) -> tuple[Tensor, ...]:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"encode expects [N,1,H,W], got {x.shape}")
        h, w = x.shape[2:]
        if h % cfg.total_stride or w % cfg.total_stride:
            raise ValueError(f"block {h}x{w} not divisible by total stride {cfg.total_stride}; partition/pad first")
        feat = self.pre2(ag.gelu(self.pre1(x)))
        outs = []
        for stage, bridge in zip(self.enc_stages, self.enc_bridges):
            feat = stage(feat)
            outs.append(bridge(feat))
        return tuple(outs)

    def quantize_hierarchy(self, latents) -> HierarchyResult:
        """Quantize from the coarsest level down, feeding each level's prior into the next."""
        top = self.config.levels - 1
        u = None
        levels: list[QuantizeResult] = [None] * (top + 1)  # type: ignore[list-item]
        combined = None
        for l in range(top, -1, -1):
            target = latents[l] if u is None else self.fuse[l](ag.concat([latents[l], u]))
            q = quantize(target, self.codebooks[l])
            levels[l] = q
            combined = q.z_q if u is None else ag.concat([q.z_q, u])
            if l > 0:
                u = self.dec_stages[l](self.dec_bridges[l](combined))
        commitment = levels[0].commitment
        for q in levels[1:]:
            commitment = commitment + q.commitment
        return HierarchyResult([q.indices for q in levels], combined, commitment, levels)

    def decode(self, z_q_combined: Tensor) -> Tensor:
        feat = self.dec_stages[0](self.dec_bridges[0](z_q_combined))
        return self.post2(ag.gelu(self.post1(feat)))

    def forward(self, x: Tensor) -> tuple[Tensor, HierarchyResult]:
        hier = self.quantize_hierarchy(self.encode(x))
        return self.decode(hier.z_q_combined), hier

    # -- index-domain inference -----------------------------------------------
    def combine_from_indices(self, indices: list[np.ndarray]) -> Tensor:
        top = self.config.levels - 1
        u = None
        combined = None
        for l in range(top, -1, -1):
            zq = Tensor(np.ascontiguousarray(dequantize(indices[l], self.codebooks[l]).transpose(0, 3, 1, 2)))
            combined = zq if u is None else ag.concat([zq, u])
            if l > 0:
                u = self.dec_stages[l](self.dec_bridges[l](combined))
        return combined

    def encode_indices(self, x: np.ndarray) -> list[np.ndarray]:
        with ag.no_grad():
            return self.quantize_hierarchy(self.encode(Tensor(x))).indices

    def decode_indices(self, indices: list[np.ndarray]) -> np.ndarray:
        with ag.no_grad():
            return self.decode(self.combine_from_indices(indices)).data

    def ema_update(self, hier: HierarchyResult) -> None:
        for cb, q in zip(self.codebooks, hier.levels):
            cb.ema_update(q.target, q.indices)

    def index_grid_shapes(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(h // self.config.level_stride(l), w // self.config.level_stride(l)) for l in range(self.config.levels)]


def masked_recon(x, x_hat: Tensor, mask, weight=None) -> Tensor:
    """Sum of mask*(x - x_hat)^2 divided by max(1, sum(mask)); ``weight`` scales per pixel."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    m = np.asarray(mask, dtype=x_hat.dtype)
    denom = max(1.0, float(m.sum(dtype=np.float64)))
    w = m if weight is None else m * np.asarray(weight, dtype=x_hat.dtype)
    diff = ag.sub(x_hat, Tensor(xd, dtype=x_hat.dtype))
    return ag.scale(ag.tsum(ag.mul(ag.square(diff), Tensor(np.broadcast_to(w, diff.shape), dtype=x_hat.dtype))), 1.0 / denom)


def objective(x, x_hat: Tensor, mask, commitment: Tensor, config: ModelConfig, weight=None) -> LossBreakdown:
    recon = masked_recon(x, x_hat, mask, weight)
    total = ag.add(ag.scale(recon, config.lambda_recon), ag.scale(commitment, config.lambda_q))
    l_fft = None
    if config.lambda_fft:
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
        l_fft = ag.fft_loss(xt, x_hat)
        total = ag.add(total, ag.scale(l_fft, config.lambda_fft))
    return LossBreakdown(total=total, l_recon=recon, l_q=commitment, l_fft=l_fft)


def fft_loss(x, x_hat) -> float | Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    xh = x_hat if isinstance(x_hat, Tensor) else Tensor(np.asarray(x_hat, dtype=np.float64))
    return ag.fft_loss(xt, xh)
