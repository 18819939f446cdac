"""Vector-quantization codebooks learned by exponential moving averages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Codebook:
    """K entries of dimension D plus the EMA accumulators that produce them.

    Entries are never touched by gradients; :meth:`ema_update` is the only
    way they change during training.
    """

    def __init__(self, num_codes: int, dim: int, decay: float = 0.99, epsilon: float = 1e-5,
                 rng: np.random.Generator | None = None, reseed_dead: bool = False,
                 dead_threshold: float = 1e-3):
        if num_codes < 1 or dim < 1:
            raise ValueError(f"codebook needs K >= 1 and D >= 1, got K={num_codes}, D={dim}")
        rng = rng or np.random.default_rng(0)
        self.decay = float(decay)
        self.epsilon = float(epsilon)
        self.reseed_dead = reseed_dead
        self.dead_threshold = dead_threshold
        self.entries = rng.uniform(-1.0, 1.0, size=(num_codes, dim)).astype(np.float32)
        self.ema_cluster_size = np.ones(num_codes, dtype=np.float32)
        self.ema_embed_sum = self.entries.copy()
        self._rng = rng

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def ema_update(self, z: np.ndarray, indices: np.ndarray, decay: float | None = None) -> None:
        """Fold one batch of assigned vectors ``z`` [n, D] into the running averages."""
        gamma = self.decay if decay is None else float(decay)
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.dim)
        idx = np.asarray(indices).reshape(-1)
        k = self.num_codes
        counts = np.bincount(idx, minlength=k).astype(np.float64)
        onehot = np.zeros((idx.size, k))
        onehot[np.arange(idx.size), idx] = 1.0
        sums = onehot.T @ z

        size = gamma * self.ema_cluster_size.astype(np.float64) + (1.0 - gamma) * counts
        embed = gamma * self.ema_embed_sum.astype(np.float64) + (1.0 - gamma) * sums
        total = size.sum()
        smoothed = (size + self.epsilon) / (total + k * self.epsilon) * total

        if self.reseed_dead and idx.size:
            dead = np.flatnonzero(size < self.dead_threshold)
            if dead.size:
                picks = self._rng.integers(0, z.shape[0], size=dead.size)
                embed[dead] = z[picks]
                size[dead] = 1.0
                smoothed[dead] = 1.0

        self.ema_cluster_size = size.astype(np.float32)
        self.ema_embed_sum = embed.astype(np.float32)
        self.entries = (embed / smoothed[:, None]).astype(np.float32)


@dataclass
class QuantizeResult:
    indices: np.ndarray
    z_q: Tensor
    commitment: Tensor
    target: np.ndarray


def nearest_code(z_e, codebook: Codebook | np.ndarray) -> np.ndarray:
    """Index of the entry with smallest squared Euclidean distance, ties to the lowest index."""
    entries = codebook.entries if isinstance(codebook, Codebook) else np.asarray(codebook)
    if entries.shape[0] == 0:
        raise ValueError("nearest_code: empty codebook")
    z = z_e.data if isinstance(z_e, Tensor) else np.asarray(z_e)
    d = entries.shape[1]
    if z.shape[-1] != d:
        raise ValueError(f"nearest_code: last axis {z.shape[-1]} != codebook dim {d}")
    flat = z.reshape(-1, d).astype(np.float64)
    e = entries.astype(np.float64)
    # |z|^2 is constant per row and does not affect the argmin
    dist = (e * e).sum(axis=1)[None, :] - 2.0 * (flat @ e.T)
    return np.argmin(dist, axis=1).reshape(z.shape[:-1])


def dequantize(indices: np.ndarray, codebook: Codebook | np.ndarray) -> np.ndarray:
    entries = codebook.entries if isinstance(codebook, Codebook) else np.asarray(codebook)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= entries.shape[0]):
        raise IndexError(f"dequantize: index outside [0, {entries.shape[0]})")
    return entries[idx]


def commitment_loss(z_e: Tensor, z_q) -> Tensor:
    """Mean squared distance to the (detached) quantized values."""
    zq = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q)
    return ag.mean(ag.square(ag.sub(z_e, Tensor(zq, dtype=z_e.dtype))))


def quantize(z_e: Tensor, codebook: Codebook) -> QuantizeResult:
    """Quantize a channel-first latent [N, D, h, w] with a straight-through output."""
    channels_last = np.ascontiguousarray(z_e.data.transpose(0, 2, 3, 1))
    idx = nearest_code(channels_last, codebook)
    zq = np.ascontiguousarray(dequantize(idx, codebook).transpose(0, 3, 1, 2))
    return QuantizeResult(
        indices=idx,
        z_q=ag.straight_through(z_e, zq),
        commitment=commitment_loss(z_e, zq),
        target=channels_last.reshape(-1, codebook.dim),
    )
