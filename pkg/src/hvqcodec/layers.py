"""Layer objects built on :mod:`hvqcodec.autograd`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor

BETA_MIN = 1e-6


class Module:
    """Parameter container; parameters are discovered in attribute declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> Module:
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ConvLayer(Module):
    """2D convolution, or its transpose when ``transposed`` is set.

    Kernels are stored [out, in, kh, kw] for ordinary convolutions and
    [in, out, kh, kw] for transposed ones, so a transposed layer computes
    the exact adjoint of an ordinary layer holding the same array.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1, padding=None,
                 transposed: bool = False, output_padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None):
        if kernel_size < 1 or stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride = stride
        self.transposed = transposed
        self.output_padding = output_padding
        if padding is None:
            # "same"-style split; the extra cell goes to the high edge
            total = kernel_size - 1 if not transposed else kernel_size - stride
            padding = (total // 2, total - total // 2) * 2
            padding = (padding[0], padding[1], padding[0], padding[1])
        self.padding = ag.normalize_padding(padding)
        fan_in = in_ch * kernel_size * kernel_size
        if transposed:
            fan_in = max(1, in_ch * kernel_size * kernel_size // (stride * stride))
        bound = math.sqrt(3.0 / fan_in)
        shape = (in_ch, out_ch, kernel_size, kernel_size) if transposed else (out_ch, in_ch, kernel_size, kernel_size)
        self.kernel = Parameter(rng.uniform(-bound, bound, size=shape), name="kernel")
        self.bias = Parameter(np.zeros(out_ch), name="bias") if bias else None

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        k = self.kernel.shape[-1]
        pt, pb, pl, pr = self.padding
        if self.transposed:
            return (ag.conv_transpose_output_size(h, k, self.stride, pt, pb, self.output_padding),
                    ag.conv_transpose_output_size(w, k, self.stride, pl, pr, self.output_padding))
        return (ag.conv_output_size(h, k, self.stride, pt, pb), ag.conv_output_size(w, k, self.stride, pl, pr))

    def forward(self, x: Tensor) -> Tensor:
        if self.transposed:
            return ag.conv_transpose2d(x, self.kernel, self.bias, self.stride, self.padding, self.output_padding)
        return ag.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class GdnLayer(Module):
    """Generalized divisive normalization (``inverse=True`` gives IGDN)."""

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = BETA_MIN):
        self.inverse = inverse
        self.beta = Parameter(np.ones(channels), lower_bound=beta_min, name="beta")
        self.gamma = Parameter(0.1 * np.eye(channels), lower_bound=0.0, name="gamma")

    def forward(self, x: Tensor) -> Tensor:
        return ag.gdn(x, self.beta, self.gamma, inverse=self.inverse)


class ResidualBlock(Module):
    """conv(k5, stride) -> GELU -> conv(k5) -> (I)GDN, plus a projected skip when shapes change."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, transposed: bool = False,
                 kernel_size: int = 5, rng: np.random.Generator | None = None):
        k = kernel_size
        self.conv1 = self._first_conv(in_ch, out_ch, k, stride, transposed, rng)
        self.conv2 = ConvLayer(out_ch, out_ch, k, 1, rng=rng)
        self.norm = GdnLayer(out_ch, inverse=transposed)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            if transposed and stride != 1:
                self.skip = ConvLayer(in_ch, out_ch, stride, stride, padding=0, transposed=True, rng=rng)
            else:
                self.skip = ConvLayer(in_ch, out_ch, 1, stride, padding=0, rng=rng)

    @staticmethod
    def _first_conv(in_ch, out_ch, k, stride, transposed, rng) -> ConvLayer:
        if stride == 1 or not transposed:
            total = k - 1
            lo = total // 2
            return ConvLayer(in_ch, out_ch, k, stride, padding=(lo, total - lo, lo, total - lo), rng=rng)
        # (h-1)*s - pt - pb + k + op == h*s
        total = k - stride
        lo = total // 2
        return ConvLayer(in_ch, out_ch, k, stride, padding=(lo, total - lo, lo, total - lo), transposed=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv2(ag.gelu(self.conv1(x))))
        return y + (self.skip(x) if self.skip is not None else x)
