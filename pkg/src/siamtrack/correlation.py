"""Cross-correlation variants and their parameter/FLOP accounting.

Three variants:

* ``XCORR``: plain correlation: one response channel, optional scalar offset.
* ``UP_XCORR``: template raised to ``out_channels * D`` channels by a heavy
  convolution, then grouped correlation, one response per raised slice.
* ``DW_XCORR``: correlation channel by channel; no cross-channel mixing.

All correlation arithmetic is "valid" mode (no padding): output spatial size
is ``Hx - Hz + 1``. Fast paths run on torch tensors (grouped ``conv2d``);
``*_reference`` twins are explicit float64 loops and serve as oracles.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

VARIANTS = ("XCORR", "UP_XCORR", "DW_XCORR")


@dataclass(frozen=True)
class CorrConfig:
    """Head configuration for one correlation variant.

    ``channels`` is the per-branch feature dimension D. ``out_channels`` is
    the UP-variant response count (ignored otherwise); ``bias`` is the plain
    XCorr offset. Kernel sizes cover the UP raise convolution and the DW
    adjust/fusion convolutions.
    """

    variant: str
    channels: int
    out_channels: int | None = None
    bias: float = 0.0
    raise_kernel: int = 3
    adjust_kernel: int = 3
    fusion_kernel: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown correlation variant {self.variant!r}, expected one of {VARIANTS}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.variant == "UP_XCORR":
            if self.out_channels is None or self.out_channels < 1:
                raise ConfigError("UP_XCORR requires out_channels >= 1")
        for name in ("raise_kernel", "adjust_kernel", "fusion_kernel"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if not math.isfinite(self.bias):
            raise ConfigError(f"bias must be finite, got {self.bias}")


def _to4d(t: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), False
    if t.dim() == 4:
        return t, True
    raise ShapeError(f"{name} must be (C, H, W) or (B, C, H, W), got {tuple(t.shape)}")


def _check_pair(zf: torch.Tensor, xf: torch.Tensor):
    z, z_batched = _to4d(zf, "zf")
    x, x_batched = _to4d(xf, "xf")
    if z.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: template {z.shape[0]} vs search {x.shape[0]}")
    if z.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: template {z.shape[1]} vs search {x.shape[1]}")
    if z.shape[2] > x.shape[2] or z.shape[3] > x.shape[3]:
        raise ShapeError(
            f"template spatial size {tuple(z.shape[2:])} exceeds search {tuple(x.shape[2:])}"
        )
    return z, x, z_batched or x_batched


def xcorr(zf: torch.Tensor, xf: torch.Tensor, bias: float = 0.0) -> torch.Tensor:
    """Plain cross-correlation: sliding inner product over all channels, plus bias.

    Output has one channel and spatial size ``(Hx - Hz + 1, Wx - Wz + 1)``.
    """
    z, x, batched = _check_pair(zf, xf)
    b, c, hz, wz = z.shape
    out = F.conv2d(x.reshape(1, b * c, x.shape[2], x.shape[3]), z.reshape(b, c, hz, wz), groups=b)
    out = out.reshape(b, 1, out.shape[2], out.shape[3]) + bias
    return out if batched else out[0]


def dw_xcorr(zf: torch.Tensor, xf: torch.Tensor) -> torch.Tensor:
    """Depthwise cross-correlation: channel c of the output is corr(zf[c], xf[c])."""
    z, x, batched = _check_pair(zf, xf)
    b, c, hz, wz = z.shape
    out = F.conv2d(
        x.reshape(1, b * c, x.shape[2], x.shape[3]),
        z.reshape(b * c, 1, hz, wz),
        groups=b * c,
    )
    out = out.reshape(b, c, out.shape[2], out.shape[3])
    return out if batched else out[0]


def up_xcorr(
    zf: torch.Tensor,
    xf: torch.Tensor,
    raise_weight: torch.Tensor,
    raise_bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Up-channel cross-correlation.

    The template branch is raised to ``out_channels * D`` channels by the
    heavy convolution given as ``raise_weight`` of shape
    ``(out_channels * D, D, kh, kw)``, then each D-channel slice is
    cross-correlated against the search features, producing ``out_channels``
    response maps.
    """
    z, x, batched = _check_pair(zf, xf)
    b, c, _, _ = z.shape
    if raise_weight.dim() != 4 or raise_weight.shape[1] != c:
        raise ShapeError(
            f"raise weight must be (out*D, D, kh, kw) with D={c}, got {tuple(raise_weight.shape)}"
        )
    if raise_weight.shape[0] % c != 0:
        raise ShapeError(
            f"raise weight output channels {raise_weight.shape[0]} not a multiple of D={c}"
        )
    out_channels = raise_weight.shape[0] // c
    raised = F.conv2d(z, raise_weight, raise_bias)
    hz, wz = raised.shape[2], raised.shape[3]
    if hz > x.shape[2] or wz > x.shape[3]:
        raise ShapeError(
            f"raised template {hz}x{wz} exceeds search {x.shape[2]}x{x.shape[3]}"
        )
    out = F.conv2d(
        x.reshape(1, b * c, x.shape[2], x.shape[3]),
        raised.reshape(b * out_channels, c, hz, wz),
        groups=b,
    )
    out = out.reshape(b, out_channels, out.shape[2], out.shape[3])
    return out if batched else out[0]


# --- reference implementations (float64 explicit loops; oracles in tests) ---


def xcorr_reference(zf, xf, bias: float = 0.0) -> np.ndarray:
    z = np.asarray(zf, dtype=np.float64)
    x = np.asarray(xf, dtype=np.float64)
    c, hz, wz = z.shape
    _, hx, wx = x.shape
    out = np.empty((1, hx - hz + 1, wx - wz + 1), dtype=np.float64)
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            acc = 0.0
            for ch in range(c):
                for u in range(hz):
                    for v in range(wz):
                        acc += z[ch, u, v] * x[ch, i + u, j + v]
            out[0, i, j] = acc + bias
    return out


def dw_xcorr_reference(zf, xf) -> np.ndarray:
    z = np.asarray(zf, dtype=np.float64)
    x = np.asarray(xf, dtype=np.float64)
    c, hz, wz = z.shape
    _, hx, wx = x.shape
    out = np.empty((c, hx - hz + 1, wx - wz + 1), dtype=np.float64)
    for ch in range(c):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                acc = 0.0
                for u in range(hz):
                    for v in range(wz):
                        acc += z[ch, u, v] * x[ch, i + u, j + v]
                out[ch, i, j] = acc
    return out


def up_xcorr_reference(zf, xf, raise_weight, raise_bias=None) -> np.ndarray:
    z = np.asarray(zf, dtype=np.float64)
    x = np.asarray(xf, dtype=np.float64)
    w = np.asarray(raise_weight, dtype=np.float64)
    c = z.shape[0]
    out_channels = w.shape[0] // c
    kh, kw = w.shape[2], w.shape[3]
    hr, wr = z.shape[1] - kh + 1, z.shape[2] - kw + 1
    raised = np.zeros((w.shape[0], hr, wr), dtype=np.float64)
    for o in range(w.shape[0]):
        for i in range(hr):
            for j in range(wr):
                acc = 0.0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, ch, u, v] * z[ch, i + u, j + v]
                raised[o, i, j] = acc
        if raise_bias is not None:
            raised[o] += np.asarray(raise_bias, dtype=np.float64)[o]
    out = np.stack(
        [xcorr_reference(raised[o * c:(o + 1) * c], x)[0] for o in range(out_channels)]
    )
    return out


# --- parameter and FLOP accounting ---


def param_breakdown(cfg: CorrConfig, k: int) -> dict[str, int]:
    """Exact per-piece parameter counts of the head built around ``cfg``.

    DW heads: one non-shared adjust conv+norm per branch feeding a single
    depthwise correlation, then per-task fuse conv+norm and output conv.
    UP heads: per-task heavy raise convolutions on the template branch,
    per-task search convolutions, and a 1x1 output adjust on regression.
    The counts match the corresponding torch modules parameter for parameter.
    """
    d = cfg.channels
    if cfg.variant == "XCORR":
        return {"bias": 1}
    if cfg.variant == "UP_XCORR":
        kr = cfg.raise_kernel
        return {
            "cls.raise.weight": kr * kr * d * (2 * k * d),
            "cls.raise.bias": 2 * k * d,
            "reg.raise.weight": kr * kr * d * (4 * k * d),
            "reg.raise.bias": 4 * k * d,
            "cls.search.weight": kr * kr * d * d,
            "cls.search.bias": d,
            "reg.search.weight": kr * kr * d * d,
            "reg.search.bias": d,
            "reg.adjust.weight": (4 * k) * (4 * k),
            "reg.adjust.bias": 4 * k,
        }
    ka, kf = cfg.adjust_kernel, cfg.fusion_kernel
    return {
        "adjust_z.weight": ka * ka * d * d,
        "adjust_z.norm": 2 * d,
        "adjust_x.weight": ka * ka * d * d,
        "adjust_x.norm": 2 * d,
        "cls.fuse.weight": kf * kf * d * d,
        "cls.fuse.norm": 2 * d,
        "cls.out.weight": d * 2 * k,
        "cls.out.bias": 2 * k,
        "reg.fuse.weight": kf * kf * d * d,
        "reg.fuse.norm": 2 * d,
        "reg.out.weight": d * 4 * k,
        "reg.out.bias": 4 * k,
    }


def count_params(cfg: CorrConfig, k: int) -> int:
    """Total parameter count of the head (adjust + correlation-side + output convs)."""
    return sum(param_breakdown(cfg, k).values())


def estimate_flops(cfg: CorrConfig, k: int, z_size: int, x_size: int) -> int:
    """Multiply-accumulate based FLOP estimate for one head forward pass."""
    d = cfg.channels

    def conv_flops(cin, cout, kk, out_hw):
        return 2 * cin * cout * kk * kk * out_hw * out_hw

    if cfg.variant == "XCORR":
        r = x_size - z_size + 1
        return 2 * d * z_size * z_size * r * r

    if cfg.variant == "UP_XCORR":
        kr = cfg.raise_kernel
        zr = z_size - kr + 1
        xr = x_size - kr + 1
        r = xr - zr + 1
        total = conv_flops(d, 2 * k * d, kr, zr) + conv_flops(d, 4 * k * d, kr, zr)
        total += 2 * conv_flops(d, d, kr, xr)
        total += 2 * d * zr * zr * r * r * (2 * k + 4 * k)
        total += conv_flops(4 * k, 4 * k, 1, r)
        return total

    ka, kf = cfg.adjust_kernel, cfg.fusion_kernel
    zr = z_size - ka + 1
    xr = x_size - ka + 1
    r = xr - zr + 1
    total = conv_flops(d, d, ka, zr) + conv_flops(d, d, ka, xr)
    total += 2 * d * zr * zr * r * r  # depthwise correlation
    total += 2 * (conv_flops(d, d, kf, r))
    total += conv_flops(d, 2 * k, 1, r) + conv_flops(d, 4 * k, 1, r)
    return total


def benchmark(cfg: CorrConfig, k: int, z_size: int, x_size: int, repeats: int = 20, seed: int = 0) -> dict:
    """Time the raw correlation op for ``cfg`` and report params/flops alongside.

    Returns a dict with keys variant, D, k, params, flops, wall_time_ms.
    """
    gen = torch.Generator().manual_seed(seed)
    d = cfg.channels
    zf = torch.randn(d, z_size, z_size, generator=gen)
    xf = torch.randn(d, x_size, x_size, generator=gen)
    if cfg.variant == "XCORR":
        run = lambda: xcorr(zf, xf, cfg.bias)
    elif cfg.variant == "DW_XCORR":
        run = lambda: dw_xcorr(zf, xf)
    else:
        w = torch.randn(cfg.out_channels * d, d, cfg.raise_kernel, cfg.raise_kernel, generator=gen)
        w = w / math.sqrt(d * cfg.raise_kernel ** 2)
        run = lambda: up_xcorr(zf, xf, w)
    run()  # warm up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return {
        "variant": cfg.variant,
        "D": d,
        "k": k,
        "params": count_params(cfg, k),
        "flops": estimate_flops(cfg, k, z_size, x_size),
        "wall_time_ms": 1000.0 * float(np.median(times)),
    }
