"""Joint spatio-frequency fusion of the two timestamps.

Per pyramid stage, five branches are concatenated in a fixed order: the T1
features, their frequency-domain log-amplitude, the T2 features, their
log-amplitude, and the absolute difference.  A 1x1 convolution compresses
back to the stage width and a convolutional block attention module refines
the result.  The frequency and difference branches can be disabled
independently, shrinking the concat width from 5C to 4C, 3C or 2C.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, DataError, ShapeError


def fft_log_amplitude(x: Tensor) -> Tensor:
    """log(1 + |FFT2(x)|) with the unitary (1/sqrt(hw)) transform.

    The transform and magnitude are evaluated in float64 and cast back, so
    float32 feature maps do not lose the low-amplitude bins.  A constant
    map c concentrates all mass in the DC bin: log(1 + c*sqrt(h*w)).
    """
    if x.dim() != 4:
        raise ShapeError(f"fft_log_amplitude expects (B, C, h, w), got {x.dim()}-D")
    spectrum = torch.fft.fft2(x.to(torch.float64), norm="ortho")
    return torch.log1p(spectrum.abs()).to(x.dtype)


def abs_difference(x1: Tensor, x2: Tensor) -> Tensor:
    """Elementwise |x1 - x2| of two same-shape feature maps."""
    if x1.shape != x2.shape:
        raise ShapeError(f"abs_difference shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    return (x1 - x2).abs()


class ChannelAttention(nn.Module):
    """Average- and max-pooled descriptors through a shared bottleneck MLP."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels < reduction:
            raise ConfigError(f"channel attention needs channels >= reduction ({channels} < {reduction})")
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        gate = self.mlp(F.adaptive_avg_pool2d(x, 1)) + self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(gate)


class SpatialAttention(nn.Module):
    """7x7 convolution over the channelwise mean/max planes."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: Tensor) -> Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Sequential channel-then-spatial attention; purely multiplicative."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, x: Tensor) -> Tensor:
        x = x * self.channel(x)
        return x * self.spatial(x)


class FusionBlock(nn.Module):
    """Fuse same-stage T1/T2 feature maps into one stage-width map."""

    def __init__(self, channels: int, fft_branch: bool = True, diff_branch: bool = True, reduction: int = 8):
        super().__init__()
        self.channels = channels
        self.fft_branch = fft_branch
        self.diff_branch = diff_branch
        width = 2 + (2 if fft_branch else 0) + (1 if diff_branch else 0)
        self.width_multiplier = width
        self.compress = nn.Conv2d(width * channels, channels, 1)
        self.cbam = CBAM(channels, reduction)

    def _branches(self, x1: Tensor, x2: Tensor) -> list[tuple[str, Tensor]]:
        if x1.shape != x2.shape:
            raise ShapeError(f"fusion inputs differ in shape: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        if x1.shape[1] != self.channels:
            raise ShapeError(f"fusion block built for {self.channels} channels, got {x1.shape[1]}")
        parts: list[tuple[str, Tensor]] = [("x_t1", x1)]
        if self.fft_branch:
            parts.append(("fft_t1", fft_log_amplitude(x1)))
        parts.append(("x_t2", x2))
        if self.fft_branch:
            parts.append(("fft_t2", fft_log_amplitude(x2)))
        if self.diff_branch:
            parts.append(("diff", abs_difference(x1, x2)))
        return parts

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        parts = self._branches(x1, x2)
        fused = self.compress(torch.cat([p for _, p in parts], dim=1))
        return self.cbam(fused)

    def forward_with_trace(self, x1: Tensor, x2: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        """Like forward, also returning detached copies of every branch."""
        parts = self._branches(x1, x2)
        fused = self.compress(torch.cat([p for _, p in parts], dim=1))
        out = self.cbam(fused)
        trace = {name: t.detach().clone() for name, t in parts}
        trace["output"] = out.detach().clone()
        return out, trace


def save_trace(trace: dict[str, Tensor], out_dir: str | Path) -> Path:
    """Write each trace array as raw little-endian bytes plus a manifest.

    Files are <name>.bin in C order; trace.json records dtype and shape.
    Bytes are a pure function of the array contents, so repeated saves of
    the same trace are identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, dict] = {}
    for name in sorted(trace):
        arr = np.ascontiguousarray(trace[name].detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        fname = f"{name}.bin"
        (out / fname).write_bytes(arr.tobytes())
        manifest[name] = {"file": fname, "dtype": str(arr.dtype), "shape": list(arr.shape)}
    path = out / "trace.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_trace(trace_dir: str | Path) -> dict[str, np.ndarray]:
    root = Path(trace_dir)
    manifest_path = root / "trace.json"
    if not manifest_path.is_file():
        raise DataError(f"trace manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest.items():
        raw = (root / entry["file"]).read_bytes()
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays
