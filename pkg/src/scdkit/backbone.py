"""Visual state-space Siamese encoder.

Images enter through a non-overlapping patch stem, then pass four stages of
gated state-space blocks.  Each block flattens its feature map along four
scan paths (row-major and column-major, forward and reverse), runs an
input-conditioned linear recurrence along each path, and merges the results
back onto the 2-D grid.  The same weights encode both timestamps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig
from .errors import NumericsError, ShapeError

# Beyond this cumulative log-decay magnitude inside one chunk, the closed
# form's exp(-S) term can overflow, so the affected chunk falls back to the
# plain per-step recurrence (which only ever exponentiates non-positive
# numbers when A is stable).
_SCAN_GUARD = 25.0


@dataclass
class FeatureMap:
    """A (B, C, h, w) tensor plus its stride relative to the input image."""

    data: Tensor
    stride: int

    def __post_init__(self) -> None:
        if self.data.dim() != 4:
            raise ShapeError(f"FeatureMap expects a 4-D tensor, got {self.data.dim()}-D")
        if self.stride <= 0:
            raise ShapeError("FeatureMap stride must be positive")


@dataclass
class FeaturePyramid:
    """Four stage outputs at strides 4, 8, 16, 32."""

    stages: tuple[FeatureMap, FeatureMap, FeatureMap, FeatureMap]

    def __post_init__(self) -> None:
        if len(self.stages) != 4:
            raise ShapeError(f"FeaturePyramid expects 4 stages, got {len(self.stages)}")
        strides = tuple(s.stride for s in self.stages)
        if strides != (4, 8, 16, 32):
            raise ShapeError(f"FeaturePyramid strides must be (4, 8, 16, 32), got {strides}")

    def __iter__(self):
        return iter(self.stages)

    def __getitem__(self, i: int) -> FeatureMap:
        return self.stages[i]


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of a channels-first feature map."""

    def forward(self, x: Tensor) -> Tensor:
        x = x.permute(0, 2, 3, 1)
        x = super().forward(x)
        return x.permute(0, 3, 1, 2)


def cross_scan(x: Tensor) -> Tensor:
    """Unfold (B, C, h, w) into four 1-D traversals, shape (B, 4, C, h*w).

    Path order: row-major forward, column-major forward, then the reverses
    of both.  On [[a, b], [c, d]] this yields (a,b,c,d), (a,c,b,d),
    (d,c,b,a), (d,b,c,a).
    """
    if x.dim() != 4:
        raise ShapeError(f"cross_scan expects a 4-D feature map, got {x.dim()}-D")
    rows = x.flatten(2)
    cols = x.transpose(2, 3).flatten(2)
    return torch.stack([rows, cols, rows.flip(-1), cols.flip(-1)], dim=1)


def cross_merge(ys: Tensor, h: int, w: int) -> Tensor:
    """Invert the four traversals of cross_scan and sum, back to (B, C, h, w).

    With identity per-path mixing this returns exactly 4x the scanned map.
    """
    if ys.dim() != 4 or ys.shape[1] != 4:
        raise ShapeError(f"cross_merge expects (B, 4, C, L), got {tuple(ys.shape)}")
    bsz, _, ch, length = ys.shape
    if length != h * w:
        raise ShapeError(f"cross_merge length {length} does not match h*w = {h * w}")
    rows = ys[:, 0] + ys[:, 2].flip(-1)
    cols = ys[:, 1] + ys[:, 3].flip(-1)
    out = rows + cols.view(bsz, ch, w, h).transpose(2, 3).reshape(bsz, ch, length)
    return out.view(bsz, ch, h, w)


def _first_bad_step(t: Tensor, offset: int) -> int:
    finite = torch.isfinite(t)
    while finite.dim() > 2:
        finite = finite.all(dim=-1)
    bad = (~finite).any(dim=0)
    return offset + int(torch.nonzero(bad)[0])


def selective_scan(
    x: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    D: Tensor | None = None,
    chunk: int = 64,
) -> Tensor:
    """Input-conditioned linear recurrence along the sequence axis.

        h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * x_t
        y_t = <C_t, h_t> + D * x_t,   h_0 = 0

    Shapes: x, delta (Ba, L, Ch); B, C (Ba, L, N); A (Ch, N) or (Ba, Ch, N)
    to allow per-batch-row dynamics; D (Ch,) or (Ba, Ch) or None.  Channels
    evolve independently; the state contracts against C_t per step.

    The sequence is processed in chunks via the closed form
    h = exp(S) * (h_prev + cumsum(b * exp(-S))) with S the within-chunk
    cumulative log-decay; chunks whose |S| exceeds a safety bound use the
    per-step recurrence instead, so stable systems (Re A <= 0) never
    overflow.  Raises NumericsError naming the first step at which a
    non-finite state or output appears.
    """
    if x.dim() != 3:
        raise ShapeError(f"selective_scan expects x of shape (Ba, L, Ch), got {tuple(x.shape)}")
    ba, length, ch = x.shape
    if delta.shape != x.shape:
        raise ShapeError(f"delta shape {tuple(delta.shape)} must match x shape {tuple(x.shape)}")
    n = A.shape[-1]
    if A.shape not in ((ch, n), (ba, ch, n)):
        raise ShapeError(f"A must be (Ch, N) or (Ba, Ch, N), got {tuple(A.shape)}")
    if B.shape != (ba, length, n) or C.shape != (ba, length, n):
        raise ShapeError(
            f"B and C must be (Ba, L, N) = {(ba, length, n)}, got {tuple(B.shape)} and {tuple(C.shape)}"
        )
    if D is not None and D.shape not in ((ch,), (ba, ch)):
        raise ShapeError(f"D must be (Ch,) or (Ba, Ch), got {tuple(D.shape)}")
    if chunk < 1:
        raise ShapeError("chunk must be at least 1")
    if (delta < 0).any():
        raise NumericsError("selective_scan requires non-negative delta")

    a_rows = A.unsqueeze(0) if A.dim() == 2 else A  # (Ba|1, Ch, N)
    h_last = x.new_zeros(ba, ch, n)
    ys = []
    for s in range(0, length, chunk):
        e = min(s + chunk, length)
        da = delta[:, s:e].unsqueeze(-1) * a_rows.unsqueeze(1)  # (Ba, T, Ch, N)
        dbx = (delta[:, s:e] * x[:, s:e]).unsqueeze(-1) * B[:, s:e].unsqueeze(2)
        logdecay = torch.cumsum(da, dim=1)
        peak = float(logdecay.detach().abs().amax())
        if peak > _SCAN_GUARD or math.isnan(peak):
            steps = []
            h = h_last
            for t in range(e - s):
                h = torch.exp(da[:, t]) * h + dbx[:, t]
                steps.append(h)
            h_chunk = torch.stack(steps, dim=1)
        else:
            z = torch.cumsum(dbx * torch.exp(-logdecay), dim=1)
            h_chunk = torch.exp(logdecay) * (h_last.unsqueeze(1) + z)
        y_chunk = torch.einsum("btcn,btn->btc", h_chunk, C[:, s:e])
        if not (torch.isfinite(h_chunk).all() and torch.isfinite(y_chunk).all()):
            bad_h = None if torch.isfinite(h_chunk).all() else _first_bad_step(h_chunk, s)
            bad_y = None if torch.isfinite(y_chunk).all() else _first_bad_step(y_chunk, s)
            step = min(v for v in (bad_h, bad_y) if v is not None)
            raise NumericsError(f"selective_scan produced a non-finite value at step {step}")
        h_last = h_chunk[:, -1]
        ys.append(y_chunk)
    y = torch.cat(ys, dim=1)
    if D is not None:
        y = y + (D.unsqueeze(1) if D.dim() == 2 else D) * x
    return y


def _inverse_softplus(y: Tensor) -> Tensor:
    # x such that softplus(x) = y, computed stably for small y
    return y + torch.log(-torch.expm1(-y))


class SS2D(nn.Module):
    """Four-path 2-D selective scan with per-path projections.

    Each path k owns a projection from channels to (dt_rank + 2N) producing
    the step size, input matrix B_t and readout C_t, a low-rank step-size
    expansion back to channels, a log-parameterized negative-real state
    matrix, and a skip scale D.  Outputs of the four paths are merged back
    onto the grid and layer-normalized.
    """

    def __init__(self, channels: int, state_dim: int, dt_rank: int | None = None):
        super().__init__()
        if channels < 1 or state_dim < 1:
            raise ShapeError("SS2D needs positive channels and state_dim")
        self.channels = channels
        self.state_dim = state_dim
        self.dt_rank = dt_rank if dt_rank is not None else max(1, channels // 16)
        k = 4
        self.x_proj_weight = nn.Parameter(torch.empty(k, self.dt_rank + 2 * state_dim, channels))
        self.dt_proj_weight = nn.Parameter(torch.empty(k, channels, self.dt_rank))
        self.dt_proj_bias = nn.Parameter(torch.empty(k, channels))
        self.A_log = nn.Parameter(torch.empty(k, channels, state_dim))
        self.D = nn.Parameter(torch.ones(k, channels))
        self.out_norm = nn.LayerNorm(channels)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        with torch.no_grad():
            bound_x = self.channels**-0.5
            self.x_proj_weight.uniform_(-bound_x, bound_x)
            bound_dt = self.dt_rank**-0.5
            self.dt_proj_weight.uniform_(-bound_dt, bound_dt)
            # softplus(bias) lands log-uniformly in [1e-3, 1e-1]
            dt = torch.exp(
                torch.rand_like(self.dt_proj_bias) * (torch.log(torch.tensor(0.1)) - torch.log(torch.tensor(1e-3)))
                + torch.log(torch.tensor(1e-3))
            )
            self.dt_proj_bias.copy_(_inverse_softplus(dt))
            # A = -exp(A_log) with magnitudes 1..state_dim per channel
            a_row = torch.log(torch.arange(1, self.state_dim + 1, dtype=torch.float32))
            self.A_log.copy_(a_row.expand(4, self.channels, self.state_dim))
            self.D.fill_(1.0)

    def forward(self, x: Tensor) -> Tensor:
        bsz, ch, h, w = x.shape
        if ch != self.channels:
            raise ShapeError(f"SS2D built for {self.channels} channels, got {ch}")
        length = h * w
        xs = cross_scan(x)  # (B, 4, C, L)
        proj = torch.einsum("bkcl,kdc->bkdl", xs, self.x_proj_weight)
        dt_low, b_in, c_out = torch.split(proj, [self.dt_rank, self.state_dim, self.state_dim], dim=2)
        dt = torch.einsum("bkrl,kcr->bkcl", dt_low, self.dt_proj_weight)
        delta = F.softplus(dt + self.dt_proj_bias[None, :, :, None])

        u = xs.permute(0, 1, 3, 2).reshape(bsz * 4, length, ch)
        d = delta.permute(0, 1, 3, 2).reshape(bsz * 4, length, ch)
        b_seq = b_in.permute(0, 1, 3, 2).reshape(bsz * 4, length, self.state_dim)
        c_seq = c_out.permute(0, 1, 3, 2).reshape(bsz * 4, length, self.state_dim)
        a = (-torch.exp(self.A_log)).unsqueeze(0).expand(bsz, -1, -1, -1).reshape(bsz * 4, ch, self.state_dim)
        skip = self.D.unsqueeze(0).expand(bsz, -1, -1).reshape(bsz * 4, ch)

        y = selective_scan(u, d, a, b_seq, c_seq, skip)
        ys = y.view(bsz, 4, length, ch).permute(0, 1, 3, 2)
        merged = cross_merge(ys, h, w)
        out = self.out_norm(merged.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return out


class VSSBlock(nn.Module):
    """Gated state-space block with residual connection.

    Pre-norm, then a 1x1 projection splits into a main branch (depthwise
    3x3 conv, SiLU, four-path scan) and a gate branch (SiLU), multiplied
    together before the output projection.  Zeroing out_proj makes the
    block an exact identity.
    """

    def __init__(self, channels: int, state_dim: int):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.in_proj = nn.Conv2d(channels, 2 * channels, 1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.ss2d = SS2D(channels, state_dim)
        self.out_proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        z = self.norm(x)
        main, gate = self.in_proj(z).chunk(2, dim=1)
        main = F.silu(self.conv(main))
        main = self.ss2d(main)
        main = main * F.silu(gate)
        return x + self.out_proj(main)


class SiameseEncoder(nn.Module):
    """Four-stage encoder applied with shared weights to both timestamps."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        chs = config.stage_channels
        self.config = config
        self.stem = nn.Sequential(nn.Conv2d(3, chs[0], kernel_size=4, stride=4), LayerNorm2d(chs[0]))
        self.stages = nn.ModuleList(
            nn.Sequential(*[VSSBlock(chs[i], config.state_dim) for _ in range(config.stage_depths[i])])
            for i in range(4)
        )
        self.downsamples = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chs[i], chs[i + 1], kernel_size=2, stride=2), LayerNorm2d(chs[i + 1]))
            for i in range(3)
        )

    def patch_partition(self, image: Tensor) -> FeatureMap:
        """Embed non-overlapping 4x4 patches: (B, 3, H, W) -> stride-4 map."""
        if image.dim() != 4:
            raise ShapeError(f"expected a 4-D image batch, got {image.dim()}-D")
        if image.shape[1] != 3:
            raise ShapeError(f"channel axis (1) must have size 3, got {image.shape[1]}")
        if image.shape[2] % 32 != 0:
            raise ShapeError(f"height axis (2) must be a multiple of 32, got {image.shape[2]}")
        if image.shape[3] % 32 != 0:
            raise ShapeError(f"width axis (3) must be a multiple of 32, got {image.shape[3]}")
        return FeatureMap(self.stem(image), stride=4)

    def forward(self, image: Tensor) -> FeaturePyramid:
        fm = self.patch_partition(image).data
        outs = []
        for i in range(4):
            fm = self.stages[i](fm)
            outs.append(FeatureMap(fm, stride=4 * 2**i))
            if i < 3:
                fm = self.downsamples[i](fm)
        return FeaturePyramid(tuple(outs))
