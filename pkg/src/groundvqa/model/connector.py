"""Multi-scale vision-language connector.

A sparse (few frames) and a dense (many frames) view of the same video go
through one shared block: a regular-design residual stage, a strided
temporal convolution that brings the branch to a fixed token count, a second
stage and a linear projection into the decoder's embedding space. Frames are
feature vectors here, so the 3-D convolutions have unit spatial extent and
are computed as 1-D temporal convolutions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import DomainError
from .encoder import FrameFeatures

CONNECTOR_MODES = ("multi", "dense_only", "sparse_only")


@dataclass(frozen=True)
class ConnectorConfig:
    dense_frames: int = 16
    sparse_frames: int = 4
    feature_dim: int = 32
    hidden_channels: int = 64
    temporal_kernel: int = 3
    output_tokens_per_branch: int = 4
    embed_dim: int = 64
    group_width: int = 16
    mode: str = "multi"

    def __post_init__(self) -> None:
        for name in ("dense_frames", "sparse_frames", "feature_dim", "hidden_channels",
                     "temporal_kernel", "output_tokens_per_branch", "embed_dim", "group_width"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.temporal_kernel % 2 == 0:
            raise DomainError("temporal_kernel must be odd")
        if self.sparse_frames > self.dense_frames or self.dense_frames % self.sparse_frames:
            raise DomainError("dense_frames must be an integer multiple of sparse_frames")
        if self.hidden_channels % self.group_width:
            raise DomainError("hidden_channels must be divisible by group_width")
        if self.mode not in CONNECTOR_MODES:
            raise DomainError(f"unknown connector mode {self.mode!r}")

    @property
    def num_visual_tokens(self) -> int:
        branches = 2 if self.mode == "multi" else 1
        return branches * self.output_tokens_per_branch

    def to_dict(self) -> dict:
        return asdict(self)


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over channels at each time step of a [B, C, T] tensor."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class XBlock(nn.Module):
    """Residual bottleneck with a grouped temporal convolution (RegNet X block)."""

    def __init__(self, channels: int, group_width: int, kernel: int = 3):
        super().__init__()
        self.a = nn.Conv1d(channels, channels, 1, bias=False)
        self.a_norm = ChannelNorm(channels)
        self.b = nn.Conv1d(channels, channels, kernel, padding=kernel // 2,
                           groups=channels // group_width, bias=False)
        self.b_norm = ChannelNorm(channels)
        self.c = nn.Conv1d(channels, channels, 1, bias=False)
        self.c_norm = ChannelNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.a_norm(self.a(x)))
        h = F.relu(self.b_norm(self.b(h)))
        h = self.c_norm(self.c(h))
        return F.relu(x + h)


class RegStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, group_width: int, depth: int = 1):
        super().__init__()
        self.stem = nn.Conv1d(in_ch, out_ch, 1)
        self.blocks = nn.Sequential(*[XBlock(out_ch, group_width) for _ in range(depth)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.stem(x))


class VLCBlock(nn.Module):
    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.cfg = cfg
        self.stage1 = RegStage(cfg.feature_dim, cfg.hidden_channels, cfg.group_width)
        self.temporal = nn.Conv1d(cfg.hidden_channels, cfg.hidden_channels, cfg.temporal_kernel)
        self.stage2 = RegStage(cfg.hidden_channels, cfg.hidden_channels, cfg.group_width)
        self.proj = nn.Linear(cfg.hidden_channels, cfg.embed_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, T, feature_dim] -> [B, output_tokens_per_branch, embed_dim]."""
        n_out = self.cfg.output_tokens_per_branch
        t = frames.shape[1]
        x = self.stage1(frames.transpose(1, 2))
        stride = max(1, t // n_out)
        x = F.conv1d(x, self.temporal.weight, self.temporal.bias, stride=stride,
                     padding=self.cfg.temporal_kernel // 2)
        if x.shape[-1] != n_out:
            x = F.adaptive_avg_pool1d(x, n_out)
        x = self.stage2(F.relu(x))
        return self.proj(x.transpose(1, 2))


class MSVLC(nn.Module):
    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.cfg = cfg
        self.vlc = VLCBlock(cfg)

    def branch_blocks(self) -> tuple[VLCBlock, VLCBlock]:
        # both branches evaluate one module; identity, not a copy
        return self.vlc, self.vlc

    def forward(self, dense: Optional[torch.Tensor], sparse: Optional[torch.Tensor]) -> torch.Tensor:
        cfg = self.cfg
        sparse_block, dense_block = self.branch_blocks()
        parts = []
        if cfg.mode in ("multi", "sparse_only"):
            if sparse is None or sparse.shape[1] != cfg.sparse_frames:
                raise DomainError(f"sparse branch expects {cfg.sparse_frames} frames")
            parts.append(sparse_block(sparse))
        if cfg.mode in ("multi", "dense_only"):
            if dense is None or dense.shape[1] != cfg.dense_frames:
                raise DomainError(f"dense branch expects {cfg.dense_frames} frames")
            parts.append(dense_block(dense))
        return torch.cat(parts, dim=1)


def msvlc_forward(dense: FrameFeatures, sparse: FrameFeatures, cfg: ConnectorConfig,
                  params: MSVLC) -> np.ndarray:
    """Visual tokens for one video: sparse tokens followed by dense tokens."""
    if dense.num_frames != cfg.dense_frames or sparse.num_frames != cfg.sparse_frames:
        raise DomainError(
            f"expected ({cfg.dense_frames}, {cfg.sparse_frames}) frames, "
            f"got ({dense.num_frames}, {sparse.num_frames})"
        )
    p = next(params.parameters())
    d = torch.as_tensor(dense.values, dtype=p.dtype)[None]
    s = torch.as_tensor(sparse.values, dtype=p.dtype)[None]
    with torch.no_grad():
        out = params(d, s)
    return out[0].cpu().numpy()
