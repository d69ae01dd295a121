"""Frame sampling and the frozen vision-encoder stand-in."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DomainError, VideoRecord


@dataclass(frozen=True)
class FrameFeatures:
    values: np.ndarray  # [num_frames, feature_dim]
    frame_indices: tuple[int, ...]

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])


def sample_indices(frame_count: int, n: int, offset: float | None = None) -> list[int]:
    """Centers of ``n`` equal bins over ``frame_count`` frames.

    ``offset`` in [0, 1) picks a different point inside every bin (training
    jitter); the default is the bin center.
    """
    if n < 1:
        raise DomainError(f"need at least one frame, got n={n}")
    if frame_count < 1:
        raise DomainError("video has no frames")
    if offset is None:
        return [min(frame_count - 1, ((2 * i + 1) * frame_count) // (2 * n)) for i in range(n)]
    return [min(frame_count - 1, int((i + offset) * frame_count / n)) for i in range(n)]


def sample_frames(video: VideoRecord, n: int, offset: float | None = None) -> FrameFeatures:
    idx = sample_indices(video.frame_count, n, offset)
    return FrameFeatures(values=np.asarray(video.frames[idx]), frame_indices=tuple(idx))


class VisionStub:
    """Fixed orthogonal projection of raw frame vectors; never trained."""

    def __init__(self, feature_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
        self.matrix = q * np.sign(np.diag(r))
        self.matrix.setflags(write=False)
        self.seed = seed

    def __call__(self, frames: FrameFeatures) -> FrameFeatures:
        return FrameFeatures(values=frames.values @ self.matrix, frame_indices=frames.frame_indices)
