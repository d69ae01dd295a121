"""Domain types and timeline normalization.

Every grounding in this package lives on an integer timeline of 0..100,
where 0 is the first instant of a video and 100 the last.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Sequence

import numpy as np

TIMELINE_MAX = 100

QUESTION_TYPES = ("why", "how", "present", "past", "future", "other")
PARSE_STATUSES = ("ok", "answer_only", "malformed")


class DomainError(ValueError):
    """A precondition on a value was violated."""


class GroundTruthAccessError(RuntimeError):
    """Raised when weakly supervised code tries to read a ground-truth segment."""


_GT_GUARD: contextvars.ContextVar[bool] = contextvars.ContextVar("gt_guard", default=False)


@contextlib.contextmanager
def forbid_gt_access() -> Iterator[None]:
    """Any read of ``QAItem.gt_segment`` inside this block raises."""
    token = _GT_GUARD.set(True)
    try:
        yield
    finally:
        _GT_GUARD.reset(token)


def gt_access_forbidden() -> bool:
    return _GT_GUARD.get()


def round_half_away(x: float) -> int:
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


@dataclass(frozen=True, order=True)
class TemporalSegment:
    start: int
    end: int

    def __post_init__(self) -> None:
        for v in (self.start, self.end):
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise DomainError(f"segment endpoints must be integers, got {v!r}")
        if not 0 <= self.start <= self.end <= TIMELINE_MAX:
            raise DomainError(f"invalid segment [{self.start}, {self.end}]")
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "end", int(self.end))

    def length(self) -> int:
        return self.end - self.start

    def center(self) -> float:
        return (self.start + self.end) / 2.0

    def __str__(self) -> str:
        return f"[{self.start}, {self.end}]"

    def to_list(self) -> list[int]:
        return [self.start, self.end]

    @classmethod
    def from_list(cls, value: Sequence[int]) -> "TemporalSegment":
        if len(value) != 2:
            raise DomainError(f"segment needs two endpoints, got {value!r}")
        return cls(int(value[0]), int(value[1]))


FULL_VIDEO = TemporalSegment(0, TIMELINE_MAX)


@dataclass(frozen=True)
class VideoRecord:
    """A video as an ordered stack of per-frame feature vectors."""

    video_id: str
    duration_seconds: float
    frames: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if not self.duration_seconds > 0:
            raise DomainError(f"duration must be positive, got {self.duration_seconds}")
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise DomainError(f"frames must be [frame_count, feature_dim], got shape {frames.shape}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frames.shape[1])

    def crop(self, segment: TemporalSegment) -> "VideoRecord":
        """Restrict to the frames covered by ``segment``; always keeps at least one frame."""
        n = self.frame_count
        lo = min(n - 1, int(math.floor(segment.start * n / TIMELINE_MAX)))
        hi = max(lo + 1, min(n, int(math.ceil(segment.end * n / TIMELINE_MAX))))
        start_s, end_s = denormalize_segment(segment, self.duration_seconds)
        return VideoRecord(
            video_id=self.video_id,
            duration_seconds=max(end_s - start_s, self.duration_seconds / n),
            frames=self.frames[lo:hi],
        )


@dataclass(frozen=True)
class QAItem:
    video_id: str
    question: str
    gt_answer: str
    options: Optional[tuple[str, ...]] = None
    question_type: str = "other"
    gt_segment: Optional[TemporalSegment] = None
    qid: str = ""
    extra: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.options is not None:
            opts = tuple(self.options)
            object.__setattr__(self, "options", opts)
            if len(opts) != 5:
                raise DomainError(f"options must have exactly 5 entries, got {len(opts)}")
            if self.gt_answer not in opts:
                raise DomainError("gt_answer must be one of the options")
        if self.question_type not in QUESTION_TYPES:
            raise DomainError(f"unknown question_type {self.question_type!r}")

    def __getattribute__(self, name: str) -> Any:
        if name == "gt_segment" and _GT_GUARD.get():
            raise GroundTruthAccessError("ground-truth segment read during weakly supervised processing")
        return object.__getattribute__(self, name)

    @property
    def gt_option_index(self) -> Optional[int]:
        if self.options is None:
            return None
        return self.options.index(self.gt_answer)

    def training_view(self) -> "QAItem":
        """Copy with the ground-truth segment removed."""
        return QAItem(
            video_id=self.video_id,
            question=self.question,
            gt_answer=self.gt_answer,
            options=self.options,
            question_type=self.question_type,
            gt_segment=None,
            qid=self.qid,
            extra=dict(self.extra),
        )


@dataclass(frozen=True)
class GroundedAnswer:
    answer: str
    segment: Optional[TemporalSegment] = None
    parse_status: str = "ok"

    def __post_init__(self) -> None:
        if self.parse_status not in PARSE_STATUSES:
            raise DomainError(f"unknown parse_status {self.parse_status!r}")


def normalize_segment(start_s: float, end_s: float, duration_s: float) -> TemporalSegment:
    """Map a [start, end] interval in seconds onto the integer 0..100 timeline."""
    if not duration_s > 0:
        raise DomainError(f"duration must be positive, got {duration_s}")
    if not 0 <= start_s <= end_s <= duration_s:
        raise DomainError(f"need 0 <= start <= end <= duration, got ({start_s}, {end_s}, {duration_s})")
    start = round_half_away(TIMELINE_MAX * start_s / duration_s)
    end = round_half_away(TIMELINE_MAX * end_s / duration_s)
    start = min(max(start, 0), TIMELINE_MAX)
    end = min(max(end, 0), TIMELINE_MAX)
    return TemporalSegment(start, end)


def denormalize_segment(seg: TemporalSegment, duration_s: float) -> tuple[float, float]:
    if not duration_s > 0:
        raise DomainError(f"duration must be positive, got {duration_s}")
    # clamp: seg.end * d / 100 can exceed d by one ulp
    return (min(seg.start * duration_s / TIMELINE_MAX, duration_s),
            min(seg.end * duration_s / TIMELINE_MAX, duration_s))
