"""Pseudo temporal labels and the consistency filter.

Segments are cropped from training videos, captioned by the aligned model as
if they were whole videos, and paired into a referring question
("What is happening in [s, e]?") and a grounding question whose target is
``description [s, e]``. The filter keeps a label only when the model's answer
to the referring question agrees with the description and the description
agrees with an annotated answer for the video.

Nothing here reads ``QAItem.gt_segment``; the public entry points run under
``forbid_gt_access``.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import DomainError, QAItem, TemporalSegment, VideoRecord, forbid_gt_access, round_half_away
from .grounding_format import OutputFormat, PromptStyle, with_reference
from .judge import JudgeError

PSEUDO_LABEL_SCHEMA = "groundvqa-pseudolabel/1"
CAPTION_QUESTION = "describe the video ."
REFERRING_QUESTION = "What is happening?"
GENERIC_GROUNDING_QUESTION = "What is happening?"


@dataclass(frozen=True)
class SegmentSamplingPolicy:
    segments_per_video: int = 16
    min_length_frac: float = 0.1
    max_length_frac: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.segments_per_video < 1:
            raise DomainError("segments_per_video must be positive")
        if not 0 < self.min_length_frac <= self.max_length_frac <= 1:
            raise DomainError("need 0 < min_length_frac <= max_length_frac <= 1")

    @property
    def length_range(self) -> tuple[int, int]:
        return round_half_away(100 * self.min_length_frac), round_half_away(100 * self.max_length_frac)


@dataclass(frozen=True)
class PseudoLabel:
    video_id: str
    segment: TemporalSegment
    description: str
    grounding_question: str
    referring_answer: str = ""
    representation: str = "0-100"
    gt_answer: Optional[str] = None
    consistency_score: float = 0.0
    accepted: bool = False
    reason: str = "unchecked"

    def grounding_target(self, answer: Optional[str] = None) -> str:
        """``answer [s, e]``; the description stands in when no answer is given."""
        return f"{answer or self.description} {PromptStyle(self.representation).segment(self.segment)}"

    @property
    def referring_question(self) -> str:
        return with_reference(REFERRING_QUESTION, self.segment, self.representation)

    def to_json(self) -> dict:
        d = asdict(self)
        d["segment"] = self.segment.to_list()
        d["referring_question"] = self.referring_question
        return {"schema": PSEUDO_LABEL_SCHEMA, **d}

    @classmethod
    def from_json(cls, d: Mapping) -> "PseudoLabel":
        if d.get("schema") != PSEUDO_LABEL_SCHEMA:
            raise DomainError(f"unsupported pseudo-label schema {d.get('schema')!r}")
        fields = {k: v for k, v in d.items() if k not in ("schema", "referring_question")}
        fields["segment"] = TemporalSegment.from_list(fields["segment"])
        return cls(**fields)


def _video_rng(seed: int, video_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(video_id.encode("utf-8"))])


def sample_segments(policy: SegmentSamplingPolicy, video: VideoRecord) -> list[TemporalSegment]:
    """Random windows with uniform length and uniform start; seeded per video."""
    rng = _video_rng(policy.seed, video.video_id)
    lo, hi = policy.length_range
    out = []
    for _ in range(policy.segments_per_video):
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, 100 - length + 1))
        out.append(TemporalSegment(start, start + length))
    return out


def caption_segments(model, videos: Sequence[VideoRecord], segments: Sequence[TemporalSegment],
                     style: PromptStyle = PromptStyle()) -> list[str]:
    """Describe each cropped segment as though it were a whole video."""
    from .model import generate

    crops = [v.crop(s) for v, s in zip(videos, segments)]
    prompt = style.prompt(CAPTION_QUESTION, OutputFormat.ANSWER_ONLY)
    return generate(model, crops, [prompt] * len(crops))


def caption_segment(model, video: VideoRecord, segment: TemporalSegment,
                    style: PromptStyle = PromptStyle()) -> str:
    return caption_segments(model, [video], [segment], style)[0]


def _best_match(judge, description: str, qa_items: Sequence[QAItem]) -> Optional[QAItem]:
    best, best_score = None, -1.0
    for it in qa_items:
        try:
            verdict = judge.judge_open(it.question, description, it.gt_answer, item_id=it.qid)
        except JudgeError:
            continue
        score = verdict.score or 0
        if verdict.match and score > best_score:
            best, best_score = it, score
    return best


def build_pairs(segment: TemporalSegment, description: str, qa_items_for_video: Sequence[QAItem],
                judge=None, representation: str = "0-100") -> tuple[str, str, Optional[str]]:
    """Return (grounding_question, referring_question, matched gt answer).

    The grounding question is the annotated question whose answer the judge
    matches to the description, or a generic one when none does.
    """
    if not description.strip():
        raise DomainError("description must be non-empty")
    referring = with_reference(REFERRING_QUESTION, segment, representation)
    match = _best_match(judge, description, qa_items_for_video) if (judge and qa_items_for_video) else None
    if match is None:
        return GENERIC_GROUNDING_QUESTION, referring, None
    return match.question, referring, match.gt_answer


def generate_pseudo_labels(model, videos: Mapping[str, VideoRecord], qa_items: Sequence[QAItem],
                           policy: SegmentSamplingPolicy, judge,
                           style: PromptStyle = PromptStyle()) -> list[PseudoLabel]:
    """Unfiltered pseudo labels for every video in ``videos``."""
    with forbid_gt_access():
        by_video: dict[str, list[QAItem]] = {}
        for it in qa_items:
            by_video.setdefault(it.video_id, []).append(it)
        vids, segs = [], []
        for vid in sorted(videos):
            for seg in sample_segments(policy, videos[vid]):
                vids.append(vid)
                segs.append(seg)
        descriptions = caption_segments(model, [videos[v] for v in vids], segs, style)
        labels = []
        for vid, seg, desc in zip(vids, segs, descriptions):
            if not desc.strip():
                continue
            gq, _, gt = build_pairs(seg, desc, by_video.get(vid, []), judge, style.representation)
            labels.append(PseudoLabel(vid, seg, desc, gq, gt_answer=gt, representation=style.representation))
        return labels


ReferringAnswerer = Callable[[Sequence[PseudoLabel], Mapping[str, VideoRecord]], Sequence[str]]


def answer_referring(model, labels: Sequence[PseudoLabel], videos: Mapping[str, VideoRecord],
                     style: PromptStyle = PromptStyle()) -> list[str]:
    from .model import generate

    prompts = [style.prompt(lab.referring_question, OutputFormat.ANSWER_ONLY) for lab in labels]
    return generate(model, [videos[lab.video_id] for lab in labels], prompts)


def _agreement(judge, question: str, a: str, b: str) -> tuple[bool, float]:
    v = judge.judge_open(question, a, b)
    if hasattr(judge, "similarity") and getattr(judge, "name", "") == "lexical":
        return v.match, judge.similarity(a, b)
    return v.match, (v.score or 0) / 5.0


def check_consistency(model: Union[ReferringAnswerer, object], labels: Sequence[PseudoLabel],
                      videos: Mapping[str, VideoRecord], judge,
                      style: PromptStyle = PromptStyle()) -> list[PseudoLabel]:
    """Annotate every label with its referring answer, score and verdict.

    ``model`` is a model state or any callable mapping (labels, videos) to
    referring answers.
    """
    with forbid_gt_access():
        if callable(model):
            answers = list(model(labels, videos))
        else:
            answers = answer_referring(model, labels, videos, style)
        out = []
        for lab, ans in zip(labels, answers):
            try:
                self_ok, self_score = _agreement(judge, lab.referring_question, ans, lab.description)
                score, reason = self_score, ("ok" if self_ok else "referring answer disagrees")
                ok = self_ok
                if lab.gt_answer is not None:
                    gt_ok, gt_score = _agreement(judge, lab.grounding_question, lab.description, lab.gt_answer)
                    score = min(score, gt_score)
                    if ok and not gt_ok:
                        reason = "description disagrees with annotated answer"
                    ok = ok and gt_ok
                else:
                    ok, reason = False, "no annotated answer matches the description"
            except JudgeError as e:
                ok, score, reason = False, 0.0, f"judge failure: {e}"
            out.append(replace(lab, referring_answer=ans, consistency_score=float(score),
                               accepted=bool(ok), reason=reason))
        return out


def consistency_filter(model, pseudo_labels: Sequence[PseudoLabel], videos: Mapping[str, VideoRecord],
                       judge, style: PromptStyle = PromptStyle()) -> list[PseudoLabel]:
    """Accepted labels only; a subset of the input in input order."""
    return [lab for lab in check_consistency(model, pseudo_labels, videos, judge, style) if lab.accepted]


def write_labels(labels: Sequence[PseudoLabel], path: str | os.PathLike) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_json(), ensure_ascii=False) + "\n")
    os.replace(tmp, p)


def read_labels(path: str | os.PathLike) -> list[PseudoLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(PseudoLabel.from_json(json.loads(line)))
                except (ValueError, KeyError, TypeError) as e:
                    raise DomainError(f"{path}:{lineno}: {e}") from None
    return out
