"""Grounded-QA metrics and boundary error analysis.

Segments are compared on the integer 0..100 timeline. ``iou`` and ``iop``
also accept plain ``(start, end)`` pairs of reals so the same code can score
intervals in seconds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .core import DomainError, GroundedAnswer, QAItem, TemporalSegment
from .judge import JudgeError, JudgeVerdict

Interval = Union[TemporalSegment, Sequence[float]]

IOU_GATE = 0.5
BOUNDARY_MARGIN = 10
LENGTH_BUCKETS = ("short", "medium", "long")


def _bounds(x: Interval) -> tuple[float, float]:
    if isinstance(x, TemporalSegment):
        return x.start, x.end
    a, b = x
    if b < a:
        raise DomainError(f"interval end precedes start: {x!r}")
    return a, b


def iou(a: Interval, b: Interval) -> float:
    (a0, a1), (b0, b1) = _bounds(a), _bounds(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0) if inter > 0 else (a1 - a0) + (b1 - b0)
    if union == 0:
        # two zero-length points
        return 1.0 if (a0 == b0) else 0.0
    return inter / union


def iop(pred: Interval, gt: Interval) -> float:
    (p0, p1), (g0, g1) = _bounds(pred), _bounds(gt)
    if p1 == p0:
        return 1.0 if g0 <= p0 <= g1 else 0.0
    return max(0.0, min(p1, g1) - max(p0, g0)) / (p1 - p0)


def length_bucket(segment: TemporalSegment) -> str:
    n = segment.length()
    if n < 30:
        return "short"
    return "long" if n > 70 else "medium"


@dataclass(frozen=True)
class PredictionRecord:
    qa_item_ref: str
    grounded: GroundedAnswer
    chosen_option_index: Optional[int] = None
    open_verdict: Optional[JudgeVerdict] = None

    def __post_init__(self) -> None:
        if self.chosen_option_index is not None and not 0 <= self.chosen_option_index < 5:
            raise DomainError(f"option index {self.chosen_option_index} outside 0..4")

    def to_json(self) -> dict:
        seg = self.grounded.segment
        verdict = self.open_verdict
        return {
            "qa_item_ref": self.qa_item_ref,
            "answer": self.grounded.answer,
            "segment": seg.to_list() if seg else None,
            "parse_status": self.grounded.parse_status,
            "chosen_option_index": self.chosen_option_index,
            "open_verdict": None if verdict is None else {"match": verdict.match, "score": verdict.score},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "PredictionRecord":
        seg = d.get("segment")
        verdict = d.get("open_verdict")
        grounded = GroundedAnswer(str(d["answer"]), TemporalSegment.from_list(seg) if seg is not None else None,
                                  d.get("parse_status", "ok"))
        return cls(str(d["qa_item_ref"]), grounded, d.get("chosen_option_index"),
                   JudgeVerdict(bool(verdict["match"]), verdict.get("score")) if verdict else None)


def write_predictions(preds: Sequence[PredictionRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(PredictionRecord.from_json(json.loads(line)))
                except (ValueError, KeyError, TypeError) as e:
                    raise DomainError(f"{path}:{lineno}: {e}") from None
    return out


@dataclass(frozen=True)
class BoundaryStats:
    mean_center: float
    mean_length: float
    pct_start_at_0: float
    pct_end_at_100: float

    @classmethod
    def of(cls, segments: Sequence[TemporalSegment]) -> "BoundaryStats":
        n = len(segments)
        return cls(
            mean_center=sum(s.center() for s in segments) / n,
            mean_length=sum(s.length() for s in segments) / n,
            pct_start_at_0=100.0 * sum(s.start == 0 for s in segments) / n,
            pct_end_at_100=100.0 * sum(s.end == 100 for s in segments) / n,
        )


@dataclass(frozen=True)
class ErrorStats:
    n: int
    pct_early_start: float
    pct_late_start: float
    pct_early_end: float
    pct_late_end: float
    mae_start: float
    mae_end: float
    mae_center: float
    pred: BoundaryStats
    gt: BoundaryStats


def boundary_errors(pairs: Sequence[tuple[TemporalSegment, TemporalSegment]],
                    margin: int = BOUNDARY_MARGIN) -> ErrorStats:
    """Boundary bias over (predicted, ground-truth) segment pairs.

    A start is early when it precedes the true start by more than ``margin``
    units and late when it follows by more than ``margin``; ends likewise.
    """
    if not pairs:
        raise DomainError("error analysis needs at least one (prediction, ground truth) pair")
    n = len(pairs)

    def pct(flags) -> float:
        return 100.0 * sum(flags) / n

    return ErrorStats(
        n=n,
        pct_early_start=pct(p.start < g.start - margin for p, g in pairs),
        pct_late_start=pct(p.start > g.start + margin for p, g in pairs),
        pct_early_end=pct(p.end < g.end - margin for p, g in pairs),
        pct_late_end=pct(p.end > g.end + margin for p, g in pairs),
        mae_start=sum(abs(p.start - g.start) for p, g in pairs) / n,
        mae_end=sum(abs(p.end - g.end) for p, g in pairs) / n,
        mae_center=sum(abs(p.center() - g.center()) for p, g in pairs) / n,
        pred=BoundaryStats.of([p for p, _ in pairs]),
        gt=BoundaryStats.of([g for _, g in pairs]),
    )


@dataclass
class MetricsReport:
    n_items: int
    mIoU: float
    mIoP: float
    IoU_at_05: float
    IoP_at_05: float
    acc_QA: float
    acc_GQA: float
    open_acc_GQA: float
    n_grounded: int = 0
    by_question_type: dict[str, "MetricsReport"] = field(default_factory=dict)
    by_length_bucket: dict[str, Optional[float]] = field(default_factory=dict)
    error_stats: Optional[ErrorStats] = None

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("n_items", "n_grounded", "mIoU", "mIoP", "IoU_at_05", "IoP_at_05",
                                           "acc_QA", "acc_GQA", "open_acc_GQA")}
        d["by_length_bucket"] = dict(self.by_length_bucket)
        d["by_question_type"] = {t: r.to_json() for t, r in sorted(self.by_question_type.items())}
        d["error_stats"] = asdict(self.error_stats) if self.error_stats else None
        return d

    def to_flat(self) -> dict[str, str]:
        """Stable key=value view; rates are percentages with two decimals."""
        out = {"n_items": str(self.n_items), "n_grounded": str(self.n_grounded)}
        for key in ("mIoU", "mIoP", "IoU_at_05", "IoP_at_05", "acc_QA", "acc_GQA", "open_acc_GQA"):
            out[key] = f"{100 * getattr(self, key):.2f}"
        for b in LENGTH_BUCKETS:
            v = self.by_length_bucket.get(b)
            out[f"mIoU.{b}"] = "nan" if v is None else f"{100 * v:.2f}"
        for t, r in sorted(self.by_question_type.items()):
            for key in ("n_items", "mIoU", "acc_QA", "acc_GQA"):
                v = getattr(r, key)
                out[f"type.{t}.{key}"] = str(v) if key == "n_items" else f"{100 * v:.2f}"
        if self.error_stats:
            for k, v in _flatten(asdict(self.error_stats)).items():
                out[f"error.{k}"] = str(v) if k == "n" else f"{v:.2f}"
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, Mapping):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


@dataclass(frozen=True)
class _Scored:
    item: QAItem
    qa_ok: bool
    open_ok: bool
    iou: Optional[float]
    iop: Optional[float]
    pred_segment: Optional[TemporalSegment]


def _score(rec: PredictionRecord, item: QAItem, judge) -> _Scored:
    answer = rec.grounded.answer
    open_ok = rec.open_verdict.match if rec.open_verdict else None
    if open_ok is None:
        try:
            open_ok = judge.judge_open(item.question, answer, item.gt_answer, item_id=item.qid).match
        except JudgeError:
            open_ok = False
    if item.options:
        idx = rec.chosen_option_index
        if idx is None:
            try:
                idx = judge.retrieve_option(item.question, answer, item.options, item_id=item.qid)
            except JudgeError:
                idx = None
        qa_ok = idx is not None and idx == item.gt_option_index
    else:
        qa_ok = open_ok
    gt = item.gt_segment
    seg = rec.grounded.segment
    if gt is None:
        return _Scored(item, qa_ok, open_ok, None, None, seg)
    if seg is None:
        return _Scored(item, qa_ok, open_ok, 0.0, 0.0, None)
    return _Scored(item, qa_ok, open_ok, iou(seg, gt), iop(seg, gt), seg)


def _mean(xs) -> float:
    xs = list(xs)
    return float(sum(xs) / len(xs)) if xs else 0.0


def _report(scored: Sequence[_Scored], nested: bool) -> MetricsReport:
    g = [s for s in scored if s.iou is not None]
    rep = MetricsReport(
        n_items=len(scored),
        n_grounded=len(g),
        mIoU=_mean(s.iou for s in g),
        mIoP=_mean(s.iop for s in g),
        IoU_at_05=_mean(s.iou >= IOU_GATE for s in g),
        IoP_at_05=_mean(s.iop >= IOU_GATE for s in g),
        acc_QA=_mean(s.qa_ok for s in scored),
        acc_GQA=_mean(s.qa_ok and s.iop >= IOU_GATE for s in g),
        open_acc_GQA=_mean(s.open_ok and s.iop >= IOU_GATE for s in g),
    )
    if nested:
        for b in LENGTH_BUCKETS:
            members = [s.iou for s in g if length_bucket(s.item.gt_segment) == b]
            rep.by_length_bucket[b] = _mean(members) if members else None
        types = sorted({s.item.question_type for s in scored})
        rep.by_question_type = {t: _report([s for s in scored if s.item.question_type == t], False) for t in types}
        pairs = [(s.pred_segment, s.item.gt_segment) for s in g if s.pred_segment is not None]
        rep.error_stats = boundary_errors(pairs) if pairs else None
    return rep


def evaluate(preds: Sequence[PredictionRecord], items: Sequence[QAItem], judge) -> MetricsReport:
    """Score one prediction per item.

    Predictions are matched to items by ``qa_item_ref == item.qid``. Items
    without a ground-truth segment count for answer accuracy only; a missing
    predicted segment scores zero on every grounding metric.
    """
    if len(preds) != len(items):
        raise DomainError(f"{len(preds)} predictions for {len(items)} items")
    by_ref = {p.qa_item_ref: p for p in preds}
    if len(by_ref) != len(preds):
        raise DomainError("duplicate prediction references")
    missing = [it.qid for it in items if it.qid not in by_ref]
    if missing:
        raise DomainError(f"no prediction for items {missing[:5]}")
    order = sorted(items, key=lambda it: it.qid)
    return _report([_score(by_ref[it.qid], it, judge) for it in order], nested=True)


def error_analysis(preds: Sequence[PredictionRecord], items: Sequence[QAItem],
                   margin: int = BOUNDARY_MARGIN) -> ErrorStats:
    """``boundary_errors`` over items that have both a true and a predicted segment."""
    by_ref = {p.qa_item_ref: p for p in preds}
    pairs = []
    for it in items:
        rec = by_ref.get(it.qid)
        if rec is not None and rec.grounded.segment is not None and it.gt_segment is not None:
            pairs.append((rec.grounded.segment, it.gt_segment))
    return boundary_errors(pairs, margin)


def random_segment_baseline(gt_segments: Sequence[TemporalSegment], seed: int = 0, draws: int = 100) -> float:
    """Mean IoU of random guesses that share the ground-truth length statistics.

    Every guess takes the length of a randomly drawn ground-truth segment and
    a uniform start that keeps it on the timeline.
    """
    if not gt_segments:
        raise DomainError("baseline needs ground-truth segments")
    rng = np.random.default_rng(seed)
    lengths = np.array([s.length() for s in gt_segments])
    total = 0.0
    for _ in range(draws):
        for gt in gt_segments:
            n = int(lengths[rng.integers(len(lengths))])
            start = int(rng.integers(0, 100 - n + 1))
            total += iou(TemporalSegment(start, start + n), gt)
    return total / (draws * len(gt_segments))
