"""Dataset manifests and the synthetic planted-event corpus.

On-disk layout of one split directory::

    manifest.jsonl     line 1: JSON header (schema, name, split, videos)
                       lines 2..: one QA item per line
    frames/<id>.bin    per-video frame features
    events.jsonl       planted windows (synthetic only, evaluation side)

Frame file layout, little-endian: 4-byte magic ``GVQF``, uint32 version (1),
uint32 rows, uint32 cols, then rows*cols float32 values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import (
    DomainError,
    QAItem,
    TemporalSegment,
    VideoRecord,
    normalize_segment,
)

MANIFEST_SCHEMA = "groundvqa-manifest"
MANIFEST_VERSION = 1
FRAME_MAGIC = b"GVQF"
FRAME_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sIII")
CAPTION_JOINER = " then "

_ITEM_KEYS = ("qid", "video_id", "question", "answer", "options", "question_type", "gt_segment")
# NExT-QA style type codes
NEXT_TYPE_MAP = {"CW": "why", "CH": "how", "TC": "present", "TP": "past", "TN": "future",
                 "DC": "other", "DL": "other", "DO": "other", "DB": "other"}


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- frames

def write_frames(path: str | os.PathLike, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 2:
        raise DomainError("frames must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_frames(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FRAME_HEADER.size:
        raise ManifestError(f"{path}: truncated frame file")
    magic, version, rows, cols = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC or version != FRAME_VERSION:
        raise ManifestError(f"{path}: not a version-{FRAME_VERSION} frame file")
    body = raw[_FRAME_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise ManifestError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


# ---------------------------------------------------------------- manifests

@dataclass
class DatasetManifest:
    name: str
    split: str
    items: list[QAItem]
    videos: dict[str, VideoRecord]
    captions: dict[str, str] = field(default_factory=dict)
    # planted windows per video: evaluation-side only, never given to training
    events: dict[str, list[dict]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ManifestError(f"split must be train or test, got {self.split!r}")
        missing = sorted({it.video_id for it in self.items} - set(self.videos))
        if missing:
            raise ManifestError(f"items reference unknown videos: {missing[:5]}")

    def items_for(self, video_id: str) -> list[QAItem]:
        return [it for it in self.items if it.video_id == video_id]

    def training_items(self) -> list[QAItem]:
        return [it.training_view() for it in self.items]


def _item_to_json(item: QAItem) -> dict:
    d: dict[str, Any] = {
        "qid": item.qid,
        "video_id": item.video_id,
        "question": item.question,
        "answer": item.gt_answer,
    }
    if item.options is not None:
        d["options"] = list(item.options)
    d["question_type"] = item.question_type
    if item.gt_segment is not None:
        d["gt_segment"] = item.gt_segment.to_list()
    d.update(item.extra)
    return d


def _parse_nextgqa(raw: dict, videos: dict, lineno: int) -> dict:
    """Convert a NExT-GQA style row (a0..a4, answer index, type code) to our keys."""
    out = {k: v for k, v in raw.items() if k not in ("a0", "a1", "a2", "a3", "a4", "type", "answer",
                                                     "location", "duration")}
    try:
        options = [raw[f"a{i}"] for i in range(5)]
    except KeyError as e:
        raise ManifestError(f"line {lineno}: field 'options': missing {e.args[0]}") from None
    out["options"] = options
    ans = raw.get("answer")
    out["answer"] = options[int(ans)] if isinstance(ans, int) or str(ans).isdigit() else ans
    code = str(raw.get("type", "")).upper()
    out["question_type"] = NEXT_TYPE_MAP.get(code, "other")
    out["qid"] = str(raw.get("qid", ""))
    if "location" in raw:
        duration = float(raw.get("duration") or videos[raw["video_id"]].duration_seconds)
        start_s, end_s = (float(x) for x in raw["location"])
        seg = normalize_segment(max(0.0, start_s), min(end_s, duration), duration)
        out["gt_segment"] = seg.to_list()
    return out


def _item_from_json(raw: dict, videos: dict, lineno: int) -> QAItem:
    if "a0" in raw and "type" in raw:
        raw = _parse_nextgqa(raw, videos, lineno)
    for key in ("video_id", "question", "answer"):
        if key not in raw:
            raise ManifestError(f"line {lineno}: missing field '{key}'")
    if raw["video_id"] not in videos:
        raise ManifestError(f"line {lineno}: field 'video_id': unknown video {raw['video_id']!r}")
    options = raw.get("options")
    if options is not None and len(options) != 5:
        raise ManifestError(f"line {lineno}: field 'options' must have exactly 5 entries, got {len(options)}")
    seg = raw.get("gt_segment")
    try:
        item = QAItem(
            video_id=raw["video_id"],
            question=raw["question"],
            gt_answer=raw["answer"],
            options=tuple(options) if options is not None else None,
            question_type=raw.get("question_type", "other"),
            gt_segment=TemporalSegment.from_list(seg) if seg is not None else None,
            qid=str(raw.get("qid", "")),
            extra={k: v for k, v in raw.items() if k not in _ITEM_KEYS},
        )
    except DomainError as e:
        raise ManifestError(f"line {lineno}: {e}") from None
    return item


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False)


def save_manifest(manifest: DatasetManifest, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    video_entries = []
    for vid, video in manifest.videos.items():
        rel = f"frames/{vid}.bin"
        write_frames(d / rel, video.frames)
        entry = {"video_id": vid, "duration_seconds": video.duration_seconds, "frames": rel}
        if vid in manifest.captions:
            entry["caption"] = manifest.captions[vid]
        video_entries.append(entry)
    header = {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION, "name": manifest.name,
              "split": manifest.split, "videos": video_entries}
    lines = [_dumps(header)] + [_dumps(_item_to_json(it)) for it in manifest.items]
    path = d / "manifest.jsonl"
    tmp = d / ".manifest.jsonl.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    # planted windows are ground truth: only the test split carries them to disk
    if manifest.events and manifest.split == "test":
        ev_lines = [_dumps({"video_id": vid, "events": evs}) for vid, evs in manifest.events.items()]
        (d / "events.jsonl").write_text("\n".join(ev_lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load ``manifest.jsonl`` (or a directory holding it)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise ManifestError(f"{p}: no such manifest")
    lines = p.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{p}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"line 1: invalid JSON header ({e.msg})") from None
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(f"line 1: field 'schema' must be {MANIFEST_SCHEMA!r}")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"line 1: unsupported manifest version {header.get('version')!r}")
    videos: dict[str, VideoRecord] = {}
    captions: dict[str, str] = {}
    for entry in header.get("videos", []):
        try:
            frames = read_frames(p.parent / entry["frames"])
            videos[entry["video_id"]] = VideoRecord(entry["video_id"], float(entry["duration_seconds"]), frames)
        except (KeyError, DomainError) as e:
            raise ManifestError(f"line 1: bad video entry {entry.get('video_id')!r}: {e}") from None
        if "caption" in entry:
            captions[entry["video_id"]] = entry["caption"]
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {lineno}: invalid JSON ({e.msg})") from None
        items.append(_item_from_json(raw, videos, lineno))
    events: dict[str, list[dict]] = {}
    ev_path = p.parent / "events.jsonl"
    if ev_path.exists():
        for line in ev_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                events[rec["video_id"]] = rec["events"]
    return DatasetManifest(header.get("name", ""), header.get("split", "test"), items, videos, captions, events)


# ---------------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class Motif:
    motif_id: str
    answer_text: str
    category: str
    question_templates: tuple[tuple[str, str], ...]  # (question, question_type)


_CATEGORY_QUESTIONS = {
    "animal": (("what is the animal doing ?", "present"), ("why did the animal move ?", "why"),
               ("what did the animal do ?", "past")),
    "person": (("what does the person do ?", "present"), ("how does the person spend the time ?", "how"),
               ("what will the person do next ?", "future")),
    "vehicle": (("what happens to the vehicle ?", "present"), ("how does the vehicle behave ?", "how"),
                ("what did the vehicle do ?", "past")),
}
_CATEGORY_ANSWERS = {
    "animal": ("dog barks", "cat sleeps", "bird sings", "horse runs"),
    "person": ("man cooks", "woman dances", "boy jumps", "girl reads"),
    "vehicle": ("car stops", "bus turns", "train arrives", "bike falls"),
}

DEFAULT_MOTIFS: tuple[Motif, ...] = tuple(
    Motif(f"{cat}{i}", ans, cat, _CATEGORY_QUESTIONS[cat])
    for cat, answers in _CATEGORY_ANSWERS.items()
    for i, ans in enumerate(answers)
)

# (min_len, max_len, weight) on the timeline; mostly short events
DEFAULT_LENGTH_BUCKETS = ((8, 29, 0.6), (30, 70, 0.25), (71, 88, 0.15))


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 50
    n_test_videos: int = 20
    frames_per_video: int = 100
    feature_dim: int = 32
    events_per_video: int = 2
    motif_vocabulary: tuple[Motif, ...] = DEFAULT_MOTIFS
    noise_std: float = 0.5
    seed: int = 0
    length_buckets: tuple[tuple[int, int, float], ...] = DEFAULT_LENGTH_BUCKETS
    min_motif_distance: float = 4.0
    min_gap: int = 4
    duration_range: tuple[float, float] = (20.0, 60.0)
    name: str = "synthetic"

    def __post_init__(self) -> None:
        cats = {m.category for m in self.motif_vocabulary}
        if self.events_per_video < 1 or self.events_per_video > len(cats):
            raise DomainError("events_per_video must be between 1 and the number of motif categories")
        if len({m.answer_text for m in self.motif_vocabulary}) < 5:
            raise DomainError("need at least 5 distinct answers to build options")
        shortest = min(b[0] for b in self.length_buckets)
        if self.events_per_video * shortest + (self.events_per_video - 1) * self.min_gap > 100:
            raise DomainError("infeasible packing: planted events cannot fit on the timeline")


def motif_vectors(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = len(spec.motif_vocabulary)
    for _ in range(1000):
        vecs = rng.standard_normal((n, spec.feature_dim))
        d = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
        if n == 1 or d[~np.eye(n, dtype=bool)].min() >= spec.min_motif_distance:
            return vecs
    raise DomainError("could not draw pairwise-distinguishable motifs; lower min_motif_distance")


def _draw_lengths(spec: SyntheticSpec, rng: np.random.Generator, k: int) -> list[int]:
    weights = np.array([b[2] for b in spec.length_buckets], dtype=float)
    weights /= weights.sum()
    budget = 100 - (k - 1) * spec.min_gap
    for _ in range(1000):
        lengths = []
        for _ in range(k):
            lo, hi, _w = spec.length_buckets[rng.choice(len(weights), p=weights)]
            lengths.append(int(rng.integers(lo, hi + 1)))
        if sum(lengths) <= budget:
            return lengths
    raise DomainError("infeasible packing: could not fit planted events after 1000 draws")


def _place(lengths: list[int], rng: np.random.Generator, min_gap: int) -> list[tuple[int, int]]:
    """Non-overlapping windows in the given order with random slack between them."""
    k = len(lengths)
    slack = 100 - sum(lengths) - (k - 1) * min_gap
    cuts = np.sort(rng.integers(0, slack + 1, size=k))
    windows, cursor = [], 0
    for i, length in enumerate(lengths):
        start = cursor + int(cuts[i]) - (int(cuts[i - 1]) if i else 0)
        windows.append((start, start + length))
        cursor = start + length + min_gap
    return windows


def _options(answer: str, motif: Motif, spec: SyntheticSpec, rng: np.random.Generator) -> tuple[str, ...]:
    same = [m.answer_text for m in spec.motif_vocabulary if m.category == motif.category and m.answer_text != answer]
    other = [m.answer_text for m in spec.motif_vocabulary if m.category != motif.category]
    rng.shuffle(same)
    rng.shuffle(other)
    distractors = (same + other)[:4]
    opts = [answer] + distractors
    order = rng.permutation(5)
    return tuple(opts[i] for i in order)


def _make_split(spec: SyntheticSpec, split: str, n: int, rng: np.random.Generator,
                vectors: np.ndarray) -> DatasetManifest:
    motifs = spec.motif_vocabulary
    by_cat: dict[str, list[int]] = {}
    for i, m in enumerate(motifs):
        by_cat.setdefault(m.category, []).append(i)
    cats = sorted(by_cat)
    videos: dict[str, VideoRecord] = {}
    items: list[QAItem] = []
    captions: dict[str, str] = {}
    events: dict[str, list[dict]] = {}
    fpv = spec.frames_per_video
    for v in range(n):
        vid = f"{split}{v:04d}"
        k = int(rng.integers(1, spec.events_per_video + 1))
        chosen_cats = [cats[i] for i in rng.permutation(len(cats))[:k]]
        motif_idx = [by_cat[c][int(rng.integers(len(by_cat[c])))] for c in chosen_cats]
        windows = _place(_draw_lengths(spec, rng, k), rng, spec.min_gap)
        frames = rng.standard_normal((fpv, spec.feature_dim)) * spec.noise_std
        duration = float(rng.uniform(*spec.duration_range))
        evs = []
        for mi, (s, e) in zip(motif_idx, windows):
            lo, hi = s * fpv // 100, max(s * fpv // 100 + 1, e * fpv // 100)
            frames[lo:hi] = vectors[mi] + rng.standard_normal((hi - lo, spec.feature_dim)) * spec.noise_std
            evs.append({"motif_id": motifs[mi].motif_id, "answer": motifs[mi].answer_text,
                        "segment": [s, e]})
        videos[vid] = VideoRecord(vid, round(duration, 3), frames.astype(np.float32))
        captions[vid] = CAPTION_JOINER.join(motifs[mi].answer_text for mi in motif_idx)
        events[vid] = evs
        for j, (mi, (s, e)) in enumerate(zip(motif_idx, windows)):
            m = motifs[mi]
            question, qtype = m.question_templates[int(rng.integers(len(m.question_templates)))]
            items.append(QAItem(
                video_id=vid,
                question=question,
                gt_answer=m.answer_text,
                options=_options(m.answer_text, m, spec, rng),
                question_type=qtype,
                gt_segment=TemporalSegment(s, e) if split == "test" else None,
                qid=f"{vid}_q{j}",
            ))
    return DatasetManifest(f"{spec.name}-{split}", split, items, videos, captions, events)


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Train and test manifests; identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    vectors = motif_vectors(spec, rng)
    train = _make_split(spec, "train", spec.n_videos, rng, vectors)
    test = _make_split(spec, "test", spec.n_test_videos, rng, vectors)
    return train, test


def corpus_texts(manifests: Sequence[DatasetManifest]) -> list[str]:
    """Every question, answer, option and caption; used to build a vocabulary."""
    texts: list[str] = []
    for m in manifests:
        texts += list(m.captions.values())
        for it in m.items:
            texts += [it.question, it.gt_answer] + list(it.options or ())
    return texts
