"""Stage orchestration: decoder warm start, align, ground and consist.

Each stage freezes every parameter group outside ``StageConfig.trainable``,
runs AdamW under a warmup-plus-cosine schedule and appends its tag to the
model's provenance. ``ground`` refuses a model without the ``align`` tag and
``consist`` one without ``ground``. All stages run with ground-truth segment
access disabled.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .core import TIMELINE_MAX, DomainError, QAItem, TemporalSegment, VideoRecord, forbid_gt_access, round_half_away
from .data import CAPTION_JOINER, DatasetManifest
from .grounding_format import OutputFormat, PromptStyle
from .model import ModelState, NonFiniteLossError, OptimizerConfig, make_batch, training_step
from .model.lm import encode_prompt
from .weaksup import CAPTION_QUESTION, REFERRING_QUESTION, PseudoLabel

STAGES = ("align", "ground", "consist")
PRETRAIN_TAG = "lm"
_REQUIRED = {"align": None, "ground": "align", "consist": "ground"}
_TRAINABLE = {"align": frozenset({"connector"}),
              "ground": frozenset({"connector", "decoder"}),
              "consist": frozenset({"connector", "decoder"})}


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``state`` holds the last good parameters."""

    def __init__(self, message: str, state: ModelState, log: "TrainLog"):
        super().__init__(message)
        self.state = state
        self.log = log


@dataclass(frozen=True)
class StageConfig:
    stage: str
    learning_rate: float
    batch_size: int
    epochs: int = 1
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    weight_decay: float = 0.0
    max_sequence_length: int = 2048
    trainable: frozenset = frozenset()
    # desk-scale extras: frame-sampling jitter and additive feature noise
    frame_jitter: bool = False
    feature_noise: float = 0.0
    crop_prob: float = 0.0
    reverse_prob: float = 0.0
    roll_prob: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise DomainError(f"unknown stage {self.stage!r}")
        if self.schedule != "cosine":
            raise DomainError("only the cosine schedule is supported")
        if set(self.trainable) != _TRAINABLE[self.stage]:
            raise DomainError(f"stage {self.stage} trains exactly {sorted(_TRAINABLE[self.stage])}")
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise DomainError("batch_size, epochs and learning_rate must be positive")
        if not 0.0 <= self.crop_prob <= 1.0:
            raise DomainError("crop_prob must lie in [0, 1]")

    @classmethod
    def full(cls, stage: str) -> "StageConfig":
        """Settings of the full-scale recipe (not runnable on the desk backend)."""
        return cls(stage, 1e-3 if stage == "align" else 2e-5, 256 if stage == "align" else 128,
                   trainable=_TRAINABLE[stage])

    @classmethod
    def desk(cls, stage: str, epochs: Optional[int] = None, seed: int = 0) -> "StageConfig":
        preset = DESK_PRESETS[stage]
        return cls(stage, preset["learning_rate"], 16, epochs or preset["epochs"],
                   max_sequence_length=96, trainable=_TRAINABLE[stage],
                   frame_jitter=True, feature_noise=preset["feature_noise"],
                   crop_prob=preset["crop_prob"], seed=seed)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["trainable"] = sorted(self.trainable)
        return d


DESK_PRESETS = {
    "align": {"learning_rate": 1e-3, "epochs": 150, "feature_noise": 0.5, "crop_prob": 0.0},
    "ground": {"learning_rate": 1e-3, "epochs": 8, "feature_noise": 0.5, "crop_prob": 0.9},
    "consist": {"learning_rate": 1e-3, "epochs": 8, "feature_noise": 0.5, "crop_prob": 0.9},
}


@dataclass
class TrainLog:
    stage: str
    steps: list[dict] = field(default_factory=list)

    def record(self, step: int, loss: float, lr: float, wall: float) -> None:
        if not math.isfinite(loss):
            raise DomainError("TrainLog only holds finite losses")
        self.steps.append({"stage": self.stage, "step": step, "loss": loss, "lr": lr, "wall_time": wall})

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    @property
    def lrs(self) -> list[float]:
        return [s["lr"] for s in self.steps]

    def write(self, path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(json.dumps(s) + "\n")

    @classmethod
    def read(cls, path) -> list["TrainLog"]:
        logs: dict[str, TrainLog] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                s = json.loads(line)
                logs.setdefault(s["stage"], cls(s["stage"])).steps.append(s)
        return list(logs.values())


@dataclass(frozen=True)
class Example:
    video: Optional[VideoRecord]
    prompt: str
    response: str
    # set on examples that mention a segment, so crops can re-render them
    segment: Optional[TemporalSegment] = None
    render: Optional[Callable[[TemporalSegment], tuple[str, str]]] = None
    # target for the time-reversed video; None when the target is order-dependent and unknown
    reversed_response: Optional[str] = None


def temporal_roll(ex: Example, rng: np.random.Generator) -> Example:
    """Circularly shift the frames so ``ex.segment`` lands at a random start.

    Unlike a crop this keeps the segment's length, so the label length
    distribution is unchanged.
    """
    if ex.segment is None or ex.render is None or ex.video is None:
        return ex
    seg = ex.segment
    new_start = int(rng.integers(0, TIMELINE_MAX - seg.length() + 1))
    n = ex.video.frame_count
    shift = round_half_away((new_start - seg.start) * n / TIMELINE_MAX)
    frames = np.roll(ex.video.frames, shift, axis=0)
    moved = TemporalSegment(new_start, new_start + seg.length())
    prompt, response = ex.render(moved)
    return Example(VideoRecord(ex.video.video_id, ex.video.duration_seconds, frames), prompt, response,
                   segment=moved, render=ex.render)


def time_reverse(ex: Example) -> Example:
    """Play the video backwards and mirror any segment; unchanged when not reversible."""
    if ex.video is None:
        return ex
    video = VideoRecord(ex.video.video_id, ex.video.duration_seconds, ex.video.frames[::-1])
    if ex.segment is not None and ex.render is not None:
        seg = TemporalSegment(TIMELINE_MAX - ex.segment.end, TIMELINE_MAX - ex.segment.start)
        return Example(video, *ex.render(seg), segment=seg, render=ex.render, reversed_response=None)
    if ex.reversed_response is None:
        return ex
    return Example(video, ex.prompt, ex.reversed_response, reversed_response=ex.response)


def temporal_crop(ex: Example, rng: np.random.Generator, min_window: int = 20) -> Example:
    """Crop the video to a random window that contains ``ex.segment``.

    The segment is re-expressed on the cropped video's own 0..100 timeline,
    so the same event appears at a new position and scale.
    """
    if ex.segment is None or ex.render is None:
        return ex
    s, e = ex.segment.start, ex.segment.end
    a, b = int(rng.integers(0, s + 1)), int(rng.integers(e, TIMELINE_MAX + 1))
    while b - a < min_window:
        a, b = max(0, a - 1), min(TIMELINE_MAX, b + 1)
    if (a, b) == (0, TIMELINE_MAX):
        return ex
    width = b - a
    seg = TemporalSegment(round_half_away(TIMELINE_MAX * (s - a) / width),
                          round_half_away(TIMELINE_MAX * (e - a) / width))
    prompt, response = ex.render(seg)
    return Example(ex.video.crop(TemporalSegment(a, b)), prompt, response)


def _check_lengths(state: ModelState, examples: Sequence[Example], limit: int) -> None:
    tok = state.tokenizer
    longest = max(len(encode_prompt(state, e.prompt)[0]) + len(tok.encode(e.response)) + 1 for e in examples)
    if longest > min(limit, state.cfg.max_len):
        raise DomainError(f"example of {longest} tokens exceeds the limit {min(limit, state.cfg.max_len)}")


def _train(state: ModelState, examples: Sequence[Example], cfg: StageConfig, tag: str) -> TrainLog:
    if not examples:
        raise DomainError(f"stage {tag} has no training examples")
    _check_lengths(state, examples, cfg.max_sequence_length)
    state.set_trainable(sorted(cfg.trainable))
    total = math.ceil(len(examples) * cfg.epochs / cfg.batch_size)
    opt = OptimizerConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                          warmup_ratio=cfg.warmup_ratio, total_steps=total)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    order = np.concatenate([rng.permutation(len(examples)) for _ in range(cfg.epochs + 1)])
    log = TrainLog(tag)
    good = state.snapshot()
    t0 = time.perf_counter()
    for step in range(total):
        idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        chunk = [_augment(examples[i], cfg, rng) for i in idx]
        batch = make_batch(state, [e.video for e in chunk], [e.prompt for e in chunk],
                           [e.response for e in chunk], rng=rng if cfg.frame_jitter else None)
        if cfg.feature_noise:
            batch.dense = batch.dense + cfg.feature_noise * torch.randn_like(batch.dense)
            batch.sparse = batch.sparse + cfg.feature_noise * torch.randn_like(batch.sparse)
        try:
            state, loss = training_step(state, batch, opt)
            if not all(torch.isfinite(p).all() for p in state.trainable_parameters()):
                raise NonFiniteLossError(f"parameters became non-finite at step {step}")
        except NonFiniteLossError as e:
            state.model.load_state_dict({k: torch.from_numpy(v) for k, v in good.items()})
            raise TrainingAborted(f"{tag}: {e}", state, log) from e
        log.record(step, loss, state.last_lr, time.perf_counter() - t0)
        if step % 25 == 24:
            good = state.snapshot()
    state.set_trainable([])
    return log


def _augment(ex: Example, cfg: StageConfig, rng: np.random.Generator) -> Example:
    if cfg.reverse_prob and rng.random() < cfg.reverse_prob:
        ex = time_reverse(ex)
    if cfg.roll_prob and rng.random() < cfg.roll_prob:
        ex = temporal_roll(ex, rng)
    if cfg.crop_prob and rng.random() < cfg.crop_prob:
        ex = temporal_crop(ex, rng)
    return ex


def _require(state: ModelState, stage: str) -> None:
    need = _REQUIRED[stage]
    if need is not None and need not in state.provenance:
        raise DomainError(f"stage {stage} needs a checkpoint that went through {need}; "
                          f"provenance is {state.provenance}")


def _check_cfg(cfg: StageConfig, stage: str) -> None:
    if cfg.stage != stage:
        raise DomainError(f"expected a {stage} config, got {cfg.stage}")


# ---------------------------------------------------------------- decoder warm start

def scene_texts(manifest: DatasetManifest) -> list[tuple[tuple[str, ...], tuple[tuple[str, str], ...]]]:
    """Per video: caption parts in order and the (question, answer) pairs."""
    with forbid_gt_access():
        out = []
        for vid in sorted(manifest.videos):
            qa = tuple((it.question, it.gt_answer) for it in manifest.items_for(vid))
            caption = manifest.captions.get(vid)
            parts = tuple(caption.split(CAPTION_JOINER)) if caption else tuple(a for _, a in qa)
            if parts:
                out.append((parts, qa))
        return out


def _layout(n_slots: int, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    starts = sorted(rng.choice(n_slots, size=min(k, n_slots), replace=False).tolist())
    bounds = starts[1:] + [n_slots]
    return [(s, s + int(rng.integers(1, b - s + 1))) for s, b in zip(starts, bounds)]


def pretrain_decoder(state: ModelState, manifest: DatasetManifest, steps: int = 500,
                     learning_rate: float = 1e-3, batch_size: int = 16, seed: int = 0,
                     style: PromptStyle = PromptStyle()) -> TrainLog:
    """Text-only warm start standing in for a pretrained language model.

    Visual slots are filled with sums of the frozen word embeddings of the
    events, laid out in caption order, and the decoder learns to caption and
    answer from them. No frames and no segments are used.
    """
    scenes = scene_texts(manifest)
    if not scenes:
        raise DomainError("warm start needs captions or QA pairs")
    emb = state.model.embedder.weight.detach()
    tok = state.tokenizer
    cc = state.cfg.connector
    n, branches = cc.output_tokens_per_branch, cc.num_visual_tokens // cc.output_tokens_per_branch
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cap_prompt = style.prompt(CAPTION_QUESTION, OutputFormat.ANSWER_ONLY)

    def word_vec(text: str) -> torch.Tensor:
        return emb[tok.encode(text)].sum(dim=0)

    state.set_trainable(["decoder"])
    opt = OptimizerConfig(learning_rate=learning_rate, total_steps=steps)
    log = TrainLog(PRETRAIN_TAG)
    t0 = time.perf_counter()
    for step in range(steps):
        prompts, responses, vis = [], [], []
        for _ in range(batch_size):
            parts, qa = scenes[int(rng.integers(len(scenes)))]
            v = torch.zeros(branches * n, emb.shape[1], dtype=emb.dtype)
            for b in range(branches):
                for part, (lo, hi) in zip(parts, _layout(n, len(parts), rng)):
                    v[b * n + lo: b * n + hi] = word_vec(part)
            if not qa or rng.random() < 0.3:
                prompts.append(cap_prompt)
                responses.append(CAPTION_JOINER.join(parts))
            else:
                q, a = qa[int(rng.integers(len(qa)))]
                prompts.append(style.prompt(q, OutputFormat.ANSWER_ONLY))
                responses.append(a)
            vis.append(v)
        batch = make_batch(state, None, prompts, responses, visual=torch.stack(vis))
        state, loss = training_step(state, batch, opt)
        log.record(step, loss, state.last_lr, time.perf_counter() - t0)
    state.set_trainable([])
    state.provenance.append(PRETRAIN_TAG)
    return log


# ---------------------------------------------------------------- stages

def align_examples(manifest: DatasetManifest, style: PromptStyle = PromptStyle()) -> list[Example]:
    """Captioning and QA prompts with answer-only targets; no temporal content."""
    with forbid_gt_access():
        cap = style.prompt(CAPTION_QUESTION, OutputFormat.ANSWER_ONLY)
        ex = [Example(manifest.videos[vid], cap, c, reversed_response=CAPTION_JOINER.join(c.split(CAPTION_JOINER)[::-1]))
              for vid, c in sorted(manifest.captions.items())]
        return ex + qa_examples(manifest.items, manifest.videos, style)


def run_align(state: ModelState, caption_qa_data: DatasetManifest, cfg: StageConfig,
              style: PromptStyle = PromptStyle()) -> tuple[ModelState, TrainLog]:
    _check_cfg(cfg, "align")
    _require(state, "align")
    with forbid_gt_access():
        log = _train(state, align_examples(caption_qa_data, style), cfg, "align")
    state.provenance.append("align")
    return state, log


def label_examples(labels: Sequence[PseudoLabel], videos: Mapping[str, VideoRecord],
                   use_gt_answer: bool = False, style: PromptStyle = PromptStyle()) -> list[Example]:
    """A referring and a grounding example per label.

    With ``use_gt_answer`` the grounding target names the matched annotated
    answer instead of the caption.
    """
    ex = []
    for lab in labels:
        if lab.representation != style.representation:
            raise DomainError(f"label uses {lab.representation}, prompts use {style.representation}")
        v = videos[lab.video_id]
        answer = (lab.gt_answer if use_gt_answer else None) or lab.description

        def referring(seg, lab=lab):
            return style.prompt(REFERRING_QUESTION, OutputFormat.ANSWER_ONLY, seg), lab.description

        def grounding(seg, lab=lab, answer=answer):
            return (style.prompt(lab.grounding_question, OutputFormat.ANSWER_WITH_GROUNDING),
                    f"{answer} {style.segment(seg)}")

        for render in (referring, grounding):
            ex.append(Example(v, *render(lab.segment), segment=lab.segment, render=render))
    return ex


def run_ground(state: ModelState, pseudo_labels_unfiltered: Sequence[PseudoLabel],
               videos: Mapping[str, VideoRecord], cfg: StageConfig,
               style: PromptStyle = PromptStyle()) -> tuple[ModelState, TrainLog]:
    _check_cfg(cfg, "ground")
    _require(state, "ground")
    with forbid_gt_access():
        log = _train(state, label_examples(pseudo_labels_unfiltered, videos, style=style), cfg, "ground")
    state.provenance.append("ground")
    return state, log


def qa_examples(items: Sequence[QAItem], videos: Mapping[str, VideoRecord],
                style: PromptStyle = PromptStyle()) -> list[Example]:
    return [Example(videos[it.video_id], style.prompt(it.question, OutputFormat.ANSWER_ONLY), it.gt_answer,
                    reversed_response=it.gt_answer) for it in items]


def run_consist(state: ModelState, pseudo_labels_filtered: Sequence[PseudoLabel], qa_data: DatasetManifest,
                cfg: StageConfig, mix_qa: bool = True,
                style: PromptStyle = PromptStyle()) -> tuple[ModelState, TrainLog]:
    """Fine-tune on accepted pairs, mixed with the annotated QA pairs when ``mix_qa``."""
    _check_cfg(cfg, "consist")
    _require(state, "consist")
    rejected = [lab for lab in pseudo_labels_filtered if not lab.accepted]
    if rejected:
        raise DomainError(f"{len(rejected)} labels did not pass the consistency filter")
    with forbid_gt_access():
        ex = label_examples(pseudo_labels_filtered, qa_data.videos, use_gt_answer=True, style=style)
        if mix_qa:
            ex += qa_examples(qa_data.items, qa_data.videos, style)
        log = _train(state, ex, cfg, "consist")
    state.provenance.append("consist")
    return state, log


def with_seed(cfg: StageConfig, seed: int) -> StageConfig:
    return replace(cfg, seed=seed)


# ---------------------------------------------------------------- end to end

@dataclass(frozen=True)
class PipelineConfig:
    """One weakly supervised run on a training manifest."""

    seed: int = 0
    connector_mode: str = "multi"
    dense_frames: int = 16
    sparse_frames: int = 4
    output_tokens_per_branch: int = 8
    frame_indices_in_prompt: bool = False
    style: PromptStyle = PromptStyle()
    warmup_steps: int = 500
    align_epochs: int = DESK_PRESETS["align"]["epochs"]
    ground_epochs: int = DESK_PRESETS["ground"]["epochs"]
    consist_epochs: int = DESK_PRESETS["consist"]["epochs"]
    segments_per_video: int = 16
    mix_qa: bool = True

    def model_config(self, feature_dim: int):
        from .model import ModelConfig
        from .model.connector import ConnectorConfig

        cc = ConnectorConfig(dense_frames=self.dense_frames, sparse_frames=self.sparse_frames,
                             feature_dim=feature_dim, output_tokens_per_branch=self.output_tokens_per_branch,
                             mode=self.connector_mode)
        return ModelConfig(cc, frame_indices_in_prompt=self.frame_indices_in_prompt)


@dataclass
class PipelineResult:
    aligned: ModelState
    grounded: ModelState
    final: ModelState
    labels: list[PseudoLabel]
    logs: list[TrainLog]

    @property
    def accepted(self) -> list[PseudoLabel]:
        return [lab for lab in self.labels if lab.accepted]


def run_pipeline(train: DatasetManifest, tokenizer, cfg: PipelineConfig = PipelineConfig(),
                 judge=None) -> PipelineResult:
    """Warm start, align, pseudo-label, ground, filter and consist.

    The aligned and ground-only models are kept alongside the final one so a
    single run yields the with/without-consistency comparison.
    """
    import copy

    from .judge import LexicalJudge
    from .model import new_state
    from .weaksup import SegmentSamplingPolicy, check_consistency, generate_pseudo_labels

    judge = judge or LexicalJudge()
    feature_dim = next(iter(train.videos.values())).feature_dim
    state = new_state(cfg.model_config(feature_dim), tokenizer, seed=cfg.seed)
    style = cfg.style
    with forbid_gt_access():
        logs = [pretrain_decoder(state, train, steps=cfg.warmup_steps, seed=cfg.seed, style=style)]
        state, log = run_align(state, train, StageConfig.desk("align", cfg.align_epochs, cfg.seed), style)
        logs.append(log)
        aligned = copy.deepcopy(state)
        policy = SegmentSamplingPolicy(cfg.segments_per_video, seed=cfg.seed)
        labels = generate_pseudo_labels(state, train.videos, train.items, policy, judge, style)
        state, log = run_ground(state, labels, train.videos, StageConfig.desk("ground", cfg.ground_epochs, cfg.seed),
                                style)
        logs.append(log)
        grounded = copy.deepcopy(state)
        checked = check_consistency(state, labels, train.videos, judge, style)
        accepted = [lab for lab in checked if lab.accepted]
        state, log = run_consist(state, accepted, train, StageConfig.desk("consist", cfg.consist_epochs, cfg.seed),
                                 mix_qa=cfg.mix_qa, style=style)
        logs.append(log)
    return PipelineResult(aligned, grounded, state, checked, logs)
