import math

import numpy as np
import pytest
import torch

from groundvqa.core import DomainError, TemporalSegment, VideoRecord
from groundvqa.data import SyntheticSpec, corpus_texts, generate_synthetic
from groundvqa.inference import predict
from groundvqa.judge import LexicalJudge
from groundvqa.model import Tokenizer, cosine_lr, new_state
from groundvqa.training import (
    DESK_PRESETS,
    Example,
    PipelineConfig,
    StageConfig,
    TrainingAborted,
    TrainLog,
    run_align,
    run_consist,
    run_ground,
    run_pipeline,
    temporal_crop,
    temporal_roll,
    time_reverse,
)
from groundvqa.weaksup import PseudoLabel

SMALL = dict(warmup_steps=20, align_epochs=2, ground_epochs=1, consist_epochs=1, segments_per_video=4)


@pytest.fixture(scope="module")
def small():
    train, test = generate_synthetic(SyntheticSpec(n_videos=8, n_test_videos=2, feature_dim=16))
    tok = Tokenizer.build(corpus_texts([train, test]))
    return train, test, tok


def fresh(small, seed=0, mode="multi"):
    train, _, tok = small
    return new_state(PipelineConfig(connector_mode=mode).model_config(16), tok, seed=seed)


def grouped(snapshot):
    out = {}
    for k, v in snapshot.items():
        out.setdefault(k.split(".")[0], []).append(v.ravel())
    return {g: np.concatenate(v) for g, v in out.items()}


def changed(before, after):
    a, b = grouped(before), grouped(after)
    return {g for g in a if not np.array_equal(a[g], b[g])}


class TestStageConfig:
    def test_full_scale_defaults(self):
        a, g, c = (StageConfig.full(s) for s in ("align", "ground", "consist"))
        assert (a.learning_rate, a.batch_size) == (1e-3, 256)
        assert (g.learning_rate, g.batch_size) == (c.learning_rate, c.batch_size) == (2e-5, 128)
        for cfg in (a, g, c):
            assert (cfg.epochs, cfg.warmup_ratio, cfg.weight_decay, cfg.max_sequence_length) == (1, 0.03, 0.0, 2048)
            assert cfg.schedule == "cosine"
        assert a.trainable == {"connector"} and g.trainable == c.trainable == {"connector", "decoder"}

    def test_desk_preset(self):
        for stage in ("align", "ground", "consist"):
            cfg = StageConfig.desk(stage)
            assert cfg.batch_size == 16 and cfg.warmup_ratio == 0.03
            assert cfg.learning_rate == DESK_PRESETS[stage]["learning_rate"]
            assert cfg.epochs == DESK_PRESETS[stage]["epochs"]
        assert StageConfig.desk("ground", epochs=3).epochs == 3

    @pytest.mark.parametrize("kw", [dict(trainable=frozenset({"connector", "decoder"})),
                                    dict(trainable=frozenset({"connector"}), schedule="linear"),
                                    dict(trainable=frozenset({"connector"}), batch_size=0)])
    def test_rejects_bad_config(self, kw):
        with pytest.raises(DomainError):
            StageConfig("align", 1e-3, **{"batch_size": 4, **kw})

    def test_unknown_stage(self):
        with pytest.raises(DomainError):
            StageConfig("pretrain", 1e-3, 4)


class TestStageOrder:
    def label(self, train):
        vid = sorted(train.videos)[0]
        return PseudoLabel(vid, TemporalSegment(10, 40), "x", "q", gt_answer="x", accepted=True)

    def test_ground_needs_align(self, small):
        train = small[0]
        with pytest.raises(DomainError, match="align"):
            run_ground(fresh(small), [self.label(train)], train.videos, StageConfig.desk("ground", 1))

    def test_consist_needs_ground(self, small):
        train = small[0]
        st = fresh(small)
        st.provenance.append("align")
        with pytest.raises(DomainError, match="ground"):
            run_consist(st, [self.label(train)], train, StageConfig.desk("consist", 1))

    def test_consist_refuses_rejected_labels(self, small):
        train = small[0]
        st = fresh(small)
        st.provenance += ["align", "ground"]
        bad = PseudoLabel(sorted(train.videos)[0], TemporalSegment(10, 40), "x", "q")
        with pytest.raises(DomainError, match="consistency filter"):
            run_consist(st, [bad], train, StageConfig.desk("consist", 1))

    def test_wrong_config_stage(self, small):
        with pytest.raises(DomainError):
            run_align(fresh(small), small[0], StageConfig.desk("ground", 1))


class TestStages:
    def test_freeze_masks_and_provenance(self, small):
        train = small[0]
        st = fresh(small)
        before = st.snapshot()
        st, log = run_align(st, train, StageConfig.desk("align", 2))
        assert changed(before, st.snapshot()) == {"connector"}
        assert st.provenance == ["align"]
        labels = [PseudoLabel(vid, TemporalSegment(10, 60), train.captions[vid], "q",
                              gt_answer=train.captions[vid], accepted=True) for vid in sorted(train.videos)]
        before = st.snapshot()
        st, _ = run_ground(st, labels, train.videos, StageConfig.desk("ground", 2))
        assert changed(before, st.snapshot()) == {"connector", "decoder"}
        before = st.snapshot()
        st, _ = run_consist(st, labels, train, StageConfig.desk("consist", 2))
        assert changed(before, st.snapshot()) == {"connector", "decoder"}
        assert st.provenance == ["align", "ground", "consist"]
        # nothing is left trainable between stages
        assert all(st.freeze_mask.values())

    def test_lr_trace_closed_form(self, small):
        train = small[0]
        cfg = StageConfig.desk("align", 3)
        _, log = run_align(fresh(small), train, cfg)
        total = len(log.steps)
        assert total == math.ceil((len(train.captions) + len(train.items)) * 3 / 16)
        for s in log.steps:
            assert s["lr"] == pytest.approx(cosine_lr(s["step"], cfg.learning_rate, total, 0.03), abs=1e-15)
        peak = max(log.lrs)
        assert log.lrs[-1] < peak

    def test_nonfinite_loss_aborts_with_last_good_state(self, small):
        train = small[0]
        st = fresh(small)
        with torch.no_grad():
            for p in st.model.connector.parameters():
                p.fill_(float("nan"))
        with pytest.raises(TrainingAborted) as info:
            run_align(st, train, StageConfig.desk("align", 1))
        assert info.value.log.steps == []
        assert "align" not in info.value.state.provenance

    def test_deterministic(self, small):
        train, _, tok = small
        cfg = PipelineConfig(seed=3, **SMALL)
        a = run_pipeline(train, tok, cfg)
        b = run_pipeline(train, tok, cfg)
        sa, sb = a.final.snapshot(), b.final.snapshot()
        assert sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
        assert a.labels == b.labels
        assert a.final.provenance == ["lm", "align", "ground", "consist"]


class TestTrainLog:
    def test_round_trip(self, tmp_path):
        a, b = TrainLog("align"), TrainLog("ground")
        a.record(0, 2.5, 1e-4, 0.1)
        a.record(1, 2.0, 2e-4, 0.2)
        b.record(0, 1.0, 1e-3, 0.3)
        a.write(tmp_path / "log.jsonl")
        b.write(tmp_path / "log.jsonl")
        logs = TrainLog.read(tmp_path / "log.jsonl")
        assert [(l.stage, l.losses) for l in logs] == [("align", [2.5, 2.0]), ("ground", [1.0])]

    def test_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            TrainLog("align").record(0, float("nan"), 0.0, 0.0)


class TestAugmentation:
    def example(self, seg=(20, 40)):
        frames = np.arange(100, dtype=np.float32)[:, None].repeat(2, axis=1)
        render = lambda s: ("q", f"a {s}")  # noqa: E731
        s = TemporalSegment(*seg)
        return Example(VideoRecord("v", 50.0, frames), *render(s), segment=s, render=render)

    def test_reverse_mirrors_segment(self):
        r = time_reverse(self.example())
        assert r.segment == TemporalSegment(60, 80) and r.response == "a [60, 80]"
        assert r.video.frames[0, 0] == 99

    def test_reverse_keeps_unknown_targets(self):
        ex = Example(self.example().video, "q", "a then b")
        assert time_reverse(ex) is ex
        ex = Example(self.example().video, "q", "a then b", reversed_response="b then a")
        assert time_reverse(ex).response == "b then a"

    def test_crop_rescales_segment(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ex = self.example()
            c = temporal_crop(ex, rng)
            if c is ex:
                continue
            seg = TemporalSegment.from_list([int(x) for x in c.response[3:-1].split(", ")])
            # the event's frames (values 20..39) fill the rescaled window of the crop
            n = c.video.frame_count
            lo, hi = math.floor(seg.start * n / 100), math.ceil(seg.end * n / 100)
            vals = c.video.frames[lo:hi, 0]
            assert abs(vals.min() - 20) <= 2 and abs(vals.max() - 39) <= 2

    def test_roll_keeps_length(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r = temporal_roll(self.example(), rng)
            assert r.segment.length() == 20
            s = r.segment.start
            assert r.video.frames[s, 0] == 20 and r.video.frames[s + 19, 0] == 39


def test_align_loss_decreases(pipeline_run):
    res, _, _ = pipeline_run("multi", 0)
    align = next(l for l in res.logs if l.stage == "align")
    assert len(align.losses) > 200
    assert align.losses[200] < align.losses[0]
    assert np.mean(align.losses[190:210]) < np.mean(align.losses[:10])


def test_grounding_parse_rate(corpus, pipeline_run):
    _, test, _ = corpus
    res, _, _ = pipeline_run("multi", 0)
    before = [p.grounded.parse_status for p in predict(res.aligned, test.items, test.videos)]
    after = [p.grounded.parse_status for p in predict(res.grounded, test.items, test.videos)]
    assert np.mean([s == "ok" for s in before]) <= 0.05
    assert np.mean([s == "ok" for s in after]) >= 0.9


def test_pipeline_labels(pipeline_run):
    res, reads, _ = pipeline_run("multi", 0)
    assert reads == []
    assert res.accepted and all(lab.gt_answer for lab in res.accepted)
    judge = LexicalJudge()
    for lab in res.accepted:
        assert judge.judge_open("", lab.referring_answer, lab.description).match
