"""Run a trained model over QA items and collect parsed predictions."""

from __future__ import annotations

from typing import Mapping, Sequence

from .core import QAItem, VideoRecord
from .grounding_format import OutputFormat, PromptStyle, parse_response
from .metrics import PredictionRecord


def predict(state, items: Sequence[QAItem], videos: Mapping[str, VideoRecord],
            output_format: OutputFormat = OutputFormat.ANSWER_WITH_GROUNDING,
            style: PromptStyle = PromptStyle(), max_new_tokens: int = 16) -> list[PredictionRecord]:
    """One greedy response per item, parsed into a ``PredictionRecord``.

    Option choice and open-ended verdicts are left to ``evaluate``.
    """
    from .model import generate

    prompts = [style.prompt(it.question, output_format) for it in items]
    texts = generate(state, [videos[it.video_id] for it in items], prompts, max_new_tokens=max_new_tokens)
    return [PredictionRecord(it.qid, parse_response(t, style.representation)) for it, t in zip(items, texts)]
