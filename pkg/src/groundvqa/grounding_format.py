"""Prompt rendering and the ``answer [start, end]`` response format.

Grounding suffix grammar (integer representation)::

    suffix := '[' WS* INT WS* ',' WS* INT WS* ']' TRAIL*
    INT    := 0..100
    TRAIL  := whitespace | one of . , ! ? ; :

With the fractional representation INT is replaced by a decimal in [0, 1]
written with two places (``[0.25, 0.73]``); parsed values are mapped back to
the integer timeline by rounding half away from zero.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional

from .core import DomainError, GroundedAnswer, TemporalSegment, TIMELINE_MAX, round_half_away

VIDEO_TOKEN = "<video>"
REPRESENTATIONS = ("0-100", "0-1")


class OutputFormat(str, enum.Enum):
    ANSWER_ONLY = "answer_only"
    GROUNDING_ONLY = "grounding_only"
    ANSWER_WITH_GROUNDING = "answer_with_grounding"

    @property
    def instruction(self) -> str:
        return _INSTRUCTIONS[self]

    @property
    def needs_segment(self) -> bool:
        return self is not OutputFormat.ANSWER_ONLY

    @property
    def needs_answer(self) -> bool:
        return self is not OutputFormat.GROUNDING_ONLY


_INSTRUCTIONS = {
    OutputFormat.ANSWER_ONLY: "answer",
    OutputFormat.GROUNDING_ONLY: "[<start>, <end>]",
    OutputFormat.ANSWER_WITH_GROUNDING: "answer [<start>, <end>]",
}


@lru_cache(maxsize=None)
def load_asset(name: str) -> str:
    return resources.files("groundvqa.assets").joinpath(name).read_text(encoding="utf-8")


def default_system_text() -> str:
    return load_asset("system_prompt.txt").strip()


@dataclass(frozen=True)
class PromptSpec:
    question: str
    output_format: OutputFormat = OutputFormat.ANSWER_WITH_GROUNDING
    referring_segment: Optional[TemporalSegment] = None
    system_text: Optional[str] = None
    # number of user-turn words that precede the <video> token
    video_token_position: int = 0
    use_template: bool = True
    representation: str = "0-100"


@dataclass(frozen=True)
class PromptStyle:
    """Prompt choices shared by training and inference."""

    representation: str = "0-100"
    use_template: bool = True

    def __post_init__(self) -> None:
        if self.representation not in REPRESENTATIONS:
            raise DomainError(f"unknown representation {self.representation!r}")

    def prompt(self, question: str, fmt: OutputFormat,
               referring_segment: Optional[TemporalSegment] = None) -> str:
        return render_prompt(PromptSpec(question, fmt, referring_segment, use_template=self.use_template,
                                        representation=self.representation))

    def segment(self, seg: TemporalSegment) -> str:
        return format_segment(seg, self.representation)


def format_segment(seg: TemporalSegment, representation: str = "0-100") -> str:
    if representation == "0-100":
        return f"[{seg.start}, {seg.end}]"
    if representation == "0-1":
        return f"[{seg.start / TIMELINE_MAX:.2f}, {seg.end / TIMELINE_MAX:.2f}]"
    raise DomainError(f"unknown representation {representation!r}")


def with_reference(question: str, seg: TemporalSegment, representation: str = "0-100") -> str:
    """Insert ``in [s, e]`` into a question, ahead of a trailing question mark."""
    q = question.rstrip()
    ref = f"in {format_segment(seg, representation)}"
    if q.endswith("?"):
        return f"{q[:-1].rstrip()} {ref}?"
    return f"{q} {ref}"


def render_prompt(spec: PromptSpec) -> str:
    if not spec.question.strip():
        raise DomainError("question must be non-empty")
    question = spec.question.strip()
    if spec.referring_segment is not None:
        question = with_reference(question, spec.referring_segment, spec.representation)
    words = question.split()
    pos = min(max(spec.video_token_position, 0), len(words))
    user = " ".join(words[:pos] + [VIDEO_TOKEN] + words[pos:])
    if not spec.use_template:
        return user
    system = spec.system_text if spec.system_text is not None else default_system_text()
    return f"{system}\nUSER: {user} Answer in the format {spec.output_format.instruction}\nASSISTANT:"


_INT = r"(-?\d+)"
_FRAC = r"(-?\d+(?:\.\d+)?)"
_TRAIL = r"[\s.,!?;:]*\Z"
_SUFFIX = {
    "0-100": re.compile(r"\[\s*" + _INT + r"\s*,\s*" + _INT + r"\s*\]" + _TRAIL),
    "0-1": re.compile(r"\[\s*" + _FRAC + r"\s*,\s*" + _FRAC + r"\s*\]" + _TRAIL),
}


def _endpoints(a: str, b: str, representation: str) -> Optional[tuple[int, int]]:
    if representation == "0-100":
        i, j = int(a), int(b)
        if 0 <= i <= j <= TIMELINE_MAX:
            return i, j
        return None
    x, y = float(a), float(b)
    if 0.0 <= x <= y <= 1.0:
        return round_half_away(TIMELINE_MAX * x), round_half_away(TIMELINE_MAX * y)
    return None


def parse_response(text: str, representation: str = "0-100") -> GroundedAnswer:
    """Split a decoder response into answer text and its trailing grounding.

    Never raises. Only a bracket pair at the end of the response counts; a
    pair with out-of-range or reversed endpoints marks the response
    ``malformed`` and keeps the whole text as the answer.
    """
    if not isinstance(text, str):
        text = "" if text is None else str(text)
    pattern = _SUFFIX.get(representation, _SUFFIX["0-100"])
    # end-anchored: only the final bracket pair can match
    match = pattern.search(text)
    if match is None:
        return GroundedAnswer(answer=text.strip(), segment=None, parse_status="answer_only")
    ends = _endpoints(match.group(1), match.group(2), representation)
    if ends is None:
        return GroundedAnswer(answer=text.strip(), segment=None, parse_status="malformed")
    answer = text[: match.start()].strip()
    return GroundedAnswer(answer=answer, segment=TemporalSegment(*ends), parse_status="ok")


def serialize(ga: GroundedAnswer, fmt: OutputFormat, representation: str = "0-100") -> str:
    fmt = OutputFormat(fmt)
    if fmt.needs_segment and ga.segment is None:
        raise DomainError(f"format {fmt.value} requires a segment")
    if fmt is OutputFormat.ANSWER_ONLY:
        return ga.answer
    seg = format_segment(ga.segment, representation)
    if fmt is OutputFormat.GROUNDING_ONLY:
        return seg
    if not ga.answer:
        raise DomainError("format answer_with_grounding requires an answer")
    return f"{ga.answer} {seg}"
