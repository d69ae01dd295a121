"""Answer judging: option retrieval and yes/no open-ended matching.

Two backends share one interface. ``LexicalJudge`` is deterministic and
offline (token F1 over normalized words). ``RemoteChatJudge`` posts
chat-completion requests to an OpenAI-compatible endpoint using the prompt
templates in ``assets/``.
"""

from __future__ import annotations

import json
import os
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import httpx

from .core import round_half_away
from .grounding_format import load_asset

F1_THRESHOLD = 0.5
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


class JudgeError(RuntimeError):
    def __init__(self, message: str, item_id: str = ""):
        super().__init__(f"{item_id}: {message}" if item_id else message)
        self.item_id = item_id


@dataclass(frozen=True)
class JudgeVerdict:
    match: bool
    score: Optional[int] = None


@dataclass(frozen=True)
class JudgeConfig:
    backend: str = "lexical"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "JUDGE_API_KEY"
    timeout: float = 30.0
    max_parallel: int = 4
    retries: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backend not in ("lexical", "remote_chat"):
            raise ValueError(f"unknown judge backend {self.backend!r}")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be at least 1")

    @classmethod
    def from_env(cls, **overrides) -> "JudgeConfig":
        env = {
            "endpoint": os.environ.get("JUDGE_ENDPOINT"),
            "model": os.environ.get("JUDGE_MODEL"),
        }
        kwargs = {k: v for k, v in env.items() if v}
        kwargs.update(overrides)
        return cls(**kwargs)


def normalize_tokens(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def token_f1(a: str, b: str) -> float:
    ta, tb = normalize_tokens(a), normalize_tokens(b)
    if not ta or not tb:
        return 0.0
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    precision = common / len(ta)
    recall = common / len(tb)
    return 2 * precision * recall / (precision + recall)


class LexicalJudge:
    name = "lexical"

    def __init__(self, threshold: float = F1_THRESHOLD):
        self.threshold = threshold

    def retrieve_option(self, question: str, prediction: str, options: Sequence[str], item_id: str = "") -> int:
        if len(options) != 5:
            raise JudgeError(f"expected 5 options, got {len(options)}", item_id)
        scores = [token_f1(prediction, o) for o in options]
        # max() keeps the first maximum: ties go to the lowest index
        return max(range(5), key=lambda i: scores[i])

    def judge_open(self, question: str, prediction: str, gt_answer: str, item_id: str = "") -> JudgeVerdict:
        f1 = token_f1(prediction, gt_answer)
        return JudgeVerdict(match=f1 >= self.threshold, score=1 + round_half_away(4 * f1))

    def similarity(self, a: str, b: str) -> float:
        return token_f1(a, b)

    def map_open(self, triples: Sequence[tuple[str, str, str]]) -> list[JudgeVerdict]:
        return [self.judge_open(*t) for t in triples]

    def map_retrieve(self, triples: Sequence[tuple[str, str, Sequence[str]]]) -> list[int]:
        return [self.retrieve_option(*t) for t in triples]


_YES_NO = re.compile(r'"pred"\s*:\s*"(yes|no)"', re.I)
_SCORE = re.compile(r'"score"\s*:\s*(\d)')


def parse_open_reply(text: str) -> JudgeVerdict:
    """Strict parse of the yes/no+score reply; raises ValueError when unusable."""
    try:
        obj = json.loads(text.strip().strip("`").removeprefix("json").strip())
        pred = str(obj["pred"]).strip().lower()
        score = int(obj["score"])
    except (ValueError, KeyError, TypeError):
        m, s = _YES_NO.search(text), _SCORE.search(text)
        if not (m and s):
            raise ValueError(f"unparseable judge reply: {text[:80]!r}") from None
        pred, score = m.group(1).lower(), int(s.group(1))
    if pred not in ("yes", "no") or not 1 <= score <= 5:
        raise ValueError(f"judge reply out of range: {text[:80]!r}")
    return JudgeVerdict(match=pred == "yes", score=score)


def parse_index_reply(text: str) -> int:
    m = re.fullmatch(r"\s*\(?([0-4])\)?\.?\s*", text)
    if not m:
        raise ValueError(f"unparseable option index: {text[:80]!r}")
    return int(m.group(1))


@dataclass
class RemoteChatJudge:
    config: JudgeConfig = field(default_factory=JudgeConfig)
    client: Optional[httpx.Client] = None

    name = "remote_chat"

    def __post_init__(self) -> None:
        if self.client is None:
            self.client = httpx.Client(timeout=self.config.timeout)
        self._retrieve_tpl = _strip_version(load_asset("judge_retrieve.txt"))
        self._open_tpl = _strip_version(load_asset("judge_open.txt"))

    def _chat(self, content: str) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.config.model, "temperature": 0,
                "messages": [{"role": "user", "content": content}]}
        resp = self.client.post(self.config.endpoint, json=body, headers=headers)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def _ask(self, content: str, parse: Callable[[str], object], item_id: str):
        last: Exception | None = None
        for _ in range(self.config.retries + 1):
            try:
                return parse(self._chat(content))
            except (httpx.HTTPError, ValueError, KeyError, IndexError) as e:
                last = e
        raise JudgeError(f"judge failed after {self.config.retries + 1} attempts: {last}", item_id)

    def retrieve_option(self, question: str, prediction: str, options: Sequence[str], item_id: str = "") -> int:
        if len(options) != 5:
            raise JudgeError(f"expected 5 options, got {len(options)}", item_id)
        listing = "\n".join(f"{i}. {o}" for i, o in enumerate(options))
        prompt = self._retrieve_tpl.format(question=question, prediction=prediction, options=listing)
        return self._ask(prompt, parse_index_reply, item_id)

    def judge_open(self, question: str, prediction: str, gt_answer: str, item_id: str = "") -> JudgeVerdict:
        prompt = self._open_tpl.format(question=question, prediction=prediction, answer=gt_answer)
        return self._ask(prompt, parse_open_reply, item_id)

    def similarity(self, a: str, b: str) -> float:
        v = self.judge_open("", a, b)
        return (v.score or 0) / 5.0

    def _map(self, fn, args_list):
        # results come back in input order regardless of completion order
        with ThreadPoolExecutor(max_workers=self.config.max_parallel) as pool:
            futures = [pool.submit(fn, *args) for args in args_list]
            out = []
            for f in futures:
                try:
                    out.append(f.result())
                except JudgeError as e:
                    out.append(e)
            return out

    def map_open(self, triples):
        return self._map(self.judge_open, triples)

    def map_retrieve(self, triples):
        return self._map(self.retrieve_option, triples)


def _strip_version(tpl: str) -> str:
    return "\n".join(line for line in tpl.splitlines() if not line.startswith("# prompt-version"))


def make_judge(config: JudgeConfig | str = "lexical"):
    if isinstance(config, str):
        config = JudgeConfig(backend=config)
    if config.backend == "lexical":
        return LexicalJudge()
    return RemoteChatJudge(config)
