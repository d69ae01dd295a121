"""Word-level tokenizer.

Numbers are either whole tokens (one per timeline integer) or split into
single digits, as the tokenizers of common 7-B decoders do.
"""

from __future__ import annotations

import re
from typing import Iterable, Sequence

from ..grounding_format import VIDEO_TOKEN, default_system_text

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK, VIDEO_TOKEN, "<start>", "<end>")

_TOKEN_RE = re.compile(r"<[a-z]+>|\d+|[A-Za-z']+|\S")
_DIGIT_RE = re.compile(r"<[a-z]+>|\d|[A-Za-z']+|\S")
_NO_SPACE_BEFORE = {",", "]", ".", "?", "!", ":", ";", ">"}
_NO_SPACE_AFTER = {"[", "<"}

# fixed words of the chat template and the referring/captioning prompts
_TEMPLATE_WORDS = "USER ASSISTANT Answer in the format answer what is happening describe video".split()


def split_words(text: str, split_digits: bool = False) -> list[str]:
    return (_DIGIT_RE if split_digits else _TOKEN_RE).findall(text)


class Tokenizer:
    def __init__(self, tokens: Sequence[str], split_digits: bool = False):
        self.tokens = list(tokens)
        self.split_digits = split_digits
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for t in SPECIALS:
            if t not in self.index:
                raise ValueError(f"vocabulary lacks special token {t}")

    @classmethod
    def build(cls, texts: Iterable[str], split_digits: bool = True) -> "Tokenizer":
        vocab: list[str] = list(SPECIALS)
        if split_digits:
            vocab += [str(i) for i in range(10)]
        else:
            vocab += [str(i) for i in range(101)]
            vocab += [f"0{i}" for i in range(10)]
        vocab += list("[],.?:")
        seen = set(vocab)
        words = list(_TEMPLATE_WORDS) + split_words(default_system_text(), split_digits)
        for text in texts:
            words.extend(split_words(text, split_digits))
        for w in words:
            if w not in seen:
                seen.add(w)
                vocab.append(w)
        return cls(vocab, split_digits)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def video_id(self) -> int:
        return self.index[VIDEO_TOKEN]

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in split_words(text, self.split_digits)]

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in (PAD, BOS, EOS):
                continue
            out.append(tok)
        return join_words(out)


def join_words(words: Sequence[str]) -> str:
    text = ""
    prev = ""
    for i, w in enumerate(words):
        glue = bool(text) and w not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER
        # keep decimals such as 0.25 together
        if w.isdigit() and prev == "." and i >= 2 and words[i - 2].isdigit():
            glue = False
        # digits of one number sit next to each other
        if w.isdigit() and prev.isdigit():
            glue = False
        text += (" " if glue else "") + w
        prev = w
    return text
