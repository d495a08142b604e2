"""Byte-fallback tokenizer shared by the PLIP text tower and the decoder LM.

Ids ``0..255`` are raw bytes, ``256..263`` are special tokens and the
remaining ids are multi-byte word pieces matched greedily (longest first).
Any text round-trips exactly through ``encode``/``decode``.
"""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from .exceptions import InvalidInputError

VOCAB_SIZE = 512
N_BYTES = 256
PAD, BOS, EOS, SEP, IMG = 256, 257, 258, 259, 260
_FIRST_PIECE = 264


class ByteTokenizer:
    def __init__(self, pieces: list[str] | None = None, vocab_size: int = VOCAB_SIZE):
        if pieces is None:
            pieces = _default_pieces()
        encoded = [p.encode("utf-8") for p in pieces]
        if len(set(encoded)) != len(encoded):
            raise InvalidInputError("duplicate word pieces")
        if any(len(p) < 2 for p in encoded):
            raise InvalidInputError("word pieces must span at least two bytes")
        if _FIRST_PIECE + len(encoded) > vocab_size:
            raise InvalidInputError(
                f"{len(encoded)} pieces do not fit in a vocabulary of {vocab_size}"
            )
        self.vocab_size = vocab_size
        self.pieces = encoded
        self._piece_ids = {p: _FIRST_PIECE + i for i, p in enumerate(encoded)}
        self._max_len = max((len(p) for p in encoded), default=1)

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    sep_id = SEP

    def encode(self, text: str) -> list[int]:
        data = text.encode("utf-8")
        ids = []
        i = 0
        n = len(data)
        while i < n:
            for length in range(min(self._max_len, n - i), 1, -1):
                tok = self._piece_ids.get(data[i : i + length])
                if tok is not None:
                    ids.append(tok)
                    i += length
                    break
            else:
                ids.append(data[i])
                i += 1
        return ids

    def decode(self, ids, skip_special: bool = True) -> str:
        out = bytearray()
        for t in ids:
            t = int(t)
            if t < N_BYTES:
                out.append(t)
            elif t >= _FIRST_PIECE and t - _FIRST_PIECE < len(self.pieces):
                out.extend(self.pieces[t - _FIRST_PIECE])
            elif not skip_special:
                out.extend(f"<{t}>".encode())
        return out.decode("utf-8", errors="replace")

    def encode_prompt(self, question: str) -> list[int]:
        """``<bos> question <sep>``: the text that precedes an answer."""
        return [BOS, *self.encode(question), SEP]

    def encode_answer(self, answer: str) -> list[int]:
        return [*self.encode(answer), EOS] if answer else []

    def truncate(self, ids: list[int], max_len: int) -> list[int]:
        return list(ids[:max_len])


@lru_cache(maxsize=1)
def _default_pieces() -> list[str]:
    text = resources.files("pathassist").joinpath("data/vocab.json").read_text("utf-8")
    return json.loads(text)["pieces"]


@lru_cache(maxsize=1)
def default_tokenizer() -> ByteTokenizer:
    return ByteTokenizer()
