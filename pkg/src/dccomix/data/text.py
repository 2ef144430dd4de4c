"""Character-level text front-end with a grapheme-to-phoneme hook."""

from __future__ import annotations

import logging
import re
from typing import Callable, Sequence

from dccomix.errors import InvalidInputError

logger = logging.getLogger(__name__)

PAD = "<pad>"
BLANK = "<blank>"
UNK = "<unk>"
DEFAULT_CHARACTERS = " abcdefghijklmnopqrstuvwxyz'.,?!-"

_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


class CharTokenizer:
    """Maps normalised text to integer ids.

    Ids 0, 1 and 2 are reserved for padding, the interspersed blank and
    unknown characters. ``g2p`` (if given) converts normalised text into the
    symbol string that is looked up; its output symbols must be covered by
    ``characters`` or they count as unknown.
    """

    def __init__(self, characters: str = DEFAULT_CHARACTERS, g2p: Callable[[str], str] | None = None):
        self.symbols = [PAD, BLANK, UNK] + list(dict.fromkeys(characters))
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.g2p = g2p
        self.unk_count = 0

    pad_id = 0
    blank_id = 1
    unk_id = 2

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def __call__(self, text: str) -> list[int]:
        return self.tokenize(text)

    def tokenize(self, text: str) -> list[int]:
        norm = normalize_text(text)
        if not norm:
            raise InvalidInputError("text is empty after normalization")
        if self.g2p is not None:
            norm = self.g2p(norm)
        ids = [self._ids.get(ch, self.unk_id) for ch in norm]
        n_unk = sum(i == self.unk_id for i in ids)
        self.unk_count += n_unk
        if n_unk == len(ids):
            logger.warning("no supported symbols in %r; sequence is all <unk>", text)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i not in (self.pad_id, self.blank_id))


def intersperse(ids: Sequence[int], item: int = CharTokenizer.blank_id) -> list[int]:
    """Insert ``item`` between and around every token, as the backbone expects."""
    out = [item] * (len(ids) * 2 + 1)
    out[1::2] = ids
    return out


_default = CharTokenizer()


def tokenize(text: str) -> list[int]:
    return _default.tokenize(text)
