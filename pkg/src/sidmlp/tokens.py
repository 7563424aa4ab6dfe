"""Token vocabulary and user-history serialization.

A history [v1, ..., vn] serializes to [user, d1(v1)..dL(v1), ..., EOS],
so the non-padding length is always 2 + L*n. Digit value c at SID position
j (1-based) gets token id (j-1)*C + c; user and EOS follow the digit block,
and a padding id sits at the end of the embedding table (zero row, never
pooled).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import PrefixTrie


@dataclass(frozen=True)
class TokenVocab:
    L: int
    C: int

    @property
    def user_id(self) -> int:
        return self.L * self.C

    @property
    def eos_id(self) -> int:
        return self.L * self.C + 1

    @property
    def pad_id(self) -> int:
        return self.L * self.C + 2

    @property
    def size(self) -> int:
        """Embedding rows including the padding slot."""
        return self.L * self.C + 3

    def digit_token(self, position: int, digit: int) -> int:
        """Token id for digit value `digit` at 1-based SID position."""
        if not 1 <= position <= self.L:
            raise ValueError(f"SID position {position} outside 1..{self.L}")
        if not 0 <= digit < self.C:
            raise ValueError(f"digit {digit} outside [0, {self.C})")
        return (position - 1) * self.C + digit

    def serialized_length(self, n_items: int) -> int:
        return 2 + self.L * n_items

    def serialize(self, items, trie: PrefixTrie) -> np.ndarray:
        """Token stream for a chronological item-id history."""
        toks = [self.user_id]
        for item in items:
            sid = trie.sid_of_item(item)
            for j, d in enumerate(sid, start=1):
                toks.append(self.digit_token(j, d))
        toks.append(self.eos_id)
        return np.asarray(toks, dtype=np.int64)

    def first_digit_positions(self, n_items: int) -> np.ndarray:
        """Serialized position of each item's first digit token."""
        return 1 + self.L * np.arange(n_items, dtype=np.int64)
