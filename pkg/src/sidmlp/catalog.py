"""Item catalog: semantic IDs, the valid-prefix trie, and branching stats.

A semantic ID is an ordered tuple of L digits, each from a C-way codebook.
The trie stores every valid prefix; prefix keys are fixed-radix integers
(base C) so mask lookups on the beam-expansion hot path are O(log n)
searchsorted calls over flat arrays rather than dict walks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticId:
    """An item's L-digit code."""

    digits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "digits", tuple(int(d) for d in self.digits))

    def __len__(self):
        return len(self.digits)

    def __iter__(self):
        return iter(self.digits)

    def __getitem__(self, i):
        return self.digits[i]


@dataclass(frozen=True)
class CatalogStats:
    """Per-digit average branching plus digit-frequency histograms."""

    branching: tuple[float, ...]      # mean #continuations at depth t, t = 1..L
    item_count: int
    digit_histograms: np.ndarray      # (L, C) counts


def _as_digits(sid) -> tuple[int, ...]:
    return tuple(int(d) for d in sid)


class PrefixTrie:
    """Immutable trie over all catalog SIDs with per-depth flat indexes.

    level_keys[t] holds the sorted radix keys of valid depth-t prefixes;
    child_rows[t] maps (prefix row, digit) -> row at depth t+1 or -1;
    leaf ancestor tables let callers aggregate leaf masses per prefix with
    one bincount per depth.
    """

    def __init__(self, items: list[tuple[int, SemanticId]], sid_len: int, codebook_size: int):
        if not items:
            raise CatalogError("catalog must be non-empty")
        self.L = int(sid_len)
        self.C = int(codebook_size)
        sids = {}
        by_item: dict[int, tuple[int, ...]] = {}
        for item_id, sid in items:
            digits = _as_digits(sid)
            if len(digits) != self.L:
                raise CatalogError(f"item {item_id}: SID length {len(digits)}, expected {self.L}")
            for pos, d in enumerate(digits):
                if not 0 <= d < self.C:
                    raise CatalogError(f"item {item_id}: digit {d} at position {pos + 1} "
                                       f"outside [0, {self.C})")
            if digits in sids:
                raise CatalogError(f"duplicate SID {digits}: items {sids[digits]} and {item_id}")
            if item_id in by_item:
                raise CatalogError(f"duplicate item id {item_id}")
            sids[digits] = item_id
            by_item[item_id] = digits

        ordered = sorted(sids)  # leaf rows in SID-lexicographic order
        m = len(ordered)
        self.sid_matrix = np.array(ordered, dtype=np.int64)          # (M, L)
        self.leaf_items = np.array([sids[s] for s in ordered], dtype=np.int64)
        self._row_of_item = {int(i): r for r, i in enumerate(self.leaf_items)}

        # per-depth prefix keys; depth 0 is the single empty prefix (key 0)
        keys = np.zeros(m, dtype=np.int64)
        self.level_keys: list[np.ndarray] = [np.zeros(1, dtype=np.int64)]
        self.leaf_ancestor: list[np.ndarray] = [np.zeros(m, dtype=np.int64)]
        self.child_rows: list[np.ndarray] = []
        for t in range(self.L):
            parent_rows = self.leaf_ancestor[t]
            keys = keys * self.C + self.sid_matrix[:, t]
            lvl = np.unique(keys)
            anc = np.searchsorted(lvl, keys)
            table = np.full((len(self.level_keys[t]), self.C), -1, dtype=np.int64)
            table[parent_rows, self.sid_matrix[:, t]] = anc
            self.child_rows.append(table)
            self.level_keys.append(lvl)
            self.leaf_ancestor.append(anc)

    # -- lookups ----------------------------------------------------------

    @property
    def item_count(self) -> int:
        return len(self.leaf_items)

    def prefix_row(self, prefix) -> tuple[int, int]:
        """(depth, row) of a valid prefix; raises on unknown paths."""
        digits = _as_digits(prefix)
        t = len(digits)
        if t > self.L:
            raise CatalogError(f"prefix longer than SID length {self.L}: {digits}")
        key = 0
        for d in digits:
            if not 0 <= d < self.C:
                raise CatalogError(f"digit {d} outside [0, {self.C}) in prefix {digits}")
            key = key * self.C + d
        lvl = self.level_keys[t]
        pos = int(np.searchsorted(lvl, key))
        if pos >= len(lvl) or lvl[pos] != key:
            raise CatalogError(f"prefix {digits} is not a valid path")
        return t, pos

    def valid_continuations(self, prefix) -> set[int]:
        t, row = self.prefix_row(prefix)
        if t >= self.L:
            raise CatalogError(f"prefix {tuple(prefix)} is already a full SID")
        return set(np.nonzero(self.child_rows[t][row] >= 0)[0].tolist())

    def mask_vector(self, prefix) -> np.ndarray:
        t, row = self.prefix_row(prefix)
        if t >= self.L:
            raise CatalogError(f"prefix {tuple(prefix)} is already a full SID")
        return self.child_rows[t][row] >= 0

    def sid_of_item(self, item_id: int) -> SemanticId:
        row = self._row_of_item.get(int(item_id))
        if row is None:
            raise CatalogError(f"unknown item id {item_id}")
        return SemanticId(tuple(self.sid_matrix[row]))

    def item_of_sid(self, sid) -> int:
        digits = _as_digits(sid)
        t, row = self.prefix_row(digits)
        if t != self.L:
            raise CatalogError(f"{digits} is a prefix, not a full SID")
        return int(self.leaf_items[row])

    def items(self) -> list[tuple[int, SemanticId]]:
        return [(int(i), SemanticId(tuple(s))) for i, s in zip(self.leaf_items, self.sid_matrix)]

    # -- statistics --------------------------------------------------------

    def branching_profile(self) -> CatalogStats:
        """Mean #continuations per depth, uniform over valid prefixes."""
        branching = tuple(
            len(self.level_keys[t + 1]) / len(self.level_keys[t]) for t in range(self.L)
        )
        hist = np.zeros((self.L, self.C), dtype=np.int64)
        for t in range(self.L):
            np.add.at(hist[t], self.sid_matrix[:, t], 1)
        return CatalogStats(branching=branching, item_count=self.item_count,
                            digit_histograms=hist)

    # -- mass aggregation (teacher conditionals) ---------------------------

    def prefix_masses(self, leaf_probs: np.ndarray) -> list[np.ndarray]:
        """Sum leaf probabilities up the trie; index t gives depth-t masses.

        `leaf_probs` is ordered like `leaf_items` (SID-lexicographic rows).
        """
        if leaf_probs.shape != (self.item_count,):
            raise CatalogError(f"leaf probability vector has shape {leaf_probs.shape}, "
                               f"expected ({self.item_count},)")
        return [np.bincount(self.leaf_ancestor[t], weights=leaf_probs,
                            minlength=len(self.level_keys[t]))
                for t in range(self.L + 1)]


def build_trie(items, sid_len: int, codebook_size: int) -> PrefixTrie:
    return PrefixTrie(items, sid_len, codebook_size)


# ---------------------------------------------------------------------------
# catalog file: header `#sid L=<L> C=<C>`, lines `item_id<TAB>d1 d2 ... dL`

def write_catalog(path, trie: PrefixTrie) -> None:
    with open(path, "w") as f:
        f.write(f"#sid L={trie.L} C={trie.C}\n")
        for item_id, sid in trie.items():
            f.write(f"{item_id}\t{' '.join(str(d) for d in sid)}\n")


def read_catalog(path) -> PrefixTrie:
    with open(path) as f:
        header = f.readline().strip()
        parts = header.split()
        if len(parts) != 3 or parts[0] != "#sid":
            raise CatalogError(f"{path}:1: bad catalog header {header!r}")
        try:
            sid_len = int(parts[1].removeprefix("L="))
            codebook = int(parts[2].removeprefix("C="))
        except ValueError:
            raise CatalogError(f"{path}:1: bad catalog header {header!r}") from None
        items = []
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                item_part, digit_part = line.split("\t")
                item_id = int(item_part)
                digits = tuple(int(d) for d in digit_part.split())
            except ValueError:
                raise CatalogError(f"{path}:{lineno}: malformed catalog line {line!r}") from None
            items.append((item_id, SemanticId(digits)))
    return build_trie(items, sid_len, codebook)
