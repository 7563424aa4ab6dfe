"""Synthetic catalogs and user histories with known ground-truth dynamics.

The catalog generator reproduces the search-space collapse shape: a target
branching factor per digit, strictly decreasing by default, realized by
growing the trie level by level. Histories are sampled autoregressively
from the oracle's next-item law so the teacher is exactly right about the
data it will later be distilled on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .catalog import CatalogError, PrefixTrie, SemanticId, build_trie
from .oracle import OracleConfig, OracleTeacher


@dataclass(frozen=True)
class GeneratorProfile:
    L: int = 4
    C: int = 256
    item_count: int = 2000
    user_count: int = 5000
    branching: tuple[float, ...] = (64.0, 12.0, 2.2, 1.2)
    hist_min: int = 4
    hist_max: int = 20
    gamma: float = 0.8
    kappa: float = 0.35
    epsilon: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if len(self.branching) != self.L:
            raise ValueError(f"branching needs {self.L} entries, got {len(self.branching)}")
        if self.branching[0] > self.C:
            raise ValueError(f"first-digit branching {self.branching[0]} exceeds C={self.C}")
        if self.item_count < 2:
            raise ValueError("need at least 2 items")
        if self.hist_min < 1 or self.hist_max < self.hist_min:
            raise ValueError(f"bad history length range [{self.hist_min}, {self.hist_max}]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    def oracle_config(self, d_h: int = 64, d_e: int = 32) -> OracleConfig:
        return OracleConfig(d_h=d_h, d_e=d_e, gamma=self.gamma,
                            kappa=self.kappa, epsilon=self.epsilon, seed=self.seed)


# named profiles for the CLI; `default` is the desk-scale working set and
# `exact512` keeps brute-force enumeration cheap for exactness suites
PROFILES: dict[str, GeneratorProfile] = {
    "default": GeneratorProfile(),
    "exact512": GeneratorProfile(item_count=512, user_count=256,
                                 branching=(16.0, 8.0, 2.5, 1.7), seed=11),
    "tiny": GeneratorProfile(item_count=40, user_count=24, C=16,
                             branching=(6.0, 3.0, 1.5, 1.3), hist_min=4,
                             hist_max=8, seed=3),
}


@dataclass(frozen=True)
class UserRecord:
    user_id: int
    items: tuple[int, ...]


@dataclass(frozen=True)
class Sample:
    """One next-item prediction case: predict `target` after `prefix`."""

    user_id: int
    prefix: tuple[int, ...]
    target: int


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    dropped: int = 0


# ---------------------------------------------------------------------------
# catalog generation

def _level_child_counts(rng, n_parents: int, n_children: int, cap: int) -> np.ndarray:
    """Distribute children over parents: each >= 1, none above `cap`."""
    counts = np.ones(n_parents, dtype=np.int64)
    remaining = n_children - n_parents
    while remaining > 0:
        open_rows = np.nonzero(counts < cap)[0]
        take = min(remaining, len(open_rows))
        picks = rng.choice(open_rows, size=take, replace=True)
        np.add.at(counts, picks, 1)
        np.clip(counts, None, cap, out=counts)
        remaining = n_children - int(counts.sum())
    return counts


def generate_catalog(profile: GeneratorProfile) -> PrefixTrie:
    """Grow a trie whose measured branching profile tracks the targets."""
    capacity = float(np.prod(profile.branching))
    if capacity < profile.item_count:
        raise CatalogError(
            f"infeasible branching targets: product {capacity:.1f} < {profile.item_count} items")
    rng = np.random.default_rng(profile.seed)

    level_sizes = [1]
    for t, beta in enumerate(profile.branching):
        if t == profile.L - 1:
            size = profile.item_count
        else:
            size = int(round(level_sizes[-1] * beta))
        size = max(size, level_sizes[-1])            # every node keeps a child
        size = min(size, level_sizes[-1] * profile.C)
        level_sizes.append(size)
    if level_sizes[-1] != profile.item_count:
        raise CatalogError("internal: leaf level does not match item count")

    prefixes: list[tuple[int, ...]] = [()]
    for t in range(profile.L):
        counts = _level_child_counts(rng, len(prefixes), level_sizes[t + 1], profile.C)
        nxt = []
        for prefix, k in zip(prefixes, counts):
            digits = rng.choice(profile.C, size=int(k), replace=False)
            nxt.extend(prefix + (int(d),) for d in digits)
        prefixes = nxt

    ids = rng.permutation(profile.item_count)
    items = [(int(i), SemanticId(sid)) for i, sid in zip(ids, prefixes)]
    return build_trie(items, profile.L, profile.C)


# ---------------------------------------------------------------------------
# history generation

def generate_histories(trie: PrefixTrie, teacher: OracleTeacher,
                       profile: GeneratorProfile) -> list[UserRecord]:
    """Sample user histories autoregressively from the oracle's p*."""
    rng = np.random.default_rng(profile.seed + 1)
    lengths = rng.integers(profile.hist_min, profile.hist_max + 1,
                           size=profile.user_count)
    leaf_ids = trie.leaf_items
    records = []
    for uid in range(profile.user_count):
        first = int(leaf_ids[rng.integers(trie.item_count)])
        items = [first]
        for _ in range(int(lengths[uid]) - 1):
            p = teacher.next_item_distribution(items)
            items.append(int(leaf_ids[rng.choice(trie.item_count, p=p)]))
        records.append(UserRecord(user_id=uid, items=tuple(items)))
    return records


# ---------------------------------------------------------------------------
# leave-last-out splitting

def split_leave_last_out(records, max_train_targets: int = 4) -> DatasetSplit:
    """Test = final item, validation = penultimate, train = rolling targets.

    Train pairs predict item j from items[:j] for positions before the test
    target, most recent first, capped at `max_train_targets` per user. Users
    shorter than 3 interactions are dropped (counted in `dropped`).
    """
    split = DatasetSplit()
    for rec in records:
        n = len(rec.items)
        if n < 3:
            split.dropped += 1
            continue
        split.test.append(Sample(rec.user_id, rec.items[: n - 1], rec.items[n - 1]))
        split.val.append(Sample(rec.user_id, rec.items[: n - 2], rec.items[n - 2]))
        taken = 0
        for j in range(n - 2, 0, -1):
            if taken >= max_train_targets:
                break
            split.train.append(Sample(rec.user_id, rec.items[:j], rec.items[j]))
            taken += 1
    return split


# ---------------------------------------------------------------------------
# dataset file: header `#users L=<L>`, lines `user_id<TAB>item ids`

def write_dataset(path, records, sid_len: int) -> None:
    with open(path, "w") as f:
        f.write(f"#users L={sid_len}\n")
        for rec in records:
            f.write(f"{rec.user_id}\t{' '.join(str(i) for i in rec.items)}\n")


def read_dataset(path) -> tuple[list[UserRecord], int]:
    with open(path) as f:
        header = f.readline().strip()
        parts = header.split()
        if len(parts) != 2 or parts[0] != "#users":
            raise CatalogError(f"{path}:1: bad dataset header {header!r}")
        try:
            sid_len = int(parts[1].removeprefix("L="))
        except ValueError:
            raise CatalogError(f"{path}:1: bad dataset header {header!r}") from None
        records = []
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                uid_part, item_part = line.split("\t")
                uid = int(uid_part)
                items = tuple(int(i) for i in item_part.split())
            except ValueError:
                raise CatalogError(f"{path}:{lineno}: malformed dataset line {line!r}") from None
            records.append(UserRecord(user_id=uid, items=items))
    return records, sid_len
