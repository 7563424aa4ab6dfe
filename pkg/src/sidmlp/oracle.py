"""Closed-form oracle teacher with exact per-digit conditionals.

The oracle plays the teacher's roles end to end: a frozen encoder producing
hidden states for serialized histories, a ground-truth next-item law p*,
and exact per-digit logits obtained by aggregating p* over the prefix trie.
Because p* is known in closed form, distillation targets are exact and the
teacher's ranking ceiling is exactly computable.

All tensors are frozen at construction from a seed and persist in the
common checkpoint format so separate runs see identical teachers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .catalog import CatalogError, PrefixTrie
from .tokens import TokenVocab

SENTINEL = -1e9  # stands in for -inf on invalid digits; exp() underflows to 0


@dataclass(frozen=True)
class OracleConfig:
    d_h: int = 64
    d_e: int = 32
    gamma: float = 0.8        # recency decay over history items
    kappa: float = 0.35       # score temperature; lower = sharper p*
    epsilon: float = 0.05     # uniform smoothing mass
    seed: int = 7

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class OracleTeacher:
    """Frozen encoder + ground-truth item dynamics + exact digit logits."""

    MAX_POSITIONS = 512

    def __init__(self, trie: PrefixTrie, config: OracleConfig = OracleConfig()):
        self.trie = trie
        self.config = config
        self.vocab = TokenVocab(trie.L, trie.C)
        rng = np.random.default_rng(config.seed)
        v, d_e, d_h = self.vocab.size, config.d_e, config.d_h
        self.embed = rng.uniform(-0.8, 0.8, size=(v, d_e))
        self.embed[self.vocab.pad_id] = 0.0
        self.r1 = rng.normal(0.0, 1.0 / np.sqrt(d_e), size=(d_h, d_e))
        self.r2 = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d_h))
        self.readout = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d_h))
        # item key vectors, ordered like trie leaf rows
        self.item_keys = rng.normal(0.0, 1.0, size=(trie.item_count, d_h))
        self.positions = sinusoidal_positions(self.MAX_POSITIONS, d_h)

    # -- frozen encoder -----------------------------------------------------

    def encode_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Hidden states for a serialized token stream: (S, d_h)."""
        tokens = np.asarray(tokens)
        if tokens.size == 0:
            raise CatalogError("cannot encode an empty token stream")
        if tokens.min() < 0 or tokens.max() >= self.vocab.size:
            raise CatalogError(f"token id outside vocabulary of size {self.vocab.size}")
        if len(tokens) > self.MAX_POSITIONS:
            raise CatalogError(f"sequence length {len(tokens)} exceeds position table")
        e = self.embed[tokens]                                    # (S, d_e)
        return np.tanh(e @ self.r1.T + self.positions[: len(tokens)] @ self.r2.T)

    def encode_history(self, items) -> np.ndarray:
        return self.encode_tokens(self.vocab.serialize(items, self.trie))

    # -- ground-truth dynamics ----------------------------------------------

    def history_vector(self, items, states: np.ndarray | None = None) -> np.ndarray:
        """Recency-decayed readout of the item-level encoder states."""
        items = list(items)
        if not items:
            raise CatalogError("history must contain at least one item")
        if states is None:
            states = self.encode_history(items)
        first = self.vocab.first_digit_positions(len(items))
        w = self.config.gamma ** np.arange(len(items) - 1, -1, -1, dtype=np.float64)
        return self.readout @ (states[first].T @ w)

    def next_item_distribution(self, items) -> np.ndarray:
        """p*(. | history) over catalog items, ordered like trie leaf rows."""
        u = self.history_vector(items)
        scores = (self.item_keys @ u) / self.config.kappa
        scores -= scores.max()
        p = np.exp(scores)
        p /= p.sum()
        eps = self.config.epsilon
        return (1.0 - eps) * p + eps / self.trie.item_count

    def prob_of_item(self, items, item_id: int) -> float:
        p = self.next_item_distribution(items)
        return float(p[self.trie._row_of_item[int(item_id)]])

    # -- exact per-digit conditionals ----------------------------------------

    def digit_logits_all(self, leaf_probs: np.ndarray) -> list[np.ndarray]:
        """Log prefix-mass tables per depth: index t-1 has shape (n_{t-1}, C).

        Entry [row, c] is log of the total p* mass under prefix row || c;
        invalid digits carry the sentinel. Feeding row 0 of table t gives
        the teacher logits for digit t along the corresponding prefix.
        """
        masses = self.trie.prefix_masses(leaf_probs)
        out = []
        for t in range(self.trie.L):
            child = self.trie.child_rows[t]
            table = np.full(child.shape, SENTINEL, dtype=np.float64)
            ok = child >= 0
            table[ok] = np.log(masses[t + 1][child[ok]])
            out.append(table)
        return out

    def digit_logits(self, items, prefix) -> np.ndarray:
        """Teacher logits for the next digit after `prefix`: shape (C,)."""
        t, row = self.trie.prefix_row(prefix)
        if t >= self.trie.L:
            raise CatalogError(f"prefix {tuple(prefix)} is already complete")
        p = self.next_item_distribution(items)
        masses = self.trie.prefix_masses(p)
        child = self.trie.child_rows[t][row]
        logits = np.full(self.trie.C, SENTINEL, dtype=np.float64)
        ok = child >= 0
        logits[ok] = np.log(masses[t + 1][child[ok]])
        return logits

    def teacher_forced_logits(self, items, sid) -> np.ndarray:
        """Logits for every digit along a ground-truth SID: (L, C)."""
        digits = tuple(int(d) for d in sid)
        self.trie.item_of_sid(digits)  # validates the SID exists
        p = self.next_item_distribution(items)
        tables = self.digit_logits_all(p)
        out = np.empty((self.trie.L, self.trie.C), dtype=np.float64)
        row = 0
        for t in range(self.trie.L):
            out[t] = tables[t][row]
            row = self.trie.child_rows[t][row, digits[t]]
        return out

    # -- persistence ----------------------------------------------------------

    def frozen_params(self) -> dict[str, np.ndarray]:
        return {
            "oracle.embed": self.embed,
            "oracle.r1": self.r1,
            "oracle.r2": self.r2,
            "oracle.readout": self.readout,
            "oracle.item_keys": self.item_keys,
        }

    def save(self, path) -> None:
        checkpoint.save_checkpoint(path, self.frozen_params())

    def load_frozen(self, path) -> None:
        """Overwrite frozen tensors from a checkpoint (float32 storage)."""
        loaded = checkpoint.load_checkpoint(path)
        self.embed = loaded["oracle.embed"]
        self.r1 = loaded["oracle.r1"]
        self.r2 = loaded["oracle.r2"]
        self.readout = loaded["oracle.readout"]
        self.item_keys = loaded["oracle.item_keys"]


def calibrate_kappa(trie: PrefixTrie, config: OracleConfig, histories,
                    target_range=(0.3, 0.6)) -> OracleConfig:
    """Pick kappa so the oracle's mean top-1 mass lands in `target_range`.

    Scans a log grid; returns the config with the first kappa whose mean
    max-probability over the given histories falls inside the range, else
    the closest one.
    """
    lo, hi = target_range
    best, best_dist = None, np.inf
    for kappa in np.geomspace(0.05, 5.0, 25):
        cand = replace(config, kappa=float(kappa))
        oracle = OracleTeacher(trie, cand)
        mass = float(np.mean([oracle.next_item_distribution(h).max() for h in histories]))
        if lo <= mass <= hi:
            return cand
        dist = min(abs(mass - lo), abs(mass - hi))
        if dist < best_dist:
            best, best_dist = cand, dist
    return best
