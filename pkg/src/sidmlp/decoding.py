"""Constrained beam search over the prefix trie.

One engine drives every decoding path; only the per-step logit source
differs. The MLP source computes its context vector exactly once per user;
the teacher source aggregates exact prefix masses; the reference source
runs the forward-only transformer baseline; the m-mode source hands the
first m digits to the teacher and the rest to the student. Counters are
incremented by the sources, so complexity claims are checkable as exact
integer laws regardless of wall-clock noise.

Scoring convention (default): per-step log-probabilities come from a
softmax over the full codebook, and invalid digits are masked out after
normalization. The `renorm` mode instead normalizes over valid digits
only. Brute-force oracles must be run under the same flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .catalog import PrefixTrie
from .oracle import SENTINEL, OracleTeacher
from .student import StudentDecoder

MASK_MODES = ("post_softmax", "renorm")


@dataclass
class Counters:
    """Per-run instrumentation; integer-exact and wall-clock independent."""

    context_computations: int = 0
    head_evals: int = 0
    teacher_evals: int = 0
    block_evals: int = 0
    xattn_reads: int = 0
    sa_positions: int = 0
    kv_bytes: int = 0

    def merge(self, other: "Counters") -> None:
        for f in self.__dataclass_fields__:
            setattr(self, f, getattr(self, f) + getattr(other, f))

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 50
    k: int = 10
    m: int = 0                      # teacher-generated prefix digits
    mask_mode: str = "post_softmax"
    batch_users: int = 32

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError(f"beam size must be >= 1, got {self.beam}")
        if self.k > self.beam:
            raise ValueError(f"cutoff {self.k} exceeds beam size {self.beam}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask mode {self.mask_mode!r} not one of {MASK_MODES}")


def masked_log_probs(logits: np.ndarray, valid: np.ndarray, mask_mode: str) -> np.ndarray:
    """Row-wise log-probabilities under the chosen masking convention."""
    if mask_mode == "renorm":
        z = np.where(valid, logits, -np.inf)
        mx = z.max(axis=-1, keepdims=True)
        lse = mx + np.log(np.exp(z - mx).sum(axis=-1, keepdims=True))
        return np.where(valid, z - lse, -np.inf)
    mx = logits.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(logits - mx).sum(axis=-1, keepdims=True))
    return np.where(valid, logits - lse, -np.inf)


# ---------------------------------------------------------------------------
# the engine

def run_beam(trie: PrefixTrie, source, n_users: int, config: DecodeConfig):
    """Decode a chunk of users; returns per-user [(digits tuple, score), ...].

    Ties break on (score descending, prefix digits ascending); prefix keys
    are radix integers so digit-lexicographic order is numeric order.
    """
    C, L = trie.C, trie.L
    seg = np.arange(n_users, dtype=np.int64)       # owning user per active prefix
    rows = np.zeros(n_users, dtype=np.int64)       # trie row per active prefix
    keys = np.zeros(n_users, dtype=np.int64)
    digits = np.zeros((n_users, 0), dtype=np.int64)
    scores = np.zeros(n_users, dtype=np.float64)
    source.begin(n_users)
    for t in range(1, L + 1):
        logits = source.step_logits(t, seg, rows, digits)
        child = trie.child_rows[t - 1][rows]       # (n_active, C)
        valid = child >= 0
        logp = masked_log_probs(logits, valid, config.mask_mode)
        pi, ci = np.nonzero(valid)
        cand_user = seg[pi]
        cand_score = scores[pi] + logp[pi, ci]
        cand_key = keys[pi] * C + ci
        order = np.lexsort((cand_key, -cand_score, cand_user))
        u_sorted = cand_user[order]
        first = np.r_[True, u_sorted[1:] != u_sorted[:-1]]
        seg_start = np.maximum.accumulate(np.where(first, np.arange(len(order)), 0))
        keep = order[(np.arange(len(order)) - seg_start) < config.beam]
        parent = pi[keep]
        seg = cand_user[keep]
        scores = cand_score[keep]
        keys = cand_key[keep]
        rows = child[parent, ci[keep]]
        digits = np.concatenate([digits[parent], ci[keep][:, None]], axis=1)
        source.reorder(parent)
    out = [[] for _ in range(n_users)]
    for i in range(len(seg)):
        out[seg[i]].append((tuple(int(d) for d in digits[i]), float(scores[i])))
    return out


def decode_topk_items(ranked, trie: PrefixTrie, k: int) -> list[int]:
    """Map ranked (sid, score) pairs to item ids, order preserved."""
    return [trie.item_of_sid(sid) for sid, _ in ranked[:k]]


# ---------------------------------------------------------------------------
# logit sources

class TeacherSource:
    """Exact per-digit conditionals from the oracle's p* over the trie."""

    def __init__(self, oracle: OracleTeacher, histories, counters: Counters):
        self.oracle = oracle
        self.histories = list(histories)
        self.counters = counters

    def begin(self, n_users):
        assert n_users == len(self.histories)
        trie = self.oracle.trie
        self.masses = []
        per_user = [trie.prefix_masses(self.oracle.next_item_distribution(h))
                    for h in self.histories]
        for t in range(trie.L + 1):
            self.masses.append(np.stack([m[t] for m in per_user]))

    def step_logits(self, t, seg, rows, digits):
        trie = self.oracle.trie
        child = trie.child_rows[t - 1][rows]
        gathered = self.masses[t][seg[:, None], np.clip(child, 0, None)]
        with np.errstate(divide="ignore"):
            logits = np.where(child >= 0, np.log(gathered), SENTINEL)
        self.counters.teacher_evals += len(rows)
        return logits

    def reorder(self, parent):
        pass


class StudentSource:
    """Per-digit MLP heads over a context computed once per user."""

    def __init__(self, student: StudentDecoder, h_pad: np.ndarray, key_mask: np.ndarray,
                 counters: Counters, require_trained: bool = True):
        if require_trained and not student.trained:
            raise ValueError("student decoder has not been trained")
        self.student = student
        self.h_pad = h_pad
        self.key_mask = key_mask
        self.counters = counters
        self.z = None
        self.hidden = None

    def begin(self, n_users):
        cfg = self.student.config
        if cfg.context_readout == "once" or cfg.context_mode == "linear_meanpool":
            self.z = self.student.compute_context(self.h_pad, self.key_mask).data
            self.counters.context_computations += n_users
            # the single context read covers every non-padding encoder state
            if cfg.context_mode == "mha":
                self.counters.xattn_reads += int(self.key_mask.sum())
        self.hidden = None

    def step_logits(self, t, seg, rows, digits):
        cfg = self.student.config
        if self.z is None:
            z_rows = self.student.compute_context(
                self.h_pad[seg], self.key_mask[seg], prefix_digits=digits).data
            self.counters.context_computations += len(seg)
            self.counters.xattn_reads += int(self.key_mask[seg].sum())
        else:
            z_rows = self.z[seg]
        logits_t, hidden = self.student.head_forward(
            Tensor(z_rows), digits, t,
            prev_hidden=None if self.hidden is None else Tensor(self.hidden))
        self.counters.head_evals += len(seg)
        if cfg.cascade == "hidden_state":
            self.hidden = hidden.data
        out = logits_t.data
        return self.student.digit_slice(out, t)

    def reorder(self, parent):
        if self.hidden is not None:
            self.hidden = self.hidden[parent]


class MModeSource:
    """Teacher generates the first m digits, the student the rest."""

    def __init__(self, teacher: TeacherSource, student: StudentSource, m: int, sid_len: int):
        if not 0 <= m <= sid_len:
            raise ValueError(f"m must be in [0, {sid_len}], got {m}")
        if m > 0 and student.student.config.cascade != "off":
            raise ValueError("m-mode handoff cannot resume a cascaded hidden state")
        self.teacher = teacher
        self.student = student
        self.m = m
        self.sid_len = sid_len

    def begin(self, n_users):
        if self.m > 0:
            self.teacher.begin(n_users)
        if self.m < self.sid_len:
            self.student.begin(n_users)

    def step_logits(self, t, seg, rows, digits):
        if t <= self.m:
            return self.teacher.step_logits(t, seg, rows, digits)
        return self.student.step_logits(t, seg, rows, digits)

    def reorder(self, parent):
        self.student.reorder(parent)


# ---------------------------------------------------------------------------
# public decode paths (chunked over users)

def _chunks(n, size):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def teacher_beam_search(oracle: OracleTeacher, histories, config: DecodeConfig,
                        counters: Counters | None = None):
    """Exact-teacher constrained beam decode for a list of histories."""
    counters = counters if counters is not None else Counters()
    out = []
    histories = list(histories)
    for lo, hi in _chunks(len(histories), config.batch_users):
        src = TeacherSource(oracle, histories[lo:hi], counters)
        out.extend(run_beam(oracle.trie, src, hi - lo, config))
    return out


def pad_states(state_list: list[np.ndarray]):
    """Stack variable-length (S, d) states into (B, S_max, d) plus a mask."""
    b = len(state_list)
    s_max = max(h.shape[0] for h in state_list)
    d = state_list[0].shape[1]
    h_pad = np.zeros((b, s_max, d))
    mask = np.zeros((b, s_max))
    for i, h in enumerate(state_list):
        h_pad[i, : h.shape[0]] = h
        mask[i, : h.shape[0]] = 1.0
    return h_pad, mask


def mlp_beam_search(student: StudentDecoder, states: list[np.ndarray], trie: PrefixTrie,
                    config: DecodeConfig, counters: Counters | None = None,
                    require_trained: bool = True):
    """Student-path decode from per-user encoder states."""
    counters = counters if counters is not None else Counters()
    out = []
    for lo, hi in _chunks(len(states), config.batch_users):
        h_pad, mask = pad_states(states[lo:hi])
        src = StudentSource(student, h_pad, mask, counters, require_trained)
        out.extend(run_beam(trie, src, hi - lo, config))
    return out


def m_mode_decode(oracle: OracleTeacher, student: StudentDecoder, histories,
                  states: list[np.ndarray], config: DecodeConfig,
                  counters: Counters | None = None, require_trained: bool = True):
    """Hybrid decode: m=0 is the pure MLP path, m=L the pure teacher path."""
    counters = counters if counters is not None else Counters()
    out = []
    histories = list(histories)
    for lo, hi in _chunks(len(histories), config.batch_users):
        h_pad, mask = pad_states(states[lo:hi])
        teacher_src = TeacherSource(oracle, histories[lo:hi], counters)
        student_src = StudentSource(student, h_pad, mask, counters, require_trained)
        src = MModeSource(teacher_src, student_src, config.m, oracle.trie.L)
        out.extend(run_beam(oracle.trie, src, hi - lo, config))
    return out


def autoregressive_beam_search(source_factory, trie: PrefixTrie, n_users: int,
                               config: DecodeConfig):
    """Generic path: `source_factory(lo, hi, counters)` builds a chunk source."""
    counters = Counters()
    out = []
    for lo, hi in _chunks(n_users, config.batch_users):
        src = source_factory(lo, hi, counters)
        out.extend(run_beam(trie, src, hi - lo, config))
    return out, counters


# ---------------------------------------------------------------------------
# brute-force oracle (test/verification route; independent of the engine)

def enumerate_all_items(trie: PrefixTrie, logits_for_prefix, mask_mode: str):
    """Score every catalog item by summing per-digit log-probabilities.

    `logits_for_prefix(t, prefix_digits) -> (C,)` supplies raw logits; the
    walk is a plain per-item Python loop so it shares no code with the beam
    engine. Returns [(digits, score)] sorted by (score desc, digits asc).
    """
    results = []
    for row in range(trie.item_count):
        sid = tuple(int(d) for d in trie.sid_matrix[row])
        total = 0.0
        for t in range(1, trie.L + 1):
            prefix = sid[: t - 1]
            logits = np.asarray(logits_for_prefix(t, prefix), dtype=np.float64)
            valid = trie.mask_vector(prefix)
            logp = masked_log_probs(logits[None, :], valid[None, :], mask_mode)[0]
            total += float(logp[sid[t - 1]])
        results.append((sid, total))
    results.sort(key=lambda r: (-r[1], r[0]))
    return results
