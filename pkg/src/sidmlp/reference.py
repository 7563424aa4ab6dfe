"""Forward-only transformer decoder used as the latency baseline.

An N-layer stack of masked self-attention over the SID prefix, cross
attention over the encoder states, and a feed-forward block, with frozen
random weights and an optional KV cache. Its logits are rankings-grade
noise by construction: the quality-bearing autoregressive path uses the
exact teacher conditionals instead, and this stack exists to pay the
honest per-digit, per-beam, per-layer cost that the MLP path avoids.

Counters: one block evaluation per layer per active beam per digit step,
cross-attention reads of all encoder positions per block evaluation, and
self-attention position counts that separate cached from uncached runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoding import Counters
from .tokens import TokenVocab

BYTES_PER_VALUE = 8  # float64 cache entries


@dataclass(frozen=True)
class ReferenceDecoderConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    ffn_hidden: int = 512
    kv_cache: bool = True
    seed: int = 123

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"need at least one layer, got {self.layers}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ln(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


class ReferenceDecoder:
    """Frozen random transformer decoder over digit-token embeddings."""

    def __init__(self, config: ReferenceDecoderConfig, vocab: TokenVocab, d_h: int):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        s = 1.0 / np.sqrt(d)
        self.embed = rng.normal(0.0, 1.0, size=(vocab.L * vocab.C + 1, d))  # +1 BOS
        self.bos_id = vocab.L * vocab.C
        self.h_proj = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d))
        self.layers = []
        for _ in range(config.layers):
            self.layers.append({
                "sq": rng.normal(0, s, (d, d)), "sk": rng.normal(0, s, (d, d)),
                "sv": rng.normal(0, s, (d, d)), "so": rng.normal(0, s, (d, d)),
                "cq": rng.normal(0, s, (d, d)), "ck": rng.normal(0, s, (d, d)),
                "cv": rng.normal(0, s, (d, d)), "co": rng.normal(0, s, (d, d)),
                "f1": rng.normal(0, s, (d, config.ffn_hidden)),
                "f2": rng.normal(0, 1.0 / np.sqrt(config.ffn_hidden), (config.ffn_hidden, d)),
            })
        self.head = rng.normal(0, s, (d, vocab.C))

    def _mha(self, q, k, v):
        """Multi-head attention over row sets: q (n, Tq, d), k/v (n, Tk, d)."""
        n, tq, d = q.shape
        h = self.config.heads
        dk = d // h
        qh = q.reshape(n, tq, h, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(n, k.shape[1], h, dk).transpose(0, 2, 1, 3)
        vh = v.reshape(n, v.shape[1], h, dk).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dk)
        if tq > 1:  # causal mask for full-prefix self-attention
            mask = np.triu(np.full((tq, tq), -1e30), k=1)
            scores = scores + mask
        att = _softmax(scores)
        out = (att @ vh).transpose(0, 2, 1, 3).reshape(n, tq, d)
        return out

    def _xattn(self, q, hk, hv, key_bias):
        n, tq, d = q.shape
        h = self.config.heads
        dk = d // h
        qh = q.reshape(n, tq, h, dk).transpose(0, 2, 1, 3)
        kh = hk.reshape(n, hk.shape[1], h, dk).transpose(0, 2, 1, 3)
        vh = hv.reshape(n, hv.shape[1], h, dk).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dk) + key_bias[:, None, None, :]
        att = _softmax(scores)
        return (att @ vh).transpose(0, 2, 1, 3).reshape(n, tq, d)


class ReferenceSource:
    """Beam-engine logit source wrapping the reference decoder.

    Holds the per-beam KV cache; `reorder` forks cache rows exactly the way
    a served autoregressive decoder must when beams are re-ranked.
    """

    def __init__(self, decoder: ReferenceDecoder, states: list[np.ndarray],
                 counters: Counters, tracker=None):
        self.dec = decoder
        self.states = states
        self.counters = counters
        self.tracker = tracker

    def begin(self, n_users):
        assert n_users == len(self.states)
        d = self.dec.config.d_model
        s_max = max(h.shape[0] for h in self.states)
        self.s_lens = np.array([h.shape[0] for h in self.states], dtype=np.int64)
        h_pad = np.zeros((n_users, s_max, self.states[0].shape[1]))
        self.key_bias = np.full((n_users, s_max), -1e30)
        for i, h in enumerate(self.states):
            h_pad[i, : h.shape[0]] = h
            self.key_bias[i, : h.shape[0]] = 0.0
        proj = h_pad @ self.dec.h_proj               # (U, S, d)
        self.hk = [proj @ lay["ck"] for lay in self.dec.layers]
        self.hv = [proj @ lay["cv"] for lay in self.dec.layers]
        self._track(proj, *self.hk, *self.hv)
        self.cache_k = [np.zeros((n_users, 0, d)) for _ in self.dec.layers]
        self.cache_v = [np.zeros((n_users, 0, d)) for _ in self.dec.layers]

    def _track(self, *arrays):
        if self.tracker is not None:
            for a in arrays:
                self.tracker.track(a)

    def step_logits(self, t, seg, rows, digits):
        if self.dec.config.kv_cache:
            return self._step_cached(t, seg, digits)
        return self._step_full(t, seg, digits)

    def _token_ids(self, t, digits):
        if t == 1:
            return np.full(len(digits), self.dec.bos_id, dtype=np.int64)
        return (t - 2) * self.dec.vocab.C + digits[:, -1]

    def _block_counters(self, n, t, seg, sa_positions, xattn_queries):
        c = self.counters
        layers = self.dec.config.layers
        c.block_evals += layers * n
        c.xattn_reads += layers * xattn_queries * int(self.s_lens[seg].sum())
        c.sa_positions += layers * sa_positions

    def _step_cached(self, t, seg, digits):
        dec, cfg = self.dec, self.dec.config
        n = len(seg)
        x = dec.embed[self._token_ids(t, digits)][:, None, :]     # (n, 1, d)
        self._track(x)
        kv_traffic = 0
        for li, lay in enumerate(dec.layers):
            q = x @ lay["sq"]
            k_new = x @ lay["sk"]
            v_new = x @ lay["sv"]
            k = np.concatenate([self.cache_k[li], k_new], axis=1)  # (n, t, d)
            v = np.concatenate([self.cache_v[li], v_new], axis=1)
            self.cache_k[li] = k
            self.cache_v[li] = v
            self._track(k, v)
            attn = dec._mha(q, k, v) @ lay["so"]
            x = _ln(x + attn)
            xa = dec._xattn(x @ lay["cq"], self.hk[li][seg], self.hv[li][seg],
                            self.key_bias[seg]) @ lay["co"]
            x = _ln(x + xa)
            ff = np.maximum(x @ lay["f1"], 0.0) @ lay["f2"]
            x = _ln(x + ff)
            self._track(x)
            # new K/V written once, full cache read back during attention
            kv_traffic += 2 * k_new.size + 2 * k.size
        self._block_counters(n, t, seg, sa_positions=n * t, xattn_queries=1)
        self.counters.kv_bytes += kv_traffic * BYTES_PER_VALUE
        logits = (x[:, 0, :] @ dec.head)
        self._track(logits)
        return logits

    def _step_full(self, t, seg, digits):
        dec = self.dec
        n = len(seg)
        toks = np.empty((n, t), dtype=np.int64)
        toks[:, 0] = dec.bos_id
        for j in range(1, t):
            toks[:, j] = (j - 1) * dec.vocab.C + digits[:, j - 1]
        x = dec.embed[toks]                                       # (n, t, d)
        self._track(x)
        for li, lay in enumerate(dec.layers):
            attn = dec._mha(x @ lay["sq"], x @ lay["sk"], x @ lay["sv"]) @ lay["so"]
            x = _ln(x + attn)
            xa = dec._xattn(x @ lay["cq"], self.hk[li][seg], self.hv[li][seg],
                            self.key_bias[seg]) @ lay["co"]
            x = _ln(x + xa)
            ff = np.maximum(x @ lay["f1"], 0.0) @ lay["f2"]
            x = _ln(x + ff)
            self._track(x)
        self._block_counters(n, t, seg, sa_positions=n * (t * (t + 1)) // 2,
                             xattn_queries=t)
        logits = x[:, -1, :] @ dec.head
        self._track(logits)
        return logits

    def reorder(self, parent):
        if self.dec.config.kv_cache:
            self.cache_k = [k[parent] for k in self.cache_k]
            self.cache_v = [v[parent] for v in self.cache_v]


def reference_beam_search(decoder: ReferenceDecoder, states: list[np.ndarray],
                          trie, config, counters: Counters | None = None,
                          tracker=None):
    """Latency-baseline decode; logits are the frozen stack's own."""
    from .decoding import _chunks, run_beam

    counters = counters if counters is not None else Counters()
    out = []
    for lo, hi in _chunks(len(states), config.batch_users):
        src = ReferenceSource(decoder, states[lo:hi], counters, tracker)
        out.extend(run_beam(trie, src, hi - lo, config))
    return out, counters
