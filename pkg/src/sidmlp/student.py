"""Student decoder: one-shot attention context plus per-digit MLP heads.

The context vector is computed once per user from the encoder states and
reused across every digit step and beam. Each digit position then gets a
dedicated one-hidden-layer MLP whose input concatenates the context with
the embeddings of the prefix digits generated so far.

Every ablation variant is a config flag: prefix handling (concat / sum /
none), head sharing, cascaded hidden state, linear mean-pool context,
per-digit context readout, FFN removal, trainable embeddings, and
full-vocabulary output logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokens import TokenVocab

PREFIX_MODES = ("concat", "sum", "none")
HEAD_MODES = ("per_digit", "shared")
CASCADE_MODES = ("off", "hidden_state")
CONTEXT_MODES = ("mha", "linear_meanpool")
READOUT_MODES = ("once", "per_digit")
EMBED_MODES = ("frozen_teacher", "trainable")
VOCAB_MODES = ("digit", "full")


@dataclass(frozen=True)
class StudentConfig:
    L: int = 4
    C: int = 256
    d_h: int = 64
    d_e: int = 32
    head_hidden: int = 512
    attn_heads: int = 4
    attn_dim: int = 256
    prefix_mode: str = "concat"
    head_mode: str = "per_digit"
    cascade: str = "off"
    context_mode: str = "mha"
    context_ffn: str = "on"
    context_readout: str = "once"
    embeddings: str = "frozen_teacher"
    vocab_logits: str = "digit"
    dropout: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        checks = [
            (self.prefix_mode, PREFIX_MODES), (self.head_mode, HEAD_MODES),
            (self.cascade, CASCADE_MODES), (self.context_mode, CONTEXT_MODES),
            (self.context_readout, READOUT_MODES), (self.embeddings, EMBED_MODES),
            (self.vocab_logits, VOCAB_MODES), (self.context_ffn, ("on", "off")),
        ]
        for value, allowed in checks:
            if value not in allowed:
                raise ValueError(f"{value!r} not one of {allowed}")
        if self.head_mode == "shared" and self.prefix_mode == "concat":
            raise ValueError("shared head needs a fixed input width; use sum or none prefix mode")
        if self.head_mode == "shared" and self.cascade != "off":
            raise ValueError("shared head cannot combine with cascaded hidden state")
        if self.attn_dim % self.attn_heads != 0:
            raise ValueError(f"attn_dim {self.attn_dim} not divisible by {self.attn_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def vocab(self) -> TokenVocab:
        return TokenVocab(self.L, self.C)

    @property
    def out_dim(self) -> int:
        # `full` emulates predicting over the whole serialized vocabulary
        return self.L * self.C + 2 if self.vocab_logits == "full" else self.C

    def head_input_dim(self, t: int) -> int:
        if self.prefix_mode == "none":
            base = self.d_h
        elif self.prefix_mode == "sum":
            base = self.d_h + self.d_e
        else:
            base = self.d_h + (t - 1) * self.d_e
        if self.cascade == "hidden_state" and t > 1:
            base += self.head_hidden
        return base

    def head_names(self) -> list[str]:
        if self.head_mode == "shared":
            return ["head"] * self.L
        return [f"head{t}" for t in range(1, self.L + 1)]

    def to_fields(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_fields(fields_map: dict) -> "StudentConfig":
        kwargs = {name: _coerce(fields_map[name], name)
                  for name in StudentConfig.__dataclass_fields__ if name in fields_map}
        return StudentConfig(**kwargs)


def _coerce(raw, name):
    if name in ("dropout",):
        return float(raw)
    if name in ("prefix_mode", "head_mode", "cascade", "context_mode", "context_ffn",
                "context_readout", "embeddings", "vocab_logits", "activation"):
        return str(raw)
    return int(raw)


class StudentDecoder:
    """Trainable context block + digit heads over a frozen teacher embedding."""

    def __init__(self, config: StudentConfig, teacher_embed: np.ndarray, seed: int = 0):
        self.config = config
        vocab = config.vocab
        if teacher_embed.shape != (vocab.size, config.d_e):
            raise ValueError(f"teacher embedding {teacher_embed.shape} does not match "
                             f"vocab {vocab.size} x d_e {config.d_e}")
        self.teacher_embed = np.array(teacher_embed, dtype=np.float64)
        self.params: dict[str, np.ndarray] = {}
        self.trained = False
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg = self.config
        p = self.params
        if cfg.context_mode == "mha":
            p["ctx.wq"] = ad.glorot(rng, cfg.d_h, cfg.d_h)
            p["mha.wq"] = ad.glorot(rng, cfg.d_h, cfg.attn_dim)
            p["mha.wk"] = ad.glorot(rng, cfg.d_h, cfg.attn_dim)
            p["mha.wv"] = ad.glorot(rng, cfg.d_h, cfg.attn_dim)
            p["mha.wo"] = ad.glorot(rng, cfg.attn_dim, cfg.d_h)
            p["ctx.ln1_g"] = np.ones(cfg.d_h)
            p["ctx.ln1_b"] = np.zeros(cfg.d_h)
            if cfg.context_ffn == "on":
                p["ctx.ffn_w1"] = ad.glorot(rng, cfg.d_h, cfg.attn_dim)
                p["ctx.ffn_b1"] = np.zeros(cfg.attn_dim)
                p["ctx.ffn_w2"] = ad.glorot(rng, cfg.attn_dim, cfg.d_h)
                p["ctx.ffn_b2"] = np.zeros(cfg.d_h)
                p["ctx.ln2_g"] = np.ones(cfg.d_h)
                p["ctx.ln2_b"] = np.zeros(cfg.d_h)
            if cfg.context_readout == "per_digit":
                p["ctx.wp"] = ad.glorot(rng, cfg.d_e, cfg.d_h)
        else:
            p["ctx.wlin"] = ad.glorot(rng, cfg.d_h, cfg.d_h)
        seen = set()
        for t, name in enumerate(self.config.head_names(), start=1):
            if name in seen:
                continue
            seen.add(name)
            d_in = cfg.head_input_dim(t)
            p[f"{name}.w1"] = ad.glorot(rng, d_in, cfg.head_hidden)
            p[f"{name}.b1"] = np.zeros(cfg.head_hidden)
            p[f"{name}.w2"] = ad.glorot(rng, cfg.head_hidden, cfg.out_dim)
            p[f"{name}.b2"] = np.zeros(cfg.out_dim)
        if cfg.embeddings == "trainable":
            p["embed.table"] = rng.uniform(-0.1, 0.1,
                                           size=(cfg.vocab.size, cfg.d_e))

    # -- plumbing -----------------------------------------------------------

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _p(self, name: str, tape) -> Tensor:
        if tape is None:
            return Tensor(self.params[name])
        return tape.param(name, self.params[name])

    def _act(self):
        return ad.gelu if self.config.activation == "gelu" else ad.relu

    def _embed_rows(self, token_ids: np.ndarray, tape) -> Tensor:
        if self.config.embeddings == "trainable":
            return ad.embedding(self._p("embed.table", tape), token_ids)
        return Tensor(self.teacher_embed[token_ids])

    def _prefix_token_ids(self, digits: np.ndarray) -> np.ndarray:
        """Digit values (B, t-1) -> position-specific token ids."""
        t_minus_1 = digits.shape[1]
        offsets = (np.arange(t_minus_1, dtype=np.int64) * self.config.C)[None, :]
        return digits + offsets

    # -- one-shot context -----------------------------------------------------

    def compute_context(self, h, key_mask=None, tape=None, train: bool = False,
                        drop_rng=None, prefix_digits: np.ndarray | None = None) -> Tensor:
        """Context vector z per user row: (B, S, d_h) -> (B, d_h).

        In `per_digit` readout mode the pooled query is shifted by a
        projection of the summed prefix embeddings, so z depends on the
        prefix; `once` mode ignores `prefix_digits` entirely.
        """
        cfg = self.config
        if not isinstance(h, Tensor):
            h = Tensor(h)
        if h.ndim != 3 or h.shape[1] < 1:
            raise ad.ShapeMismatch(f"encoder states must be (B, S>=1, d_h), got {h.shape}")
        pooled = ad.masked_mean_rows(h, key_mask)
        if cfg.context_mode == "linear_meanpool":
            return ad.matmul(pooled, self._p("ctx.wlin", tape))
        q = ad.matmul(pooled, self._p("ctx.wq", tape))
        if cfg.context_readout == "per_digit" and prefix_digits is not None \
                and prefix_digits.shape[1] > 0:
            emb = self._embed_rows(self._prefix_token_ids(prefix_digits), tape)
            ones = Tensor(np.ones(emb.shape[:2]))
            q = ad.add(q, ad.matmul(ad.attn_apply(ones, emb), self._p("ctx.wp", tape)))
        names = ["mha.wq", "mha.wk", "mha.wv", "mha.wo", "ctx.ln1_g", "ctx.ln1_b"]
        if cfg.context_ffn == "on":
            names += ["ctx.ffn_w1", "ctx.ffn_b1", "ctx.ffn_w2", "ctx.ffn_b2",
                      "ctx.ln2_g", "ctx.ln2_b"]
        block = {n.split(".", 1)[1]: self._p(n, tape) for n in names}
        drop = None
        if train and cfg.dropout > 0 and drop_rng is not None:
            drop = ad.dropout_mask(drop_rng, (h.shape[0], h.shape[1]), cfg.dropout)
        return ad.mha_block(q, h, block, cfg.attn_heads, key_mask=key_mask,
                            use_ffn=cfg.context_ffn == "on", activation=self._act(),
                            attn_dropout=drop)

    # -- digit heads ----------------------------------------------------------

    def head_input(self, z: Tensor, prefix_digits: np.ndarray, t: int, tape=None,
                   prev_hidden: Tensor | None = None) -> Tensor:
        cfg = self.config
        prefix_digits = np.asarray(prefix_digits, dtype=np.int64)
        if prefix_digits.ndim != 2 or prefix_digits.shape[1] != t - 1:
            raise ad.ShapeMismatch(
                f"digit {t} expects a prefix of {t - 1} digits, got {prefix_digits.shape}")
        if prefix_digits.size and (prefix_digits.min() < 0 or prefix_digits.max() >= cfg.C):
            raise ad.ShapeMismatch(f"prefix digit outside [0, {cfg.C})")
        parts = [z]
        if cfg.prefix_mode == "concat" and t > 1:
            emb = self._embed_rows(self._prefix_token_ids(prefix_digits), tape)
            parts.append(ad.reshape(emb, (z.shape[0], (t - 1) * cfg.d_e)))
        elif cfg.prefix_mode == "sum":
            if t > 1:
                emb = self._embed_rows(self._prefix_token_ids(prefix_digits), tape)
                ones = Tensor(np.ones(emb.shape[:2]))
                parts.append(ad.attn_apply(ones, emb))
            else:
                parts.append(Tensor(np.zeros((z.shape[0], cfg.d_e))))
        if cfg.cascade == "hidden_state" and t > 1:
            if prev_hidden is None:
                raise ValueError("cascade mode needs the previous head's hidden activation")
            parts.append(prev_hidden)
        return parts[0] if len(parts) == 1 else ad.concat(parts)

    def head_forward(self, z: Tensor, prefix_digits, t: int, tape=None,
                     train: bool = False, drop_rng=None,
                     prev_hidden: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Digit-t logits from the cached context and the prefix.

        Returns (logits, hidden); the hidden activation feeds the next head
        in cascade mode and is otherwise ignored.
        """
        cfg = self.config
        if not 1 <= t <= cfg.L:
            raise ValueError(f"digit index {t} outside 1..{cfg.L}")
        name = cfg.head_names()[t - 1]
        x = self.head_input(z, np.asarray(prefix_digits), t, tape, prev_hidden)
        act = self._act()
        hidden = act(ad.add(ad.matmul(x, self._p(f"{name}.w1", tape)),
                            self._p(f"{name}.b1", tape)))
        if train and cfg.dropout > 0 and drop_rng is not None:
            hidden = ad.scale(hidden, ad.dropout_mask(drop_rng, hidden.shape, cfg.dropout))
        logits = ad.add(ad.matmul(hidden, self._p(f"{name}.w2", tape)),
                        self._p(f"{name}.b2", tape))
        return logits, hidden

    def forward_teacher_forced(self, h, key_mask, sids: np.ndarray, tape=None,
                               train: bool = False, drop_rng=None) -> list[Tensor]:
        """All L digit logits under ground-truth prefixes: list of (B, out)."""
        cfg = self.config
        sids = np.asarray(sids, dtype=np.int64)
        if sids.ndim != 2 or sids.shape[1] != cfg.L:
            raise ad.ShapeMismatch(f"expected SIDs of shape (B, {cfg.L}), got {sids.shape}")
        z = None
        if cfg.context_readout == "once" or cfg.context_mode == "linear_meanpool":
            z = self.compute_context(h, key_mask, tape, train, drop_rng)
        logits, hidden = [], None
        for t in range(1, cfg.L + 1):
            prefix = sids[:, : t - 1]
            if z is None or (cfg.context_readout == "per_digit" and cfg.context_mode == "mha"):
                zt = self.compute_context(h, key_mask, tape, train, drop_rng,
                                          prefix_digits=prefix)
            else:
                zt = z
            lt, hidden = self.head_forward(zt, prefix, t, tape, train, drop_rng,
                                           prev_hidden=hidden)
            logits.append(lt)
        return logits

    # -- digit-block slicing for full-vocab heads -----------------------------

    def digit_slice(self, logits: np.ndarray, t: int) -> np.ndarray:
        """Restrict head output to digit t's codebook block."""
        if self.config.vocab_logits == "digit":
            return logits
        lo = (t - 1) * self.config.C
        return logits[..., lo: lo + self.config.C]

    def target_index(self, digit: int, t: int) -> int:
        if self.config.vocab_logits == "digit":
            return digit
        return (t - 1) * self.config.C + digit
