"""Role-specific MLP encoder that replaces the frozen teacher encoder.

Serialized tokens are routed to one of four MLPs by role: digit position
1-3 gets its own MLP, and a fourth handles the last digit plus the user
and EOS markers. Each layer mean-pools the non-padding token states into a
global vector, concatenates it to every token state, and applies the
role MLP as a residual update. Padding rows are never pooled and never
updated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokens import TokenVocab

N_ROLES = 4


class RoleError(ValueError):
    pass


def assign_roles(tokens: np.ndarray, vocab: TokenVocab) -> np.ndarray:
    """Role index in 1..4 per serialized position; validates the stream.

    A well-formed stream is [user, (d1..dL)*k, EOS] with each digit token
    drawn from its position's codebook block. Role assignment needs the
    four-digit layout: digit j -> role j for j < 4, and role 4 for the
    final digit, user, and EOS.
    """
    if vocab.L != 4:
        raise RoleError(f"role assignment is defined for 4-digit SIDs, got L={vocab.L}")
    tokens = np.asarray(tokens)
    n = len(tokens)
    if n < 2 or (n - 2) % vocab.L != 0:
        raise RoleError(f"stream length {n} does not match [user, digits*, EOS]")
    if tokens[0] != vocab.user_id:
        raise RoleError(f"position 0: expected user token, got {tokens[0]}")
    if tokens[-1] != vocab.eos_id:
        raise RoleError(f"position {n - 1}: expected EOS token, got {tokens[-1]}")
    roles = np.empty(n, dtype=np.int64)
    roles[0] = N_ROLES
    roles[-1] = N_ROLES
    for i in range(1, n - 1):
        j = (i - 1) % vocab.L + 1            # 1-based digit position
        tok = int(tokens[i])
        if not (j - 1) * vocab.C <= tok < j * vocab.C:
            raise RoleError(f"position {i}: token {tok} is not a digit-{j} token")
        roles[i] = min(j, N_ROLES)
    return roles


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    ffn_hidden: int = 256
    d_h: int = 64
    d_e: int = 32
    max_positions: int = 512
    share_roles: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")


class StudentEncoder:
    """Trainable replacement for the teacher encoder states."""

    def __init__(self, config: EncoderConfig, vocab: TokenVocab,
                 teacher_embed: np.ndarray, seed: int = 0):
        if teacher_embed.shape != (vocab.size, config.d_e):
            raise ValueError(f"teacher embedding {teacher_embed.shape} does not match "
                             f"vocab {vocab.size} x d_e {config.d_e}")
        self.config = config
        self.vocab = vocab
        self.teacher_embed = np.array(teacher_embed, dtype=np.float64)
        self.params: dict[str, np.ndarray] = {}
        self.trained = False
        rng = np.random.default_rng(seed)
        p = self.params
        p["proj.w"] = ad.glorot(rng, config.d_e, config.d_h)
        p["proj.b"] = np.zeros(config.d_h)
        p["pos.table"] = rng.uniform(-0.02, 0.02, size=(config.max_positions, config.d_h))
        for r in range(config.depth):
            for j in self._role_ids():
                p[f"l{r}.f{j}.w1"] = ad.glorot(rng, 2 * config.d_h, config.ffn_hidden)
                p[f"l{r}.f{j}.b1"] = np.zeros(config.ffn_hidden)
                p[f"l{r}.f{j}.w2"] = ad.glorot(rng, config.ffn_hidden, config.d_h)
                p[f"l{r}.f{j}.b2"] = np.zeros(config.d_h)

    def _role_ids(self):
        return (1,) if self.config.share_roles else tuple(range(1, N_ROLES + 1))

    def _p(self, name, tape) -> Tensor:
        if tape is None:
            return Tensor(self.params[name])
        return tape.param(name, self.params[name])

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, tokens: np.ndarray, lengths: np.ndarray | None = None,
                tape=None) -> Tensor:
        """Encoder states for padded token batches: (B, S) -> (B, S, d_h).

        `lengths` gives each row's non-padding length; positions at or past
        it are padding (kept at their initial state, excluded from pooling).
        A 1-D token array is treated as a single unpadded row.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        b, s = tokens.shape
        if s > cfg.max_positions:
            raise RoleError(f"sequence length {s} exceeds position table {cfg.max_positions}")
        if lengths is None:
            lengths = np.full(b, s, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        valid = np.arange(s)[None, :] < lengths[:, None]          # (B, S)
        pad_safe = np.where(valid, tokens, self.vocab.pad_id)
        if pad_safe.min() < 0 or pad_safe.max() >= self.vocab.size:
            raise RoleError(f"token id outside vocabulary of size {self.vocab.size}")

        roles = np.zeros((b, s), dtype=np.int64)
        for i in range(b):
            roles[i, : lengths[i]] = assign_roles(tokens[i, : lengths[i]], self.vocab)
        if cfg.share_roles:
            roles = np.where(valid, 1, 0)

        emb = Tensor(self.teacher_embed[pad_safe])                # (B, S, d_e)
        x = ad.add(ad.tdot(emb, self._p("proj.w", tape)), self._p("proj.b", tape))
        pos = ad.embedding(self._p("pos.table", tape),
                           np.broadcast_to(np.arange(s), (b, s)))
        x = ad.add(x, pos)

        mask = valid.astype(np.float64)
        flat_roles = roles.reshape(-1)
        for r in range(cfg.depth):
            g = ad.masked_mean_rows(x, mask)                      # (B, d_h)
            cat = ad.concat([ad.reshape(x, (b * s, cfg.d_h)),
                             ad.reshape(ad.expand_rows(g, s), (b * s, cfg.d_h))])
            update = None
            for j in self._role_ids():
                idx = np.nonzero(flat_roles == j)[0]
                if idx.size == 0:
                    continue
                rows = ad.take_rows(cat, idx)
                hid = ad.relu(ad.add(ad.matmul(rows, self._p(f"l{r}.f{j}.w1", tape)),
                                     self._p(f"l{r}.f{j}.b1", tape)))
                out = ad.add(ad.matmul(hid, self._p(f"l{r}.f{j}.w2", tape)),
                             self._p(f"l{r}.f{j}.b2", tape))
                placed = ad.put_rows(out, idx, b * s)
                update = placed if update is None else ad.add(update, placed)
            if update is not None:
                x = ad.add(x, ad.reshape(update, (b, s, cfg.d_h)))
        if squeeze:
            x = ad.reshape(x, (s, cfg.d_h))
        return x
