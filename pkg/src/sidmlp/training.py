"""Distillation training: per-digit KL+CE against the exact teacher.

The student is teacher-forced: all digit heads see ground-truth prefixes,
so the per-digit losses are independent given the shared context. The
encoder replacement trains in two stages: state matching against the
frozen teacher encoder (masked MSE), then logit distillation with the
encoder frozen. An end-to-end mode (no stage 1) exists as an ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .catalog import PrefixTrie
from .datagen import Sample
from .decoding import Counters, DecodeConfig, decode_topk_items, mlp_beam_search
from .encoder import StudentEncoder
from .metrics import ndcg_at_k, recall_at_k
from .oracle import SENTINEL, OracleTeacher
from .student import StudentConfig, StudentDecoder


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.7
    tau: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 256
    seed: int = 42
    # validation-based checkpoint selection
    val_beam: int = 10
    val_users: int = 400
    val_k: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = 0.0


# ---------------------------------------------------------------------------
# the per-digit loss

def distill_loss(student_logits, teacher_logits, targets, supports,
                 config: DistillConfig) -> Tensor:
    """Total loss over digits: alpha*tau^2*KL + (1-alpha)*CE per digit.

    `student_logits` is a list of L tensors (rows x out_dim); teacher
    logits, targets, and boolean supports are constants with matching
    leading rows. Sentinel positions outside the support are excluded from
    both terms. Returns the sum over digits and rows.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    targets = np.asarray(targets)
    total = None
    for t, logits_t in enumerate(student_logits, start=1):
        sup = None if supports is None else np.asarray(supports[:, t - 1])
        term = None
        if config.alpha > 0.0:
            kl = ad.kl_divergence_rows(teacher_logits[:, t - 1], logits_t,
                                       config.tau, sup)
            term = ad.scale(kl, config.alpha)
        if config.alpha < 1.0:
            ce = ad.cross_entropy_rows(logits_t, targets[:, t - 1], sup)
            ce = ad.scale(ce, 1.0 - config.alpha)
            term = ce if term is None else ad.add(term, ce)
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# batch preparation against the oracle teacher

def serialize_samples(samples, oracle: OracleTeacher):
    return [oracle.vocab.serialize(s.prefix, oracle.trie) for s in samples]


def pad_tokens(token_list, pad_id):
    b = len(token_list)
    s_max = max(len(t) for t in token_list)
    toks = np.full((b, s_max), pad_id, dtype=np.int64)
    lengths = np.empty(b, dtype=np.int64)
    for i, t in enumerate(token_list):
        toks[i, : len(t)] = t
        lengths[i] = len(t)
    return toks, lengths


class BatchBuilder:
    """Precomputes per-sample constants and assembles training batches.

    Teacher states and logits are deterministic, so they are recomputed
    per batch rather than cached; only tokens and SIDs are stored.
    """

    def __init__(self, samples: list[Sample], oracle: OracleTeacher,
                 student_cfg: StudentConfig):
        self.samples = samples
        self.oracle = oracle
        self.cfg = student_cfg
        trie = oracle.trie
        self.tokens = serialize_samples(samples, oracle)
        self.sids = np.array([tuple(trie.sid_of_item(s.target)) for s in samples],
                             dtype=np.int64)

    def teacher_states(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Padded encoder states for sample rows: (B, S, d_h) and key mask."""
        oracle = self.oracle
        toks, lengths = pad_tokens([self.tokens[i] for i in idx], oracle.vocab.pad_id)
        b, s = toks.shape
        e = oracle.embed[toks]                                   # (B, S, d_e)
        h = np.tanh(e @ oracle.r1.T + (oracle.positions[:s] @ oracle.r2.T)[None])
        mask = (np.arange(s)[None, :] < lengths[:, None]).astype(np.float64)
        return h, mask

    def teacher_targets(self, idx):
        """Teacher logits, supports, and targets in head-output coordinates."""
        oracle, cfg = self.oracle, self.cfg
        trie = oracle.trie
        b = len(idx)
        out_dim = cfg.out_dim
        full = cfg.vocab_logits == "full"
        logits = np.full((b, cfg.L, out_dim), SENTINEL, dtype=np.float64)
        support = np.zeros((b, cfg.L, out_dim), dtype=bool)
        targets = np.empty((b, cfg.L), dtype=np.int64)
        for row, i in enumerate(idx):
            s = self.samples[i]
            digit_logits = oracle.teacher_forced_logits(s.prefix, self.sids[i])
            for t in range(cfg.L):
                lo = t * cfg.C if full else 0
                logits[row, t, lo: lo + cfg.C] = digit_logits[t]
                valid = digit_logits[t] > SENTINEL / 2
                support[row, t, lo: lo + cfg.C] = valid
                targets[row, t] = lo + self.sids[i, t]
        return logits, support, targets


def _val_states_oracle(samples, oracle):
    return [oracle.encode_history(s.prefix) for s in samples]


def evaluate_val(student: StudentDecoder, states, samples, trie: PrefixTrie,
                 beam: int, k: int) -> tuple[float, float]:
    """(recall@k, ndcg@k) of the student's beam decode on a sample list."""
    cfg = DecodeConfig(beam=beam, k=min(k, beam))
    ranked = mlp_beam_search(student, states, trie, cfg, Counters(),
                             require_trained=False)
    rec, ndcg = [], []
    for r, s in zip(ranked, samples):
        items = decode_topk_items(r, trie, cfg.k)
        rec.append(recall_at_k(items, s.target, k))
        ndcg.append(ndcg_at_k(items, s.target, k))
    if not ndcg:
        return 0.0, 0.0
    return float(np.mean(rec)), float(np.mean(ndcg))


# ---------------------------------------------------------------------------
# student decoder training

def train_student(split, oracle: OracleTeacher, student_cfg: StudentConfig,
                  config: DistillConfig, encoder: StudentEncoder | None = None,
                  encoder_mode: str = "frozen", log_hook=None) -> tuple[StudentDecoder, TrainResult]:
    """Distill the per-digit heads (and optionally the encoder, jointly).

    encoder=None trains against frozen teacher states; otherwise the
    student encoder supplies states, either `frozen` (stage 2) or `joint`
    (the end-to-end ablation, which also updates encoder parameters).
    """
    if encoder_mode not in ("frozen", "joint"):
        raise ValueError(f"encoder_mode must be frozen or joint, got {encoder_mode!r}")
    trie = oracle.trie
    student = StudentDecoder(student_cfg, oracle.embed, seed=config.seed)
    builder = BatchBuilder(split.train, oracle, student_cfg)
    n = len(split.train)
    if n == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 1000)
    steps_per_epoch = math.ceil(n / config.batch_size)
    joint = encoder is not None and encoder_mode == "joint"
    opt = ad.OptimizerState(lr=config.lr, weight_decay=config.weight_decay,
                            horizon=max(1, config.epochs * steps_per_epoch))

    val_samples = split.val[: config.val_users]
    val_tokens = [oracle.vocab.serialize(s.prefix, trie) for s in val_samples]

    def val_states():
        if encoder is None:
            return _val_states_oracle(val_samples, oracle)
        return [encoder.forward(t).data for t in val_tokens]

    result = TrainResult(params={})
    best = -1.0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size: (step + 1) * config.batch_size]
            t_logits, support, targets = builder.teacher_targets(idx)
            tape = Tape()
            if encoder is None:
                h_pad, key_mask = builder.teacher_states(idx)
                h_in: Tensor | np.ndarray = h_pad
            else:
                toks, lengths = pad_tokens([builder.tokens[i] for i in idx],
                                           oracle.vocab.pad_id)
                key_mask = (np.arange(toks.shape[1])[None, :]
                            < lengths[:, None]).astype(np.float64)
                h_in = encoder.forward(toks, lengths, tape=tape if joint else None)
                if not joint:
                    h_in = h_in.data
            logits = student.forward_teacher_forced(
                h_in if isinstance(h_in, Tensor) else Tensor(h_in),
                key_mask, builder.sids[idx], tape=tape, train=True, drop_rng=drop_rng)
            loss = ad.scale(distill_loss(logits, t_logits, targets, support, config),
                            1.0 / len(idx))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            ad.backward(loss)
            params = dict(student.params)
            if joint:
                params.update(encoder.params)
            ad.adamw_step(opt, params, tape.grads)
            epoch_loss += float(loss.data) * len(idx)
            tape.reset()
        val_recall, val_ndcg = evaluate_val(student, val_states(), val_samples, trie,
                                            config.val_beam, config.val_k)
        row = {"epoch": epoch, "train_loss": epoch_loss / n,
               "val_recall@10": val_recall, "val_ndcg@10": val_ndcg,
               "lr": opt.current_lr()}
        result.log.append(row)
        if log_hook:
            log_hook(row)
        if val_ndcg > best:
            best = val_ndcg
            result.best_epoch = epoch
            result.best_val = val_ndcg
            result.params = {k: v.copy() for k, v in student.params.items()}
            if joint:
                result.params.update({k: v.copy() for k, v in encoder.params.items()})
    # restore the best checkpoint
    for k in student.params:
        student.params[k][...] = result.params[k]
    if joint:
        for k in encoder.params:
            encoder.params[k][...] = result.params[k]
        encoder.trained = True
    student.trained = True
    return student, result


# ---------------------------------------------------------------------------
# encoder distillation

def train_encoder_stage1(split, oracle: OracleTeacher, encoder: StudentEncoder,
                         config: DistillConfig, log_hook=None) -> TrainResult:
    """Match the frozen teacher's encoder states with masked MSE.

    Stops early once the epoch-average loss fails to improve for two
    consecutive epochs; keeps the best-loss parameters.
    """
    samples = split.train
    tokens = serialize_samples(samples, oracle)
    n = len(samples)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = ad.OptimizerState(lr=config.lr, weight_decay=config.weight_decay,
                            horizon=max(1, config.epochs * steps_per_epoch))
    result = TrainResult(params={})
    best = np.inf
    bad_epochs = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size: (step + 1) * config.batch_size]
            toks, lengths = pad_tokens([tokens[i] for i in idx], oracle.vocab.pad_id)
            b, s = toks.shape
            target = np.zeros((b, s, encoder.config.d_h))
            mask = np.zeros((b, s))
            for row, i in enumerate(idx):
                h = oracle.encode_tokens(tokens[i])
                target[row, : len(h)] = h
                mask[row, : len(h)] = 1.0
            tape = Tape()
            pred = encoder.forward(toks, lengths, tape=tape)
            loss = ad.masked_mse(pred, target, mask)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            ad.backward(loss)
            ad.adamw_step(opt, encoder.params, tape.grads)
            epoch_loss += float(loss.data) * len(idx)
            tape.reset()
        avg = epoch_loss / n
        row = {"epoch": epoch, "train_loss": avg, "val_recall@10": float("nan"),
               "val_ndcg@10": float("nan"), "lr": opt.current_lr()}
        result.log.append(row)
        if log_hook:
            log_hook(row)
        if avg < best:
            best = avg
            bad_epochs = 0
            result.best_epoch = epoch
            result.best_val = avg
            result.params = {k: v.copy() for k, v in encoder.params.items()}
        else:
            bad_epochs += 1
            if bad_epochs > 1:
                break
    for k in encoder.params:
        encoder.params[k][...] = result.params[k]
    encoder.trained = True
    return result


def train_encoder_stage2(split, oracle: OracleTeacher, encoder: StudentEncoder,
                         student_cfg: StudentConfig, config: DistillConfig,
                         log_hook=None) -> tuple[StudentDecoder, TrainResult]:
    """Logit distillation with the stage-1 encoder frozen."""
    if not encoder.trained:
        raise ValueError("stage 2 requires a stage-1 encoder checkpoint")
    return train_student(split, oracle, student_cfg, config, encoder=encoder,
                         encoder_mode="frozen", log_hook=log_hook)


def write_training_log(path, rows) -> None:
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_recall@10,val_ndcg@10,lr\n")
        for r in rows:
            f.write(f"{r['epoch']},{r['train_loss']:.6f},{r['val_recall@10']:.6f},"
                    f"{r['val_ndcg@10']:.6f},{r['lr']:.8f}\n")
