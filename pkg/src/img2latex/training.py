"""Two-phase training: token-level cross entropy, then REINFORCE.

Phase one (mle) teacher-forces ground-truth tokens and minimizes summed
per-step cross entropy.  Phase two (rl) samples k sequences per image,
scores them with a sequence reward (BLEU by default), subtracts the
per-image mean reward as a baseline, and ascends reward-weighted
log-probabilities.

Every source of randomness is derived from (seed, purpose, step,
element) coordinates, never carried between steps, so a run can resume
from any checkpoint bit-exactly.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (END_ID, PAD_ID, START_ID, Vocabulary, bucket_and_pad,
                   build_vocab, load_buckets, load_dataset, pad_image)
from .decoding import greedy_decode
from .encoder import MemoryBank
from .metrics import sentence_bleu4
from .model import (RNG_DROPOUT, RNG_SAMPLE, RNG_SHUFFLE, Model, ModelConfig,
                    derive_rng)
from .optim import Adam, clip_global_norm
from .tensor import Tensor


class TrainError(Exception):
    pass


class DivergenceError(TrainError):
    """Loss became non-finite; training stops, last checkpoint stands."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


# ---------------------------------------------------------------------
# token-level objective
# ---------------------------------------------------------------------

def mle_loss(model: Model, images: np.ndarray, seq: np.ndarray,
             train: bool = True, rng: np.random.Generator | None = None):
    """Teacher-forced cross entropy.

    seq is (B, T) int ids laid out as [tokens..., END, PAD...]; the
    decoder input at step t is the ground-truth token at t-1 (START at
    t=0).  Returns (loss Tensor, token count); the loss is the batch
    mean of per-sequence summed cross entropy, PAD steps excluded.
    """
    if images.shape[0] == 0 or seq.size == 0:
        raise TrainError("mle_loss: empty batch")
    b, t_max = seq.shape
    bank = model.encode(images, train=train)
    state = model.init_state(bank)
    inputs = np.concatenate([np.full((b, 1), START_ID, dtype=seq.dtype), seq[:, :-1]], axis=1)
    total = None
    n_tokens = 0
    for t in range(t_max):
        mask = seq[:, t] != PAD_ID
        out = model.step(bank, state, inputs[:, t], train=train, rng=rng)
        state = out.state
        ce = T.cross_entropy(out.logits, seq[:, t])
        step_loss = (ce * Tensor(mask.astype(np.float64))).sum()
        total = step_loss if total is None else total + step_loss
        n_tokens += int(mask.sum())
    return total * (1.0 / b), n_tokens


# ---------------------------------------------------------------------
# sampling with exposure-bias instrumentation
# ---------------------------------------------------------------------

@dataclass
class InputFeedAudit:
    """Verifies the sampled-feedback contract: input(t) == sample(t-1)."""
    steps_checked: int = 0
    violations: int = 0

    def check(self, fed: np.ndarray, expected: np.ndarray, active: np.ndarray) -> None:
        self.steps_checked += int(active.sum())
        self.violations += int((fed[active] != expected[active]).sum())


@dataclass
class SampleResult:
    tokens: list[int]        # content ids, sentinels stripped
    sum_logp: float
    truncated: bool          # True when max_len hit before END


def _multinomial_rows(probs: np.ndarray, rngs) -> np.ndarray:
    """One draw per row; row i uses its own generator for schedule independence."""
    u = np.array([rng.random() for rng in rngs])
    cum = np.cumsum(probs, axis=1)
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _sample_rollout(model: Model, bank, max_len: int, rngs,
                    audit: InputFeedAudit | None = None):
    """Batched multinomial rollout in eval mode (gradients still flow).

    Returns (tokens (B, T) with PAD after END, nll Tensor (B,), finished
    mask).  The negative log-likelihood sums the log-prob of every
    sampled token including END.
    """
    b = bank.entries.shape[0]
    state = model.init_state(bank)
    last = np.full(b, START_ID, dtype=np.int64)
    prev_sampled = None
    finished = np.zeros(b, dtype=bool)
    nll_total = None
    columns = []
    for _ in range(max_len):
        if audit is not None and prev_sampled is not None:
            audit.check(last, prev_sampled, active=~finished)
        out = model.step(bank, state, last, train=False)
        state = out.state
        z = out.logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        sampled = _multinomial_rows(probs, rngs)
        sampled[finished] = PAD_ID
        active = ~finished
        ce = T.cross_entropy(out.logits, sampled)
        step_nll = ce * Tensor(active.astype(np.float64))
        nll_total = step_nll if nll_total is None else nll_total + step_nll
        columns.append(sampled.copy())
        finished = finished | (sampled == END_ID)
        prev_sampled = sampled
        last = sampled
        if finished.all():
            break
    tokens = np.stack(columns, axis=1)
    return tokens, nll_total, finished


def strip_sentinels(row) -> list[int]:
    """Content ids only: cut at END, drop PAD/START."""
    out = []
    for tok in row:
        if tok == END_ID:
            break
        if tok in (PAD_ID, START_ID):
            continue
        out.append(int(tok))
    return out


def sample_sequence(model: Model, image: np.ndarray, max_len: int,
                    rng: np.random.Generator,
                    audit: InputFeedAudit | None = None) -> SampleResult:
    """Sample one sequence for one image (no gradients)."""
    with T.no_grad():
        bank = model.encode(image, train=False)
        tokens, nll, finished = _sample_rollout(model, bank, max_len, [rng], audit)
    return SampleResult(tokens=strip_sentinels(tokens[0]),
                        sum_logp=-float(nll.data[0]),
                        truncated=not bool(finished[0]))


# ---------------------------------------------------------------------
# sequence-level objective
# ---------------------------------------------------------------------

def reinforce_weights(rewards: np.ndarray, leave_one_out: bool = False) -> np.ndarray:
    """Center rewards (B, k) by the per-example baseline.

    Default baseline is the mean of all k rewards including the sample
    being weighted; leave_one_out excludes it (mean of the other k-1),
    which makes the gradient estimator exactly unbiased.
    """
    if rewards.ndim != 2 or rewards.shape[1] < 2:
        raise TrainError(f"reinforce_weights: need (B, k>=2) rewards, got {rewards.shape}")
    k = rewards.shape[1]
    if leave_one_out:
        baseline = (rewards.sum(axis=1, keepdims=True) - rewards) / (k - 1)
    else:
        baseline = rewards.mean(axis=1, keepdims=True)
    return rewards - baseline


def reinforce_loss(nll: Tensor, weights: np.ndarray) -> Tensor:
    """Minimization objective: mean of (R - baseline) * nll over all samples."""
    return (nll * Tensor(weights)).sum() * (1.0 / weights.size)


def reinforce_step(model: Model, images: np.ndarray, references: list[list[int]],
                   optimizer: Adam, k: int, seed: int, step: int,
                   max_len: int = 200, reward_fn=sentence_bleu4,
                   leave_one_out: bool = False, clip_norm: float = 5.0,
                   audit: InputFeedAudit | None = None) -> float:
    """One policy-gradient update; returns the mean sampled reward.

    Draws k samples per image from the tiled memory bank, in eval mode
    (no dropout, batch-norm running statistics) but with gradients
    recorded.  Rewards are computed on sentinel-stripped token ids and
    clamped to [0, 1].
    """
    if k < 2:
        raise TrainError(f"reinforce_step: k must be >= 2 for the baseline, got {k}")
    b = images.shape[0]
    if b == 0:
        raise TrainError("reinforce_step: empty batch")
    bank = model.encode(images, train=False)
    tiled = MemoryBank(entries=T.repeat_rows(bank.entries, k),
                       h_prime=bank.h_prime, w_prime=bank.w_prime)
    rngs = [derive_rng(seed, RNG_SAMPLE, step, i) for i in range(b * k)]
    tokens, nll, _ = _sample_rollout(model, tiled, max_len, rngs, audit)
    rewards = np.empty(b * k, dtype=np.float64)
    for i in range(b * k):
        r = reward_fn(strip_sentinels(tokens[i]), references[i // k])
        rewards[i] = min(max(float(r), 0.0), 1.0)
    weights = reinforce_weights(rewards.reshape(b, k), leave_one_out).reshape(b * k)
    loss = reinforce_loss(nll, weights)
    model.zero_grad()
    loss.backward()
    clip_global_norm(model.parameters(), clip_norm)
    optimizer.step()
    return float(rewards.mean())


# ---------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------

def pad_to_multiple(image: np.ndarray, factor: int = 8) -> np.ndarray:
    h, w = image.shape
    return pad_image(image, -(-h // factor) * factor, -(-w // factor) * factor)


def token_accuracy(model: Model, batches) -> float:
    """Teacher-forced argmax accuracy over non-PAD steps (eval mode)."""
    correct = 0
    total = 0
    with T.no_grad():
        for batch in batches:
            seq = batch.seq
            b = seq.shape[0]
            bank = model.encode(batch.images, train=False)
            state = model.init_state(bank)
            inputs = np.concatenate(
                [np.full((b, 1), START_ID, dtype=seq.dtype), seq[:, :-1]], axis=1)
            for t in range(seq.shape[1]):
                mask = seq[:, t] != PAD_ID
                out = model.step(bank, state, inputs[:, t], train=False)
                state = out.state
                pred = out.logits.data.argmax(axis=1)
                correct += int((pred[mask] == seq[mask, t]).sum())
                total += int(mask.sum())
    return correct / total if total else 0.0


def greedy_bleu(model: Model, examples, vocab: Vocabulary, max_len: int) -> float:
    """Mean sentence BLEU of greedy decodes against references."""
    scores = []
    for ex in examples:
        result = greedy_decode(model, pad_to_multiple(ex.image), max_len=max_len)
        cand = [vocab.token_of(i) for i in result.tokens]
        scores.append(sentence_bleu4(cand, ex.tokens))
    return float(np.mean(scores)) if scores else 0.0


def sequence_match_rate(model: Model, examples, vocab: Vocabulary, max_len: int) -> float:
    """Fraction of examples whose greedy decode equals the reference exactly."""
    hits = 0
    for ex in examples:
        result = greedy_decode(model, pad_to_multiple(ex.image), max_len=max_len)
        if [vocab.token_of(i) for i in result.tokens] == ex.tokens:
            hits += 1
    return hits / len(examples) if examples else 0.0


# ---------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------

@dataclass
class TrainOutcome:
    steps_run: int
    best_metric: float
    best_path: str
    last_path: str
    log_path: str
    stopped_early: bool = False
    losses: list[float] = field(default_factory=list)


def _epoch_batches(examples, buckets, batch_size, vocab, seed, epoch):
    order = derive_rng(seed, RNG_SHUFFLE, epoch).permutation(len(examples))
    shuffled = [examples[i] for i in order]
    batches, _ = bucket_and_pad(shuffled, buckets, batch_size, vocab)
    return batches


def train(cfg: dict, train_manifest, val_manifest, buckets_path, out_dir,
          phase: str = "mle", init: str | None = None, resume: str | None = None,
          log_fn=None, reward_fn=sentence_bleu4) -> TrainOutcome:
    """Run one training phase; writes best.ckpt, last.ckpt and a TSV log.

    resume continues a checkpoint of the same phase bit-exactly; init
    starts the rl phase (or mle fine-tuning) from an existing
    checkpoint with a fresh optimizer.
    """
    if phase not in ("mle", "rl"):
        raise TrainError(f"unknown phase {phase!r}")
    if phase == "rl" and not (init or resume):
        raise TrainError("rl phase requires an mle checkpoint via init "
                         "(train the mle phase first)")
    os.makedirs(out_dir, exist_ok=True)
    train_examples = load_dataset(train_manifest)
    if not train_examples:
        raise TrainError(f"{train_manifest}: no training examples")
    val_examples = load_dataset(val_manifest) if val_manifest else train_examples
    buckets = load_buckets(buckets_path)
    seed = int(cfg["seed"])

    start_step = 0
    best_metric = -np.inf
    stale = 0
    optimizer_state = None
    if resume:
        model, ckpt = Model.load(resume)
        start_step = int(ckpt.meta["step"])
        saved_best = ckpt.meta.get("best_metric")
        best_metric = -np.inf if saved_best is None else float(saved_best)
        stale = int(ckpt.meta.get("stale_validations", 0))
        optimizer_state = ckpt.optimizer
        vocab = Vocabulary(model.vocab)
    elif init:
        model, _ = Model.load(init)
        vocab = Vocabulary(model.vocab)
    else:
        vocab = build_vocab([train_manifest])
        model = Model(_model_config(cfg, len(vocab)), vocab.tokens)

    lr = float(cfg["rl_lr"] if phase == "rl" else cfg["lr"])
    optimizer = Adam(model.parameters(), lr=lr)
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)

    steps = int(cfg["steps"])
    batch_size = int(cfg["batch_size"])
    validate_every = int(cfg["validate_every"])
    patience = int(cfg["patience"])
    max_len = int(cfg["max_len"])
    k = int(cfg["k"])
    clip = float(cfg["clip_norm"])
    leave_one_out = bool(cfg["leave_one_out"])

    log_path = os.path.join(out_dir, "train_log.tsv")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    log_file = open(log_path, "a", encoding="utf-8")
    t0 = time.time()
    losses: list[float] = []
    stopped_early = False

    def emit(step, value, val_metric=""):
        line = f"{step}\t{phase}\t{value:.6f}\t{val_metric}\t{time.time() - t0:.3f}"
        log_file.write(line + "\n")
        log_file.flush()
        if log_fn:
            log_fn(line)

    def save(path, step):
        model.save(path, step=step, phase=phase,
                   best_metric=None if best_metric == -np.inf else float(best_metric),
                   optimizer=optimizer.state_dict(),
                   extra_meta={"stale_validations": stale})

    # batch count per epoch is order-independent, so the schedule is a
    # pure function of (seed, step) and resuming lands on the same batch
    per_epoch = len(_epoch_batches(train_examples, buckets, batch_size, vocab, seed, 0))
    if per_epoch == 0:
        raise TrainError("no training example fits any bucket")
    epoch_cache: tuple[int, list] | None = None
    step = start_step
    try:
        for step in range(start_step + 1, steps + 1):
            epoch, idx = divmod(step - 1, per_epoch)
            if epoch_cache is None or epoch_cache[0] != epoch:
                epoch_cache = (epoch, _epoch_batches(
                    train_examples, buckets, batch_size, vocab, seed, epoch))
            batch = epoch_cache[1][idx]

            if phase == "mle":
                rng = derive_rng(seed, RNG_DROPOUT, step)
                loss, _ = mle_loss(model, batch.images, batch.seq, train=True, rng=rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(step, value)
                model.zero_grad()
                loss.backward()
                clip_global_norm(model.parameters(), clip)
                optimizer.step()
            else:
                refs = [strip_sentinels(row) for row in batch.seq]
                value = reinforce_step(model, batch.images, refs, optimizer, k=k,
                                       seed=seed, step=step, max_len=max_len,
                                       reward_fn=reward_fn, leave_one_out=leave_one_out,
                                       clip_norm=clip)
                if not np.isfinite(value):
                    raise DivergenceError(step, value)
            losses.append(value)

            if step % validate_every == 0 or step == steps:
                if phase == "mle":
                    val_batches, _ = bucket_and_pad(val_examples, buckets, batch_size, vocab)
                    metric = token_accuracy(model, val_batches)
                else:
                    metric = greedy_bleu(model, val_examples, vocab, max_len)
                improved = metric > best_metric
                if improved:
                    best_metric = metric
                    stale = 0
                else:
                    stale += 1
                emit(step, value, f"{metric:.6f}")
                if improved:
                    save(best_path, step)
                save(last_path, step)
                if stale >= patience:
                    stopped_early = True
                    break
            else:
                emit(step, value)
        if not os.path.exists(best_path):
            save(best_path, step)
        save(last_path, step)
    finally:
        log_file.close()
    return TrainOutcome(steps_run=step, best_metric=float(best_metric),
                        best_path=best_path, last_path=last_path,
                        log_path=log_path, stopped_early=stopped_early,
                        losses=losses)


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d=int(cfg["d"]), d_emb=int(cfg["d_emb"]), hidden=int(cfg["hidden"]),
        attn_dim=int(cfg["attn_dim"]), out_dim=int(cfg["out_dim"]),
        dropout=float(cfg["dropout"]),
        standard_cell_output=bool(cfg["standard_cell_output"]),
        attend_current_hidden=bool(cfg["attend_current_hidden"]),
        bn_momentum=float(cfg["bn_momentum"]), timescale=float(cfg["timescale"]),
        dtype=str(cfg["dtype"]), seed=int(cfg["seed"]),
    )
