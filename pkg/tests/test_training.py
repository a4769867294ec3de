"""MLE objective, sampling, REINFORCE estimator and the train loop."""
import math
import os

import numpy as np
import pytest

from img2latex import tensor as T
from img2latex.config import full_defaults
from img2latex.data import (END_ID, PAD_ID, START_ID, RESERVED, Vocabulary,
                            bucket_and_pad, build_vocab, load_dataset)
from img2latex.decoder import StepOutput
from img2latex.decoding import greedy_decode
from img2latex.encoder import MemoryBank
from img2latex.model import Model, ModelConfig, log_softmax
from img2latex.optim import Adam
from img2latex.synth import GrammarConfig, synth_generate
from img2latex.tensor import Tensor
from img2latex.training import (DivergenceError, InputFeedAudit, TrainError,
                                _sample_rollout, mle_loss, reinforce_step,
                                reinforce_weights, sample_sequence,
                                strip_sentinels, train)

VOCAB = list(RESERVED) + ["x", "y", "+", "2"]


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(vocab_size=len(VOCAB), d=8, d_emb=4, hidden=8,
                      attn_dim=8, out_dim=8, dropout=0.0, seed=seed, **kw)
    return Model(cfg, VOCAB)


def tiny_cfg(**kw):
    cfg = full_defaults()
    cfg.update(d=8, d_emb=4, hidden=8, attn_dim=8, out_dim=8, dropout=0.0,
               lr=1e-3, steps=3, batch_size=4, validate_every=3, patience=99,
               max_len=30, k=2, seed=5)
    cfg.update(kw)
    return cfg


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Small synthetic dataset with a single covering bucket."""
    root = tmp_path_factory.mktemp("corpus")
    stats = synth_generate(root, count=4, seed=11,
                           cfg=GrammarConfig(max_depth=1, max_len=12, max_terms=2))
    h = max(s[0] for s in stats["sizes"])
    w = max(s[1] for s in stats["sizes"])
    buckets = root / "buckets.txt"
    buckets.write_text(f"{-(-w // 8) * 8} {-(-h // 8) * 8}\n")
    return {"manifest": str(root / "manifest.tsv"), "buckets": str(buckets),
            "root": root}


def first_batch(corpus):
    examples = load_dataset(corpus["manifest"])
    vocab = build_vocab([corpus["manifest"]])
    from img2latex.data import load_buckets
    batches, _ = bucket_and_pad(examples, load_buckets(corpus["buckets"]),
                                batch_size=4, vocab=vocab)
    assert len(batches) == 1
    return batches[0], vocab


# ---------------------------------------------------------------------
# mle_loss
# ---------------------------------------------------------------------

def test_uniform_model_loss_is_token_count_times_log_vocab():
    model = tiny_model()
    model.params["dec.w4"].data[:] = 0.0      # logits 0 -> uniform over V=8
    images = np.random.default_rng(0).random((2, 1, 16, 24))
    seq = np.array([[4, 5, 6, 7, END_ID],
                    [4, END_ID, PAD_ID, PAD_ID, PAD_ID]])
    loss, n_tokens = mle_loss(model, images, seq, train=False)
    assert n_tokens == 7
    assert abs(loss.item() - 3.5 * math.log(8)) < 1e-12


def test_loss_equals_negative_decode_protocol_log_likelihood():
    model = tiny_model(seed=1)
    image = np.random.default_rng(1).random((16, 24))
    targets = [4, 6, 5, END_ID]
    loss, _ = mle_loss(model, image[None, None], np.array([targets]), train=False)
    state = model.decode_start(image)
    total = 0.0
    last = START_ID
    for tok in targets:
        logp, state, _ = model.decode_step(state, last)
        total += logp[tok]
        last = tok
    assert abs(loss.item() - (-total)) < 1e-10


def test_appending_pad_columns_never_changes_the_loss():
    model = tiny_model(seed=2)
    images = np.random.default_rng(2).random((2, 1, 16, 24))
    seq = np.array([[4, 5, END_ID], [6, END_ID, PAD_ID]])
    base, n_base = mle_loss(model, images, seq, train=False)
    padded = np.concatenate([seq, np.full((2, 2), PAD_ID)], axis=1)
    more, n_more = mle_loss(model, images, padded, train=False)
    assert n_base == n_more
    assert abs(base.item() - more.item()) < 1e-10


def test_empty_batch_rejected():
    model = tiny_model()
    with pytest.raises(TrainError, match="empty batch"):
        mle_loss(model, np.zeros((0, 8, 8)), np.zeros((0, 3), dtype=int))
    with pytest.raises(TrainError, match="empty batch"):
        mle_loss(model, np.zeros((1, 8, 8)), np.zeros((1, 0), dtype=int))


# ---------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------

class ChainModel:
    """Duck-typed model that puts ~all probability on a fixed successor."""

    V = 8

    def __init__(self, chain):
        self.chain = chain              # previous id -> next id

    def _row(self, last):
        row = np.zeros(self.V)
        row[self.chain.get(int(last), END_ID)] = 50.0
        return row

    def encode(self, image, train=False):
        return MemoryBank(entries=Tensor(np.zeros((1, 1, 4))), h_prime=1, w_prime=1)

    def init_state(self, bank):
        return None

    def step(self, bank, state, tokens, train=False, rng=None):
        logits = np.stack([self._row(t) for t in np.asarray(tokens)])
        return StepOutput(logits=Tensor(logits),
                          alpha=Tensor(np.ones((len(logits), 1))), state=None)

    def decode_start(self, image):
        return None

    def decode_step(self, state, token):
        return log_softmax(self._row(token)), None, np.array([1.0])


def test_sampling_equals_greedy_when_transitions_are_deterministic():
    model = ChainModel({START_ID: 4, 4: 5, 5: END_ID})
    res = sample_sequence(model, None, max_len=10, rng=np.random.default_rng(0))
    assert res.tokens == [4, 5]
    assert not res.truncated
    assert res.sum_logp > -1e-8
    assert res.tokens == greedy_decode(model, None, max_len=10).tokens


def test_sample_truncation_flagged():
    loop = ChainModel({START_ID: 4, 4: 4})       # never emits END
    res = sample_sequence(loop, None, max_len=3, rng=np.random.default_rng(0))
    assert res.tokens == [4, 4, 4]
    assert res.truncated


def test_strip_sentinels():
    assert strip_sentinels([4, 5, END_ID, PAD_ID, PAD_ID]) == [4, 5]
    assert strip_sentinels([PAD_ID, START_ID, 6]) == [6]
    assert strip_sentinels([END_ID, 4]) == []


class StaticModel(ChainModel):
    """Same logits row regardless of history."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=np.float64)
        self.V = len(self.row)

    def _row(self, last):
        return self.row

    def step(self, bank, state, tokens, train=False, rng=None):
        b = len(np.asarray(tokens))
        return StepOutput(logits=Tensor(np.tile(self.row, (b, 1))),
                          alpha=Tensor(np.ones((b, 1))), state=None)


def test_single_step_sample_frequencies_match_probabilities():
    # 1e5 one-step draws vs the softmax distribution, 3 sigma binomial
    row = np.array([0.0, -0.4, 0.9, 0.3, -1.2, 0.5])
    p = np.exp(row) / np.exp(row).sum()
    n = 100_000
    model = StaticModel(row)
    bank = MemoryBank(entries=Tensor(np.zeros((n, 1, 4))), h_prime=1, w_prime=1)
    rngs = [np.random.default_rng((9, i)) for i in range(n)]
    with T.no_grad():
        tokens, _, _ = _sample_rollout(model, bank, 1, rngs)
    freq = np.bincount(tokens[:, 0], minlength=len(row)) / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert (np.abs(freq - p) <= 3 * sigma).all()


def test_sampled_rollout_feeds_back_its_own_samples():
    audit = InputFeedAudit()
    for seed in range(5):
        model = tiny_model(seed=seed)
        image = np.random.default_rng(seed).random((16, 24))
        sample_sequence(model, image, max_len=25,
                        rng=np.random.default_rng(seed), audit=audit)
    assert audit.steps_checked > 0
    assert audit.violations == 0


# ---------------------------------------------------------------------
# REINFORCE estimator
# ---------------------------------------------------------------------

def test_equal_rewards_center_to_exact_zero():
    r = np.full((3, 4), 0.62)
    assert (reinforce_weights(r) == 0.0).all()
    assert (reinforce_weights(r, leave_one_out=True) == 0.0).all()


def test_baseline_arithmetic_by_hand():
    r = np.array([[1.0, 0.0, 0.0]])
    got = reinforce_weights(r)
    assert np.allclose(got, [[2 / 3, -1 / 3, -1 / 3]], atol=1e-15)
    loo = reinforce_weights(r, leave_one_out=True)
    assert np.allclose(loo, [[1.0, -0.5, -0.5]], atol=1e-15)


def test_baseline_requires_at_least_two_samples():
    with pytest.raises(TrainError, match="k>=2"):
        reinforce_weights(np.ones((2, 1)))
    with pytest.raises(TrainError, match="k>=2"):
        reinforce_weights(np.ones(5))


def bandit_estimate(theta, n_batches, k, leave_one_out, seed):
    """Mean REINFORCE estimate of dE[R]/dtheta_A for a two-arm softmax
    policy with reward 1 for arm A, using production weight centering."""
    p_a = 1.0 / (1.0 + np.exp(-(theta[0] - theta[1])))
    rng = np.random.default_rng(seed)
    picked_a = rng.random((n_batches, k)) < p_a
    rewards = picked_a.astype(np.float64)
    weights = reinforce_weights(rewards, leave_one_out=leave_one_out)
    score_a = picked_a - p_a                   # d log p(y) / d theta_A
    per_batch = (weights * score_a).mean(axis=1)
    return per_batch.mean(), per_batch.std(ddof=1) / np.sqrt(n_batches), p_a


def test_bandit_estimator_loo_is_unbiased():
    est, se, p_a = bandit_estimate((0.4, -0.3), 20_000, 5, True, seed=13)
    analytic = p_a * (1 - p_a)
    assert abs(est - analytic) <= 3 * se


def test_bandit_estimator_include_self_shrinks_by_k_minus_1_over_k():
    k = 5
    est, se, p_a = bandit_estimate((0.4, -0.3), 20_000, k, False, seed=13)
    analytic = p_a * (1 - p_a)
    assert abs(est - analytic * (k - 1) / k) <= 3 * se
    assert abs(est - analytic) > 3 * se        # the bias is real and visible


def test_reinforce_step_constant_reward_leaves_params_unchanged():
    model = tiny_model(seed=3)
    before = {k: p.data.copy() for k, p in model.params.items()}
    opt = Adam(model.parameters(), lr=1e-3)
    images = np.random.default_rng(3).random((2, 1, 16, 24))
    mean = reinforce_step(model, images, [[4, 5], [6]], opt, k=3, seed=0,
                          step=1, max_len=8, reward_fn=lambda c, r: 0.5)
    assert mean == 0.5
    for name, arr in before.items():
        assert np.array_equal(model.params[name].data, arr), name


def test_reinforce_step_clamps_rewards():
    model = tiny_model(seed=3)
    opt = Adam(model.parameters(), lr=1e-3)
    images = np.random.default_rng(3).random((1, 1, 16, 24))
    assert reinforce_step(model, images, [[4]], opt, k=2, seed=0, step=1,
                          max_len=4, reward_fn=lambda c, r: 7.3) == 1.0
    assert reinforce_step(model, images, [[4]], opt, k=2, seed=0, step=2,
                          max_len=4, reward_fn=lambda c, r: -2.0) == 0.0


def test_reinforce_step_requires_k_ge_2():
    model = tiny_model()
    opt = Adam(model.parameters(), lr=1e-3)
    with pytest.raises(TrainError, match="k must be >= 2"):
        reinforce_step(model, np.zeros((1, 16, 24)), [[4]], opt, k=1,
                       seed=0, step=1)


def test_reinforce_step_passes_the_input_feed_audit():
    model = tiny_model(seed=4)
    opt = Adam(model.parameters(), lr=1e-4)
    audit = InputFeedAudit()
    images = np.random.default_rng(4).random((2, 1, 16, 24))
    reinforce_step(model, images, [[4, 5], [6]], opt, k=3, seed=1, step=1,
                   max_len=12, audit=audit)
    assert audit.steps_checked > 0
    assert audit.violations == 0


# ---------------------------------------------------------------------
# optimization behavior on a fixed batch
# ---------------------------------------------------------------------

def test_ten_fixed_batch_steps_never_increase_loss(corpus):
    batch, vocab = first_batch(corpus)
    cfg = ModelConfig(vocab_size=len(vocab), d=8, d_emb=4, hidden=8,
                      attn_dim=8, out_dim=8, dropout=0.0, seed=6)
    model = Model(cfg, vocab.tokens)
    opt = Adam(model.parameters(), lr=1e-3)
    losses = []
    for _ in range(10):
        loss, _ = mle_loss(model, batch.images, batch.seq, train=True)
        losses.append(loss.item())
        model.zero_grad()
        loss.backward()
        opt.step()
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev + 1e-6


# ---------------------------------------------------------------------
# train() orchestration
# ---------------------------------------------------------------------

def test_train_runs_are_bit_identical(corpus, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = train(tiny_cfg(), corpus["manifest"], corpus["manifest"],
                       corpus["buckets"], str(out))
        assert result.steps_run == 3
        assert len(result.losses) == 3
        assert os.path.exists(result.best_path)
        assert os.path.exists(result.log_path)
        outs.append(out)
    for ckpt in ("best.ckpt", "last.ckpt"):
        assert (outs[0] / ckpt).read_bytes() == (outs[1] / ckpt).read_bytes()


def test_train_resume_is_bit_exact(corpus, tmp_path):
    whole = train(tiny_cfg(steps=6), corpus["manifest"], corpus["manifest"],
                  corpus["buckets"], str(tmp_path / "whole"))
    part = train(tiny_cfg(steps=3), corpus["manifest"], corpus["manifest"],
                 corpus["buckets"], str(tmp_path / "part"))
    resumed = train(tiny_cfg(steps=6), corpus["manifest"], corpus["manifest"],
                    corpus["buckets"], str(tmp_path / "resumed"),
                    resume=part.last_path)
    assert resumed.steps_run == 6
    with open(whole.last_path, "rb") as f:
        whole_bytes = f.read()
    with open(resumed.last_path, "rb") as f:
        resumed_bytes = f.read()
    assert whole_bytes == resumed_bytes


def test_train_log_is_tab_separated(corpus, tmp_path):
    result = train(tiny_cfg(), corpus["manifest"], corpus["manifest"],
                   corpus["buckets"], str(tmp_path / "log"))
    with open(result.log_path, encoding="utf-8") as f:
        lines = [l.rstrip("\n") for l in f]
    assert len(lines) == 3
    for line in lines:
        step, phase, value, metric, wall = line.split("\t")
        assert phase == "mle"
        float(value), float(wall)
    assert lines[-1].split("\t")[3] != ""      # final step validates


def test_train_rl_requires_a_starting_checkpoint(corpus, tmp_path):
    with pytest.raises(TrainError, match="rl phase requires"):
        train(tiny_cfg(), corpus["manifest"], corpus["manifest"],
              corpus["buckets"], str(tmp_path / "rl"), phase="rl")


def test_train_rejects_unknown_phase(corpus, tmp_path):
    with pytest.raises(TrainError, match="unknown phase"):
        train(tiny_cfg(), corpus["manifest"], corpus["manifest"],
              corpus["buckets"], str(tmp_path / "x"), phase="sft")


def test_train_rejects_empty_manifest(corpus, tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    with pytest.raises(TrainError, match="no training examples"):
        train(tiny_cfg(), str(empty), None, corpus["buckets"],
              str(tmp_path / "out"))


def test_train_rejects_dataset_with_no_fitting_bucket(corpus, tmp_path):
    buckets = tmp_path / "buckets.txt"
    buckets.write_text("8 8\n")
    with pytest.raises(TrainError, match="fits any bucket"):
        train(tiny_cfg(), corpus["manifest"], corpus["manifest"],
              str(buckets), str(tmp_path / "out"))


def test_train_raises_divergence_error_on_non_finite_loss(corpus, tmp_path):
    base = train(tiny_cfg(steps=1), corpus["manifest"], corpus["manifest"],
                 corpus["buckets"], str(tmp_path / "base"))
    model, _ = Model.load(base.last_path)
    model.params["dec.w4"].data[:] = np.nan
    poisoned = tmp_path / "poisoned.ckpt"
    model.save(str(poisoned))
    with pytest.raises(DivergenceError, match="non-finite loss") as info:
        train(tiny_cfg(steps=2), corpus["manifest"], corpus["manifest"],
              corpus["buckets"], str(tmp_path / "out"), init=str(poisoned))
    assert info.value.step == 1
