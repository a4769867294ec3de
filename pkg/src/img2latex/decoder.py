"""Attentional LSTM decoder with input feeding.

One step consumes the previous token and the previous attentional output
O_{t-1} (concatenated, so the attention decision from the last step
feeds the recurrence), runs two stacked LSTM layers, attends over the
memory bank with an additive score, and combines top hidden state and
context into logits:

    a_l   = beta . tanh(W1 h + W2 e_l)        score per memory entry
    alpha = softmax(a)
    C     = sum_l alpha_l e_l
    O_t   = tanh(W3 [h_t ; C_t])
    y_t   ~ softmax(W4 O_t)

The cell follows the gate equations with the output gate applied to the
raw cell state, h_t = o_t * c_t; set standard_cell_output=True for the
usual h_t = o_t * tanh(c_t).  The attention query is the top hidden
state from before the current update; attend_current_hidden=True queries
with the updated one instead.

All weights use the (in, out) convention and are applied as x @ W.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import MemoryBank
from .tensor import Parameter, Tensor


@dataclass
class DecoderConfig:
    vocab_size: int
    d: int = 512              # memory entry width (matches the encoder)
    d_emb: int = 32
    hidden: int = 512
    attn_dim: int = 512
    out_dim: int = 512        # width of the attentional output O_t
    dropout: float = 0.4
    standard_cell_output: bool = False
    attend_current_hidden: bool = False
    dtype: str = "f64"

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class DecoderState:
    """Recurrent state: per-layer (h, c) plus the fed-back output O."""
    h: list[Tensor]
    c: list[Tensor]
    o_prev: Tensor


@dataclass
class StepOutput:
    logits: Tensor      # (B, V)
    alpha: Tensor       # (B, L) attention weights, rows sum to 1
    state: DecoderState


_GATES = ("i", "f", "o", "c")


class Decoder:
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        dt = config.np_dtype()
        self.params: dict[str, Parameter] = {}

        def add(name, shape, fan_in, fan_out):
            self.params[name] = Parameter(
                name, T.glorot_uniform(shape, fan_in, fan_out, rng, dt))

        def add_zeros(name, shape):
            self.params[name] = Parameter(name, np.zeros(shape, dtype=dt))

        v, h = config.vocab_size, config.hidden
        add("dec.embed", (v, config.d_emb), v, config.d_emb)
        in_sizes = {1: config.d_emb + config.out_dim, 2: h}
        for layer in (1, 2):
            n_in = in_sizes[layer]
            for g in _GATES:
                add(f"dec.lstm{layer}.w_{g}x", (n_in, h), n_in, h)
                add(f"dec.lstm{layer}.w_{g}h", (h, h), h, h)
                add_zeros(f"dec.lstm{layer}.b_{g}", (h,))
        for layer in (1, 2):
            add(f"dec.init.h{layer}.w", (config.d, h), config.d, h)
            add_zeros(f"dec.init.h{layer}.b", (h,))
            add(f"dec.init.c{layer}.w", (config.d, h), config.d, h)
            add_zeros(f"dec.init.c{layer}.b", (h,))
        add("dec.attn.w1", (h, config.attn_dim), h, config.attn_dim)
        add("dec.attn.w2", (config.d, config.attn_dim), config.d, config.attn_dim)
        add("dec.attn.beta", (config.attn_dim,), config.attn_dim, 1)
        add("dec.w3", (h + config.d, config.out_dim), h + config.d, config.out_dim)
        add("dec.w4", (config.out_dim, v), config.out_dim, v)

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def init_state(self, bank: MemoryBank) -> DecoderState:
        """Hidden/cell states from the mean annotation vector; O_0 = 0."""
        mean = T.reduce_mean(bank.entries, axis=1)      # (B, d)
        hs, cs = [], []
        for layer in (1, 2):
            hs.append(T.tanh(mean @ self._p(f"dec.init.h{layer}.w")
                             + self._p(f"dec.init.h{layer}.b")))
            cs.append(T.tanh(mean @ self._p(f"dec.init.c{layer}.w")
                             + self._p(f"dec.init.c{layer}.b")))
        o0 = Tensor(np.zeros((bank.entries.shape[0], self.config.out_dim),
                             dtype=self.config.np_dtype()))
        return DecoderState(h=hs, c=cs, o_prev=o0)

    def _cell(self, layer: int, x: Tensor, h: Tensor, c: Tensor):
        p = self._p
        i = T.sigmoid(x @ p(f"dec.lstm{layer}.w_ix") + h @ p(f"dec.lstm{layer}.w_ih")
                      + p(f"dec.lstm{layer}.b_i"))
        f = T.sigmoid(x @ p(f"dec.lstm{layer}.w_fx") + h @ p(f"dec.lstm{layer}.w_fh")
                      + p(f"dec.lstm{layer}.b_f"))
        o = T.sigmoid(x @ p(f"dec.lstm{layer}.w_ox") + h @ p(f"dec.lstm{layer}.w_oh")
                      + p(f"dec.lstm{layer}.b_o"))
        g = T.tanh(x @ p(f"dec.lstm{layer}.w_cx") + h @ p(f"dec.lstm{layer}.w_ch")
                   + p(f"dec.lstm{layer}.b_c"))
        c_new = f * c + i * g
        h_new = o * (T.tanh(c_new) if self.config.standard_cell_output else c_new)
        return h_new, c_new

    def _attend(self, bank: MemoryBank, query: Tensor):
        b, length, d = bank.entries.shape
        a = self.config.attn_dim
        if bank.proj is None:
            flat = T.reshape(bank.entries, (b * length, d))
            bank.proj = T.reshape(flat @ self._p("dec.attn.w2"), (b, length, a))
        qp = T.reshape(query @ self._p("dec.attn.w1"), (b, 1, a))
        # score the tanh activations against beta with a matmul: one GEMV
        # instead of two (B, L, A) broadcast temporaries per step
        act = T.reshape(T.tanh(qp + bank.proj), (b * length, a))
        scores = T.reshape(act @ T.reshape(self._p("dec.attn.beta"), (a, 1)),
                           (b, length))
        alpha = T.softmax(scores)                                        # (B, L)
        ctx = T.reduce_sum(T.reshape(alpha, (b, length, 1)) * bank.entries, axis=1)
        return ctx, alpha

    def step(self, bank: MemoryBank, state: DecoderState, tokens,
             train: bool = False, rng: np.random.Generator | None = None) -> StepOutput:
        """Advance one step given the previous tokens, shape (B,) int."""
        cfg = self.config
        emb = T.embedding_lookup(self._p("dec.embed"), np.asarray(tokens))
        emb = T.dropout(emb, cfg.dropout, train, rng)
        x1 = T.concat([emb, state.o_prev], axis=1)
        h1, c1 = self._cell(1, x1, state.h[0], state.c[0])
        h2, c2 = self._cell(2, h1, state.h[1], state.c[1])
        query = h2 if cfg.attend_current_hidden else state.h[1]
        ctx, alpha = self._attend(bank, query)
        o = T.tanh(T.concat([h2, ctx], axis=1) @ self._p("dec.w3"))
        o = T.dropout(o, cfg.dropout, train, rng)
        logits = o @ self._p("dec.w4")
        return StepOutput(logits=logits, alpha=alpha,
                          state=DecoderState(h=[h1, h2], c=[c1, c2], o_prev=o))
