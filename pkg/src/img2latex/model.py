"""Full encoder-decoder model: construction, checkpoint I/O, decode protocol.

Randomness is derived, never carried: every consumer builds a fresh
numpy Generator from SeedSequence((seed, purpose, *indices)), so any
draw can be reproduced from the checkpoint seed plus integer coordinates
(no RNG state needs to be saved).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decoder import Decoder, DecoderConfig, DecoderState
from .encoder import Encoder, EncoderConfig, MemoryBank
from .tensor import Parameter, Tensor

# purpose tags for seed derivation
RNG_INIT = 0
RNG_SHUFFLE = 1
RNG_DROPOUT = 2
RNG_SAMPLE = 3
RNG_NOISE = 4


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose, index...) coordinates."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(p) for p in path)))


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 512
    d_emb: int = 32
    hidden: int = 512
    attn_dim: int = 512
    out_dim: int = 512
    dropout: float = 0.4
    standard_cell_output: bool = False
    attend_current_hidden: bool = False
    bn_momentum: float = 0.1
    timescale: float = 10000.0
    dtype: str = "f64"
    seed: int = 0

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log softmax over the last axis, numerically stable."""
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


@dataclass
class DecodeState:
    """Opaque handle threaded through decode_step."""
    bank: MemoryBank
    inner: DecoderState


class Model:
    """CNN encoder + attentional LSTM decoder over a fixed vocabulary."""

    def __init__(self, config: ModelConfig, vocab: list[str]):
        if config.vocab_size != len(vocab):
            raise ValueError(
                f"config.vocab_size={config.vocab_size} but vocab has {len(vocab)} tokens")
        self.config = config
        self.vocab = list(vocab)
        rng = derive_rng(config.seed, RNG_INIT)
        self.encoder = Encoder(
            EncoderConfig(d=config.d, bn_momentum=config.bn_momentum,
                          timescale=config.timescale, dtype=config.dtype), rng)
        self.decoder = Decoder(
            DecoderConfig(vocab_size=config.vocab_size, d=config.d, d_emb=config.d_emb,
                          hidden=config.hidden, attn_dim=config.attn_dim,
                          out_dim=config.out_dim, dropout=config.dropout,
                          standard_cell_output=config.standard_cell_output,
                          attend_current_hidden=config.attend_current_hidden,
                          dtype=config.dtype), rng)
        self.params: dict[str, Parameter] = {**self.encoder.params, **self.decoder.params}
        self.buffers: dict[str, np.ndarray] = self.encoder.buffers

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward pieces used by training --------------------------------
    def encode(self, images, train: bool = False) -> MemoryBank:
        return self.encoder.encode(images, train=train)

    def init_state(self, bank: MemoryBank) -> DecoderState:
        return self.decoder.init_state(bank)

    def step(self, bank, state, tokens, train: bool = False, rng=None):
        return self.decoder.step(bank, state, tokens, train=train, rng=rng)

    # -- single-image decode protocol ------------------------------------
    def decode_start(self, image: np.ndarray) -> DecodeState:
        """Encode one (H, W) image and return the initial decode state."""
        with T.no_grad():
            bank = self.encode(image, train=False)
            inner = self.init_state(bank)
        return DecodeState(bank=bank, inner=inner)

    def decode_step(self, state: DecodeState, token: int):
        """Feed one token id; returns (logp over vocab, next state, alpha).

        logp has shape (V,), alpha shape (L,) over memory entries.
        """
        with T.no_grad():
            out = self.decoder.step(state.bank, state.inner, np.array([int(token)]))
        logp = log_softmax(out.logits.data.astype(np.float64))[0]
        alpha = out.alpha.data[0]
        return logp, DecodeState(bank=state.bank, inner=out.state), alpha

    # -- persistence ------------------------------------------------------
    def save(self, path, step: int = 0, phase: str = "mle",
             best_metric: float | None = None, optimizer: dict | None = None,
             extra_meta: dict | None = None) -> None:
        meta = {
            "config": asdict(self.config),
            "vocab": self.vocab,
            "step": int(step),
            "phase": phase,
            "best_metric": best_metric,
        }
        if extra_meta:
            meta.update(extra_meta)
        params = {name: p.data for name, p in self.params.items()}
        save_checkpoint(path, meta, params, self.buffers, optimizer)

    @classmethod
    def load(cls, path):
        """Rebuild a model from a checkpoint; returns (model, checkpoint)."""
        ckpt = load_checkpoint(path)
        cfg = ModelConfig(**ckpt.meta["config"])
        model = cls(cfg, ckpt.meta["vocab"])
        model.load_params(ckpt.params)
        for name, arr in ckpt.buffers.items():
            if name not in model.buffers:
                raise CheckpointError(f"checkpoint buffer '{name}' not in model")
            np.copyto(model.buffers[name], arr)
        return model, ckpt

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(params)
        extra = set(params) - set(self.params)
        if missing or extra:
            raise CheckpointError(
                f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        dt = self.config.np_dtype()
        for name, arr in params.items():
            p = self.params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise CheckpointError(
                    f"parameter '{name}' shape {arr.shape} != model shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=dt)
