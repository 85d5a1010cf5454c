"""Discrete communication channel.

Training uses the straight-through Gumbel-Softmax: the forward value is an
exact one-hot, the backward pass differentiates the tempered softmax of the
noisy logits. Evaluation takes the argmax (lowest index wins ties).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graphgames import diffcore as dc
from graphgames.diffcore import Tensor


@dataclass
class Message:
    symbols: list[int]
    relaxed: Tensor | None = None

    def __len__(self) -> int:
        return len(self.symbols)

    def to_json(self) -> list[int]:
        return [int(s) for s in self.symbols]


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + dc.EPS) + dc.EPS)


def gumbel_softmax_st(logits: Tensor, temperature: float, rng: np.random.Generator) -> Tensor:
    """Straight-through Gumbel-Softmax over the last axis of ``logits``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    noisy = dc.add(logits, Tensor(sample_gumbel(logits.shape, rng)))
    soft = dc.softmax_rows(dc.mul(noisy, 1.0 / temperature))
    hard = np.eye(logits.shape[-1])[np.argmax(soft.data, axis=-1)]
    return dc.straight_through(hard, soft)


def soft_relaxation(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Noise-free softmax path; a differentiable stand-in for the channel in tests."""
    return dc.softmax_rows(dc.mul(logits, 1.0 / temperature))


def argmax_onehot(logits: Tensor) -> Tensor:
    # np.argmax returns the first maximal index
    return Tensor(np.eye(logits.shape[-1])[np.argmax(logits.data, axis=-1)])


def argmax_decode(logits) -> Message:
    """Single message ``[L, V]`` to integer symbols."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return Message(np.argmax(data, axis=-1).tolist())


def make_message(logits: Tensor, temperature: float, rng: np.random.Generator) -> Message:
    """Straight-through sample for one ``[L, V]`` logit matrix."""
    relaxed = gumbel_softmax_st(logits, temperature, rng)
    return Message(np.argmax(relaxed.data, axis=-1).tolist(), relaxed)


def distort_message(msg: Message, position: int, replacement: int, vocab_size: int) -> Message:
    if not 0 <= position < len(msg.symbols):
        raise IndexError(f"position {position} outside message of length {len(msg.symbols)}")
    if not 0 <= replacement < vocab_size:
        raise ValueError(f"replacement {replacement} outside vocabulary of size {vocab_size}")
    symbols = list(msg.symbols)
    symbols[position] = replacement
    return Message(symbols)


def distort_batch(symbols: np.ndarray, position: int, replacement: int) -> np.ndarray:
    out = np.array(symbols, copy=True)
    out[:, position] = replacement
    return out
