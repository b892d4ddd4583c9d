"""Question tokenization, recurrent encoding and instruction initialization."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, UNK = 0, 1
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class EmptyQuestionError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation tokens."""
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise EmptyQuestionError("question has no tokens")
    return tokens


class Vocab:
    """Token vocabulary; ids 0 and 1 are PAD and UNK."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if self.tokens[:2] != ["<pad>", "<unk>"]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(t for t, c in counts.items() if c >= min_count)
        return cls(["<pad>", "<unk>"] + kept)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(t + "\n" for t in self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize(text)]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()


def init_encoder_params(vocab_size: int, dim: int, num_instructions: int, rng: np.random.Generator) -> dict[str, Tensor]:
    def glorot(*shape):
        bound = np.sqrt(6.0 / (shape[-1] + shape[0]))
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "enc.embed": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)),
        "enc.gru.W_x": glorot(3 * dim, dim),
        "enc.gru.U_h": glorot(3 * dim, dim),
        "enc.gru.b_x": np.zeros(3 * dim),
        "enc.gru.b_h": np.zeros(3 * dim),
        "instr.w_u": rng.uniform(-1, 1, size=dim) / np.sqrt(dim),
    }
    params["enc.embed"][PAD] = 0.0
    for k in range(num_instructions):
        params[f"instr.W.{k}"] = glorot(dim, 4 * dim)
    return {name: ad.parameter(v, name) for name, v in params.items()}


def update_gate(x: Tensor, h: Tensor, W_z: Tensor, U_z: Tensor, b_z: Tensor) -> Tensor:
    """GRU update gate z = sigmoid(W_z x + U_z h + b_z), rows are batch items."""
    return ad.sigmoid(ad.add_bias(ad.linear(x, W_z) + ad.linear(h, U_z), b_z))


def gru_step(gx: Tensor, h: Tensor, U_h: Tensor, b_h: Tensor) -> Tensor:
    """One GRU step given the precomputed input projection ``gx`` (rows x 3d).

    Gate order in the stacked weights is (update, reset, candidate).
    """
    d = h.shape[1]
    gh = ad.add_bias(ad.linear(h, U_h), b_h)
    z = ad.sigmoid(ad.slice_cols(gx, 0, d) + ad.slice_cols(gh, 0, d))
    r = ad.sigmoid(ad.slice_cols(gx, d, 2 * d) + ad.slice_cols(gh, d, 2 * d))
    n = ad.tanh(ad.slice_cols(gx, 2 * d, 3 * d) + r * ad.slice_cols(gh, 2 * d, 3 * d))
    return (1.0 - z) * n + z * h


@dataclass
class EncodedQuestion:
    """Token states of a batch of questions, flattened question-major.

    ``tokens`` has one row per real token; ``token_seg[j]`` is the question
    that row belongs to.  There is no padding, so every row is a real token.
    """

    tokens: Tensor
    question: Tensor  # (B, d) final recurrent states
    token_seg: np.ndarray
    lengths: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.ones(len(self.token_seg), dtype=bool)


def encode_question(token_ids: Sequence[Sequence[int]], params: dict[str, Tensor]) -> EncodedQuestion:
    """Run the GRU over each question; ``token_ids`` is a list of id lists."""
    lengths = np.array([len(t) for t in token_ids], dtype=np.int64)
    if (lengths < 1).any():
        raise EmptyQuestionError("every question needs at least one token")
    B, steps = len(lengths), int(lengths.max())
    d = params["enc.embed"].shape[1]
    padded = np.full((steps, B), PAD, dtype=np.int64)
    for b, ids in enumerate(token_ids):
        padded[: len(ids), b] = ids

    emb = ad.gather_rows(params["enc.embed"], padded.ravel())
    gx_all = ad.affine(emb, params["enc.gru.W_x"], params["enc.gru.b_x"])
    h = ad.constant(np.zeros((B, d)))
    states = []
    for t in range(steps):
        gx = ad.gather_rows(gx_all, np.arange(t * B, (t + 1) * B))
        h_new = gru_step(gx, h, params["enc.gru.U_h"], params["enc.gru.b_h"])
        live = (lengths > t).astype(np.float64)
        if live.all():
            h = h_new
        else:
            # finished questions keep their last state
            h = h + ad.scale_rows(h_new - h, live)
        states.append(h)

    stacked = ad.concat(states, axis=0) if steps > 1 else states[0]
    rows = np.concatenate([np.arange(n) * B + b for b, n in enumerate(lengths)])
    token_seg = np.repeat(np.arange(B), lengths)
    return EncodedQuestion(ad.gather_rows(stacked, rows), h, token_seg, lengths)


@dataclass
class InstructionSet:
    vectors: list[Tensor]  # K tensors of shape (B, d)
    attention: list[Tensor]  # K tensors over the flattened tokens
    stage: int = 0
    token_seg: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def K(self) -> int:
        return len(self.vectors)

    def attention_rows(self, b: int) -> list[list[float]]:
        """Per-instruction token weights of question ``b``."""
        sel = self.token_seg == b
        return [u.values[sel].tolist() for u in self.attention]


def init_instructions(enc: EncodedQuestion, params: dict[str, Tensor], K: int) -> InstructionSet:
    """Decode K instructions by attending over tokens, each conditioned on the previous one."""
    if K < 1:
        raise ValueError("K must be at least 1")
    q = enc.question
    B = q.shape[0]
    prev = q
    vectors, attention = [], []
    for k in range(K):
        feats = ad.concat([prev, q, q * prev, q - prev], axis=1)
        qk = ad.linear(feats, params[f"instr.W.{k}"])
        scores = ad.matmul(ad.gather_rows(qk, enc.token_seg) * enc.tokens, params["instr.w_u"])
        u = ad.segment_softmax(scores, enc.token_seg, B)
        prev = ad.scatter_sum(ad.scale_rows(enc.tokens, u), enc.token_seg, B)
        vectors.append(prev)
        attention.append(u)
    return InstructionSet(vectors, attention, 0, enc.token_seg)
