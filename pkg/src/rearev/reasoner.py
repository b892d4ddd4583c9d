"""Instruction-conditioned message passing with breadth-first execution and adaptive stages.

Everything operates on a :class:`GraphBatch`, the disjoint union of one or
more question subgraphs.  Softmaxes and seed sums are taken per question, so a
batch of B questions computes exactly what B separate runs would.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import InstructionSet, encode_question, init_instructions, update_gate
from .kg import Subgraph, augmented_relation_count


class ModeError(ValueError):
    pass


class NoSeedError(ValueError):
    pass


MODES = ("bfs", "sequential")


@dataclass(frozen=True)
class ReasonerConfig:
    T: int = 2
    K: int = 3
    L: int = 3
    mode: str = "bfs"
    dropout: float = 0.0
    normalize_seeds: bool = False

    def __post_init__(self):
        if min(self.T, self.K, self.L) < 1:
            raise ValueError("T, K and L must be at least 1")
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}")
        if self.mode == "sequential" and self.K != self.L:
            raise ModeError("sequential execution needs K == L")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def fused_blocks(self) -> int:
        """Instruction blocks per fusion input (K in bfs mode, 1 in sequential mode)."""
        return self.K if self.mode == "bfs" else 1


@dataclass
class GraphBatch:
    num_questions: int
    num_nodes: int
    num_relations: int  # augmented count (base, inverse, self)
    node_seg: np.ndarray
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    edge_seg: np.ndarray
    seeds: np.ndarray
    seed_seg: np.ndarray
    offsets: np.ndarray  # first node of each question
    node_rel: np.ndarray = field(default=None)  # unique (node, relation) incidence pairs
    subgraphs: list[Subgraph] = field(default_factory=list)

    @classmethod
    def from_subgraphs(cls, subs: Sequence[Subgraph]) -> "GraphBatch":
        if not subs:
            raise ValueError("empty batch")
        R = augmented_relation_count(subs[0].num_relations)
        sizes = np.array([s.num_nodes for s in subs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        src, rel, dst, eseg, seeds, sseg = [], [], [], [], [], []
        for b, (s, off) in enumerate(zip(subs, offsets)):
            if s.num_nodes == 0:
                raise ValueError("empty subgraph")
            src.append(s.src + off)
            dst.append(s.dst + off)
            rel.append(s.rel)
            eseg.append(np.full(s.num_edges, b, dtype=np.int64))
            seeds.append(s.seeds + off)
            sseg.append(np.full(len(s.seeds), b, dtype=np.int64))
        dst_all, rel_all = np.concatenate(dst), np.concatenate(rel)
        pairs = np.unique(dst_all * R + rel_all)
        return cls(
            num_questions=len(subs),
            num_nodes=int(sizes.sum()),
            num_relations=R,
            node_seg=np.repeat(np.arange(len(subs)), sizes),
            src=np.concatenate(src),
            rel=rel_all,
            dst=dst_all,
            edge_seg=np.concatenate(eseg),
            seeds=np.concatenate(seeds),
            seed_seg=np.concatenate(sseg),
            offsets=offsets,
            node_rel=np.stack([pairs // R, pairs % R], axis=1),
            subgraphs=list(subs),
        )


def init_reasoner_params(num_relations: int, dim: int, config: ReasonerConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Reasoner tensors; ``num_relations`` is the augmented relation count."""

    def glorot(*shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)

    blocks = config.fused_blocks
    params = {
        "rel.embed": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_relations, dim)),
        "node.W_0": glorot(dim, dim),
        "prob.w": rng.uniform(-1, 1, size=dim) / np.sqrt(dim),
        "adapt.W_q": glorot(dim, 4 * dim),
        "adapt.gate.W_z": glorot(dim, dim),
        "adapt.gate.U_z": glorot(dim, dim),
        "adapt.gate.b_z": np.zeros(dim),
    }
    for l in range(config.L):
        params[f"layer.{l}.W_R"] = glorot(dim, dim)
        params[f"layer.{l}.W_h"] = glorot(dim, (blocks + 1) * dim)
    return {name: ad.parameter(v, name) for name, v in params.items()}


@dataclass
class ReasonerState:
    H: Tensor
    p: Tensor
    logits: Tensor | None = None
    messages: Tensor | None = None  # fused message term W_h[:, d:] @ [m_1; ...; m_K] of the last layer
    layer: int = 0
    stage: int = 0


def init_node_reps(batch: GraphBatch, params: dict[str, Tensor]) -> Tensor:
    """h_v = ReLU(sum of W_0 r over the distinct relations on edges into v)."""
    projected = ad.linear(params["rel.embed"], params["node.W_0"])
    v, r = batch.node_rel.T
    return ad.relu(ad.scatter_sum(ad.gather_rows(projected, r), v, batch.num_nodes))


def init_probability(batch: GraphBatch, normalize: bool = False) -> Tensor:
    """Mass 1 on every seed (or 1/|seeds| per question when ``normalize``)."""
    if len(batch.seeds) == 0 or len(np.unique(batch.seed_seg)) < batch.num_questions:
        raise NoSeedError("every question needs at least one seed entity")
    p = np.zeros(batch.num_nodes)
    if normalize:
        counts = np.bincount(batch.seed_seg, minlength=batch.num_questions)
        np.add.at(p, batch.seeds, 1.0 / counts[batch.seed_seg])
    else:
        p[batch.seeds] = 1.0
    return ad.constant(p)


def _propagate(state: ReasonerState, instr: Sequence[Tensor], batch: GraphBatch, params, l: int,
               rng: np.random.Generator | None, dropout: float) -> ReasonerState:
    K = len(instr)
    R = batch.num_relations
    B = batch.num_questions
    relation_msg = ad.linear(params["rel.embed"], params[f"layer.{l}.W_R"])  # (R, d)
    # messages depend on the edge only through (question, relation), so build that table once
    stacked = ad.concat(list(instr), axis=1) if K > 1 else instr[0]
    tiled = ad.concat([relation_msg] * K, axis=1) if K > 1 else relation_msg
    pair_q = np.repeat(np.arange(B), R)
    pair_r = np.tile(np.arange(R), B)
    table = ad.relu(ad.gather_rows(stacked, pair_q) * ad.gather_rows(tiled, pair_r))
    # A[v, r]: probability mass arriving at v over edges of relation r
    mass = ad.scatter_sum(ad.gather_rows(state.p, batch.src), batch.dst * R + batch.rel, batch.num_nodes * R)
    d = state.H.shape[1]
    W_h = params[f"layer.{l}.W_h"]
    # fold the fusion projection into the table so no (nodes, K*d) block is ever built
    fused = ad.linear(table, ad.slice_cols(W_h, d, W_h.shape[1]))
    agg = ad.block_matmul(ad.reshape(mass, (batch.num_nodes, R)), fused, batch.node_seg, R)
    H = ad.relu(ad.linear(state.H, ad.slice_cols(W_h, 0, d)) + agg)
    H = ad.dropout(H, dropout, rng)
    logits = ad.matmul(H, params["prob.w"])
    p = ad.segment_softmax(logits, batch.node_seg, B)
    return ReasonerState(H, p, logits, agg, l + 1, state.stage)


def bfs_layer(state: ReasonerState, instructions: InstructionSet, batch: GraphBatch,
              params: dict[str, Tensor], l: int, rng=None, dropout: float = 0.0) -> ReasonerState:
    """Layer ``l`` (0-based) evaluating every instruction and fusing the results."""
    return _propagate(state, instructions.vectors, batch, params, l, rng, dropout)


def sequential_layer(state: ReasonerState, instructions: InstructionSet, batch: GraphBatch,
                     params: dict[str, Tensor], l: int, mode: str = "sequential",
                     rng=None, dropout: float = 0.0) -> ReasonerState:
    """Layer ``l`` conditioned on instruction ``l`` alone (the fixed-order baseline)."""
    if mode != "sequential":
        raise ModeError("sequential_layer called outside sequential mode")
    return _propagate(state, [instructions.vectors[l]], batch, params, l, rng, dropout)


def seed_summary(H: Tensor, batch: GraphBatch) -> Tensor:
    """Sum of the seed rows of H per question, shape (B, d)."""
    return ad.scatter_sum(ad.gather_rows(H, batch.seeds), batch.seed_seg, batch.num_questions)


def adapt_instructions(instructions: InstructionSet, H: Tensor, batch: GraphBatch,
                       params: dict[str, Tensor]) -> InstructionSet:
    """Gate each instruction towards a projection of itself and the seed summary."""
    h_e = seed_summary(H, batch)
    revised = []
    for i in instructions.vectors:
        cand = ad.linear(ad.concat([i, h_e, i - h_e, i * h_e], axis=1), params["adapt.W_q"])
        g = update_gate(h_e, i, params["adapt.gate.W_z"], params["adapt.gate.U_z"], params["adapt.gate.b_z"])
        revised.append((1.0 - g) * i + g * cand)
    return InstructionSet(revised, instructions.attention, instructions.stage + 1, instructions.token_seg)


@dataclass
class StageTrace:
    p: np.ndarray
    attention: list[np.ndarray]


@dataclass
class ReasonOutput:
    p: Tensor
    logits: Tensor
    H: Tensor
    trace: list[StageTrace]
    layer_probs: list[np.ndarray]  # p after every layer of every stage


def run_stages(batch: GraphBatch, instructions: InstructionSet, H_in: Tensor, params: dict[str, Tensor],
               config: ReasonerConfig, rng: np.random.Generator | None = None) -> ReasonOutput:
    """The T x L loop given already initialized instructions and node states."""
    dropout = config.dropout if rng is not None else 0.0
    H = H_in
    trace, layer_probs = [], []
    state = None
    for t in range(config.T):
        state = ReasonerState(H, init_probability(batch, config.normalize_seeds), stage=t)
        for l in range(config.L):
            if config.mode == "bfs":
                state = bfs_layer(state, instructions, batch, params, l, rng, dropout)
            else:
                state = sequential_layer(state, instructions, batch, params, l, config.mode, rng, dropout)
            layer_probs.append(state.p.values)
        trace.append(StageTrace(state.p.values, [u.values for u in instructions.attention]))
        H = state.H
        if t < config.T - 1:
            instructions = adapt_instructions(instructions, H, batch, params)
    return ReasonOutput(state.p, state.logits, state.H, trace, layer_probs)


def forward(batch: GraphBatch, token_ids: Sequence[Sequence[int]], params: dict[str, Tensor],
            config: ReasonerConfig, rng: np.random.Generator | None = None) -> ReasonOutput:
    """Full forward pass: encode, decode instructions, initialize nodes, reason.

    ``rng`` drives dropout; pass ``None`` for inference.
    """
    enc = encode_question(token_ids, params)
    instructions = init_instructions(enc, params, config.K)
    if rng is not None and config.dropout > 0:
        instructions = InstructionSet(
            [ad.dropout(v, config.dropout, rng) for v in instructions.vectors],
            instructions.attention, 0, instructions.token_seg,
        )
    H_in = init_node_reps(batch, params)
    return run_stages(batch, instructions, H_in, params, config, rng)


def reason(subgraph: Subgraph, token_ids: Sequence[int], params: dict[str, Tensor],
           config: ReasonerConfig, rng: np.random.Generator | None = None) -> ReasonOutput:
    """Single-question convenience wrapper around :func:`forward`."""
    return forward(GraphBatch.from_subgraphs([subgraph]), [list(token_ids)], params, config, rng)
