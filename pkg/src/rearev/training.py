"""KL-divergence training with Adam and validation-based model selection."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .checkpoint import Checkpoint
from .data import QuestionInstance
from .encoder import init_encoder_params
from .kg import augmented_relation_count
from .metrics import f1_at_threshold, hits_at_1
from .optim import Adam
from .reasoner import GraphBatch, ReasonerConfig, forward, init_reasoner_params

log = logging.getLogger(__name__)

GRID = {
    "dim": (50, 100),
    "T": (2, 3),
    "K": (2, 3),
    "L": (2, 3, 4),
    "lr": (1e-4, 5e-4),
    "batch_size": (8, 16, 40),
    "epochs": (10, 30, 50, 100, 200),
    "dropout": (0.1, 0.2, 0.3),
}
# epochs is a compute budget; short smoke runs stay legal without the override
GRID_EXEMPT = ("epochs",)


class ConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, qids: Sequence[str]):
        super().__init__(message)
        self.qids = list(qids)


@dataclass
class TrainConfig:
    dim: int = 50
    T: int = 2
    K: int = 3
    L: int = 3
    lr: float = 5e-4
    batch_size: int = 16
    epochs: int = 30
    dropout: float = 0.1
    seed: int = 0
    mode: str = "bfs"
    normalize_seeds: bool = False
    allow_any: bool = False
    eval_batch: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.reasoner()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.dim < 1:
            raise ConfigError("lr, batch size, epochs and dim must be non-negative (batch, dim positive)")
        if self.allow_any:
            return
        for name, allowed in GRID.items():
            if name in GRID_EXEMPT:
                continue
            value = getattr(self, name)
            if not any(np.isclose(value, a) for a in allowed):
                raise ConfigError(f"{name}={value} is outside the tuning grid {allowed}; pass allow_any to override")

    def reasoner(self) -> ReasonerConfig:
        return ReasonerConfig(self.T, self.K, self.L, self.mode, self.dropout, self.normalize_seeds)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def init_params(config: TrainConfig, vocab_size: int, num_relations: int) -> dict[str, Tensor]:
    """Fresh parameters; ``num_relations`` is the KG's base relation count."""
    rng = np.random.default_rng(config.seed)
    params = init_encoder_params(vocab_size, config.dim, config.K, rng)
    params.update(init_reasoner_params(augmented_relation_count(num_relations), config.dim, config.reasoner(), rng))
    return params


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: ad.parameter(v, name) for name, v in arrays.items()}


def make_target(answers: Sequence[int], n: int) -> np.ndarray | None:
    """Uniform distribution over answer nodes; ``None`` when no answer is in the subgraph."""
    answers = np.unique(np.asarray(answers, dtype=np.int64))
    answers = answers[(answers >= 0) & (answers < n)]
    if len(answers) == 0:
        return None
    t = np.zeros(n)
    t[answers] = 1.0 / len(answers)
    return t


def kl_loss(target, logits: Tensor) -> Tensor:
    """KL(target || softmax(logits)); the softmax is folded into a log-sum-exp."""
    return ad.kl_div(target, logits)


def batch_loss(params: dict[str, Tensor], questions: Sequence[QuestionInstance], targets: Sequence[np.ndarray],
               config: ReasonerConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Mean per-question KL over a batch of independent questions."""
    batch = GraphBatch.from_subgraphs([q.subgraph for q in questions])
    out = forward(batch, [q.token_ids for q in questions], params, config, rng)
    per_question = ad.segment_kl(out.logits, np.concatenate(targets), batch.node_seg, batch.num_questions)
    return ad.mean(per_question)


def predict(params: dict[str, Tensor], questions: Sequence[QuestionInstance], config: ReasonerConfig,
            batch_size: int = 64, trace: bool = False):
    """Final node distributions per question (``None`` for questions without a subgraph).

    With ``trace`` each item is the pair ``(p, ReasonOutput-of-its-batch, index)``.
    """
    results: list = [None] * len(questions)
    usable = [i for i, q in enumerate(questions) if q.subgraph is not None and q.subgraph.num_nodes > 0]
    for start in range(0, len(usable), batch_size):
        idx = usable[start:start + batch_size]
        batch = GraphBatch.from_subgraphs([questions[i].subgraph for i in idx])
        out = forward(batch, [questions[i].token_ids for i in idx], params, config, None)
        bounds = np.append(batch.offsets, batch.num_nodes)
        for j, i in enumerate(idx):
            p = out.p.values[bounds[j]:bounds[j + 1]]
            results[i] = (p, out, j) if trace else p
    return results


def score(params, questions: Sequence[QuestionInstance], config: ReasonerConfig, batch_size: int = 64,
          tau: float = 0.95, rule: str = "cumulative") -> tuple[float, float]:
    """Mean Hits@1 and F1; questions without a subgraph score 0."""
    if not questions:
        return 0.0, 0.0
    probs = predict(params, questions, config, batch_size)
    hits = f1 = 0.0
    for q, p in zip(questions, probs):
        if p is None:
            continue
        ents = q.subgraph.entities
        hits += hits_at_1(p, q.answers, ents)
        f1 += f1_at_threshold(p, q.answers, tau, rule, ents, num_gold=len(set(q.answers)))
    return hits / len(questions), f1 / len(questions)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    skipped: int = 0
    final_params: dict[str, np.ndarray] = field(default_factory=dict)
    seconds: float = 0.0


def _find_nonfinite(params, questions, targets, config, rng_seed) -> list[str]:
    bad = []
    for q, t in zip(questions, targets):
        try:
            with ad.Tape():
                loss = batch_loss(params, [q], [t], config, np.random.default_rng(rng_seed))
            if not np.isfinite(loss.item()):
                bad.append(q.qid)
        except (NonFiniteError, FloatingPointError):
            bad.append(q.qid)
    return bad or [q.qid for q in questions]


def train(train_qs: Sequence[QuestionInstance], val_qs: Sequence[QuestionInstance], config: TrainConfig, *,
          vocab_size: int, num_relations: int, vocab_hash: str = "", relation_hash: str = "",
          log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          run_config: dict | None = None, params: dict[str, Tensor] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch (or from ``params``) and keep the best-validation weights."""
    if not train_qs or not val_qs:
        raise ValueError("training and validation sets must be nonempty")
    started = time.perf_counter()
    rconf = config.reasoner()
    params = params or init_params(config, vocab_size, num_relations)
    arrays = {name: t.values for name, t in params.items()}
    opt = Adam(arrays, lr=config.lr)

    usable, targets, skipped = [], [], 0
    for q in train_qs:
        t = make_target(q.local_answers(), q.subgraph.num_nodes) if q.subgraph is not None else None
        if t is None:
            skipped += 1
            continue
        usable.append(q)
        targets.append(t)
    if not usable:
        raise ValueError("no training question has an answer inside its subgraph")

    def snapshot(epoch, metric):
        return Checkpoint(
            params={k: v.copy() for k, v in arrays.items()}, config=config.to_dict(),
            vocab_hash=vocab_hash, relation_hash=relation_hash, num_relations=num_relations,
            vocab_size=vocab_size, best_metric=metric, epoch=epoch, run_config=run_config or {},
        )

    def diverged(epoch, batch, bad):
        dump = {"epoch": epoch, "batch": batch, "qids": bad}
        if checkpoint_path is not None:
            Path(checkpoint_path).with_name("diverged.json").write_text(json.dumps(dump, indent=2))
        return TrainingDivergedError(f"non-finite values at epoch {epoch}, questions {bad}", bad)

    def validate(epoch):
        try:
            return score(params, val_qs, rconf, config.eval_batch)
        except NonFiniteError:
            bad = []
            for q in val_qs:
                try:
                    predict(params, [q], rconf)
                except NonFiniteError:
                    bad.append(q.qid)
            raise diverged(epoch, None, bad or [q.qid for q in val_qs]) from None

    val_hits, val_f1 = validate(0)
    best = snapshot(0, val_hits)
    best_key = (val_hits, val_f1)  # Hits@1 selects; F1 only breaks ties
    history = [{"epoch": 0, "train_loss": float("nan"), "val_hits1": val_hits, "val_f1": val_f1, "skipped": skipped}]
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(usable))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            qs = [usable[i] for i in idx]
            ts = [targets[i] for i in idx]
            drop_seed = [config.seed, 2, epoch, b]
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(params, qs, ts, rconf, np.random.default_rng(drop_seed))
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss")
            except NonFiniteError:
                raise diverged(epoch, b, _find_nonfinite(params, qs, ts, rconf, drop_seed)) from None
            grads = tape.backward(loss, params.values())
            opt.step(grads)
            losses.append(loss.item())
        val_hits, val_f1 = validate(epoch)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_hits1": val_hits,
               "val_f1": val_f1, "skipped": skipped}
        history.append(row)
        log.info("epoch %d loss %.4f val hits@1 %.4f f1 %.4f", epoch, row["train_loss"], val_hits, val_f1)
        if on_epoch is not None:
            on_epoch(row)
        if (val_hits, val_f1) > best_key:
            best, best_key = snapshot(epoch, val_hits), (val_hits, val_f1)

    if log_path is not None:
        write_log(log_path, history)
    if checkpoint_path is not None:
        best.save(checkpoint_path)
    return TrainResult(best, history, skipped, {k: v.copy() for k, v in arrays.items()},
                       time.perf_counter() - started)


def write_log(path: str | Path, history: Sequence[dict]) -> None:
    cols = ["epoch", "train_loss", "val_hits1", "val_f1", "skipped"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in history:
            writer.writerow({c: row[c] for c in cols})
