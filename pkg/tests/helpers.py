"""Shared builders and a finite-difference gradient checker for the test suite."""

from __future__ import annotations

import numpy as np

from rearev import autodiff as ad
from rearev.encoder import init_encoder_params
from rearev.kg import Subgraph, augmented_relation_count
from rearev.reasoner import ReasonerConfig, init_reasoner_params


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; tiny denominators fall back to absolute error."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(num / den)


def fd_check(fn, params: dict[str, ad.Tensor], eps: float = 1e-5, max_entries: int | None = None,
             rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    Returns the relative error per parameter.  ``max_entries`` limits how many
    coordinates of each tensor are probed (chosen with ``rng``).
    """
    with ad.Tape() as tape:
        loss = fn()
    grads = tape.backward(loss, params.values())
    errors = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            numeric[j] = (up - down) / (2 * eps)
        errors[name] = rel_err(grads[name].reshape(-1)[idx], numeric)
    return errors


def random_subgraph(rng: np.random.Generator, n: int, num_relations: int = 3, num_facts: int | None = None,
                    num_seeds: int = 1) -> Subgraph:
    """A connected-ish random subgraph with ``n`` local nodes and global ids ``10*i``."""
    num_facts = num_facts if num_facts is not None else 2 * n
    facts = []
    for v in range(1, n):
        facts.append((int(rng.integers(v)), int(rng.integers(num_relations)), v))
    while len(facts) < num_facts:
        s, o = rng.integers(n, size=2)
        facts.append((int(s), int(rng.integers(num_relations)), int(o)))
    facts = sorted(set(facts))
    seeds = np.sort(rng.choice(n, size=num_seeds, replace=False))
    return Subgraph(np.arange(n) * 10, np.array(facts, dtype=np.int64), seeds, num_relations)


def model_params(vocab_size: int, num_relations: int, dim: int, config: ReasonerConfig,
                 seed: int = 0) -> dict[str, ad.Tensor]:
    rng = np.random.default_rng(seed)
    params = init_encoder_params(vocab_size, dim, config.K, rng)
    params.update(init_reasoner_params(augmented_relation_count(num_relations), dim, config, rng))
    # biases start at zero; perturb them so gradient checks exercise every path
    for name, p in params.items():
        if name.endswith("b_x") or name.endswith("b_h") or name.endswith("b_z"):
            p.values[:] = rng.normal(0, 0.3, size=p.shape)
    return params


def _p(rng, *shape, name="x", away_from_zero=False):
    v = rng.normal(size=shape)
    if away_from_zero:
        v = np.where(np.abs(v) < 0.05, 0.3, v)
    return ad.parameter(v, name)


def _op_cases():
    """Name -> builder(rng) returning (scalar loss fn, params) for each differentiable op.

    Every loss ends in a weighted sum with a fixed random probe so the
    gradient reaching each op output is generic.
    """

    def probe(rng, shape):
        w = ad.constant(rng.normal(size=shape))
        return lambda t: ad.total(t * w)

    def elementwise(op, **kw):
        def build(rng):
            a = _p(rng, 3, 4, name="a", **kw)
            pr = probe(rng, (3, 4))
            return (lambda: pr(op(a))), {"a": a}
        return build

    def binary(op):
        def build(rng):
            a, b = _p(rng, 3, 4, name="a"), _p(rng, 3, 4, name="b")
            pr = probe(rng, (3, 4))
            return (lambda: pr(op(a, b))), {"a": a, "b": b}
        return build

    def matmul_case(rng):
        a, b = _p(rng, 4, 3, name="a"), _p(rng, 3, 2, name="b")
        pr = probe(rng, (4, 2))
        return (lambda: pr(ad.matmul(a, b))), {"a": a, "b": b}

    def matvec_case(rng):
        a, b = _p(rng, 4, 3, name="a"), _p(rng, 3, name="b")
        pr = probe(rng, (4,))
        return (lambda: pr(ad.matmul(a, b))), {"a": a, "b": b}

    def affine_case(rng):
        x, w, b = _p(rng, 5, 3, name="x"), _p(rng, 2, 3, name="w"), _p(rng, 2, name="b")
        pr = probe(rng, (5, 2))
        return (lambda: pr(ad.affine(x, w, b))), {"x": x, "w": w, "b": b}

    def scale_rows_case(rng):
        x, s = _p(rng, 4, 3, name="x"), _p(rng, 4, name="s")
        pr = probe(rng, (4, 3))
        return (lambda: pr(ad.scale_rows(x, s))), {"x": x, "s": s}

    def mul_row_case(rng):
        x, v = _p(rng, 4, 3, name="x"), _p(rng, 3, name="v")
        pr = probe(rng, (4, 3))
        return (lambda: pr(ad.mul_row(x, v))), {"x": x, "v": v}

    def concat_case(axis):
        def build(rng):
            a, b = _p(rng, 2, 3, name="a"), _p(rng, 2, 3, name="b")
            shape = (4, 3) if axis == 0 else (2, 6)
            pr = probe(rng, shape)
            return (lambda: pr(ad.concat([a, b], axis=axis))), {"a": a, "b": b}
        return build

    def slice_case(rng):
        x = _p(rng, 3, 5, name="x")
        pr = probe(rng, (3, 2))
        return (lambda: pr(ad.slice_cols(x, 1, 3))), {"x": x}

    def mean_case(rng):
        x = _p(rng, 3, 4, name="x")
        return (lambda: ad.mean(x * x)), {"x": x}

    def reshape_case(rng):
        x = _p(rng, 3, 4, name="x")
        pr = probe(rng, (2, 6))
        return (lambda: pr(ad.reshape(x, (2, 6)))), {"x": x}

    def dropout_case(rng):
        x = _p(rng, 4, 5, name="x")
        pr = probe(rng, (4, 5))
        seed = int(rng.integers(1 << 30))
        return (lambda: pr(ad.dropout(x, 0.3, np.random.default_rng(seed)))), {"x": x}

    def block_matmul_case(rng):
        a, b = _p(rng, 5, 3, name="a"), _p(rng, 6, 2, name="b")
        seg = np.array([0, 0, 0, 1, 1])
        pr = probe(rng, (5, 2))
        return (lambda: pr(ad.block_matmul(a, b, seg, 3))), {"a": a, "b": b}

    def gather_case(rng):
        x = _p(rng, 4, 3, name="x")
        idx = rng.integers(4, size=7)
        pr = probe(rng, (7, 3))
        return (lambda: pr(ad.gather_rows(x, idx))), {"x": x}

    def scatter_case(rng):
        x = _p(rng, 7, 3, name="x")
        idx = rng.integers(4, size=7)
        pr = probe(rng, (4, 3))
        return (lambda: pr(ad.scatter_sum(x, idx, 4))), {"x": x}

    def scatter_vec_case(rng):
        x = _p(rng, 7, name="x")
        idx = rng.integers(4, size=7)
        pr = probe(rng, (4,))
        return (lambda: pr(ad.scatter_sum(x, idx, 4))), {"x": x}

    def segment_softmax_case(rng):
        s = _p(rng, 7, name="s")
        seg = np.array([0, 0, 0, 1, 1, 2, 2])
        mask = np.array([1, 1, 0, 1, 1, 1, 0], dtype=bool)
        pr = probe(rng, (7,))
        return (lambda: pr(ad.segment_softmax(s, seg, 3, mask))), {"s": s}

    def masked_softmax_case(rng):
        s = _p(rng, 5, name="s")
        mask = np.array([1, 0, 1, 1, 1], dtype=bool)
        pr = probe(rng, (5,))
        return (lambda: pr(ad.masked_softmax(s, mask))), {"s": s}

    def segment_kl_case(rng):
        s = _p(rng, 6, name="s")
        seg = np.array([0, 0, 0, 1, 1, 1])
        t = np.array([0.5, 0.5, 0.0, 0.0, 1.0, 0.0])
        pr = probe(rng, (2,))
        return (lambda: pr(ad.segment_kl(s, t, seg, 2))), {"s": s}

    def kl_case(rng):
        s = _p(rng, 4, name="s")
        t = np.array([0.0, 0.5, 0.5, 0.0])
        return (lambda: ad.kl_div(t, s)), {"s": s}

    return {
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "scale": elementwise(lambda a: ad.scale(a, -1.7)),
        "relu": elementwise(ad.relu, away_from_zero=True),
        "sigmoid": elementwise(ad.sigmoid),
        "tanh": elementwise(ad.tanh),
        "dropout": dropout_case,
        "matmul": matmul_case,
        "matvec": matvec_case,
        "affine": affine_case,
        "scale_rows": scale_rows_case,
        "mul_row": mul_row_case,
        "concat_rows": concat_case(0),
        "concat_cols": concat_case(1),
        "slice_cols": slice_case,
        "total": elementwise(lambda a: a * a),
        "mean": mean_case,
        "reshape": reshape_case,
        "block_matmul": block_matmul_case,
        "gather_rows": gather_case,
        "scatter_sum": scatter_case,
        "scatter_sum_vector": scatter_vec_case,
        "segment_softmax": segment_softmax_case,
        "masked_softmax": masked_softmax_case,
        "segment_kl": segment_kl_case,
        "kl_div": kl_case,
    }


OP_CASES = _op_cases()


def tiny_dataset(n_questions=60, templates=("one_hop",), m=30, seed=0, movies=30):
    """Small generated world with tokenized questions and attached subgraphs."""
    from rearev import synthetic as S
    from rearev.data import attach_subgraphs, attach_tokens
    from rearev.encoder import Vocab
    cfg = S.GenConfig(movies=movies, directors=15, actors=40, writers=20, years=15, genres=6, seed=seed)
    world = S.generate_kg(cfg)
    qs = S.to_instances(world.kg, S.generate_questions(world, n_questions, list(templates), seed=seed))
    attach_subgraphs(qs, world.kg, m, 0.5, 30)
    vocab = Vocab.build(q.text for q in qs)
    attach_tokens(qs, vocab)
    return world, qs, vocab
