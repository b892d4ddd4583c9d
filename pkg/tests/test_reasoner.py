import numpy as np
import pytest

from rearev import autodiff as ad
from rearev.encoder import InstructionSet, encode_question, init_instructions
from rearev.kg import Subgraph
from rearev.reasoner import (GraphBatch, ModeError, NoSeedError, ReasonerConfig, adapt_instructions, bfs_layer,
                             forward, init_node_reps, init_probability, init_reasoner_params, reason, run_stages,
                             sequential_layer)

import invariants
import oracle
from helpers import model_params, random_subgraph


def raw(params):
    return {k: v.values for k, v in params.items()}


def state_from(batch, params, H=None):
    from rearev.reasoner import ReasonerState
    return ReasonerState(init_node_reps(batch, params) if H is None else H, init_probability(batch))


def chain3():
    # seed 0 -r0-> 1 -r1-> 2
    return Subgraph([10, 11, 12], [[0, 0, 1], [1, 1, 2]], [0], 2)


class TestConfig:
    def test_sequential_needs_k_equals_l(self):
        ReasonerConfig(T=1, K=3, L=3, mode="sequential")
        with pytest.raises(ModeError):
            ReasonerConfig(T=1, K=2, L=3, mode="sequential")

    def test_bounds(self):
        with pytest.raises(ValueError):
            ReasonerConfig(T=0)
        with pytest.raises(ModeError):
            ReasonerConfig(mode="dfs")

    def test_param_shapes(self):
        d, R = 5, 7
        cfg = ReasonerConfig(T=2, K=3, L=2)
        P = init_reasoner_params(R, d, cfg, np.random.default_rng(0))
        assert P["layer.0.W_h"].shape == (d, 4 * d) and P["layer.1.W_R"].shape == (d, d)
        assert P["adapt.W_q"].shape == (d, 4 * d) and P["rel.embed"].shape == (R, d)
        seq = init_reasoner_params(R, d, ReasonerConfig(T=1, K=2, L=2, mode="sequential"), np.random.default_rng(0))
        assert seq["layer.0.W_h"].shape == (d, 2 * d)


class TestInit:
    def test_zero_relations_zero_states(self):
        cfg = ReasonerConfig()
        P = model_params(10, 2, 4, cfg)
        P["rel.embed"].values[:] = 0
        H = init_node_reps(GraphBatch.from_subgraphs([chain3()]), P)
        assert not H.values.any()

    def test_single_node_self_link(self):
        cfg = ReasonerConfig()
        P = model_params(10, 2, 4, cfg)
        sub = Subgraph([3], np.zeros((0, 3)), [0], 2)
        H = init_node_reps(GraphBatch.from_subgraphs([sub]), P)
        expected = np.maximum(P["node.W_0"].values @ P["rel.embed"].values[4], 0)
        np.testing.assert_allclose(H.values[0], expected, atol=1e-15)

    def test_chain_matches_per_node_loop(self):
        cfg = ReasonerConfig()
        P = model_params(10, 2, 4, cfg, seed=2)
        sub = chain3()
        H = init_node_reps(GraphBatch.from_subgraphs([sub]), P).values
        rel, W0 = P["rel.embed"].values, P["node.W_0"].values
        for v in range(3):
            incoming = {int(r) for r, o in zip(sub.rel, sub.dst) if o == v}
            np.testing.assert_allclose(H[v], np.maximum(sum(W0 @ rel[r] for r in incoming), 0), atol=1e-9)

    def test_probability_one_seed(self):
        sub = Subgraph(np.arange(5), np.zeros((0, 3)), [2], 1)
        assert init_probability(GraphBatch.from_subgraphs([sub])).values.tolist() == [0, 0, 1, 0, 0]

    def test_probability_two_seeds_unnormalized(self):
        sub = Subgraph(np.arange(4), np.zeros((0, 3)), [0, 3], 1)
        p = init_probability(GraphBatch.from_subgraphs([sub])).values
        assert p.tolist() == [1, 0, 0, 1]
        assert init_probability(GraphBatch.from_subgraphs([sub]), normalize=True).values.tolist() == [0.5, 0, 0, 0.5]

    def test_no_seed(self):
        sub = Subgraph(np.arange(3), np.zeros((0, 3)), [], 1)
        with pytest.raises(NoSeedError):
            init_probability(GraphBatch.from_subgraphs([sub]))


class TestLayers:
    def setup_method(self):
        self.cfg = ReasonerConfig(T=1, K=2, L=2)
        self.P = model_params(10, 2, 4, self.cfg, seed=1)

    def instr(self, toks=(2, 3, 4), K=2):
        return init_instructions(encode_question([list(toks)], self.P), self.P, K)

    def test_singleton_graph(self):
        sub = Subgraph([0], np.zeros((0, 3)), [0], 2)
        batch = GraphBatch.from_subgraphs([sub])
        out = bfs_layer(state_from(batch, self.P), self.instr(), batch, self.P, 0)
        assert out.p.values.tolist() == [1.0]

    def test_zero_relations_annihilate_messages(self):
        self.P["rel.embed"].values[:] = 0
        batch = GraphBatch.from_subgraphs([chain3()])
        H0 = ad.constant(np.random.default_rng(0).normal(size=(3, 4)))
        out = bfs_layer(state_from(batch, self.P, H0), self.instr(), batch, self.P, 0)
        assert not out.messages.values.any()
        Wh = self.P["layer.0.W_h"].values
        expected = np.maximum(np.concatenate([H0.values, np.zeros((3, 8))], axis=1) @ Wh.T, 0)
        np.testing.assert_allclose(out.H.values, expected, atol=1e-14)

    def test_sequential_rejected_in_bfs_mode(self):
        batch = GraphBatch.from_subgraphs([chain3()])
        with pytest.raises(ModeError):
            sequential_layer(state_from(batch, self.P), self.instr(), batch, self.P, 0, mode="bfs")

    def test_k1_bfs_equals_sequential(self):
        cfg = ReasonerConfig(T=1, K=1, L=1, mode="sequential")
        P = model_params(10, 2, 4, cfg, seed=3)
        batch = GraphBatch.from_subgraphs([chain3()])
        ins = init_instructions(encode_question([[2, 3]], P), P, 1)
        a = bfs_layer(state_from(batch, P), ins, batch, P, 0)
        b = sequential_layer(state_from(batch, P), ins, batch, P, 0)
        assert a.p.values.tobytes() == b.p.values.tobytes()

    def test_zero_instruction_zero_messages(self):
        batch = GraphBatch.from_subgraphs([chain3()])
        zero = InstructionSet([ad.constant(np.zeros((1, 4)))] * 2, [], 0)
        out = bfs_layer(state_from(batch, self.P), zero, batch, self.P, 0)
        assert not out.messages.values.any()

    def test_seed_locality(self):
        rng = np.random.default_rng(5)
        sub = random_subgraph(rng, 8, 2, num_facts=9)
        batch = GraphBatch.from_subgraphs([sub])
        out = bfs_layer(state_from(batch, self.P, ad.constant(np.zeros((8, 4)))), self.instr(), batch, self.P, 0)
        seed = int(sub.seeds[0])
        reachable = {int(o) for s, o in zip(sub.src, sub.dst) if s == seed}
        for v in range(8):
            if v not in reachable:
                assert not out.messages.values[v].any()

    def test_dense_path_oracle(self):
        sub = chain3()
        P = self.P
        toks = [2, 5, 7]
        out = reason(sub, toks, P, self.cfg)
        ref, _ = oracle.reason(3, sub.facts.tolist(), [0], 2, toks, raw(P), 1, 2, 2)
        assert np.abs(out.p.values - ref).max() <= 1e-6


def order_sensitive_setup():
    """Hand-set weights where instruction k selects relation k exactly.

    Graph: s -r0-> a -r1-> x and s -r1-> b -r0-> y.  Following r0 then r1
    ends at x; the reverse order ends at y.
    """
    R = 2
    d = 2 * R + 1
    sub = Subgraph([0, 1, 2, 3, 4], [[0, 0, 1], [1, 1, 2], [0, 1, 3], [3, 0, 4]], [0], R)
    cfg = ReasonerConfig(T=1, K=2, L=2, mode="sequential")
    P = init_reasoner_params(d, d, cfg, np.random.default_rng(0))
    P["rel.embed"].values[:] = np.eye(d)
    for l in range(2):
        P[f"layer.{l}.W_R"].values[:] = np.eye(d)
        P[f"layer.{l}.W_h"].values[:] = np.concatenate([np.zeros((d, d)), np.eye(d)], axis=1)
    P["prob.w"].values[:] = 40.0
    P["node.W_0"].values[:] = 0.0
    picks = [ad.constant(10 * np.eye(d)[[0]]), ad.constant(10 * np.eye(d)[[1]])]
    return sub, cfg, P, picks


def test_instruction_order_changes_answer():
    sub, cfg, P, picks = order_sensitive_setup()
    batch = GraphBatch.from_subgraphs([sub])
    H0 = init_node_reps(batch, P)
    fwd = run_stages(batch, InstructionSet(picks, [], 0), H0, P, cfg)
    rev = run_stages(batch, InstructionSet(picks[::-1], [], 0), H0, P, cfg)
    assert int(np.argmax(fwd.p.values)) == 2
    assert int(np.argmax(rev.p.values)) == 4


class TestAdapt:
    def setup_method(self):
        self.cfg = ReasonerConfig(T=2, K=2, L=2)
        self.P = model_params(10, 2, 4, self.cfg, seed=7)
        self.batch = GraphBatch.from_subgraphs([random_subgraph(np.random.default_rng(1), 5, 2, num_seeds=2)])
        self.ins = init_instructions(encode_question([[2, 3, 4]], self.P), self.P, 2)
        self.H = ad.constant(np.random.default_rng(2).normal(size=(5, 4)))

    def test_closed_gate_keeps_instructions(self):
        self.P["adapt.gate.b_z"].values[:] = -1e6
        out = adapt_instructions(self.ins, self.H, self.batch, self.P)
        for a, b in zip(out.vectors, self.ins.vectors):
            np.testing.assert_array_equal(a.values, b.values)
        assert out.stage == 1

    def test_open_gate_takes_candidate(self):
        self.P["adapt.gate.b_z"].values[:] = 1e6
        out = adapt_instructions(self.ins, self.H, self.batch, self.P)
        he = self.H.values[self.batch.seeds].sum(axis=0)
        for a, i in zip(out.vectors, self.ins.vectors):
            iv = i.values[0]
            cand = self.P["adapt.W_q"].values @ np.concatenate([iv, he, iv - he, iv * he])
            np.testing.assert_allclose(a.values[0], cand, atol=1e-12)

    def test_random_matches_oracle_formula(self):
        out = adapt_instructions(self.ins, self.H, self.batch, self.P)
        he = self.H.values[self.batch.seeds].sum(axis=0)
        P = raw(self.P)
        for a, i in zip(out.vectors, self.ins.vectors):
            iv = i.values[0]
            cand = P["adapt.W_q"] @ np.concatenate([iv, he, iv - he, iv * he])
            g = 1 / (1 + np.exp(-(P["adapt.gate.W_z"] @ he + P["adapt.gate.U_z"] @ iv + P["adapt.gate.b_z"])))
            np.testing.assert_allclose(a.values[0], (1 - g) * iv + g * cand, atol=1e-9)


class TestReason:
    def test_t1_is_bare_layer_loop(self):
        cfg = ReasonerConfig(T=1, K=2, L=3)
        P = model_params(10, 2, 4, cfg, seed=4)
        sub = random_subgraph(np.random.default_rng(4), 6, 2)
        out = reason(sub, [2, 3], P, cfg)
        batch = GraphBatch.from_subgraphs([sub])
        ins = init_instructions(encode_question([[2, 3]], P), P, 2)
        state = state_from(batch, P)
        for l in range(3):
            state = bfs_layer(state, ins, batch, P, l)
        assert out.p.values.tobytes() == state.p.values.tobytes()
        assert len(out.trace) == 1

    def test_trace_has_one_record_per_stage(self):
        cfg = ReasonerConfig(T=3, K=2, L=2)
        P = model_params(10, 2, 4, cfg, seed=5)
        out = reason(random_subgraph(np.random.default_rng(5), 6, 2), [2, 3, 4], P, cfg)
        assert len(out.trace) == 3 and len(out.layer_probs) == 6
        assert all(len(s.attention) == 2 for s in out.trace)

    def test_batch_equals_individual_runs(self):
        cfg = ReasonerConfig(T=2, K=3, L=2)
        P = model_params(12, 3, 6, cfg, seed=6)
        rng = np.random.default_rng(6)
        subs = [random_subgraph(rng, n, 3, num_seeds=min(2, n)) for n in (3, 7, 5)]
        toks = [[2, 3], [4, 5, 6, 7], [8]]
        batch = GraphBatch.from_subgraphs(subs)
        out = forward(batch, toks, P, cfg)
        bounds = np.append(batch.offsets, batch.num_nodes)
        for b, (s, t) in enumerate(zip(subs, toks)):
            one = reason(s, t, P, cfg).p.values
            np.testing.assert_allclose(out.p.values[bounds[b]:bounds[b + 1]], one, atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_oracle_random_graphs(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(2, 9))
        cfg = ReasonerConfig(T=2, K=3, L=2)
        P = model_params(12, 3, 6, cfg, seed=seed)
        sub = random_subgraph(rng, n, 3, num_seeds=int(rng.integers(1, min(n, 3) + 1)))
        toks = [int(t) for t in rng.integers(2, 12, size=4)]
        out = reason(sub, toks, P, cfg)
        ref, ref_layers = oracle.reason(n, sub.facts.tolist(), sub.seeds.tolist(), 3, toks, raw(P), 2, 3, 2)
        assert np.abs(out.p.values - ref).max() <= 1e-6
        for a, b in zip(out.layer_probs, ref_layers):
            assert np.abs(a - b).max() <= 1e-6

    def test_dropout_only_with_rng(self):
        cfg = ReasonerConfig(T=2, K=2, L=2, dropout=0.3)
        P = model_params(10, 2, 4, cfg, seed=8)
        sub = random_subgraph(np.random.default_rng(8), 6, 2)
        a = reason(sub, [2, 3], P, cfg).p.values
        b = reason(sub, [2, 3], P, cfg).p.values
        c = reason(sub, [2, 3], P, cfg, rng=np.random.default_rng(1)).p.values
        assert a.tobytes() == b.tobytes()
        assert np.abs(a - c).max() > 0


class TestInvariants:
    @pytest.mark.parametrize("seed", range(5))
    def test_distribution_after_every_layer(self, seed):
        assert invariants.distribution_violation(seed) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_instruction_permutation(self, seed):
        assert invariants.permutation_gap(seed) <= 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_isomorphism_equivariance(self, seed):
        assert invariants.isomorphism_exact(seed)

    @pytest.mark.parametrize("seed", range(3))
    def test_replay(self, seed):
        assert invariants.replay_identical(seed)


def tarantino_world():
    """Small random movie world plus the director/year fragment from the motivating example."""
    from rearev.kg import KnowledgeGraph
    from rearev import synthetic as S
    cfg = S.GenConfig(movies=60, directors=25, actors=80, writers=40, years=20, first_year=1980, seed=3)
    world = S.generate_kg(cfg)
    extra = [("kill bill", S.DIRECTED, "q. tarantino"), ("pulp fiction", S.DIRECTED, "q. tarantino"),
             ("kill bill", S.YEAR, "2003"), ("pulp fiction", S.YEAR, "1994"),
             ("q. tarantino", "birth_year", "1963"),
             ("kill bill", S.STARRED, "u. thurman"), ("pulp fiction", S.STARRED, "u. thurman")]
    kg = KnowledgeGraph.from_triples(world.kg.triples() + extra)
    return S, cfg, world, kg


@pytest.mark.slow
def test_tarantino_replica_top2():
    from rearev import training as TR
    from rearev.data import attach_subgraphs, attach_tokens
    from rearev.encoder import Vocab
    S, cfg, world, kg = tarantino_world()
    full = S.MovieWorld(kg, world.movies, world.directors, world.actors, world.writers, world.years,
                        world.genres, cfg)
    qs = S.generate_questions(full, 100, ["director_movie_years", "year_movie_directors", "director_movies",
                                          "movie_year"], seed=1)
    train = S.to_instances(kg, qs)
    only = S.MovieWorld(kg, ["kill bill"], ["q. tarantino"], [], [], [], [], cfg)
    probe = S.instantiate_question(only, "director_movie_years", np.random.default_rng(0))
    assert probe.answers == ["1994", "2003"]
    target = S.to_instances(kg, [probe], prefix="t")[0]
    attach_subgraphs(train + [target], kg, 40, 0.5, 30)
    vocab = Vocab.build(q.text for q in train)
    attach_tokens(train + [target], vocab)
    config = TR.TrainConfig(dim=16, T=2, K=2, L=2, lr=5e-3, batch_size=8, epochs=15, dropout=0.0, allow_any=True)
    result = TR.train(train, train[:30], config, vocab_size=len(vocab), num_relations=kg.num_relations)
    P = TR.params_from_arrays(result.checkpoint.params)
    p = reason(target.subgraph, target.token_ids, P, config.reasoner()).p.values
    top2 = {kg.entities[target.subgraph.entities[i]] for i in np.argsort(-p)[:2]}
    assert top2 == {"2003", "1994"}
