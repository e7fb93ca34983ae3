import numpy as np
import pytest

from avogcl.encoder import (EmbeddingTable, ForwardTrace, LayerPerturbations,
                            forward, init_embeddings, rank_items, score)
from avogcl.graph import build_graph
from avogcl.rng import named_stream

from conftest import make_random_graph


class TestInit:
    def test_std_matches_dimension(self):
        # sqrt(2 / (64 + 64)) = 0.125; (8000 + 7625) * 64 = 1e6 draws
        table = init_embeddings(8000, 7625, 64, named_stream(0, "init"))
        pooled = np.concatenate([table.user_emb.ravel(), table.item_emb.ravel()])
        assert abs(pooled.std() - 0.125) < 0.125 * 0.02
        assert abs(pooled.mean()) < 0.001

    def test_same_seed_identical(self):
        a = init_embeddings(50, 60, 16, named_stream(3, "init"))
        b = init_embeddings(50, 60, 16, named_stream(3, "init"))
        np.testing.assert_array_equal(a.user_emb, b.user_emb)
        np.testing.assert_array_equal(a.item_emb, b.item_emb)

    def test_d_one_finite(self):
        table = init_embeddings(10, 10, 1, named_stream(4, "init"))
        assert np.isfinite(table.user_emb).all()
        assert table.d == 1

    def test_d_zero_rejected(self):
        with pytest.raises(ValueError):
            init_embeddings(10, 10, 0, named_stream(5, "init"))


def _table(user_rows, item_rows):
    return EmbeddingTable(
        user_emb=np.asarray(user_rows, dtype=np.float32),
        item_emb=np.asarray(item_rows, dtype=np.float32),
    )


def _dense_oracle(graph, table, num_layers, perturbations=None):
    """Propagate with an explicit dense adjacency as an independent check."""
    nu, ni = graph.num_users, graph.num_items
    a_hat = np.zeros((nu + ni, nu + ni))
    users, items = graph.edge_arrays()
    du = graph.user_degrees
    di = graph.item_degrees
    for u, i in zip(users, items):
        c = 1.0 / np.sqrt(du[u] * di[i])
        a_hat[u, nu + i] = c
        a_hat[nu + i, u] = c
    cur = np.vstack([table.user_emb.astype(np.float64),
                     table.item_emb.astype(np.float64)])
    acc = [cur]
    for layer in range(num_layers):
        nxt = a_hat @ cur
        if perturbations is not None and perturbations.omega != 0.0:
            q_u, q_i = perturbations.layer_perturbation(layer, cur[:nu], cur[nu:])
            nxt = nxt + perturbations.omega * np.vstack([q_u, q_i])
        cur = nxt
        acc.append(cur)
    merged = sum(acc) / (num_layers + 1)
    return merged[:nu], merged[nu:]


class TestForward:
    def test_single_edge_hand_case(self):
        g = build_graph([(0, 0)], 1, 1)
        trace = forward(g, _table([[2.0, 3.0]], [[5.0, 7.0]]), 1)
        np.testing.assert_array_equal(trace.layers_user[1], [[5.0, 7.0]])
        np.testing.assert_array_equal(trace.layers_item[1], [[2.0, 3.0]])
        np.testing.assert_array_equal(trace.final_user, [[3.5, 5.0]])
        np.testing.assert_array_equal(trace.final_item, [[3.5, 5.0]])

    def test_matches_dense_oracle(self):
        g = make_random_graph(11, num_users=5, num_items=7)
        table = init_embeddings(5, 7, 6, named_stream(11, "init"))
        trace = forward(g, table, 3)
        ou, oi = _dense_oracle(g, table, 3)
        np.testing.assert_allclose(trace.final_user, ou, atol=1e-6)
        np.testing.assert_allclose(trace.final_item, oi, atol=1e-6)

    def test_perturbed_matches_dense_oracle(self):
        g = make_random_graph(12, num_users=5, num_items=7)
        table = init_embeddings(5, 7, 6, named_stream(12, "init"))
        rng = named_stream(12, "fixture_pert")
        pert = LayerPerturbations(
            q_user=[rng.normal(size=(5, 6)) for _ in range(3)],
            q_item=[rng.normal(size=(7, 6)) for _ in range(3)],
            omega=0.37,
        )
        trace = forward(g, table, 3, perturbations=pert)
        assert trace.perturbed
        ou, oi = _dense_oracle(g, table, 3, perturbations=pert)
        np.testing.assert_allclose(trace.final_user, ou, atol=1e-6)
        np.testing.assert_allclose(trace.final_item, oi, atol=1e-6)

    def test_omega_zero_bit_identical(self):
        g = make_random_graph(13, num_users=6, num_items=6)
        table = init_embeddings(6, 6, 4, named_stream(13, "init"))
        junk = LayerPerturbations(
            q_user=[np.full((6, 4), 1e9) for _ in range(2)],
            q_item=[np.full((6, 4), 1e9) for _ in range(2)],
            omega=0.0,
        )
        plain = forward(g, table, 2)
        gated = forward(g, table, 2, perturbations=junk)
        assert not gated.perturbed
        for a, b in zip(plain.layers_user, gated.layers_user):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(plain.final_item, gated.final_item)

    def test_linear_in_initial_embeddings(self):
        g = make_random_graph(14, num_users=6, num_items=8)
        x = init_embeddings(6, 8, 5, named_stream(14, "init"))
        y = init_embeddings(6, 8, 5, named_stream(15, "init"))
        z = EmbeddingTable(user_emb=2.0 * x.user_emb - y.user_emb,
                           item_emb=2.0 * x.item_emb - y.item_emb)
        combined = forward(g, z, 2)
        fx = forward(g, x, 2)
        fy = forward(g, y, 2)
        np.testing.assert_allclose(
            combined.final_user, 2.0 * fx.final_user - fy.final_user, atol=1e-5)

    def test_permutation_equivariance(self):
        g = make_random_graph(16, num_users=7, num_items=9)
        table = init_embeddings(7, 9, 4, named_stream(16, "init"))
        rng = named_stream(16, "fixture_perm")
        sigma = rng.permutation(7)
        pi = rng.permutation(9)
        users, items = g.edge_arrays()
        g2 = build_graph(list(zip(sigma[users], pi[items])), 7, 9)
        t2 = EmbeddingTable(user_emb=np.empty_like(table.user_emb),
                            item_emb=np.empty_like(table.item_emb))
        t2.user_emb[sigma] = table.user_emb
        t2.item_emb[pi] = table.item_emb
        a = forward(g, table, 2)
        b = forward(g2, t2, 2)
        np.testing.assert_allclose(b.final_user[sigma], a.final_user, atol=1e-9)
        np.testing.assert_allclose(b.final_item[pi], a.final_item, atol=1e-9)

    def test_final_is_layer_mean(self):
        g = make_random_graph(17, num_users=6, num_items=6)
        table = init_embeddings(6, 6, 4, named_stream(17, "init"))
        trace = forward(g, table, 3)
        np.testing.assert_allclose(
            trace.final_user, sum(trace.layers_user) / 4.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        g = make_random_graph(18, num_users=6, num_items=6)
        table = init_embeddings(5, 6, 4, named_stream(18, "init"))
        with pytest.raises(ValueError):
            forward(g, table, 2)


def _scoring_trace(user_rows, item_rows):
    g = build_graph([(0, 0)], 1, 1)
    u = np.asarray(user_rows, dtype=np.float64)
    i = np.asarray(item_rows, dtype=np.float64)
    return ForwardTrace(layers_user=[u], layers_item=[i], final_user=u,
                        final_item=i, perturbed=False, graph=g,
                        graph_digest=g.digest)


class TestScoring:
    def test_unit_vector_self_score(self):
        v = [[0.0, 1.0, 0.0]]
        assert score(_scoring_trace(v, v), 0, 0) == 1.0

    def test_orthogonal_score(self):
        t = _scoring_trace([[1.0, 0.0]], [[0.0, 1.0]])
        assert score(t, 0, 0) == 0.0

    def test_hand_inner_product(self):
        t = _scoring_trace([[1.0, 2.0]], [[3.0, 4.0]])
        assert score(t, 0, 0) == 11.0

    def test_rank_hand_case(self):
        t = _scoring_trace([[1.0]], [[0.1], [0.9], [0.5]])
        np.testing.assert_array_equal(rank_items(t, 0, top_n=2), [1, 2])

    def test_rank_exclusion_promotes(self):
        t = _scoring_trace([[1.0]], [[0.1], [0.9], [0.5]])
        np.testing.assert_array_equal(rank_items(t, 0, exclude=[1], top_n=2), [2, 0])

    def test_rank_matches_sort_oracle(self):
        rng = named_stream(19, "fixture_rank")
        scores = rng.normal(size=1000)
        t = _scoring_trace([[1.0]], scores[:, None])
        got = rank_items(t, 0, top_n=50)
        oracle = np.lexsort((np.arange(1000), -scores))[:50]
        np.testing.assert_array_equal(got, oracle)

    def test_rank_ties_by_index(self):
        t = _scoring_trace([[1.0]], [[0.5], [0.7], [0.5], [0.7]])
        np.testing.assert_array_equal(rank_items(t, 0, top_n=4), [1, 3, 0, 2])
