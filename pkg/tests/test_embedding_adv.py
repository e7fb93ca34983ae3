import logging

import numpy as np
import pytest

from avogcl.embedding_adv import (ProjectionPerturbator, adversarial_step,
                                  compute_layer_perturbation, init_perturbator,
                                  snapshot_targets)
from avogcl.encoder import forward, init_embeddings
from avogcl.rng import named_stream

from conftest import make_random_graph


def _pert(k_user, k_item, e_prev_user, e_prev_item, mode="prev_and_layer",
          omega=0.1, adv_lr=0.01):
    return ProjectionPerturbator(
        k_user=np.asarray(k_user, dtype=np.float32),
        k_item=np.asarray(k_item, dtype=np.float32),
        e_prev_user=np.asarray(e_prev_user, dtype=np.float32),
        e_prev_item=np.asarray(e_prev_item, dtype=np.float32),
        omega=omega, adv_lr=adv_lr, projection_mode=mode)


class TestProjection:
    def test_zero_projection_gives_zero(self):
        p = _pert(np.zeros((3, 3)), np.zeros((3, 3)),
                  np.ones((5, 3)), np.ones((6, 3)))
        q = compute_layer_perturbation(p, "user", np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_array_equal(q, np.zeros((5, 3)))

    def test_identity_projection_hand_case(self):
        e_prev = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[2.0, 0.0], [0.0, 3.0]])
        layer = np.array([[1.0, 1.0], [1.0, -1.0]])
        p = _pert(k, k, e_prev, e_prev)
        q = compute_layer_perturbation(p, "user", layer)
        # K' = E_prev K = diag(2,3); Q = K'(K'^T E_l)
        np.testing.assert_allclose(q, [[4.0, 4.0], [9.0, -9.0]], atol=1e-10)

    def test_matches_gram_matrix_oracle(self):
        rng = named_stream(81, "embedding_adv")
        e_prev = rng.normal(size=(7, 4))
        k = rng.normal(size=(4, 4))
        layer = rng.normal(size=(7, 4))
        p = _pert(k, k, e_prev, rng.normal(size=(9, 4)))
        q = compute_layer_perturbation(p, "user", layer)
        kp = p.e_prev_user.astype(np.float64) @ p.k_user.astype(np.float64)
        np.testing.assert_allclose(q, (kp @ kp.T) @ layer, atol=1e-8)

    def test_prev_only_ignores_layer_block(self):
        rng = named_stream(82, "embedding_adv")
        p = _pert(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)),
                  rng.normal(size=(5, 3)), rng.normal(size=(6, 3)),
                  mode="prev_only")
        a = compute_layer_perturbation(p, "user", rng.normal(size=(5, 3)))
        b = compute_layer_perturbation(p, "user", rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(a, b)
        kp = p.mapped_projection("user")
        tgt = p.e_prev_user.astype(np.float64)
        np.testing.assert_allclose(a, kp @ (kp.T @ tgt), atol=1e-10)

    def test_layer_only_ignores_snapshot(self):
        rng = named_stream(83, "embedding_adv")
        k = rng.normal(size=(3, 3))
        layer = rng.normal(size=(5, 3))
        p1 = _pert(k, k, rng.normal(size=(5, 3)), rng.normal(size=(6, 3)),
                   mode="layer_only")
        p2 = _pert(k, k, np.zeros((5, 3)), np.zeros((6, 3)), mode="layer_only")
        a = compute_layer_perturbation(p1, "user", layer)
        np.testing.assert_array_equal(a, compute_layer_perturbation(p2, "user", layer))
        f = layer @ k.astype(np.float32).astype(np.float64)
        np.testing.assert_allclose(a, f @ (f.T @ layer), atol=1e-8)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            _pert(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)),
                  np.zeros((3, 2)), mode="sideways")

    def test_negative_omega_rejected(self):
        with pytest.raises(ValueError):
            _pert(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)),
                  np.zeros((3, 2)), omega=-0.5)


class TestInit:
    def test_shapes_and_spread(self):
        p = init_perturbator(10, 12, 40, omega=0.2, adv_lr=0.05,
                             rng=named_stream(84, "embedding_adv"))
        assert p.k_user.shape == (40, 40) and p.k_item.shape == (40, 40)
        pooled = np.concatenate([p.k_user.ravel(), p.k_item.ravel()])
        assert abs(pooled.std() - 1.0 / 40) < 0.08 * (1.0 / 40)
        np.testing.assert_array_equal(p.e_prev_user, np.zeros((10, 40)))

    def test_snapshot_stores_final(self):
        g = make_random_graph(85, num_users=6, num_items=8)
        table = init_embeddings(6, 8, 4, named_stream(85, "init"))
        p = init_perturbator(6, 8, 4, 0.1, 0.01, named_stream(85, "embedding_adv"))
        trace = forward(g, table, 2)
        snapshot_targets(p, trace)
        np.testing.assert_array_equal(p.e_prev_user,
                                      trace.final_user.astype(np.float32))

    def test_second_snapshot_overwrites(self):
        g = make_random_graph(86, num_users=6, num_items=8)
        t1 = init_embeddings(6, 8, 4, named_stream(86, "init"))
        t2 = init_embeddings(6, 8, 4, named_stream(87, "init"))
        p = init_perturbator(6, 8, 4, 0.1, 0.01, named_stream(86, "embedding_adv"))
        snapshot_targets(p, forward(g, t1, 2))
        second = forward(g, t2, 2)
        snapshot_targets(p, second)
        np.testing.assert_array_equal(p.e_prev_user,
                                      second.final_user.astype(np.float32))

    def test_perturbed_snapshot_keeps_perturbed_values(self):
        g = make_random_graph(88, num_users=6, num_items=8)
        table = init_embeddings(6, 8, 4, named_stream(88, "init"))
        p = init_perturbator(6, 8, 4, 0.3, 0.01, named_stream(88, "embedding_adv"))
        p.e_prev_user = np.ones((6, 4), dtype=np.float32)
        p.e_prev_item = np.ones((8, 4), dtype=np.float32)
        perturbed = forward(g, table, 2, perturbations=p)
        clean = forward(g, table, 2)
        snapshot_targets(p, perturbed)
        assert not np.array_equal(p.e_prev_user, clean.final_user.astype(np.float32))
        np.testing.assert_array_equal(p.e_prev_user,
                                      perturbed.final_user.astype(np.float32))

    def test_shape_mismatch_rejected(self):
        g = make_random_graph(89, num_users=6, num_items=8)
        table = init_embeddings(6, 8, 4, named_stream(89, "init"))
        p = init_perturbator(7, 8, 4, 0.1, 0.01, named_stream(89, "embedding_adv"))
        with pytest.raises(ValueError):
            snapshot_targets(p, forward(g, table, 1))


class TestAscent:
    def test_zero_gradient_keeps_k(self):
        p = init_perturbator(5, 6, 4, 0.1, 0.05, named_stream(90, "embedding_adv"))
        before = p.k_user.copy()
        adversarial_step(p, np.zeros((4, 4)), np.zeros((4, 4)))
        np.testing.assert_array_equal(p.k_user, before)

    def test_clipping_caps_update_norm(self):
        p = init_perturbator(5, 6, 4, 0.1, 0.05, named_stream(91, "embedding_adv"))
        before_u = p.k_user.astype(np.float64)
        before_i = p.k_item.astype(np.float64)
        g = np.full((4, 4), 50.0 / np.sqrt(32.0))  # joint norm 50
        adversarial_step(p, g, g)
        delta = np.sqrt(((p.k_user.astype(np.float64) - before_u) ** 2).sum()
                        + ((p.k_item.astype(np.float64) - before_i) ** 2).sum())
        assert delta == pytest.approx(0.05 * 5.0, rel=1e-4)

    def test_small_gradient_applied_unclipped(self):
        p = init_perturbator(5, 6, 4, 0.1, 0.5, named_stream(92, "embedding_adv"))
        before = p.k_user.astype(np.float64)
        g = np.zeros((4, 4))
        g[0, 0] = 1.0
        adversarial_step(p, g, np.zeros((4, 4)))
        assert p.k_user[0, 0] == pytest.approx(before[0, 0] + 0.5, rel=1e-5)

    def test_ascent_direction_is_positive(self):
        p = init_perturbator(5, 6, 4, 0.1, 0.1, named_stream(93, "embedding_adv"))
        p.k_user = np.zeros((4, 4), dtype=np.float32)
        adversarial_step(p, np.eye(4), np.zeros((4, 4)))
        assert (np.diag(p.k_user) > 0).all()

    def test_nonfinite_gradient_skipped_with_warning(self, caplog):
        p = init_perturbator(5, 6, 4, 0.1, 0.05, named_stream(94, "embedding_adv"))
        before = p.k_user.copy()
        bad = np.full((4, 4), np.nan)
        with caplog.at_level(logging.WARNING, logger="avogcl.embedding_adv"):
            adversarial_step(p, bad, np.ones((4, 4)))
        assert any("skipped" in rec.message for rec in caplog.records)
        np.testing.assert_array_equal(p.k_user, before)

    def test_snapshot_untouched_by_ascent(self):
        p = init_perturbator(5, 6, 4, 0.1, 0.05, named_stream(95, "embedding_adv"))
        p.e_prev_user = np.full((5, 4), 2.0, dtype=np.float32)
        frozen = p.e_prev_user.copy()
        adversarial_step(p, np.ones((4, 4)), np.ones((4, 4)))
        np.testing.assert_array_equal(p.e_prev_user, frozen)
