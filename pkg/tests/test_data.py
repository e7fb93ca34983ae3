import numpy as np
import pytest

from avogcl.data import (RawInteraction, ingest, kcore_filter, load_split,
                         sample_bpr_batch, split, write_split)
from avogcl.graph import build_graph
from avogcl.rng import named_stream


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestIngest:
    def test_three_well_formed_lines(self, tmp_path):
        path = _write(tmp_path, "a.tsv", "u1\ti1\nu1\ti2\nu2\ti1\n")
        records, skipped = ingest(path)
        assert len(records) == 3 and skipped == 0
        assert records[0] == RawInteraction("u1", "i1")

    def test_rating_retained_at_ingest(self, tmp_path):
        path = _write(tmp_path, "a.tsv", "u1\ti1\t2.0\n")
        records, _ = ingest(path)
        assert records[0].rating == pytest.approx(2.0)

    def test_timestamp_field(self, tmp_path):
        path = _write(tmp_path, "a.tsv", "u1\ti1\t4.5\t1699999999\n")
        records, _ = ingest(path)
        assert records[0].timestamp == 1699999999

    def test_one_malformed_among_hundred(self, tmp_path):
        lines = [f"u{k}\ti{k}" for k in range(99)]
        lines.insert(40, "only_one_field")
        path = _write(tmp_path, "a.tsv", "\n".join(lines) + "\n")
        records, skipped = ingest(path)
        assert len(records) == 99 and skipped == 1

    def test_strict_mode_raises(self, tmp_path):
        path = _write(tmp_path, "a.tsv", "u1\ti1\nbroken_line\n")
        with pytest.raises(ValueError):
            ingest(path, strict=True)

    def test_unreadable_file_fatal(self, tmp_path):
        with pytest.raises(OSError):
            ingest(tmp_path / "missing.tsv")

    def test_blank_lines_ignored(self, tmp_path):
        path = _write(tmp_path, "a.tsv", "u1\ti1\n\nu2\ti2\n")
        records, skipped = ingest(path)
        assert len(records) == 2 and skipped == 0


class TestKcore:
    def test_min_one_is_identity(self):
        recs = [RawInteraction("a", "x"), RawInteraction("b", "y")]
        assert kcore_filter(recs, 1) == recs

    def test_chain_cascades_to_empty(self):
        # u1-i1, u1-i2, u2-i2 at min 2: u2 goes first, then i2, then u1, then i1
        recs = [RawInteraction("u1", "i1"), RawInteraction("u1", "i2"),
                RawInteraction("u2", "i2")]
        assert kcore_filter(recs, 2) == []

    def test_rating_threshold_applied_first(self):
        recs = [RawInteraction("u1", "i1", rating=1.0),
                RawInteraction("u1", "i2", rating=3.0),
                RawInteraction("u2", "i2", rating=5.0)]
        kept = kcore_filter(recs, 1, rating_threshold=3.0)
        assert [r.item_key for r in kept] == ["i2", "i2"]

    def test_missing_ratings_kept_under_threshold(self):
        recs = [RawInteraction("u1", "i1"), RawInteraction("u1", "i2", rating=1.0)]
        kept = kcore_filter(recs, 1, rating_threshold=3.0)
        assert [r.item_key for r in kept] == ["i1"]

    def test_output_is_fixpoint(self):
        rng = named_stream(17, "fixture_kcore")
        recs = list({(int(rng.integers(0, 30)), int(rng.integers(0, 40)))
                     for _ in range(300)})
        recs = [RawInteraction(f"u{u}", f"i{i}") for u, i in recs]
        once = kcore_filter(recs, 3)
        assert kcore_filter(once, 3) == once


class TestSplit:
    def _records(self, n, seed=0):
        rng = named_stream(seed, "fixture_split")
        pairs = set()
        while len(pairs) < n:
            pairs.add((int(rng.integers(0, 60)), int(rng.integers(0, 80))))
        return [RawInteraction(f"u{u:03d}", f"i{i:03d}") for u, i in sorted(pairs)]

    def test_partition(self):
        ds = split(self._records(100), (8, 1, 1), seed=3)
        assert len(ds.train) + len(ds.val) + len(ds.test) == 100

    def test_deterministic(self):
        recs = self._records(150)
        a = split(recs, (8, 1, 1), seed=9)
        b = split(recs, (8, 1, 1), seed=9)
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.test, b.test)

    def test_ratio_concentration(self):
        rng = named_stream(1, "fixture_split")
        pairs = set()
        while len(pairs) < 10_000:
            pairs.add((int(rng.integers(0, 400)), int(rng.integers(0, 500))))
        recs = [RawInteraction(f"u{u}", f"i{i}") for u, i in sorted(pairs)]
        ds = split(recs, (8, 1, 1), seed=4)
        assert 7800 <= len(ds.train) <= 8200

    def test_disjoint_pieces(self):
        ds = split(self._records(200), (8, 1, 1), seed=5)
        seen = {(int(u), int(i)) for u, i in ds.train}
        for part in (ds.val, ds.test):
            for u, i in part:
                assert (int(u), int(i)) not in seen
                seen.add((int(u), int(i)))

    def test_write_load_round_trip(self, tmp_path):
        ds = split(self._records(120), (8, 1, 1), seed=6)
        write_split(ds, tmp_path)
        back = load_split(tmp_path)
        np.testing.assert_array_equal(back.train, ds.train)
        np.testing.assert_array_equal(back.val, ds.val)
        np.testing.assert_array_equal(back.test, ds.test)
        assert back.user_map == ds.user_map
        assert back.item_map == ds.item_map

    def test_stats_shape(self):
        ds = split(self._records(100), (8, 1, 1), seed=3)
        stats = ds.stats()
        assert stats["num_train"] == len(ds.train)
        assert 0.0 < stats["sparsity"] < 1.0


class TestBprSampling:
    def test_membership_invariants(self, toy_split):
        g = toy_split.train_graph()
        batch = sample_bpr_batch(g, 512, named_stream(0, "sampling"))
        assert batch.size == 512
        assert g.contains_pairs(batch.users, batch.pos_items).all()
        assert not g.contains_pairs(batch.users, batch.neg_items).any()

    def test_forced_negative(self):
        g = build_graph([(0, 0)], num_users=1, num_items=2)
        batch = sample_bpr_batch(g, 16, named_stream(2, "sampling"))
        assert (batch.neg_items == 1).all()

    def test_full_clique_errors(self):
        edges = [(u, i) for u in range(3) for i in range(3)]
        g = build_graph(edges, 3, 3)
        with pytest.raises(RuntimeError):
            sample_bpr_batch(g, 8, named_stream(3, "sampling"))
