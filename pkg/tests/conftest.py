import numpy as np
import pytest

from avogcl.data import split
from avogcl.graph import build_graph
from avogcl.rng import named_stream
from avogcl.synthetic import SyntheticConfig, generate_interactions


def make_random_graph(seed, num_users=12, num_items=15, avg_degree=4):
    """Random bipartite graph where every user has at least one edge."""
    rng = named_stream(seed, "fixture_graph")
    edges = []
    for u in range(num_users):
        deg = 1 + rng.integers(0, 2 * avg_degree)
        items = rng.choice(num_items, size=min(int(deg), num_items), replace=False)
        edges.extend((u, int(i)) for i in items)
    return build_graph(edges, num_users=num_users, num_items=num_items)


@pytest.fixture
def small_graph():
    # 4 users x 3 items, hand-checkable degrees
    edges = [(0, 0), (0, 1), (1, 1), (2, 0), (2, 2), (3, 2)]
    return build_graph(edges, num_users=4, num_items=3)


@pytest.fixture(scope="session")
def toy_split():
    cfg = SyntheticConfig(num_users=120, num_items=200, target_interactions=3000,
                          num_clusters=4)
    records = generate_interactions(cfg, seed=7)
    return split(records, (8, 1, 1), seed=7)
