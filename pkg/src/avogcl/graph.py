"""Immutable sparse bipartite interaction graph and edge-edit application.

The graph is stored as compressed sorted adjacency in both directions
(user -> items and item -> users) so that propagation can run either way and
non-edge checks are a binary search. Degrees of zero are legal (a node whose
edges were all deleted simply stops receiving messages).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for out-of-range edges or invalid edit plans."""


def _csr_from_pairs(rows, cols, num_rows):
    """Sorted CSR arrays (ptr, idx) from parallel row/col index arrays."""
    order = np.lexsort((cols, rows))
    rows = rows[order]
    cols = cols[order]
    ptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.add.at(ptr, rows + 1, 1)
    np.cumsum(ptr, out=ptr)
    return ptr, cols.copy()


class InteractionGraph:
    """Bipartite user-item graph; treat as immutable after construction."""

    def __init__(self, num_users, num_items, user_ptr, user_idx, item_ptr, item_idx):
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.user_ptr = user_ptr
        self.user_idx = user_idx
        self.item_ptr = item_ptr
        self.item_idx = item_idx
        self.num_edges = int(user_idx.shape[0])
        # flat sorted (u * num_items + i) keys; backbone of all edge lookups
        users, items = self.edge_arrays()
        self._edge_keys = users * self.num_items + items
        self.digest = self._compute_digest()
        self._prop_ui = None
        self._prop_iu = None

    def _compute_digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype="<i8").tobytes())
        h.update(self.user_ptr.astype("<i8").tobytes())
        h.update(self.user_idx.astype("<i8").tobytes())
        return h.hexdigest()

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    @property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    def edge_arrays(self):
        """(users, items) int64 arrays in sorted (u, i) order."""
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), np.diff(self.user_ptr))
        return users, self.user_idx

    def items_of(self, u: int) -> np.ndarray:
        return self.user_idx[self.user_ptr[u]:self.user_ptr[u + 1]]

    def users_of(self, i: int) -> np.ndarray:
        return self.item_idx[self.item_ptr[i]:self.item_ptr[i + 1]]

    def has_edge(self, u: int, i: int) -> bool:
        row = self.items_of(u)
        pos = np.searchsorted(row, i)
        return pos < row.shape[0] and row[pos] == i

    def contains_pairs(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized edge-membership test for parallel index arrays."""
        keys = users.astype(np.int64) * self.num_items + items.astype(np.int64)
        if self._edge_keys.shape[0] == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self._edge_keys, keys)
        pos = np.minimum(pos, self._edge_keys.shape[0] - 1)
        return self._edge_keys[pos] == keys

    def propagation_matrices(self):
        """(P_ui, P_iu): symmetric-normalized propagation operators.

        P_ui[u, i] = 1 / sqrt(deg(u) * deg(i)) for each edge; P_iu = P_ui^T.
        Rows/columns of zero-degree nodes are empty, so their incoming
        message is the zero vector.
        """
        if self._prop_ui is None:
            users, items = self.edge_arrays()
            du = self.user_degrees[users].astype(np.float64)
            di = self.item_degrees[items].astype(np.float64)
            data = 1.0 / np.sqrt(du * di)
            p = sp.csr_matrix(
                (data, (users, items)), shape=(self.num_users, self.num_items), dtype=np.float64
            )
            self._prop_ui = p
            self._prop_iu = p.T.tocsr()
        return self._prop_ui, self._prop_iu


@dataclass(frozen=True)
class EditPlan:
    """Deletions of existing edges plus insertions of current non-edges."""

    deletions: np.ndarray  # (k, 2) int64 (u, i) rows; may be empty
    insertions: np.ndarray

    @staticmethod
    def from_lists(deletions, insertions) -> "EditPlan":
        return EditPlan(
            deletions=np.asarray(deletions, dtype=np.int64).reshape(-1, 2),
            insertions=np.asarray(insertions, dtype=np.int64).reshape(-1, 2),
        )

    def inverse(self) -> "EditPlan":
        return EditPlan(deletions=self.insertions, insertions=self.deletions)


@dataclass(frozen=True)
class PerturbedGraph:
    """An edited graph plus provenance back to the epoch's source graph."""

    graph: InteractionGraph
    source_digest: str
    epoch: int
    plan: EditPlan = field(default_factory=lambda: EditPlan.from_lists([], []))


def build_graph(edges, num_users: int, num_items: int) -> InteractionGraph:
    """Construct a graph from (user, item) pairs; duplicates are collapsed.

    Raises GraphError naming the first offending pair when an index is out
    of range.
    """
    pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0]:
        users, items = pairs[:, 0], pairs[:, 1]
        bad = (users < 0) | (users >= num_users) | (items < 0) | (items >= num_items)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise GraphError(
                f"edge ({users[k]}, {items[k]}) out of range for "
                f"{num_users} users x {num_items} items"
            )
        keys = np.unique(users * num_items + items)
        users = keys // num_items
        items = keys % num_items
    else:
        users = np.empty(0, dtype=np.int64)
        items = np.empty(0, dtype=np.int64)
    user_ptr, user_idx = _csr_from_pairs(users, items, num_users)
    item_ptr, item_idx = _csr_from_pairs(items, users, num_items)
    return InteractionGraph(num_users, num_items, user_ptr, user_idx, item_ptr, item_idx)


def normalized_coefficient(graph: InteractionGraph, u: int, i: int) -> float:
    """Per-edge propagation weight 1 / sqrt(deg(u) * deg(i))."""
    if not (0 <= u < graph.num_users and 0 <= i < graph.num_items):
        raise GraphError(f"({u}, {i}) out of range")
    if not graph.has_edge(u, i):
        raise GraphError(f"({u}, {i}) is not an edge")
    return 1.0 / float(np.sqrt(graph.user_degrees[u] * graph.item_degrees[i]))


def _validate_plan(graph: InteractionGraph, plan: EditPlan) -> None:
    for name, arr in (("deletion", plan.deletions), ("insertion", plan.insertions)):
        if arr.shape[0] == 0:
            continue
        u, i = arr[:, 0], arr[:, 1]
        bad = (u < 0) | (u >= graph.num_users) | (i < 0) | (i >= graph.num_items)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise GraphError(f"{name} ({u[k]}, {i[k]}) out of range")
        keys = u * graph.num_items + i
        if np.unique(keys).shape[0] != keys.shape[0]:
            raise GraphError(f"duplicate {name} entries in plan")
        member = graph.contains_pairs(u, i)
        if name == "deletion" and not member.all():
            k = int(np.flatnonzero(~member)[0])
            raise GraphError(f"deletion of non-edge ({u[k]}, {i[k]})")
        if name == "insertion" and member.any():
            k = int(np.flatnonzero(member)[0])
            raise GraphError(f"insertion of existing edge ({u[k]}, {i[k]})")


def apply_edits(graph: InteractionGraph, plan: EditPlan, epoch: int = 0) -> PerturbedGraph:
    """Apply an edit plan to `graph`, recomputing degrees and coefficients.

    Always derives from the given graph; chaining perturbed graphs is the
    caller's responsibility to avoid (provenance carries the source digest).
    """
    _validate_plan(graph, plan)
    keys = graph._edge_keys
    if plan.deletions.shape[0]:
        del_keys = plan.deletions[:, 0] * graph.num_items + plan.deletions[:, 1]
        keys = np.setdiff1d(keys, del_keys, assume_unique=True)
    if plan.insertions.shape[0]:
        ins_keys = plan.insertions[:, 0] * graph.num_items + plan.insertions[:, 1]
        keys = np.union1d(keys, ins_keys)
    users = keys // graph.num_items
    items = keys % graph.num_items
    user_ptr, user_idx = _csr_from_pairs(users, items, graph.num_users)
    item_ptr, item_idx = _csr_from_pairs(items, users, graph.num_items)
    edited = InteractionGraph(
        graph.num_users, graph.num_items, user_ptr, user_idx, item_ptr, item_idx
    )
    return PerturbedGraph(graph=edited, source_digest=graph.digest, epoch=epoch, plan=plan)
