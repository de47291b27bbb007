"""Ordered partition of a dataset into local experts with predecessor structure.

The construction pipeline is: KD-tree partition into ``J`` cells, random
subset of each cell as local inducing inputs, greedy nearest-center ordering
of the cells, then distance-ranked predecessor sets of degree ``C`` and the
derived correlation sets.  Everything downstream (prior precision, projection,
prediction regions) is indexed against this graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ExpertGraph",
    "kd_partition",
    "order_partitions",
    "select_inducing",
    "build_predecessors",
    "correlation_sets",
]


def kd_partition(X: np.ndarray, J: int) -> np.ndarray:
    """Assign each row of ``X`` to one of ``J`` KD-tree cells.

    Recursive median splits on the dimension of widest spread; ``J`` must be a
    power of two and cell sizes differ by at most one.  Returns an integer
    array of cell ids in [0, J).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    N = X.shape[0]
    if J < 1 or (J & (J - 1)) != 0:
        raise ValueError(f"J must be a power of two, got {J}")
    if N < J:
        raise ValueError(f"need at least J={J} rows, got {N}")
    assignment = np.empty(N, dtype=int)
    next_cell = 0

    def split(rows: np.ndarray, cells: int):
        nonlocal next_cell
        if cells == 1:
            assignment[rows] = next_cell
            next_cell += 1
            return
        spread = X[rows].max(axis=0) - X[rows].min(axis=0)
        dim = int(np.argmax(spread))
        order = rows[np.argsort(X[rows, dim], kind="stable")]
        cut = (len(rows) + 1) // 2
        split(order[:cut], cells // 2)
        split(order[cut:], cells // 2)

    split(np.arange(N), J)
    return assignment


def order_partitions(centers: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Greedy nearest-center ordering of the cells, from a random start.

    Appends the unvisited cell whose center is closest (Euclidean) to the most
    recently added cell's center; ties break toward the lowest cell index.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    J = centers.shape[0]
    if J == 1:
        return np.array([0])
    start = int(rng.integers(J))
    ordering = [start]
    remaining = sorted(set(range(J)) - {start})
    while remaining:
        last = centers[ordering[-1]]
        dists = [float(np.linalg.norm(centers[c] - last)) for c in remaining]
        nxt = remaining[int(np.argmin(dists))]  # argmin takes the first minimum: lowest index
        ordering.append(nxt)
        remaining.remove(nxt)
    return np.asarray(ordering, dtype=int)


def select_inducing(X_j: np.ndarray, gamma: float, rng: np.random.Generator):
    """Uniform random subset of ``floor(gamma * B)`` rows as inducing inputs.

    ``gamma == 1`` returns the cell itself in original row order.  Returns
    ``(A_j, indices)`` with indices sorted ascending.
    """
    X_j = np.asarray(X_j, dtype=float)
    B = X_j.shape[0]
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    L = int(np.floor(gamma * B))
    if L == 0:
        raise ValueError(f"gamma={gamma} selects zero inducing points for cell size {B}")
    if L == B:
        idx = np.arange(B)
    else:
        idx = np.sort(rng.choice(B, size=L, replace=False))
    return X_j[idx], idx


def build_predecessors(centers: np.ndarray, ordering: np.ndarray, C: int) -> list[np.ndarray]:
    """Distance-ranked predecessor sets over the ordered experts.

    Expert at ordering position ``j`` gets the ``min(j, C-1)`` previous
    positions whose centers are closest to its own; ties break toward the
    lowest position.  Returned sets are sorted ascending (positions, 0-based).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    ordering = np.asarray(ordering, dtype=int)
    J = ordering.size
    if not 1 <= C <= J:
        raise ValueError(f"C must be in [1, {J}], got {C}")
    ordered_centers = centers[ordering]
    out: list[np.ndarray] = []
    for j in range(J):
        take = min(j, C - 1)
        if take == 0:
            out.append(np.empty(0, dtype=int))
            continue
        d = np.linalg.norm(ordered_centers[:j] - ordered_centers[j], axis=1)
        ranked = np.argsort(d, kind="stable")[:take]  # stable sort: ties to lowest position
        out.append(np.sort(ranked))
    return out


def correlation_sets(predecessors: list[np.ndarray], C: int) -> list[np.ndarray]:
    """Size-``C`` correlation regions derived from the predecessor sets.

    Position ``j`` (0-based) gets ``pred(j) + {j..C-1}`` while ``j < C-1``
    (which collapses to ``{0..C-1}``) and ``pred(j) + {j}`` afterwards.
    """
    J = len(predecessors)
    out: list[np.ndarray] = []
    for j in range(J):
        if j < C - 1:
            members = set(predecessors[j].tolist()) | set(range(j, C))
        else:
            members = set(predecessors[j].tolist()) | {j}
        psi = np.array(sorted(members), dtype=int)
        if psi.size != C:
            raise AssertionError(f"correlation set of expert {j} has size {psi.size}, wanted {C}")
        out.append(psi)
    return out


@dataclass(frozen=True)
class ExpertGraph:
    """Immutable expert layout shared by the model, baselines and prediction.

    Experts are indexed by their position in the greedy ordering; all index
    sets (``predecessors``, ``correlation``) refer to these positions.
    """

    X: np.ndarray
    J: int
    C: int
    gamma: float
    seed: int
    ordering: np.ndarray                 # position -> original KD cell id
    assignment: np.ndarray               # data row -> expert position
    row_indices: list[np.ndarray]        # per expert: rows of X belonging to it
    inducing_index: list[np.ndarray]     # per expert: rows (within the cell) chosen as inducing
    inducing_inputs: list[np.ndarray]    # per expert: A_j, shape (L, D)
    centers: np.ndarray                  # per expert: mean of its inducing inputs
    predecessors: list[np.ndarray] = field(repr=False, default=None)
    correlation: list[np.ndarray] = field(repr=False, default=None)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def L(self) -> int:
        return self.inducing_inputs[0].shape[0]

    @property
    def M(self) -> int:
        return self.J * self.L

    @property
    def B(self) -> int:
        """Smallest cell size (cells differ by at most one row)."""
        return min(r.size for r in self.row_indices)

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.array([r.size for r in self.row_indices])

    def expert_rows(self, j: int) -> np.ndarray:
        return self.row_indices[j]

    def pred_plus(self, j: int) -> np.ndarray:
        """Predecessors of expert ``j`` together with ``j`` itself, sorted."""
        return np.sort(np.append(self.predecessors[j], j))

    @classmethod
    def build(cls, X: np.ndarray, J: int, C: int, gamma: float = 1.0,
              seed: int = 0) -> "ExpertGraph":
        """Run the full pipeline: partition, inducing subsets, ordering, sets."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if C > J:
            import warnings

            warnings.warn(f"C={C} exceeds J={J}; clamping to J", stacklevel=2)
            C = J
        rng = np.random.default_rng(seed)
        cell_of_row = kd_partition(X, J)
        cells = [np.flatnonzero(cell_of_row == c) for c in range(J)]
        L = int(np.floor(gamma * min(len(c) for c in cells)))
        if L == 0:
            raise ValueError(f"gamma={gamma} gives zero inducing points per expert")

        cell_inducing_idx, cell_inducing = [], []
        for c in range(J):
            A_c, idx = select_inducing(X[cells[c]], gamma, rng)
            # equal inducing counts across experts: truncate cells one larger
            A_c, idx = A_c[:L], idx[:L]
            cell_inducing.append(A_c)
            cell_inducing_idx.append(idx)
        cell_centers = np.stack([A.mean(axis=0) for A in cell_inducing])

        ordering = order_partitions(cell_centers, rng)
        row_indices = [cells[c] for c in ordering]
        inducing_index = [cell_inducing_idx[c] for c in ordering]
        inducing_inputs = [cell_inducing[c] for c in ordering]
        centers = cell_centers[ordering]
        assignment = np.empty(X.shape[0], dtype=int)
        for j, rows in enumerate(row_indices):
            assignment[rows] = j

        preds = build_predecessors(cell_centers, ordering, C)
        corr = correlation_sets(preds, C)
        return cls(X=X, J=J, C=C, gamma=gamma, seed=seed, ordering=ordering,
                   assignment=assignment, row_indices=row_indices,
                   inducing_index=inducing_index, inducing_inputs=inducing_inputs,
                   centers=centers, predecessors=preds, correlation=corr)

    def with_correlation(self, C: int) -> "ExpertGraph":
        """Same partition, inducing points and ordering, different degree ``C``.

        Because the distance ranking is shared, predecessor sets are nested
        across increasing ``C``.
        """
        if C > self.J:
            raise ValueError(f"C={C} exceeds J={self.J}")
        ordered_ids = np.arange(self.J)
        preds = build_predecessors(self.centers, ordered_ids, C)
        corr = correlation_sets(preds, C)
        return replace(self, C=C, predecessors=preds, correlation=corr)

    def describe(self) -> str:
        """Plain-text summary for debugging."""
        lines = [
            f"ExpertGraph(J={self.J}, B={self.B}, L={self.L}, C={self.C}, "
            f"gamma={self.gamma}, seed={self.seed})",
            f"ordering: {self.ordering.tolist()}",
        ]
        for j in range(self.J):
            lines.append(
                f"  expert {j}: rows={self.row_indices[j].size} "
                f"pred={self.predecessors[j].tolist()} corr={self.correlation[j].tolist()}"
            )
        return "\n".join(lines)
