"""Season topologies and the difference penalties defined on them.

A seasonal component is a surface ``S[k, t]`` over season nodes ``k`` and
time ``t``.  The season axis is a directed graph: a plain cycle gives the
usual cylinder, while branching graphs (for instance working-day and
holiday cycles joined by transition paths) describe calendars where the
next season is not unique.

Surfaces are stored in *reduced coordinates*: the row of the last node is
dropped and recovered as minus the sum of the other rows, which enforces
a zero season-sum at every time.  Reduced vectors are ``vec`` of the
``(m - 1) x n`` matrix, so coordinate ``(k, t)`` lives at ``t * (m - 1) + k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .sparsemat import from_triplets

__all__ = [
    "SeasonTopology",
    "PenaltySet",
    "make_cycle",
    "make_two_cylinder",
    "make_graph",
    "cycle_season_map",
    "validate_season_map",
    "embedding_matrix",
    "difference_embedding",
    "difference_basis",
    "embed",
    "reduce",
    "build_penalties",
    "build_trend_penalty",
]


@dataclass(frozen=True)
class SeasonTopology:
    """Directed graph of season nodes ``0 .. m-1``.

    ``successors[k]`` lists the nodes that may follow node ``k``.  The node
    with the largest id is the one eliminated by the sum-to-zero reduction.
    """

    successors: tuple[tuple[int, ...], ...]
    kind: str = "graph"
    labels: tuple[str, ...] | None = None
    predecessors: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        m = len(self.successors)
        if m < 2:
            raise ValueError(f"a season topology needs at least 2 nodes, got {m}")
        preds: list[list[int]] = [[] for _ in range(m)]
        for k, succ in enumerate(self.successors):
            if not succ:
                raise ValueError(f"season node {k} has no successor")
            for q in succ:
                if not 0 <= q < m:
                    raise ValueError(f"edge {k}->{q} leaves the node range 0..{m - 1}")
                preds[q].append(k)
        for k, p in enumerate(preds):
            if not p:
                raise ValueError(f"season node {k} has no predecessor")
        if self.kind == "cycle":
            if any(len(s) != 1 or s[0] != (k + 1) % m for k, s in enumerate(self.successors)):
                raise ValueError("cycle topology must be the single loop 0 -> 1 -> ... -> 0")
        if self.labels is not None and len(self.labels) != m:
            raise ValueError("labels must name every node")
        object.__setattr__(self, "predecessors", tuple(tuple(sorted(p)) for p in preds))

    @property
    def n_nodes(self) -> int:
        return len(self.successors)

    @property
    def eliminated(self) -> int:
        return self.n_nodes - 1

    def edges(self) -> list[tuple[int, int]]:
        return [(k, q) for k, succ in enumerate(self.successors) for q in succ]

    def paths(self) -> list[tuple[int, int, int]]:
        """All (predecessor, node, successor) triples, one per route through a node."""
        return [
            (p, k, q)
            for k in range(self.n_nodes)
            for p in self.predecessors[k]
            for q in self.successors[k]
        ]


def make_cycle(m: int) -> SeasonTopology:
    """Single directed cycle of ``m`` seasons."""
    if int(m) != m or m < 2:
        raise ValueError(f"a seasonal cycle needs m >= 2 seasons, got {m}")
    m = int(m)
    return SeasonTopology(tuple(((k + 1) % m,) for k in range(m)), kind="cycle")


def make_graph(successors: Sequence[Sequence[int]], labels: Sequence[str] | None = None) -> SeasonTopology:
    succ = tuple(tuple(sorted(set(int(q) for q in s))) for s in successors)
    return SeasonTopology(succ, kind="graph", labels=None if labels is None else tuple(labels))


def make_two_cylinder(day_len: int, transition_len: int, split_at: int) -> SeasonTopology:
    """Working-day and holiday cycles joined by two transition paths.

    Node layout: working day ``0 .. day_len-1``, holiday ``day_len .. 2*day_len-1``,
    then the interior nodes of the working-day -> holiday path, then those of
    the holiday -> working-day path.  A path leaves its cycle at node
    ``split_at`` and enters the other cycle at node 0.
    """
    if day_len < 2:
        raise ValueError(f"day_len must be >= 2, got {day_len}")
    if not 0 < split_at < day_len:
        raise ValueError(f"split_at must satisfy 0 < split_at < day_len, got {split_at}")
    if transition_len < 0:
        raise ValueError(f"transition_len must be >= 0, got {transition_len}")

    work = list(range(day_len))
    hol = list(range(day_len, 2 * day_len))
    w2h = list(range(2 * day_len, 2 * day_len + transition_len))
    h2w = list(range(2 * day_len + transition_len, 2 * day_len + 2 * transition_len))
    succ: list[list[int]] = [[] for _ in range(2 * day_len + 2 * transition_len)]
    labels = (
        [f"W{i}" for i in range(day_len)]
        + [f"H{i}" for i in range(day_len)]
        + [f"WH{i}" for i in range(transition_len)]
        + [f"HW{i}" for i in range(transition_len)]
    )

    for ring in (work, hol):
        for i, k in enumerate(ring):
            succ[k].append(ring[(i + 1) % day_len])
    for start, path, end in ((work[split_at], w2h, hol[0]), (hol[split_at], h2w, work[0])):
        chain = [start, *path, end]
        for a, b in zip(chain[:-1], chain[1:]):
            succ[a].append(b)
    return make_graph(succ, labels)


def cycle_season_map(m: int, n: int, start: int = 0) -> np.ndarray:
    """Season node of each time index for a plain cycle (time ``i`` -> ``(start + i) mod m``)."""
    return (np.arange(n) + start) % m


def validate_season_map(topo: SeasonTopology, season_map: np.ndarray) -> np.ndarray:
    season_map = np.asarray(season_map, dtype=np.int64)
    if season_map.ndim != 1:
        raise ValueError("season map must be one-dimensional")
    if np.any(season_map < 0) or np.any(season_map >= topo.n_nodes):
        raise ValueError("season map refers to nodes outside the topology")
    for t in range(len(season_map) - 1):
        a, b = season_map[t], season_map[t + 1]
        if b not in topo.successors[a]:
            raise ValueError(f"season map step {t}->{t + 1} goes {a}->{b}, which is not an edge")
    return season_map


def embedding_matrix(m: int, n: int) -> sp.csr_array:
    """``(m*n) x (n*(m-1))`` map from reduced coordinates to the full surface.

    Full surfaces are ``vec`` of the ``m x n`` matrix (index ``t*m + k``).
    """
    r = m - 1
    t = np.repeat(np.arange(n), r)
    k = np.tile(np.arange(r), n)
    red = t * r + k
    rows = np.concatenate([t * m + k, t * m + r])
    cols = np.concatenate([red, red])
    vals = np.concatenate([np.ones(n * r), -np.ones(n * r)])
    return from_triplets(m * n, n * r, rows, cols, vals)


def difference_embedding(m: int, n: int) -> sp.csr_array:
    """``(m*n) x (n*(m-1))`` map from difference coordinates to the full surface.

    Difference coordinates ``d`` describe a zero-sum surface as
    ``S[k] = d[k] - d[k-1]`` (indices mod ``m``) with ``d[m-1] = 0``.  Every
    entry is local, so operators composed with this map stay sparse, unlike
    the reduced coordinates where the last row is a dense negative sum.
    """
    r = m - 1
    k = np.arange(m)
    keep = k < r
    prev = (k - 1) % m
    keep_prev = prev < r
    loc_rows = np.concatenate([k[keep], k[keep_prev]])
    loc_cols = np.concatenate([k[keep], prev[keep_prev]])
    loc_vals = np.concatenate([np.ones(keep.sum()), -np.ones(keep_prev.sum())])
    t = np.arange(n)[:, None]
    rows = (t * m + loc_rows).ravel()
    cols = (t * r + loc_cols).ravel()
    return from_triplets(m * n, n * r, rows, cols, np.tile(loc_vals, n))


def difference_basis(m: int, n: int) -> sp.csr_array:
    """Square map ``T`` with ``s = T d`` from difference to reduced coordinates."""
    r = m - 1
    k = np.arange(r)
    loc_rows = np.concatenate([k, k[1:]])
    loc_cols = np.concatenate([k, k[1:] - 1])
    loc_vals = np.concatenate([np.ones(r), -np.ones(r - 1)])
    t = np.arange(n)[:, None] * r
    return from_triplets(n * r, n * r, (t + loc_rows).ravel(), (t + loc_cols).ravel(), np.tile(loc_vals, n))


def embed(s: np.ndarray, m: int) -> np.ndarray:
    """Reduced vector -> full ``m x n`` surface."""
    s = np.asarray(s, dtype=float)
    head = s.reshape(-1, m - 1).T
    return np.vstack([head, -head.sum(axis=0, keepdims=True)])


def reduce(surface: np.ndarray) -> np.ndarray:
    """Full ``m x n`` surface -> reduced vector (drops the last row)."""
    surface = np.asarray(surface, dtype=float)
    return surface[:-1].T.reshape(-1).copy()


@dataclass(frozen=True)
class PenaltySet:
    """Second-difference operators of one seasonal surface in reduced coordinates."""

    D_tt: sp.csr_array
    D_st: sp.csr_array
    D_ss: sp.csr_array
    n_nodes: int
    n_times: int

    def coordinate(self, node: int, t: int) -> int | None:
        """Column of ``(node, t)``; None for the eliminated node."""
        if node == self.n_nodes - 1:
            return None
        return t * (self.n_nodes - 1) + node


def _stencil(n_rows, n_cols, cols, vals):
    """Sparse matrix whose row ``i`` has entries ``vals`` at ``cols[i]``."""
    cols = np.asarray(cols, dtype=np.int64).reshape(n_rows, -1)
    rows = np.repeat(np.arange(n_rows), cols.shape[1])
    vals = np.tile(np.asarray(vals, dtype=float), n_rows)
    return from_triplets(n_rows, n_cols, rows, cols.ravel(), vals)


def _full_penalties(topo: SeasonTopology, n: int):
    m = topo.n_nodes
    size = m * n

    # time direction: rows ordered by (t, node), t = 2..n-1
    t = np.repeat(np.arange(2, n), m)
    k = np.tile(np.arange(m), n - 2)
    base = t * m + k
    D_tt = _stencil(len(base), size, np.column_stack([base, base - m, base - 2 * m]), [1.0, -2.0, 1.0])

    # season direction: one row per route (p -> k -> q) per time
    paths = np.array(topo.paths(), dtype=np.int64).reshape(-1, 3)
    offs = np.repeat(np.arange(n) * m, len(paths))[:, None]
    cols = offs + np.tile(paths[:, [2, 1, 0]], (n, 1))
    D_ss = _stencil(len(cols), size, cols, [1.0, -2.0, 1.0])

    # mixed: first season difference along each edge, then first time difference
    edges = np.array(topo.edges(), dtype=np.int64).reshape(-1, 2)
    offs = np.repeat(np.arange(1, n) * m, len(edges))[:, None]
    e = np.tile(edges[:, [1, 0]], (n - 1, 1))
    cols = np.column_stack([offs + e, offs - m + e])
    D_st = _stencil(len(cols), size, cols, [1.0, -1.0, -1.0, 1.0])
    return D_tt, D_st, D_ss


def build_penalties(topo: SeasonTopology, n: int, *, coords: str = "reduced") -> PenaltySet:
    """Time, time-season and season second-difference operators for ``topo``.

    ``coords`` selects the coordinates the operators act on: ``"reduced"``
    (default), ``"difference"`` (see :func:`difference_embedding`) or
    ``"full"`` surfaces.
    """
    if n < 3:
        raise ValueError(f"need at least 3 time points, got {n}")
    mats = _full_penalties(topo, n)
    if coords != "full":
        if coords == "reduced":
            E = embedding_matrix(topo.n_nodes, n)
        elif coords == "difference":
            E = difference_embedding(topo.n_nodes, n)
        else:
            raise ValueError(f"unknown coordinates {coords!r}")
        mats = tuple(_canonical(D @ E) for D in mats)
    return PenaltySet(*mats, n_nodes=topo.n_nodes, n_times=n)


def _canonical(M) -> sp.csr_array:
    M = sp.csr_array(M)
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()
    return M


def build_trend_penalty(n: int) -> sp.csr_array:
    """``(n-2) x n`` second-difference matrix with rows ``[1, -2, 1]``."""
    if n < 3:
        raise ValueError(f"the trend penalty needs n >= 3, got {n}")
    r = np.arange(n - 2)
    rows = np.repeat(r, 3)
    cols = (r[:, None] + np.arange(3)).ravel()
    vals = np.tile([1.0, -2.0, 1.0], n - 2)
    return from_triplets(n - 2, n, rows, cols, vals)
