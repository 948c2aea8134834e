"""Multi-view undirected graphs over a shared node set."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class EdgeListError(ValueError):
    """Malformed edge-list file; the message carries the line number."""


@dataclass(frozen=True)
class ViewGraph:
    """One view stored as CSR neighbor lists (sorted, symmetric, no self-loops)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "ViewGraph":
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
            raise IndexError(f"edge endpoint outside [0, {n})")
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        both = np.concatenate([pairs, pairs[:, ::-1]])
        # encode as src * n + dst to dedupe and sort in one pass
        keys = np.unique(both[:, 0] * n + both[:, 1]) if both.size else np.zeros(0, np.int64)
        src, dst = keys // max(n, 1), keys % max(n, 1)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return cls(n, indptr, dst.astype(np.int64))

    def neighbors(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n:
            raise IndexError(f"node {i} outside [0, {self.n})")
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return len(self.indices) // 2

    def edges(self) -> np.ndarray:
        """Undirected edges as (i, j) rows with i < j."""
        src = np.repeat(np.arange(self.n), self.degrees())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def coo(self, self_loops: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) arrays of directed edges grouped by row.

        With ``self_loops`` each row's block starts with its own (i, i) entry,
        so every node owns at least one entry.
        """
        deg = self.degrees()
        rows = np.repeat(np.arange(self.n), deg)
        cols = self.indices
        if not self_loops:
            return rows, cols
        ids = np.arange(self.n)
        rows = np.concatenate([ids, rows])
        cols = np.concatenate([ids, cols])
        order = np.argsort(rows, kind="stable")
        return rows[order], cols[order]

    def normalized_adjacency(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Entries of D^-1/2 (A + I) D^-1/2 as (rows, cols, values)."""
        rows, cols = self.coo(self_loops=True)
        deg = self.degrees() + 1.0
        inv_sqrt = 1.0 / np.sqrt(deg)
        return rows, cols, inv_sqrt[rows] * inv_sqrt[cols]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ViewGraph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class HeteroGraph:
    views: tuple[ViewGraph, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError("a heterogeneous graph needs at least one view")
        sizes = {v.n for v in self.views}
        if len(sizes) != 1:
            raise ValueError(f"views disagree on node count: {sorted(sizes)}")

    @classmethod
    def from_edges(cls, n: int, per_view_edges: Iterable[Iterable[tuple[int, int]]]) -> "HeteroGraph":
        return cls(tuple(ViewGraph.from_edges(n, e) for e in per_view_edges))

    @classmethod
    def empty(cls, n: int, m: int) -> "HeteroGraph":
        return cls.from_edges(n, [[] for _ in range(m)])

    @property
    def n(self) -> int:
        return self.views[0].n

    @property
    def m(self) -> int:
        return len(self.views)

    def neighbors(self, i: int, v: int) -> np.ndarray:
        if not 0 <= v < self.m:
            raise IndexError(f"view {v} outside [0, {self.m})")
        return self.views[v].neighbors(i)

    def permute(self, perm: np.ndarray) -> "HeteroGraph":
        """Relabel nodes so that old node ``perm[k]`` becomes node ``k``."""
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return HeteroGraph.from_edges(self.n, [inverse[v.edges()] for v in self.views])


def neighbors(g: HeteroGraph, i: int, v: int) -> np.ndarray:
    return g.neighbors(i, v)


def projection(g: HeteroGraph) -> ViewGraph:
    """Union of all views' edges."""
    return ViewGraph.from_edges(g.n, np.concatenate([v.edges() for v in g.views]))


def projection_graph(g: HeteroGraph) -> HeteroGraph:
    return HeteroGraph((projection(g),))


def hop_distances(view: ViewGraph, source: int) -> np.ndarray:
    """BFS hop counts from ``source``; unreachable nodes get -1."""
    dist = np.full(view.n, -1, dtype=np.int64)
    dist[source] = 0
    frontier = [source]
    while frontier:
        nxt = []
        for i in frontier:
            for j in view.neighbors(i):
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    nxt.append(int(j))
        frontier = nxt
    return dist


def load_edges(path: str | Path, n: int, m: int) -> HeteroGraph:
    """Parse ``view src dst`` lines; ``#`` starts a comment."""
    per_view: list[list[tuple[int, int]]] = [[] for _ in range(m)]
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise EdgeListError(f"line {lineno}: expected 'view src dst', got {raw.strip()!r}")
            try:
                view, src, dst = (int(p) for p in parts)
            except ValueError:
                raise EdgeListError(f"line {lineno}: non-integer field in {raw.strip()!r}") from None
            if min(src, view, dst) < 0:
                raise EdgeListError(f"line {lineno}: negative id")
            if src >= n or dst >= n:
                raise EdgeListError(f"line {lineno}: node id {max(src, dst)} >= n={n}")
            if view >= m:
                raise EdgeListError(f"line {lineno}: view id {view} >= m={m}")
            per_view[view].append((src, dst))
    return HeteroGraph.from_edges(n, per_view)


def save_edges(g: HeteroGraph, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# view src dst; n={g.n} m={g.m}\n")
        for v, view in enumerate(g.views):
            for i, j in view.edges():
                fh.write(f"{v} {i} {j}\n")
