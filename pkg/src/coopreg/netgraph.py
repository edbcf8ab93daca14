"""Communication digraph of the leader-follower network.

The adjacency matrix is laid out with row/column 0 for the leader and the
followers grouped in blocks; within that layout the follower part has to be
lower block-triangular with irreducible diagonal blocks.  From it we derive
the in-degree matrix, the graph Laplacian and the leader-follower matrix H
whose spectrum certifies that the leader is a root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotBlockTriangular(ValueError):
    pass


class SelfLoop(ValueError):
    pass


class ReducibleDiagonalBlock(ValueError):
    pass


class LeaderRowNonzero(ValueError):
    pass


@dataclass(frozen=True)
class NetworkTopology:
    """Validated grouped digraph with derived Laplacian quantities."""

    group_sizes: tuple
    adjacency: np.ndarray      # (N+1) x (N+1), row/col 0 = leader
    in_degree: np.ndarray      # (N+1) x (N+1) diagonal
    laplacian: np.ndarray      # (N+1) x (N+1)
    H: np.ndarray              # N x N follower block of the Laplacian

    @property
    def n_followers(self):
        return int(sum(self.group_sizes))

    @property
    def n_groups(self):
        return len(self.group_sizes)

    def group_slice(self, i):
        """Follower-index slice of group ``i`` (0-based) within H."""
        start = int(sum(self.group_sizes[:i]))
        return slice(start, start + int(self.group_sizes[i]))

    def H_block(self, i, j):
        return self.H[self.group_slice(i), self.group_slice(j)]

    def group_of(self, follower):
        """Group index of a follower (0-based follower numbering)."""
        start = 0
        for i, size in enumerate(self.group_sizes):
            start += int(size)
            if follower < start:
                return i
        raise IndexError(f"follower {follower} out of range")

    def neighbors(self, follower):
        """Indices (0 = leader) this follower listens to."""
        row = self.adjacency[follower + 1]
        return tuple(int(j) for j in np.nonzero(row > 0)[0])


def _strongly_connected(block):
    """Tarjan-style check that a weighted digraph block is strongly connected.

    Edge ``u -> v`` exists when ``block[v, u] > 0`` (row = receiver); strong
    connectivity is equivalent to irreducibility of the block.
    """
    n = block.shape[0]
    if n == 1:
        return True

    def reach(start, adj):
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in np.nonzero(adj[:, u] > 0)[0]:
                if v not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        return seen

    return len(reach(0, block)) == n and len(reach(0, block.T)) == n


def build_topology(group_sizes, adjacency):
    """Validate the grouped adjacency matrix and derive D, L and H."""
    group_sizes = tuple(int(s) for s in group_sizes)
    if any(s <= 0 for s in group_sizes):
        raise ValueError("group sizes must be positive")
    n = sum(group_sizes)
    a = np.asarray(adjacency, dtype=float)
    if a.shape != (n + 1, n + 1):
        raise ValueError(
            f"adjacency must be {(n + 1, n + 1)} for group sizes {group_sizes}"
        )
    if np.any(a < 0):
        raise ValueError("adjacency weights must be nonnegative")
    if np.any(a[0] != 0):
        raise LeaderRowNonzero("leader row of the adjacency must be zero")

    # follower block partition boundaries (offset by 1 for the leader)
    starts = np.cumsum([1] + list(group_sizes[:-1]))
    for i, (si, ni) in enumerate(zip(starts, group_sizes)):
        for j, (sj, nj) in enumerate(zip(starts, group_sizes)):
            blk = a[si:si + ni, sj:sj + nj]
            if j > i and np.any(blk != 0):
                raise NotBlockTriangular(
                    f"group {i + 1} may not receive from later group {j + 1}"
                )
            if j == i:
                if np.any(np.diag(blk) != 0):
                    raise SelfLoop(f"self-loop inside group {i + 1}")
                if not _strongly_connected(blk):
                    raise ReducibleDiagonalBlock(
                        f"diagonal block of group {i + 1} is reducible"
                    )

    d = np.diag(a.sum(axis=1))
    lap = d - a
    h = lap[1:, 1:]
    return NetworkTopology(group_sizes, a, d, lap, h)


def leader_is_root(topology):
    """Reachability of every follower from the leader, plus sigma(H).

    Returns ``(rooted, report)`` where the report carries the spectrum of H,
    its minimal real part and the eigenpair residuals.
    """
    a = topology.adjacency
    n = a.shape[0]
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in np.nonzero(a[:, u] > 0)[0]:
            if v not in seen:
                seen.add(int(v))
                stack.append(int(v))
    rooted = len(seen) == n

    eigvals, eigvecs = np.linalg.eig(topology.H)
    residuals = np.array([
        np.linalg.norm(topology.H @ eigvecs[:, k] - eigvals[k] * eigvecs[:, k])
        for k in range(eigvals.size)
    ])
    report = {
        "rooted": rooted,
        "spectrum": eigvals,
        "min_real_part": float(eigvals.real.min()),
        "eigenpair_residuals": residuals,
    }
    return rooted, report
