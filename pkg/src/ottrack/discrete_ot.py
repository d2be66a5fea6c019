"""Exact discrete Kantorovich problem with squared Euclidean cost.

The solver is a transportation simplex: north-west-corner start, spanning
tree basis with node potentials, and Orden's perturbation of the marginals
(supplies ``a_i + eps``, last demand ``b_n + m*eps``) carried symbolically
as integer eps-coefficients. Under that perturbation every basis is
nondegenerate, so the ratio test has a unique winner and the method cannot
cycle whatever pricing rule picks the entering cell.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleMarginals, InvalidInput, SolverStall, TooLarge, UnequalWeights

MARGINAL_TOL = 1e-8
DENSE_LIMIT = 10_000_000
PIVOTS_PER_CELL = 50
PRICING_BLOCK = 5_000


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.size or w.size == 0:
            raise InvalidInput("need one positive weight per support point")
        if np.any(w <= 0):
            raise InvalidInput("discrete measure weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-10:
            raise InvalidInput(f"weights sum to {w.sum():.15g}, expected 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @classmethod
    def from_particles(cls, p) -> "DiscreteMeasure":
        """Drop zero-weight particles and renormalize the rest."""
        keep = p.weights > 0
        w = p.weights[keep]
        return cls(p.points[keep], w / w.sum())

    @classmethod
    def from_grid(cls, g, rel_floor: float = 0.0) -> "DiscreteMeasure":
        """Grid cells as atoms at their centers, mass ``value * cell_volume``.

        Cells below ``rel_floor * max`` are dropped before renormalizing.
        """
        m = g.values.ravel() * g.cell_volume
        keep = m > rel_floor * m.max()
        m = m[keep]
        return cls(g.centers()[keep], m / m.sum())


@dataclass(frozen=True)
class TransportPlan:
    source: DiscreteMeasure
    target: DiscreteMeasure
    coupling: np.ndarray
    cost: float
    pivots: int = 0
    min_reduced_cost: float = 0.0


def cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances."""
    d = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _check_marginals(src: DiscreteMeasure, tgt: DiscreteMeasure) -> None:
    if src.points.shape[1] != tgt.points.shape[1]:
        raise InvalidInput("source and target live in different dimensions")
    gap = abs(src.weights.sum() - tgt.weights.sum())
    if gap > MARGINAL_TOL:
        raise InfeasibleMarginals(f"total masses differ by {gap:.3e}")


class _Pricer:
    """Cyclic block pricing; the cost matrix is cached unless it is too large."""

    def __init__(self, x, y, block_rows, dense):
        self.x, self.y = x, y
        self.m, self.n = x.shape[0], y.shape[0]
        self.block_rows = block_rows
        self.dense = cost_matrix(x, y) if dense else None
        self._next_block = 0

    def cost(self, i, j) -> float:
        if self.dense is not None:
            return float(self.dense[i, j])
        d = self.x[i] - self.y[j]
        return float(d @ d)

    def max_cost(self) -> float:
        if self.dense is not None:
            return float(self.dense.max())
        # sqrt(max cost) <= diameter of the union bounding box
        lo = np.minimum(self.x.min(0), self.y.min(0))
        hi = np.maximum(self.x.max(0), self.y.max(0))
        return float(np.sum((hi - lo) ** 2))

    def _reduced(self, r0, r1, u, v):
        c = self.dense[r0:r1] if self.dense is not None else cost_matrix(self.x[r0:r1], self.y)
        return c - u[r0:r1, None] - v[None, :]

    def entering(self, u, v, tol):
        """Most violated cell of the first row block (cyclic scan) that has one.

        ``None`` means a full sweep found no reduced cost below ``-tol``.
        """
        nblocks = math.ceil(self.m / self.block_rows)
        for step in range(nblocks):
            b = (self._next_block + step) % nblocks
            r0 = b * self.block_rows
            red = self._reduced(r0, min(r0 + self.block_rows, self.m), u, v)
            flat = int(np.argmin(red))
            i, j = divmod(flat, self.n)
            if red[i, j] < -tol:
                self._next_block = (b + 1) % nblocks
                return r0 + i, j, float(red[i, j])
        return None

    def min_reduced(self, u, v) -> float:
        if self.dense is not None:
            return float((self.dense - u[:, None] - v[None, :]).min())
        out = np.inf
        for r0 in range(0, self.m, self.block_rows):
            r1 = min(r0 + self.block_rows, self.m)
            red = cost_matrix(self.x[r0:r1], self.y) - u[r0:r1, None] - v[None, :]
            out = min(out, float(red.min()))
        return out


def _lex_less(a, b, tol):
    """(real, eps-coefficient) pairs compared lexicographically."""
    if abs(a[0] - b[0]) > tol:
        return a[0] < b[0]
    return a[1] < b[1]


def solve_plan(
    src: DiscreteMeasure,
    tgt: DiscreteMeasure,
    max_pivots: Optional[int] = None,
) -> TransportPlan:
    """Optimal coupling between two discrete measures for squared distance cost.

    Raises :class:`InfeasibleMarginals` when the total masses differ by more
    than 1e-8 and :class:`SolverStall` after ``50 * m * n`` pivots.
    """
    _check_marginals(src, tgt)
    a, b = src.weights, tgt.weights
    m, n = a.size, b.size
    block_rows = max(1, min(m, PRICING_BLOCK // n))
    pricer = _Pricer(src.points, tgt.points, block_rows, dense=m * n <= DENSE_LIMIT)
    max_c = pricer.max_cost()
    opt_tol = 1e-9 * max(max_c, 1e-300)
    if max_pivots is None:
        max_pivots = PIVOTS_PER_CELL * m * n

    # ---- north-west corner on the perturbed marginals ----
    # node ids: rows 0..m-1, columns m..m+n-1; flows keyed by (i, j)
    supply = [[float(a[i]), 1] for i in range(m)]
    demand = [[float(b[j]), 0] for j in range(n)]
    demand[-1][1] = m
    flows = {}
    adj = [set() for _ in range(m + n)]
    i = j = 0
    zero_tol = 1e-14
    while True:
        if i == m - 1 and j == n - 1:
            amt = [supply[i][0], supply[i][1]]
            flows[(i, j)] = amt
            adj[i].add(m + j)
            adj[m + j].add(i)
            break
        if i == m - 1:
            take_row = False
        elif j == n - 1:
            take_row = True
        else:
            take_row = _lex_less(supply[i], demand[j], zero_tol)
        amt = list(supply[i] if take_row else demand[j])
        flows[(i, j)] = amt
        adj[i].add(m + j)
        adj[m + j].add(i)
        supply[i][0] -= amt[0]
        supply[i][1] -= amt[1]
        demand[j][0] -= amt[0]
        demand[j][1] -= amt[1]
        if take_row:
            i += 1
        else:
            j += 1

    cost = pricer.cost
    if pricer.dense is not None:
        rows = pricer.dense.tolist()
        cost = lambda ci, cj: rows[ci][cj]  # noqa: E731

    # rooted spanning tree of the basis: parent, depth and potentials
    # (u_i + v_j = c_ij on basic cells), root = row 0 with u_0 = 0
    pot = [0.0] * (m + n)
    parent = [-1] * (m + n)
    depth = [0] * (m + n)

    def hang(root, up):
        """Re-root the component of ``root`` below ``up``; refresh its potentials."""
        parent[root] = up
        depth[root] = 0 if up < 0 else depth[up] + 1
        if up >= 0:
            pot[root] = cost(up, root - m) - pot[up] if up < m else cost(root, up - m) - pot[up]
        stack = [root]
        while stack:
            node = stack.pop()
            dn = depth[node] + 1
            pn = pot[node]
            for nb in adj[node]:
                if nb == parent[node]:
                    continue
                parent[nb] = node
                depth[nb] = dn
                pot[nb] = (cost(node, nb - m) if node < m else cost(nb, node - m)) - pn
                stack.append(nb)

    hang(0, -1)
    pivots = 0
    while True:
        u = np.array(pot[:m])
        v = np.array(pot[m:])
        enter = pricer.entering(u, v, opt_tol)
        if enter is None:
            break
        if pivots >= max_pivots:
            raise SolverStall(f"no optimum after {pivots} pivots")
        ei, ej, _ = enter

        # tree path from column node ej to row node ei
        p, q = m + ej, ei
        up_p, up_q = [p], [q]
        while depth[p] > depth[q]:
            p = parent[p]
            up_p.append(p)
        while depth[q] > depth[p]:
            q = parent[q]
            up_q.append(q)
        while p != q:
            p = parent[p]
            q = parent[q]
            up_p.append(p)
            up_q.append(q)
        path = up_p + up_q[-2::-1]

        cells = []
        for s in range(len(path) - 1):
            x, y = path[s], path[s + 1]
            cells.append((x, y - m) if x < m else (y, x - m))
        # odd positions along the cycle lose flow
        minus = cells[0::2]
        plus = cells[1::2]
        leave = minus[0]
        for c in minus[1:]:
            if _lex_less(flows[c], flows[leave], zero_tol):
                leave = c
        theta = list(flows[leave])
        for c in minus:
            f = flows[c]
            f[0] -= theta[0]
            f[1] -= theta[1]
            if f[0] < 0 and f[0] > -zero_tol:
                f[0] = 0.0
        for c in plus:
            f = flows[c]
            f[0] += theta[0]
            f[1] += theta[1]
        flows[(ei, ej)] = theta
        del flows[leave]

        # detach the subtree below the leaving edge, re-hang it on the entering edge
        li, lj = leave
        adj[li].discard(m + lj)
        adj[m + lj].discard(li)
        child = li if parent[li] == m + lj else m + lj
        node = ei
        while node != -1 and node != child:
            node = parent[node]
        inner, outer = (ei, m + ej) if node == child else (m + ej, ei)
        adj[ei].add(m + ej)
        adj[m + ej].add(ei)
        hang(inner, outer)
        pivots += 1

    coupling = np.zeros((m, n))
    for (ci, cj), f in flows.items():
        coupling[ci, cj] = max(f[0], 0.0)
    total = float(sum(coupling[c] * pricer.cost(*c) for c in flows))
    return TransportPlan(
        src, tgt, coupling, total, pivots=pivots, min_reduced_cost=pricer.min_reduced(u, v)
    )


def wasserstein(src: DiscreteMeasure, tgt: DiscreteMeasure) -> float:
    """Order-2 Wasserstein distance between two discrete measures."""
    return math.sqrt(max(solve_plan(src, tgt).cost, 0.0))


def brute_force_plan(src: DiscreteMeasure, tgt: DiscreteMeasure) -> TransportPlan:
    """Exact optimum for equal-weight measures by enumerating permutations.

    With uniform weights the Birkhoff polytope's vertices are permutation
    matrices, so the best permutation is an optimal plan.
    """
    n = src.size
    if tgt.size != n:
        raise UnequalWeights("brute force needs equally sized measures")
    if n > 8:
        raise TooLarge(f"{n}! permutations is too many; limit is 8")
    for w in (src.weights, tgt.weights):
        if np.max(np.abs(w - 1.0 / n)) > 1e-12:
            raise UnequalWeights("brute force needs uniform weights")
    c = cost_matrix(src.points, tgt.points)
    rows = np.arange(n)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        val = c[rows, perm].sum()
        if val < best:
            best, best_perm = val, perm
    coupling = np.zeros((n, n))
    coupling[rows, best_perm] = 1.0 / n
    return TransportPlan(src, tgt, coupling, float(best / n))


def barycentric_projection(plan: TransportPlan) -> np.ndarray:
    """Map each source atom to the coupling-weighted mean of its targets."""
    row_mass = plan.coupling.sum(axis=1)
    return (plan.coupling @ plan.target.points) / row_mass[:, None]
