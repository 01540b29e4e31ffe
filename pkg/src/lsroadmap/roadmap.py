"""Roadmap construction in the latent space.

Builds the reference graph over encoded training tuples, clusters the points
with agglomerative linkage (nearest-neighbor-chain, exact for the reducible
single/complete/average linkages) or fixed-radius epsilon clustering, assigns
each cluster an epsilon-neighbourhood size and a representative, lifts the
reference edges onto the clusters, and optimizes the dendrogram cut threshold
with bounded Brent search on the edge-count objective.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import squareform

from .mapping import LatentTuple
from .metrics import Metric, cross_distances, pairwise_distances


class Linkage(enum.Enum):
    AVERAGE = "average"
    SINGLE = "single"
    COMPLETE = "complete"

    @classmethod
    def parse(cls, name: str) -> "Linkage":
        aliases = {"avg": "average", "upgma": "average"}
        name = name.lower()
        try:
            return cls(aliases.get(name, name))
        except ValueError:
            raise ValueError(f"unknown linkage {name!r}") from None


@dataclass(frozen=True)
class EpsilonClustering:
    """Fixed-radius single-linkage components (DBSCAN with min_samples=1)."""

    radius: float


Clustering = Union[Linkage, EpsilonClustering]


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def n_components(self) -> int:
        return sum(1 for i, p in enumerate(self.parent) if self.find(i) == i)


# ---------------------------------------------------------------------------
# reference graph (Phase 1)
# ---------------------------------------------------------------------------

@dataclass
class ReferenceGraph:
    points: np.ndarray                       # all latent states, tuple i -> rows 2i, 2i+1
    edges: list[tuple[int, int, object]]     # (vertex, vertex, action) for action tuples
    provenance: list[Optional[int]]          # state index per vertex, if known

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]


def build_reference_graph(tuples_z: Sequence[LatentTuple]) -> ReferenceGraph:
    """Vertices for every latent state, edges only for action pairs."""
    if not tuples_z:
        raise ValueError("cannot build a reference graph from an empty dataset")
    points = np.empty((2 * len(tuples_z), len(tuples_z[0].z1)))
    edges = []
    provenance: list[Optional[int]] = []
    for i, tup in enumerate(tuples_z):
        points[2 * i] = tup.z1
        points[2 * i + 1] = tup.z2
        provenance.extend((tup.s1, tup.s2))
        if tup.a == 1:
            edges.append((2 * i, 2 * i + 1, tup.u))
    return ReferenceGraph(points=points, edges=edges, provenance=provenance)


# ---------------------------------------------------------------------------
# agglomerative clustering (Phase 2)
# ---------------------------------------------------------------------------

@dataclass
class Dendrogram:
    """Stepwise merge list; cluster ids follow the scipy convention
    (leaves 0..n-1, the k-th merge creates cluster n+k)."""

    merges: list[tuple[int, int, float, int]]  # (id_a, id_b, height, new_size)
    n_leaves: int


def _lance_williams_update(linkage: Linkage, d_xk, d_yk, size_x, size_y):
    if linkage is Linkage.SINGLE:
        return np.minimum(d_xk, d_yk)
    if linkage is Linkage.COMPLETE:
        return np.maximum(d_xk, d_yk)
    return (size_x * d_xk + size_y * d_yk) / (size_x + size_y)


def agglomerate(points: np.ndarray, metric: Metric, linkage: Linkage = Linkage.AVERAGE) -> Dendrogram:
    """Nearest-neighbor-chain agglomeration; ties resolved toward lower indices.

    Merges are reported sorted by height and relabeled, which is exact for
    the reducible linkages handled here.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n < 2:
        raise ValueError("agglomerate needs at least two points")
    dist = squareform(pairwise_distances(points, metric))
    np.fill_diagonal(dist, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    chain: list[int] = []
    raw: list[tuple[float, int, int]] = []

    for _ in range(n - 1):
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        while True:
            x = chain[-1]
            row = np.where(active, dist[x], np.inf)
            row[x] = np.inf
            y = int(np.argmin(row))
            if len(chain) > 1 and row[chain[-2]] == row[y]:
                y = chain[-2]  # prefer the reciprocal neighbor on ties
            if len(chain) > 1 and y == chain[-2]:
                break
            chain.append(y)
        x = chain.pop()
        y = chain.pop()
        raw.append((float(dist[x, y]), min(x, y), max(x, y)))
        keep, drop = (x, y) if x < y else (y, x)
        merged = _lance_williams_update(linkage, dist[keep], dist[drop], size[keep], size[drop])
        dist[keep] = merged
        dist[:, keep] = merged
        dist[keep, keep] = np.inf
        active[drop] = False
        size[keep] += size[drop]
        size[drop] = 0

    # stable sort by height, then relabel via union-find (k-th merge -> id n+k)
    order = sorted(range(n - 1), key=lambda i: raw[i][0])
    uf = UnionFind(n)
    label = list(range(n))
    csize = [1] * n
    merges = []
    for k, i in enumerate(order):
        height, a_slot, b_slot = raw[i]
        ra, rb = uf.find(a_slot), uf.find(b_slot)
        id_a, id_b = label[ra], label[rb]
        new_size = csize[ra] + csize[rb]
        merges.append((min(id_a, id_b), max(id_a, id_b), height, new_size))
        root = uf.union(ra, rb)
        label[root] = n + k
        csize[root] = new_size
    return Dendrogram(merges=merges, n_leaves=n)


def cut(dendrogram: Dendrogram, tau: float) -> list[list[int]]:
    """Flat clusters: merges at height >= tau are undone.

    Returns the partition of leaf indices, clusters ordered by smallest member.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    n = dendrogram.n_leaves
    uf = UnionFind(n)
    member = list(range(n))  # cluster id -> one leaf inside it
    for id_a, id_b, height, _ in dendrogram.merges:
        member.append(member[id_a])
        if height < tau:
            uf.union(member[id_a], member[id_b])
    groups: dict[int, list[int]] = {}
    for leaf in range(n):
        groups.setdefault(uf.find(leaf), []).append(leaf)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def epsilon_partition(points: np.ndarray, metric: Metric, radius: float) -> list[list[int]]:
    """Connected components of the <=radius neighbourhood graph."""
    n = points.shape[0]
    uf = UnionFind(n)
    dist = squareform(pairwise_distances(points, metric))
    rows, cols = np.nonzero(dist <= radius)
    for r, c in zip(rows, cols):
        if r < c:
            uf.union(int(r), int(c))
    groups: dict[int, list[int]] = {}
    for leaf in range(n):
        groups.setdefault(uf.find(leaf), []).append(leaf)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def epsilon_of_cluster(members: np.ndarray, metric: Metric) -> tuple[float, float, float]:
    """(mu, sigma, epsilon) over all unordered within-cluster pair distances.

    Uses the population standard deviation; singletons have no pairs and must
    be handled by the caller (build_lsr assigns them the build-wide mean).
    """
    members = np.asarray(members, dtype=float)
    if members.shape[0] < 2:
        raise ValueError("epsilon undefined for singleton clusters")
    d = pairwise_distances(members, metric)
    mu = float(np.mean(d))
    sigma = float(np.std(d))
    return mu, sigma, mu + sigma


# ---------------------------------------------------------------------------
# roadmap (Phase 3)
# ---------------------------------------------------------------------------

@dataclass
class CoveredRegion:
    members: list[int]            # indices into the roadmap's point matrix
    mu: float
    sigma: float
    epsilon: float
    representative: int           # index into the point matrix
    mean: np.ndarray              # cluster mean (not necessarily a member)


@dataclass
class RoadmapEdge:
    src: int
    dst: int
    actions: list = field(default_factory=list)


@dataclass
class Roadmap:
    points: np.ndarray
    regions: list[CoveredRegion]
    edges: list[RoadmapEdge]
    metric: Metric
    tau: float
    clustering: str
    components: int
    region_of: np.ndarray         # vertex index -> region index
    provenance: list[Optional[int]]

    def representatives(self) -> np.ndarray:
        return self.points[[r.representative for r in self.regions]]

    def edge_map(self) -> dict[tuple[int, int], RoadmapEdge]:
        return {(e.src, e.dst): e for e in self.edges}

    def successors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.regions]
        for e in self.edges:
            adj[e.src].append(e.dst)
        return [sorted(set(a)) for a in adj]

    def predecessors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.regions]
        for e in self.edges:
            adj[e.dst].append(e.src)
        return [sorted(set(a)) for a in adj]


def _clustering_label(clustering: Clustering) -> str:
    if isinstance(clustering, EpsilonClustering):
        return f"epsilon({clustering.radius:g})"
    return clustering.value


class _RoadmapBuilder:
    """Shares the reference graph and dendrogram across threshold evaluations."""

    def __init__(self, tuples_z: Sequence[LatentTuple], metric: Metric, clustering: Clustering):
        self.ref = build_reference_graph(tuples_z)
        self.metric = metric
        self.clustering = clustering
        self._dendrogram: Optional[Dendrogram] = None

    def partition(self, tau: float) -> list[list[int]]:
        if isinstance(self.clustering, EpsilonClustering):
            return epsilon_partition(self.ref.points, self.metric, self.clustering.radius)
        if self._dendrogram is None:
            if self.ref.n_vertices < 2:
                return [[0]]
            self._dendrogram = agglomerate(self.ref.points, self.metric, self.clustering)
        return cut(self._dendrogram, tau)

    def build(self, tau: float) -> Roadmap:
        points = self.ref.points
        clusters = self.partition(tau)
        region_of = np.empty(points.shape[0], dtype=int)
        regions: list[CoveredRegion] = []
        singletons: list[int] = []
        for idx, members in enumerate(clusters):
            region_of[members] = idx
            pts = points[members]
            mean = pts.mean(axis=0)
            rep_local = int(np.argmin(cross_distances(pts, mean[None, :], self.metric)[:, 0]))
            if len(members) >= 2:
                mu, sigma, eps = epsilon_of_cluster(pts, self.metric)
            else:
                mu = sigma = eps = 0.0
                singletons.append(idx)
            regions.append(
                CoveredRegion(
                    members=list(members),
                    mu=mu,
                    sigma=sigma,
                    epsilon=eps,
                    representative=members[rep_local],
                    mean=mean,
                )
            )
        if singletons:
            non_single = [r.epsilon for r in regions if len(r.members) >= 2]
            fallback = float(np.mean(non_single)) if non_single else 0.0
            for idx in singletons:
                regions[idx].epsilon = fallback

        edge_map: dict[tuple[int, int], RoadmapEdge] = {}
        for v1, v2, action in self.ref.edges:
            i, j = int(region_of[v1]), int(region_of[v2])
            if i == j:
                continue
            edge = edge_map.get((i, j))
            if edge is None:
                edge = edge_map[(i, j)] = RoadmapEdge(src=i, dst=j)
            edge.actions.append(action)

        uf = UnionFind(len(regions))
        for (i, j) in edge_map:
            uf.union(i, j)
        components = uf.n_components()

        return Roadmap(
            points=points,
            regions=regions,
            edges=[edge_map[k] for k in sorted(edge_map)],
            metric=self.metric,
            tau=tau,
            clustering=_clustering_label(self.clustering),
            components=components,
            region_of=region_of,
            provenance=list(self.ref.provenance),
        )


def build_lsr(
    tuples_z: Sequence[LatentTuple],
    metric: Metric,
    tau: float,
    clustering: Clustering = Linkage.AVERAGE,
) -> Roadmap:
    """Single roadmap build at a fixed threshold (Phases 1-3)."""
    return _RoadmapBuilder(tuples_z, metric, clustering).build(tau)


def psi(roadmap: Roadmap, c_max: float) -> float:
    """Edge count if the component bound holds, else -inf."""
    if roadmap.components <= c_max:
        return float(len(roadmap.edges))
    return float("-inf")


# ---------------------------------------------------------------------------
# threshold optimization (bounded Brent)
# ---------------------------------------------------------------------------

_GOLDEN = 0.5 * (3.0 - np.sqrt(5.0))


def brent_minimize(f, a: float, b: float, xatol: float = 1e-3, maxiter: int = 200) -> tuple[float, float]:
    """Classic bounded Brent scalar minimization (golden section + parabolic steps)."""
    if not a < b:
        raise ValueError("need a < b")
    x = w = v = a + _GOLDEN * (b - a)
    fx = fw = fv = f(x)
    d = e = 0.0
    for _ in range(maxiter):
        mid = 0.5 * (a + b)
        tol1 = 1e-11 * abs(x) + xatol / 3.0
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if (u - a) < tol2 or (b - u) < tol2:
                    d = tol1 if x < mid else -tol1
                use_golden = False
        if use_golden:
            e = (b - x) if x < mid else (a - x)
            d = _GOLDEN * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d > 0 else -tol1)
        fu = f(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


class NoRoadmapError(RuntimeError):
    pass


_NEG_SENTINEL = -1e18  # stands in for -inf inside Brent arithmetic


def optimize_tau(
    tuples_z: Sequence[LatentTuple],
    metric: Metric,
    clustering: Clustering = Linkage.AVERAGE,
    tau_min: float = 0.0,
    tau_max: float = 3.0,
    c_max: float = 1,
    xatol: float = 1e-3,
) -> tuple[float, Roadmap]:
    """Maximize the edge-count objective over the cut threshold.

    Returns the best threshold found together with its roadmap; the result is
    never worse than either bracket endpoint (both are evaluated explicitly).
    For epsilon clustering the optimized scalar is the neighbourhood radius.
    """
    if not tau_min < tau_max:
        raise ValueError("need tau_min < tau_max")
    builder = _RoadmapBuilder(tuples_z, metric, clustering)
    cache: dict[float, tuple[float, Roadmap]] = {}

    def evaluate(tau: float) -> float:
        tau = float(min(max(tau, tau_min), tau_max))
        if tau not in cache:
            if isinstance(clustering, EpsilonClustering):
                roadmap = _RoadmapBuilder(tuples_z, metric, EpsilonClustering(tau)).build(tau)
            else:
                roadmap = builder.build(tau)
            cache[tau] = (psi(roadmap, c_max), roadmap)
        value = cache[tau][0]
        return -value if np.isfinite(value) else -_NEG_SENTINEL

    evaluate(tau_min)
    evaluate(tau_max)
    brent_minimize(evaluate, tau_min, tau_max, xatol=xatol)

    best_tau = None
    best = float("-inf")
    for tau in sorted(cache):
        value = cache[tau][0]
        if value > best:
            best, best_tau = value, tau
    if not np.isfinite(best):
        raise NoRoadmapError(
            f"no roadmap within component bound c_max={c_max} for any evaluated threshold"
        )
    return best_tau, cache[best_tau][1]


# ---------------------------------------------------------------------------
# covered-region queries
# ---------------------------------------------------------------------------

def is_covered(roadmap: Roadmap, z: np.ndarray) -> Optional[int]:
    """Region whose epsilon-neighbourhood contains ``z``, if any.

    Qualifying regions are ranked by distance-to-epsilon ratio, then index.
    """
    return is_covered_batch(roadmap, np.asarray(z, dtype=float)[None, :])[0]


def is_covered_batch(roadmap: Roadmap, zs: np.ndarray) -> list[Optional[int]]:
    zs = np.asarray(zs, dtype=float)
    dist = cross_distances(zs, roadmap.points, roadmap.metric)
    member_order = np.concatenate([r.members for r in roadmap.regions])
    offsets = np.cumsum([0] + [len(r.members) for r in roadmap.regions])[:-1]
    dmin = np.minimum.reduceat(dist[:, member_order], offsets, axis=1)
    eps = np.array([r.epsilon for r in roadmap.regions])

    qualifies = dmin <= eps
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(eps > 0, dmin / eps, np.where(dmin == 0.0, 0.0, np.inf))
    ratio = np.where(qualifies, ratio, np.inf)
    out: list[Optional[int]] = []
    for row in ratio:
        idx = int(np.argmin(row))  # ties fall to the lowest region index
        out.append(idx if np.isfinite(row[idx]) else None)
    return out
