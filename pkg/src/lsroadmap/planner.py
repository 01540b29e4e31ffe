"""Plan generation over a built roadmap.

Start and goal observations are encoded deterministically, matched to their
closest roadmap nodes, and all shortest (fewest-hop) directed paths between
the nodes are enumerated.  When no path exists, the next-closest nodes are
tried in increasing total-rank order up to a fallback budget.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .mapping import EncoderModel, decode_batch, encode
from .metrics import cross_distances
from .roadmap import Roadmap
from .tasks import Observation

PATH_CAP = 64  # all-shortest-paths guard; truncation is surfaced on the result


class PlanUnreachableError(RuntimeError):
    pass


@dataclass
class PlanResult:
    node_ids: list[int]
    latent_plan: list[np.ndarray]
    decoded_plan: list[Observation]
    action_plan: list = field(default_factory=list)
    fallback_depth: int = 0
    truncated: bool = False


def nearest_node(roadmap: Roadmap, z: np.ndarray, rank: int = 0) -> int:
    """Region whose representative is the (rank+1)-th closest to ``z``."""
    if rank < 0:
        raise ValueError("rank must be >= 0")
    if rank >= len(roadmap.regions):
        raise ValueError(f"rank {rank} out of range for {len(roadmap.regions)} regions")
    dists = cross_distances(np.asarray(z, dtype=float)[None, :], roadmap.representatives(), roadmap.metric)[0]
    order = np.lexsort((np.arange(len(dists)), dists))
    return int(order[rank])


def _bfs_dist(adjacency: list[list[int]], source: int) -> np.ndarray:
    dist = np.full(len(adjacency), -1, dtype=int)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def all_shortest_paths(roadmap: Roadmap, i: int, j: int, cap: int | None = None) -> list[list[int]]:
    """Every minimal-hop directed path from i to j, in lexicographic order.

    Empty when j is unreachable; with ``cap`` set, only the lexicographically
    first ``cap`` paths are produced.
    """
    n = len(roadmap.regions)
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"invalid region pair ({i}, {j})")
    if i == j:
        return [[i]]
    succ = roadmap.successors()
    dist_from = _bfs_dist(succ, i)
    if dist_from[j] < 0:
        return []
    dist_to = _bfs_dist(roadmap.predecessors(), j)
    length = int(dist_from[j])

    paths: list[list[int]] = []
    stack = [i]

    def extend(u: int) -> bool:
        if u == j:
            paths.append(list(stack))
            return cap is not None and len(paths) >= cap
        for v in succ[u]:
            if dist_from[v] == dist_from[u] + 1 and dist_from[v] + dist_to[v] == length:
                stack.append(v)
                if extend(v):
                    return True
                stack.pop()
        return False

    extend(i)
    return paths


def plan(
    roadmap: Roadmap,
    model: EncoderModel,
    obs_start: Observation,
    obs_goal: Observation,
    max_fallback: int = 5,
    path_cap: int = PATH_CAP,
) -> list[PlanResult]:
    """All shortest plans between the observations, one PlanResult per path.

    Fallback pairs (rank_start, rank_goal) are tried in increasing total rank
    (then increasing rank_start) until some pair of nodes is connected.
    """
    z_start = encode(model, obs_start, deterministic=True).z
    z_goal = encode(model, obs_goal, deterministic=True).z
    n = len(roadmap.regions)

    for total in range(max_fallback + 1):
        for rank_s in range(total + 1):
            rank_g = total - rank_s
            if rank_s >= n or rank_g >= n:
                continue
            i = nearest_node(roadmap, z_start, rank_s)
            j = nearest_node(roadmap, z_goal, rank_g)
            paths = all_shortest_paths(roadmap, i, j, cap=path_cap + 1)
            if not paths:
                continue
            truncated = len(paths) > path_cap
            if truncated:
                paths = paths[:path_cap]
            results = []
            for node_ids in paths:
                latent = [roadmap.points[roadmap.regions[r].representative] for r in node_ids]
                decoded_feats = decode_batch(model, np.stack(latent))
                decoded = [Observation(features=f, state=None) for f in decoded_feats]
                results.append(
                    PlanResult(
                        node_ids=node_ids,
                        latent_plan=latent,
                        decoded_plan=decoded,
                        action_plan=[],
                        fallback_depth=total,
                        truncated=truncated,
                    )
                )
            return results
    raise PlanUnreachableError(
        f"no path between start and goal nodes within fallback budget {max_fallback}"
    )
