"""Evaluation protocol: plan scoring, coverage classification, latent-space
statistics, and the ablation runner, plus end-to-end pipeline orchestration."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import apm, mapping, planner, roadmap as rm, tasks
from .mapping import EncoderMode, EncoderModel, LatentTuple, LossConfig, TrainingTrace
from .metrics import Metric, cross_distances
from .roadmap import Clustering, Linkage, NoRoadmapError, Roadmap
from .tasks import DatasetTuple, Observation, TaskKind

# deterministic sub-seed streams for pipeline stages
_STREAM_DATASET = 1
_STREAM_INIT = 2
_STREAM_TRAIN = 3
_STREAM_HOLDOUT = 4
_STREAM_QUERIES = 5
_STREAM_APN = 6
_STREAM_AUGMENT = 7
_STREAM_OOD = 8

DEFAULT_ACTION_FRACTION = {
    TaskKind.NORMAL_STACKING: 0.65,
    TaskKind.HARD_STACKING: 0.65,
    TaskKind.ROPE_BOX: 0.5,
}
DEFAULT_CMAX = {
    TaskKind.NORMAL_STACKING: 1,
    TaskKind.HARD_STACKING: 20,
    TaskKind.ROPE_BOX: 20,
}


def derive_seed(base_seed: int, stream: int) -> int:
    return int(base_seed) * 1_000_003 + stream


def holdout_renders(task: TaskKind, n: int, rng_seed: int) -> list[Observation]:
    """Fresh renders of uniformly drawn states, seed-disjoint from training."""
    rng = np.random.default_rng(rng_seed)
    states = tasks.enumerate_states(task)
    return [tasks.render(task, states[rng.integers(len(states))], rng) for _ in range(n)]


def encode_dataset(model: EncoderModel, dataset: Sequence[DatasetTuple], task: TaskKind) -> list[LatentTuple]:
    """Deterministic (mean) encodings of a dataset, provenance preserved."""
    x1 = np.stack([t.obs1.features for t in dataset])
    x2 = np.stack([t.obs2.features for t in dataset])
    z1 = mapping.encode_batch(model, x1, deterministic=True)
    z2 = mapping.encode_batch(model, x2, deterministic=True)
    out = []
    for i, t in enumerate(dataset):
        s1 = tasks.state_index(task, t.obs1.state) if t.obs1.state is not None else None
        s2 = tasks.state_index(task, t.obs2.state) if t.obs2.state is not None else None
        out.append(LatentTuple(z1=z1[i], z2=z2[i], a=t.a, u=t.u, s1=s1, s2=s2))
    return out


# ---------------------------------------------------------------------------
# pipeline orchestration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    task: TaskKind = TaskKind.NORMAL_STACKING
    n_pairs: int = 2500
    action_fraction: Optional[float] = None     # default by task
    ld: int = 12
    hidden: int = 64
    mode: EncoderMode = EncoderMode.STOCHASTIC
    gamma: float = 100.0
    metric: Metric = Metric.L1
    epochs: int = 500
    beta_end: float = 2.0
    beta_ramp_epochs: int = 400
    recon_weight: float = 200.0
    dynamic_dm: bool = True
    static_dm: float = 0.0
    delta_dm: float = 0.1
    k_epochs: int = 5
    weight_decay: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    clustering: Clustering = Linkage.AVERAGE
    c_max: Optional[int] = None                 # default by task
    tau_min: float = 0.0
    tau_max: float = 3.0
    holdout_size: int = 2500
    n_queries: int = 1000
    max_fallback: int = 5

    def resolved_action_fraction(self) -> float:
        return DEFAULT_ACTION_FRACTION[self.task] if self.action_fraction is None else self.action_fraction

    def resolved_c_max(self) -> int:
        return DEFAULT_CMAX[self.task] if self.c_max is None else self.c_max

    def loss_config(self) -> LossConfig:
        return LossConfig(
            gamma=self.gamma,
            metric=self.metric,
            beta_end=self.beta_end,
            beta_ramp_epochs=self.beta_ramp_epochs,
            recon_weight=self.recon_weight,
            dm=0.0 if self.dynamic_dm else self.static_dm,
            delta_dm=self.delta_dm,
            k_epochs=self.k_epochs,
            dynamic_dm=self.dynamic_dm,
            weight_decay=self.weight_decay,
        )


@dataclass
class PipelineArtifacts:
    config: PipelineConfig
    seed: int
    dataset: list[DatasetTuple]
    model: EncoderModel
    trace: TrainingTrace
    latent: list[LatentTuple]
    roadmap: Roadmap
    tau: float


def train_mapping(config: PipelineConfig, seed: int) -> tuple[list[DatasetTuple], EncoderModel, TrainingTrace]:
    dataset = tasks.generate_dataset(
        config.task, config.n_pairs, config.resolved_action_fraction(), derive_seed(seed, _STREAM_DATASET)
    )
    model = EncoderModel.init(
        config.mode,
        dim=tasks.observation_dim(config.task),
        ld=config.ld,
        hidden=config.hidden,
        rng_seed=derive_seed(seed, _STREAM_INIT),
    )
    model, trace = mapping.train(
        model,
        dataset,
        config.loss_config(),
        epochs=config.epochs,
        rng_seed=derive_seed(seed, _STREAM_TRAIN),
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
    )
    return dataset, model, trace


def build_roadmap(config: PipelineConfig, latent: list[LatentTuple]) -> tuple[float, Roadmap]:
    return rm.optimize_tau(
        latent,
        config.metric,
        clustering=config.clustering,
        tau_min=config.tau_min,
        tau_max=config.tau_max,
        c_max=config.resolved_c_max(),
    )


def run_pipeline(config: PipelineConfig, seed: int) -> PipelineArtifacts:
    dataset, model, trace = train_mapping(config, seed)
    latent = encode_dataset(model, dataset, config.task)
    tau, graph = build_roadmap(config, latent)
    return PipelineArtifacts(
        config=config, seed=seed, dataset=dataset, model=model,
        trace=trace, latent=latent, roadmap=graph, tau=tau,
    )


def oracle_roadmap(task: TaskKind) -> Roadmap:
    """Ground-truth fixture: one region per state (its template as the sole
    member), edges from the exhaustive transition graph.  Pairs with
    :class:`mapping.IdentityModel` for scoring-harness verification."""
    states = tasks.enumerate_states(task)
    points = np.stack([tasks.template(task, s) for s in states])
    regions = [
        rm.CoveredRegion(members=[i], mu=0.0, sigma=0.0, epsilon=0.0, representative=i, mean=points[i])
        for i in range(len(states))
    ]
    edge_map: dict[tuple[int, int], rm.RoadmapEdge] = {}
    for s1, action, s2 in tasks.all_transitions(task):
        i, j = tasks.state_index(task, s1), tasks.state_index(task, s2)
        edge = edge_map.setdefault((i, j), rm.RoadmapEdge(src=i, dst=j))
        edge.actions.append(action)
    uf = rm.UnionFind(len(states))
    for (i, j) in edge_map:
        uf.union(i, j)
    return Roadmap(
        points=points,
        regions=regions,
        edges=[edge_map[k] for k in sorted(edge_map)],
        metric=Metric.L1,
        tau=0.0,
        clustering="oracle",
        components=uf.n_components(),
        region_of=np.arange(len(states)),
        provenance=list(range(len(states))),
    )


# ---------------------------------------------------------------------------
# planning scores
# ---------------------------------------------------------------------------

@dataclass
class ScoreReport:
    pct_all: float
    pct_any: float
    pct_trans: float
    n_queries: int
    n_unreachable: int = 0

    def __post_init__(self):
        if not (0.0 <= self.pct_all <= self.pct_any <= 100.0):
            raise ValueError(f"score dominance violated: all={self.pct_all} any={self.pct_any}")
        if not 0.0 <= self.pct_trans <= 100.0:
            raise ValueError(f"pct_trans out of range: {self.pct_trans}")


def score_planning(
    task: TaskKind,
    graph: Roadmap,
    model,
    n_queries: int,
    rng_seed: int,
    holdout: Optional[list[Observation]] = None,
    holdout_size: int = 2500,
    max_fallback: int = 5,
) -> ScoreReport:
    """Paper protocol: random start/goal pairs from an unseen holdout set,
    decoded plan states checked transition-by-transition.

    A path is correct when every consecutive decoded state pair is a valid
    (possibly identity) transition and the final decoded state equals the
    goal's ground-truth state.  Unreachable queries count as incorrect for
    all three scores (one invalid transition each).
    """
    if holdout is None:
        holdout = holdout_renders(task, holdout_size, derive_seed(rng_seed, _STREAM_HOLDOUT))
    rng = np.random.default_rng(derive_seed(rng_seed, _STREAM_QUERIES))
    n_all = n_any = 0
    n_trans_ok = n_trans_total = 0
    n_unreachable = 0

    for _ in range(n_queries):
        start = holdout[rng.integers(len(holdout))]
        goal = holdout[rng.integers(len(holdout))]
        try:
            results = planner.plan(graph, model, start, goal, max_fallback=max_fallback)
        except planner.PlanUnreachableError:
            n_unreachable += 1
            n_trans_total += 1
            continue
        any_ok = False
        all_ok = True
        for result in results:
            decoded = [tasks.decode_state(task, obs) for obs in result.decoded_plan]
            trans_ok = [
                tasks.is_valid_transition(task, s1, s2) for s1, s2 in zip(decoded, decoded[1:])
            ]
            n_trans_ok += sum(trans_ok)
            n_trans_total += len(trans_ok)
            correct = all(trans_ok) and decoded[-1] == goal.state
            any_ok = any_ok or correct
            all_ok = all_ok and correct
        n_any += any_ok
        n_all += all_ok
    pct_trans = 100.0 * n_trans_ok / n_trans_total if n_trans_total else 100.0
    return ScoreReport(
        pct_all=100.0 * n_all / n_queries,
        pct_any=100.0 * n_any / n_queries,
        pct_trans=pct_trans,
        n_queries=n_queries,
        n_unreachable=n_unreachable,
    )


@dataclass
class ScoreSummary:
    label: str
    per_seed: list[ScoreReport]

    def mean_std(self, attr: str) -> tuple[float, float]:
        vals = np.array([getattr(r, attr) for r in self.per_seed])
        return float(vals.mean()), float(vals.std())


# ---------------------------------------------------------------------------
# coverage classification
# ---------------------------------------------------------------------------

@dataclass
class CoverageReport:
    in_distribution_rate: float
    ood_rates: dict[str, float]

    def __post_init__(self):
        rates = [self.in_distribution_rate, *self.ood_rates.values()]
        if not all(0.0 <= r <= 100.0 for r in rates):
            raise ValueError(f"coverage rates out of range: {rates}")


def _covered_rate(graph: Roadmap, model, features: np.ndarray) -> float:
    if features.shape[0] == 0:
        return 0.0
    z = mapping.encode_batch(model, features, deterministic=True)
    hits = rm.is_covered_batch(graph, z)
    return 100.0 * sum(h is not None for h in hits) / len(hits)


def make_ood_sources(task: TaskKind, n: int, rng_seed: int) -> dict[str, np.ndarray]:
    """Out-of-distribution feature sets: uniform noise plus the other tasks'
    observations zero-padded or truncated to this task's dimension."""
    rng = np.random.default_rng(rng_seed)
    dim = tasks.observation_dim(task)
    sources = {"uniform-noise": rng.uniform(-1.0, 1.0, (n, dim))}
    for other in TaskKind:
        if other is task:
            continue
        renders = holdout_renders(other, n, derive_seed(rng_seed, _STREAM_OOD))
        feats = np.stack([o.features for o in renders])
        if feats.shape[1] >= dim:
            feats = feats[:, :dim]
        else:
            feats = np.pad(feats, ((0, 0), (0, dim - feats.shape[1])))
        sources[f"cross-task-{other.value}"] = feats
    return sources


def score_coverage(
    graph: Roadmap,
    model,
    in_dist_renders: list[Observation],
    ood_sources: dict[str, np.ndarray],
) -> CoverageReport:
    in_feats = np.stack([o.features for o in in_dist_renders])
    return CoverageReport(
        in_distribution_rate=_covered_rate(graph, model, in_feats),
        ood_rates={name: _covered_rate(graph, model, feats) for name, feats in sorted(ood_sources.items())},
    )


# ---------------------------------------------------------------------------
# latent-space statistics
# ---------------------------------------------------------------------------

@dataclass
class ContrastEntry:
    rc: float
    avg_dmax: float
    avg_dmin: float
    degenerate: bool = False


def _half_extremes(points: np.ndarray, metric: Metric):
    d = cross_distances(points, points, metric)
    np.fill_diagonal(d, np.inf)
    dmin = d.min(axis=1)
    np.fill_diagonal(d, -np.inf)
    dmax = d.max(axis=1)
    return dmin, dmax


def relative_contrast(latent_tuples: Sequence[LatentTuple], metric: Metric) -> ContrastEntry:
    """Distance-concentration statistic on the split latent dataset.

    The tuples' first and second states form two halves; every point supplies
    its min/max distance to the rest of its own half, and rc is computed from
    the averaged extremes.
    """
    if len(latent_tuples) < 2:
        raise ValueError("relative contrast needs at least two tuples")
    half1 = np.stack([t.z1 for t in latent_tuples])
    half2 = np.stack([t.z2 for t in latent_tuples])
    mins, maxs = [], []
    for half in (half1, half2):
        dmin, dmax = _half_extremes(half, metric)
        mins.append(dmin)
        maxs.append(dmax)
    avg_dmin = float(np.mean(np.concatenate(mins)))
    avg_dmax = float(np.mean(np.concatenate(maxs)))
    if avg_dmin == 0.0:
        degenerate = avg_dmax == 0.0
        rc = 0.0 if degenerate else float("inf")
        return ContrastEntry(rc=rc, avg_dmax=avg_dmax, avg_dmin=avg_dmin, degenerate=degenerate)
    return ContrastEntry(rc=(avg_dmax - avg_dmin) / avg_dmin, avg_dmax=avg_dmax, avg_dmin=avg_dmin)


@dataclass
class SeparationStats:
    state_ids: list[int]
    margins: np.ndarray            # per state: min inter-centroid - max intra distance
    mean_margin: float
    n_nonnegative: int
    single_sample_states: list[int]


def separation_stats(latent_tuples: Sequence[LatentTuple], metric: Metric) -> SeparationStats:
    """Per-state centroid separation from provenance-labelled encodings."""
    points, labels = [], []
    for t in latent_tuples:
        if t.s1 is None or t.s2 is None:
            raise ValueError("separation stats need provenance labels")
        points.extend((t.z1, t.z2))
        labels.extend((t.s1, t.s2))
    points = np.asarray(points)
    labels = np.asarray(labels)
    state_ids = sorted(set(int(s) for s in labels))
    centroids = np.stack([points[labels == s].mean(axis=0) for s in state_ids])
    inter = cross_distances(centroids, centroids, metric)
    np.fill_diagonal(inter, np.inf)

    margins = np.empty(len(state_ids))
    singles = []
    for k, s in enumerate(state_ids):
        own = points[labels == s]
        if own.shape[0] < 2:
            singles.append(s)
        intra = cross_distances(own, centroids[k][None, :], metric)[:, 0]
        max_intra = float(intra.max()) if own.shape[0] > 1 else 0.0
        margins[k] = float(inter[k].min()) - max_intra
    return SeparationStats(
        state_ids=state_ids,
        margins=margins,
        mean_margin=float(margins.mean()),
        n_nonnegative=int(np.sum(margins >= 0)),
        single_sample_states=singles,
    )


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class CmaxSweep:
    values: list[int]


@dataclass
class DmMode:
    modes: list        # "dynamic" or a static float value


@dataclass
class ClusteringSweep:
    kinds: list[Clustering]


@dataclass
class LatentDimSweep:
    values: list[int]


@dataclass
class DatasetSizeSweep:
    values: list[int]


@dataclass
class EncoderModeSweep:
    entries: list[tuple[EncoderMode, float]]   # (mode, gamma)


AblationSpec = (CmaxSweep, DmMode, ClusteringSweep, LatentDimSweep, DatasetSizeSweep, EncoderModeSweep)


@dataclass
class AblationRow:
    ablation: str
    label: str
    seed: int
    pct_all: Optional[float] = None
    pct_any: Optional[float] = None
    pct_trans: Optional[float] = None
    tau: Optional[float] = None
    n_regions: Optional[int] = None
    components: Optional[int] = None
    n_edges: Optional[int] = None
    final_dm: Optional[float] = None
    error: str = ""


def _score_artifacts(config: PipelineConfig, artifacts_seed: int, graph: Roadmap, model) -> ScoreReport:
    return score_planning(
        config.task, graph, model, config.n_queries, artifacts_seed,
        holdout_size=config.holdout_size, max_fallback=config.max_fallback,
    )


def _clustering_name(kind: Clustering) -> str:
    return rm._clustering_label(kind)


def run_ablation(base: PipelineConfig, spec, seeds: Sequence[int]) -> list[AblationRow]:
    """Train/build/score per configuration and seed; failures are recorded
    as rows with an error message and the sweep continues."""
    rows: list[AblationRow] = []

    def add_row(name, label, seed, config, build):
        row = AblationRow(ablation=name, label=label, seed=seed)
        try:
            model, trace, graph, tau = build()
            report = _score_artifacts(config, seed, graph, model)
            row.pct_all, row.pct_any, row.pct_trans = report.pct_all, report.pct_any, report.pct_trans
            row.tau = tau
            row.n_regions = len(graph.regions)
            row.components = graph.components
            row.n_edges = len(graph.edges)
            row.final_dm = trace.final_dm() if trace is not None else None
        except (NoRoadmapError, mapping.TrainingDivergedError, ValueError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    if isinstance(spec, CmaxSweep):
        for seed in seeds:
            dataset, model, trace = train_mapping(base, seed)
            latent = encode_dataset(model, dataset, base.task)
            for value in spec.values:
                config = replace(base, c_max=value)

                def build(config=config, model=model, trace=trace, latent=latent):
                    tau, graph = build_roadmap(config, latent)
                    return model, trace, graph, tau

                add_row("cmax", f"cmax={value}", seed, config, build)
    elif isinstance(spec, ClusteringSweep):
        for seed in seeds:
            dataset, model, trace = train_mapping(base, seed)
            latent = encode_dataset(model, dataset, base.task)
            for kind in spec.kinds:
                config = replace(base, clustering=kind)

                def build(config=config, model=model, trace=trace, latent=latent):
                    tau, graph = build_roadmap(config, latent)
                    return model, trace, graph, tau

                add_row("clustering", _clustering_name(kind), seed, config, build)
    elif isinstance(spec, DmMode):
        for mode in spec.modes:
            dynamic = mode == "dynamic"
            config = replace(base, dynamic_dm=dynamic, static_dm=0.0 if dynamic else float(mode))
            label = "dynamic" if dynamic else f"static={float(mode):g}"
            for seed in seeds:
                add_row("dm-mode", label, seed, config, lambda c=config, s=seed: _full_build(c, s))
    elif isinstance(spec, LatentDimSweep):
        for value in spec.values:
            config = replace(base, ld=value)
            for seed in seeds:
                add_row("latent-dim", f"ld={value}", seed, config, lambda c=config, s=seed: _full_build(c, s))
    elif isinstance(spec, DatasetSizeSweep):
        for value in spec.values:
            config = replace(base, n_pairs=value)
            for seed in seeds:
                add_row("dataset-size", f"pairs={value}", seed, config, lambda c=config, s=seed: _full_build(c, s))
    elif isinstance(spec, EncoderModeSweep):
        for mode, gamma in spec.entries:
            config = replace(base, mode=mode, gamma=gamma)
            label = f"{mode.value}-{'action' if gamma > 0 else 'baseline'}"
            for seed in seeds:
                add_row("encoder-mode", label, seed, config, lambda c=config, s=seed: _full_build(c, s))
    else:
        raise ValueError(f"unknown ablation spec {spec!r}")
    return rows


def _full_build(config: PipelineConfig, seed: int):
    artifacts = run_pipeline(config, seed)
    return artifacts.model, artifacts.trace, artifacts.roadmap, artifacts.tau


def summarize_rows(rows: Sequence[AblationRow]) -> list[dict]:
    """Mean +/- std per configuration label over seeds (error rows excluded)."""
    by_label: dict[tuple[str, str], list[AblationRow]] = {}
    for row in rows:
        by_label.setdefault((row.ablation, row.label), []).append(row)
    out = []
    for (ablation, label), group in by_label.items():
        ok = [r for r in group if not r.error]
        entry = {"ablation": ablation, "label": label, "n_seeds": len(group), "n_failed": len(group) - len(ok)}
        for attr in ("pct_all", "pct_any", "pct_trans"):
            vals = np.array([getattr(r, attr) for r in ok], dtype=float) if ok else np.array([])
            entry[f"{attr}_mean"] = float(vals.mean()) if vals.size else None
            entry[f"{attr}_std"] = float(vals.std()) if vals.size else None
        out.append(entry)
    return sorted(out, key=lambda e: (e["ablation"], e["label"]))
