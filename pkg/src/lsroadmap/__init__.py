"""Latent space roadmaps for visual action planning on simulated manipulation tasks."""

__version__ = "0.1.0"

from .metrics import Metric
from .tasks import (
    Action,
    BoxPush,
    DatasetTuple,
    Observation,
    PickPlace,
    RopeBoxState,
    RopeMove,
    StackState,
    TaskKind,
    decode_state,
    enumerate_states,
    generate_dataset,
    is_valid_transition,
    render,
    unique_actions,
    valid_actions,
)
from .mapping import (
    EncoderMode,
    EncoderModel,
    IdentityModel,
    LatentPoint,
    LatentTuple,
    LossConfig,
    action_loss,
    augment_apn_dataset,
    decode,
    encode,
    total_loss,
    train,
)
from .roadmap import (
    Clustering,
    Dendrogram,
    EpsilonClustering,
    Linkage,
    Roadmap,
    agglomerate,
    build_lsr,
    build_reference_graph,
    cut,
    epsilon_of_cluster,
    is_covered,
    optimize_tau,
    psi,
)
from .planner import PlanResult, all_shortest_paths, nearest_node, plan
from .apm import ApnModel, aab_annotate, fill_action_plan, propose, train_apn
from .evaluate import (
    PipelineConfig,
    ScoreReport,
    relative_contrast,
    run_ablation,
    run_pipeline,
    score_coverage,
    score_planning,
    separation_stats,
)
