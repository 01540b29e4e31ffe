"""Action proposal: a learned classifier over latent pairs (APN) and the
edge-action-averaging baseline (AAB) read directly off the roadmap."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .mapping import AdamState, LatentTuple
from .roadmap import Roadmap
from .tasks import Action, BoxPush, PickPlace, RopeMove, TaskKind, unique_actions
from .planner import PlanResult


@dataclass
class ApnModel:
    input_dim: int
    hidden: int
    actions: list[Action]
    params: dict[str, np.ndarray]
    dropout: float

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(x @ self.params["w1"].T + self.params["b1"])
        return h @ self.params["w2"].T + self.params["b2"]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def action_from_logits(apn: ApnModel, logits: np.ndarray) -> Action:
    return apn.actions[int(np.argmax(logits))]


def pair_features(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(z1, dtype=float), np.asarray(z2, dtype=float)])


def train_apn_from_arrays(
    x: np.ndarray,
    y: np.ndarray,
    actions: list[Action],
    epochs: int = 500,
    dropout: float = 0.3,
    rng_seed: int = 0,
    hidden: int = 64,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    val_fraction: float = 0.15,
) -> ApnModel:
    """Cross-entropy training with hidden-layer dropout; returns the weights
    with the best validation accuracy (15% split by default)."""
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(rng_seed)
    n, dim = x.shape
    n_classes = len(actions)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    params = {
        "w1": uniform((hidden, dim), dim),
        "b1": uniform((hidden,), dim),
        "w2": uniform((n_classes, hidden), hidden),
        "b2": uniform((n_classes,), hidden),
    }
    model = ApnModel(input_dim=dim, hidden=hidden, actions=list(actions), params=params, dropout=dropout)

    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx, val_idx = order, order[:0]

    best_params = {k: v.copy() for k, v in params.items()}
    best_val = -1.0
    keep = 1.0 - dropout
    optimizer = AdamState(params, learning_rate)

    for _ in range(epochs):
        epoch_order = rng.permutation(train_idx)
        for start in range(0, epoch_order.size, batch_size):
            idx = epoch_order[start: start + batch_size]
            xb, yb = x[idx], y[idx]
            h = np.tanh(xb @ params["w1"].T + params["b1"])
            if dropout > 0.0:
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            logits = h @ params["w2"].T + params["b2"]
            probs = softmax(logits)
            dlogits = probs.copy()
            dlogits[np.arange(len(idx)), yb] -= 1.0
            dlogits /= len(idx)
            gw2 = dlogits.T @ h
            gb2 = dlogits.sum(axis=0)
            dh = dlogits @ params["w2"]
            if dropout > 0.0:
                dh = dh * mask
            dpre = dh * (1.0 - h * h)
            gw1 = dpre.T @ xb
            gb1 = dpre.sum(axis=0)
            optimizer.step(params, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2})

        if val_idx.size:
            val_logits = model.logits(x[val_idx])
            val_acc = float(np.mean(np.argmax(val_logits, axis=1) == y[val_idx]))
            if val_acc > best_val:
                best_val = val_acc
                best_params = {k: v.copy() for k, v in params.items()}

    if val_idx.size:
        model.params = best_params
    return model


def train_apn(
    latent_tuples: Sequence[LatentTuple],
    task: TaskKind,
    epochs: int = 500,
    dropout: float = 0.3,
    rng_seed: int = 0,
    **kwargs,
) -> ApnModel:
    """Train the APN on latent action tuples (means plus sampled augmentations)."""
    if not latent_tuples:
        raise ValueError("cannot train on an empty dataset")
    actions = unique_actions(task)
    index = {a: i for i, a in enumerate(actions)}
    x = np.stack([pair_features(t.z1, t.z2) for t in latent_tuples])
    y = np.array([index[t.u] for t in latent_tuples])
    return train_apn_from_arrays(x, y, actions, epochs=epochs, dropout=dropout, rng_seed=rng_seed, **kwargs)


def propose(apn: ApnModel, z1: np.ndarray, z2: np.ndarray) -> Action:
    """Deterministic argmax proposal; dropout is a training-time device only."""
    feats = pair_features(z1, z2)
    if feats.shape != (apn.input_dim,):
        raise ValueError(f"pair dimension {feats.shape} does not match APN input ({apn.input_dim},)")
    return action_from_logits(apn, apn.logits(feats[None, :])[0])


# ---------------------------------------------------------------------------
# action averaging baseline
# ---------------------------------------------------------------------------

_KIND_ORDER = {PickPlace: 0, BoxPush: 1, RopeMove: 2}


def _majority(values) -> object:
    counts = Counter(values)
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def _resolve_actions(actions: list[Action]) -> Action:
    kind = min(Counter(type(a) for a in actions).items(), key=lambda kv: (-kv[1], _KIND_ORDER[kv[0]]))[0]
    of_kind = [a for a in actions if type(a) is kind]
    if kind is RopeMove:
        return RopeMove()
    pick = _majority(a.pick for a in of_kind)
    release = _majority(a.release for a in of_kind)
    try:
        return kind(pick=pick, release=release)
    except ValueError:
        # field-wise vote composed an invalid action; fall back to whole-action vote
        return _majority(of_kind)


def aab_annotate(roadmap: Roadmap) -> dict[tuple[int, int], Action]:
    """One action per edge: field-wise majority vote over the edge's multiset
    (discrete pick/release coordinates; ties resolved toward lower values)."""
    annotations = {}
    for edge in roadmap.edges:
        if not edge.actions:
            raise ValueError(f"roadmap edge ({edge.src}, {edge.dst}) carries no actions")
        annotations[(edge.src, edge.dst)] = _resolve_actions(edge.actions)
    return annotations


class MissingAnnotationError(KeyError):
    pass


ActionSource = Union[ApnModel, Mapping[tuple[int, int], Action]]


def fill_action_plan(plan_result: PlanResult, source: ActionSource) -> PlanResult:
    """Attach one action per consecutive node pair (|P_u| = |P_z| - 1)."""
    if not plan_result.node_ids:
        raise ValueError("plan has no nodes")
    actions = []
    for (i, j), (z1, z2) in zip(
        zip(plan_result.node_ids, plan_result.node_ids[1:]),
        zip(plan_result.latent_plan, plan_result.latent_plan[1:]),
    ):
        if isinstance(source, ApnModel):
            actions.append(propose(source, z1, z2))
        else:
            try:
                actions.append(source[(i, j)])
            except KeyError:
                raise MissingAnnotationError(f"no AAB annotation for traversed edge ({i}, {j})") from None
    plan_result.action_plan = actions
    return plan_result
