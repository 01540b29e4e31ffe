"""File formats: line-delimited dataset/latent files, JSON model/roadmap/plan
containers, CSV metrics, and run manifests with content hashes.

Feature vectors and weights are written as decimal text rounded to nine
significant digits; all writers are deterministic so reports are
byte-identical across repeated runs with identical inputs.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .apm import ApnModel
from .mapping import EncoderMode, EncoderModel, LatentTuple, LossConfig
from .metrics import Metric
from .roadmap import CoveredRegion, Roadmap, RoadmapEdge
from .tasks import (
    Action,
    BoxPush,
    DatasetTuple,
    DEFORM_NOISE,
    HS_BLEND,
    LIGHTING_NOISE,
    Observation,
    OFFSET_NOISE,
    PickPlace,
    RopeMove,
    TaskKind,
    TEMPLATE_CONTRAST,
    enumerate_states,
    observation_dim,
    rope_box_state_note,
)


class StorageError(RuntimeError):
    pass


def _round9(value: float) -> float:
    return float(f"{float(value):.9g}")


def _vector(values) -> list[float]:
    return [_round9(v) for v in np.asarray(values, dtype=float).ravel()]


def _matrix(values) -> list[list[float]]:
    return [_vector(row) for row in np.asarray(values, dtype=float)]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------

def action_to_dict(action: Optional[Action]) -> Optional[dict]:
    if action is None:
        return None
    if isinstance(action, PickPlace):
        return {"kind": "pick_place", "pick": list(action.pick), "release": list(action.release)}
    if isinstance(action, BoxPush):
        return {"kind": "box_push", "pick": list(action.pick), "release": list(action.release)}
    if isinstance(action, RopeMove):
        return {"kind": "rope_move"}
    raise StorageError(f"unknown action {action!r}")


def action_from_dict(data: Optional[dict]) -> Optional[Action]:
    if data is None:
        return None
    kind = data.get("kind")
    if kind == "pick_place":
        return PickPlace(pick=tuple(data["pick"]), release=tuple(data["release"]))
    if kind == "box_push":
        return BoxPush(pick=tuple(data["pick"]), release=tuple(data["release"]))
    if kind == "rope_move":
        return RopeMove()
    raise StorageError(f"unknown action kind {kind!r}")


# ---------------------------------------------------------------------------
# dataset files (line-delimited: header line + one record per tuple)
# ---------------------------------------------------------------------------

def dataset_header(task: TaskKind, seed: int, n_pairs: int, action_fraction: float) -> dict:
    header = {
        "format": "lsr-dataset",
        "version": 1,
        "task": task.value,
        "dim": observation_dim(task),
        "n_pairs": n_pairs,
        "action_fraction": action_fraction,
        "seed": seed,
        "n_states": len(enumerate_states(task)),
        "noise": {
            "offset": OFFSET_NOISE,
            "lighting": LIGHTING_NOISE,
            "deform": DEFORM_NOISE,
            "hs_blend": HS_BLEND,
            "template_contrast": TEMPLATE_CONTRAST,
        },
    }
    if task is TaskKind.ROPE_BOX:
        header["state_count_note"] = rope_box_state_note()
    return header


def save_dataset(dataset: Sequence[DatasetTuple], task: TaskKind, seed: int, action_fraction: float, path) -> None:
    from .tasks import state_index

    lines = [json.dumps(dataset_header(task, seed, len(dataset), action_fraction), sort_keys=True)]
    for t in dataset:
        record = {
            "s1": state_index(task, t.obs1.state),
            "s2": state_index(task, t.obs2.state),
            "a": t.a,
            "u": action_to_dict(t.u),
            "o1": _vector(t.obs1.features),
            "o2": _vector(t.obs2.features),
        }
        lines.append(json.dumps(record, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[TaskKind, dict, list[DatasetTuple]]:
    try:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != "lsr-dataset":
            raise StorageError(f"{path}: not a dataset file")
        task = TaskKind.parse(header["task"])
        states = enumerate_states(task)
        out = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                DatasetTuple(
                    obs1=Observation(np.array(rec["o1"]), states[rec["s1"]]),
                    obs2=Observation(np.array(rec["o2"]), states[rec["s2"]]),
                    a=int(rec["a"]),
                    u=action_from_dict(rec["u"]),
                )
            )
        return task, header, out
    except StorageError:
        raise
    except Exception as exc:
        raise StorageError(f"failed to read dataset file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def save_model(model: EncoderModel, path, cfg: Optional[LossConfig] = None,
               final_dm: Optional[float] = None, seed: Optional[int] = None,
               task: Optional[TaskKind] = None) -> None:
    payload = {
        "format": "lsr-model",
        "version": 1,
        "mode": model.mode.value,
        "dim": model.dim,
        "ld": model.ld,
        "hidden": model.hidden,
        "task": task.value if task else None,
        "seed": seed,
        "final_dm": _round9(final_dm) if final_dm is not None else None,
        "loss_config": _loss_config_dict(cfg) if cfg else None,
        "weights": {k: _matrix(v) if v.ndim == 2 else _vector(v) for k, v in model.params.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def _loss_config_dict(cfg: LossConfig) -> dict:
    data = asdict(cfg)
    data["metric"] = cfg.metric.value
    return data


def load_model(path) -> tuple[EncoderModel, dict]:
    try:
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "lsr-model":
            raise StorageError(f"{path}: not a model file")
        params = {}
        for key, value in payload["weights"].items():
            arr = np.array(value, dtype=float)
            params[key] = arr
        model = EncoderModel(
            mode=EncoderMode.parse(payload["mode"]),
            dim=int(payload["dim"]),
            ld=int(payload["ld"]),
            hidden=int(payload["hidden"]),
            params=params,
        )
        return model, payload
    except StorageError:
        raise
    except Exception as exc:
        raise StorageError(f"failed to read model file {path}: {exc}") from exc


def save_apn(apn: ApnModel, path, task: Optional[TaskKind] = None, seed: Optional[int] = None) -> None:
    payload = {
        "format": "lsr-apn",
        "version": 1,
        "input_dim": apn.input_dim,
        "hidden": apn.hidden,
        "dropout": apn.dropout,
        "task": task.value if task else None,
        "seed": seed,
        "actions": [action_to_dict(a) for a in apn.actions],
        "weights": {k: _matrix(v) if v.ndim == 2 else _vector(v) for k, v in apn.params.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_apn(path) -> tuple[ApnModel, dict]:
    try:
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "lsr-apn":
            raise StorageError(f"{path}: not an APN model file")
        apn = ApnModel(
            input_dim=int(payload["input_dim"]),
            hidden=int(payload["hidden"]),
            actions=[action_from_dict(a) for a in payload["actions"]],
            params={k: np.array(v, dtype=float) for k, v in payload["weights"].items()},
            dropout=float(payload["dropout"]),
        )
        return apn, payload
    except StorageError:
        raise
    except Exception as exc:
        raise StorageError(f"failed to read APN file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# latent dataset files
# ---------------------------------------------------------------------------

def save_latent(latent: Sequence[LatentTuple], task: TaskKind, ld: int, path,
                model_hash: Optional[str] = None) -> None:
    header = {
        "format": "lsr-latent",
        "version": 1,
        "task": task.value,
        "ld": ld,
        "n": len(latent),
        "model_hash": model_hash,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for t in latent:
        lines.append(
            json.dumps(
                {
                    "z1": _vector(t.z1), "z2": _vector(t.z2), "a": t.a,
                    "u": action_to_dict(t.u), "s1": t.s1, "s2": t.s2,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_latent(path) -> tuple[TaskKind, dict, list[LatentTuple]]:
    try:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != "lsr-latent":
            raise StorageError(f"{path}: not a latent dataset file")
        task = TaskKind.parse(header["task"])
        out = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                LatentTuple(
                    z1=np.array(rec["z1"]), z2=np.array(rec["z2"]), a=int(rec["a"]),
                    u=action_from_dict(rec["u"]), s1=rec["s1"], s2=rec["s2"],
                )
            )
        return task, header, out
    except StorageError:
        raise
    except Exception as exc:
        raise StorageError(f"failed to read latent file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# roadmap files
# ---------------------------------------------------------------------------

def save_roadmap(graph: Roadmap, path, task: Optional[TaskKind] = None,
                 dataset_hash: Optional[str] = None,
                 aab: Optional[dict] = None) -> None:
    payload = {
        "format": "lsr-roadmap",
        "version": 1,
        "task": task.value if task else None,
        "metric": graph.metric.value,
        "tau": _round9(graph.tau),
        "clustering": graph.clustering,
        "components": graph.components,
        "dataset_hash": dataset_hash,
        "points": _matrix(graph.points),
        "provenance": list(graph.provenance),
        "regions": [
            {
                "members": r.members,
                "mu": _round9(r.mu),
                "sigma": _round9(r.sigma),
                "epsilon": _round9(r.epsilon),
                "representative": r.representative,
                "mean": _vector(r.mean),
            }
            for r in graph.regions
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "actions": [action_to_dict(a) for a in e.actions]}
            for e in graph.edges
        ],
        "aab": {f"{i},{j}": action_to_dict(a) for (i, j), a in sorted(aab.items())} if aab else None,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_roadmap(path) -> tuple[Roadmap, dict]:
    try:
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "lsr-roadmap":
            raise StorageError(f"{path}: not a roadmap file")
        points = np.array(payload["points"], dtype=float)
        regions = [
            CoveredRegion(
                members=list(r["members"]),
                mu=r["mu"],
                sigma=r["sigma"],
                epsilon=r["epsilon"],
                representative=r["representative"],
                mean=np.array(r["mean"], dtype=float),
            )
            for r in payload["regions"]
        ]
        edges = [
            RoadmapEdge(src=e["src"], dst=e["dst"], actions=[action_from_dict(a) for a in e["actions"]])
            for e in payload["edges"]
        ]
        region_of = np.empty(points.shape[0], dtype=int)
        for idx, region in enumerate(regions):
            region_of[region.members] = idx
        graph = Roadmap(
            points=points,
            regions=regions,
            edges=edges,
            metric=Metric.parse(payload["metric"]),
            tau=payload["tau"],
            clustering=payload["clustering"],
            components=payload["components"],
            region_of=region_of,
            provenance=list(payload["provenance"]),
        )
        return graph, payload
    except StorageError:
        raise
    except Exception as exc:
        raise StorageError(f"failed to read roadmap file {path}: {exc}") from exc


def load_aab(payload: dict) -> dict:
    aab = payload.get("aab")
    if not aab:
        raise StorageError("roadmap file carries no AAB annotations")
    out = {}
    for key, action in aab.items():
        i, j = key.split(",")
        out[(int(i), int(j))] = action_from_dict(action)
    return out


# ---------------------------------------------------------------------------
# plans, metrics, manifests
# ---------------------------------------------------------------------------

def save_plans(plans, task: TaskKind, path) -> None:
    from .tasks import decode_state, state_index

    payload = {
        "format": "lsr-plan",
        "version": 1,
        "task": task.value,
        "plans": [
            {
                "nodes": p.node_ids,
                "state_ids": [state_index(task, decode_state(task, obs)) for obs in p.decoded_plan],
                "actions": [action_to_dict(a) for a in p.action_plan],
                "fallback_depth": p.fallback_depth,
                "truncated": p.truncated,
            }
            for p in plans
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def write_rows_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_manifest(out_path, command: str, args: dict, inputs: Sequence[str], outputs: Sequence[str]) -> str:
    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items())},
        "package_version": __version__,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path = str(out_path) + ".manifest.json"
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return path
