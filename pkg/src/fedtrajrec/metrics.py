"""Segment recall/precision and network-distance errors."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import FeatureCache, recover_many
from .errors import EmptySetError, EmptyTrajectoryError, LengthMismatchError
from .roadnet import RoadNetwork
from .trajdata import MapMatchedTrajectory


@dataclass
class EvalReport:
    recall: float
    precision: float
    mae: float
    rmse: float
    n_traj: int
    n_points: int
    per_client: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "mae_m": self.mae,
                "rmse_m": self.rmse, "n_traj": self.n_traj, "n_points": self.n_points,
                "per_client": self.per_client}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["recall", "precision", "mae_m", "rmse_m", "n_traj", "n_points", "per_client"],
    "properties": {
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "mae_m": {"type": "number", "minimum": 0},
        "rmse_m": {"type": "number", "minimum": 0},
        "n_traj": {"type": "integer", "minimum": 0},
        "n_points": {"type": "integer", "minimum": 0},
        "per_client": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["client", "recall", "precision", "n_traj"],
                "properties": {"client": {"type": "integer"},
                               "recall": {"type": "number"},
                               "precision": {"type": "number"},
                               "n_traj": {"type": "integer"}},
            },
        },
    },
}


def recall_precision(pred: MapMatchedTrajectory, truth: MapMatchedTrajectory) -> tuple[float, float]:
    if len(pred) == 0 or len(truth) == 0:
        raise EmptyTrajectoryError("recall/precision need non-empty trajectories")
    p = set(pred.edges.tolist())
    g = set(truth.edges.tolist())
    hit = len(p & g)
    return hit / len(g), hit / len(p)


def point_errors(net: RoadNetwork, pred: MapMatchedTrajectory, truth: MapMatchedTrajectory) -> np.ndarray:
    """Per-point network distance; Euclidean where the network is disconnected."""
    if len(pred) != len(truth):
        raise LengthMismatchError(f"{len(pred)} predicted vs {len(truth)} true points")
    out = np.empty(len(truth))
    for j, (g, h) in enumerate(zip(truth.points, pred.points)):
        d = net.rn_distance(g, h)
        if math.isinf(d):
            (x1, y1), (x2, y2) = net.point_position(g), net.point_position(h)
            d = math.hypot(x1 - x2, y1 - y2)
        out[j] = d
    return out


def mae_rmse(net: RoadNetwork, pred: MapMatchedTrajectory, truth: MapMatchedTrajectory) -> tuple[float, float]:
    d = point_errors(net, pred, truth)
    if d.size == 0:
        raise EmptyTrajectoryError("no points to compare")
    return float(np.mean(d)), float(np.sqrt(np.mean(d * d)))


def summarize(net: RoadNetwork, per_client: list[tuple[int, list, list]]) -> EvalReport:
    """Macro-average recall/precision (trajectory, then client); pool distances.

    ``per_client`` holds (client id, predictions, truths) triples.
    """
    client_rows, dists = [], []
    n_traj = 0
    for cid, preds, truths in per_client:
        if not truths:
            continue
        rp = np.array([recall_precision(p, t) for p, t in zip(preds, truths)])
        client_rows.append({"client": int(cid), "recall": float(rp[:, 0].mean()),
                            "precision": float(rp[:, 1].mean()), "n_traj": len(truths)})
        dists += [point_errors(net, p, t) for p, t in zip(preds, truths)]
        n_traj += len(truths)
    if not client_rows:
        raise EmptySetError("no test trajectories to evaluate")
    d = np.concatenate(dists)
    return EvalReport(recall=float(np.mean([c["recall"] for c in client_rows])),
                      precision=float(np.mean([c["precision"] for c in client_rows])),
                      mae=float(d.mean()), rmse=float(np.sqrt(np.mean(d * d))),
                      n_traj=n_traj, n_points=int(d.size), per_client=client_rows)


def evaluate(model, clients, net: RoadNetwork, grid, split: str = "test", cache=None) -> EvalReport:
    """Recover every pair of ``split`` for each client and summarise."""
    cache = cache or FeatureCache(net, grid, model.cfg)
    rows = []
    for c in clients:
        pairs = getattr(c, split)
        preds = recover_many(model, [p.icp for p in pairs], net, grid, cache)
        rows.append((c.client_id, preds, [p.truth for p in pairs]))
    return summarize(net, rows)
