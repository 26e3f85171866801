"""Synchronous federated training: cyclic teacher pre-training, distilled
local training with the dynamic lambda schedule, and client-sampled
parameter averaging."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .errors import (ConfigError, EmptyListError, EmptySetError, EmptyTeacherSubsetError,
                     EmptyTrainSplitError, LayoutMismatchError, OutOfRangeAccuracyError)
from .metrics import recall_precision
from .model import Batch, FeatureCache, LteModel, recover_many
from .roadnet import GridSpec, RoadNetwork

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4


@dataclass
class FedConfig:
    rounds: int = 10
    clients: int = 20
    fraction: float = 1.0
    local_epochs: int = 50
    lambda0: float = 5.0
    l_t: float = 0.4
    teacher_cycles: int = 2
    teacher_fraction: float = 0.2
    teacher_epochs: int | None = None
    early_stop_delta: float = 0.005
    batch_size: int = 8
    lr: float = 0.001
    clip: float = 5.0
    adam: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.clients < 1 or self.local_epochs < 0 or self.teacher_cycles < 1:
            raise ConfigError("rounds >= 0, clients >= 1, local_epochs >= 0, teacher_cycles >= 1 required")
        if not 0 < self.fraction <= 1:
            raise ConfigError("client fraction must be in (0, 1]")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be non-negative")
        if not 0 <= self.l_t <= 1:
            raise ConfigError("l_t must be in [0, 1]")
        if not 0 < self.teacher_fraction <= 1:
            raise ConfigError("teacher fraction must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown fed config key {bad[0]!r}")
        return cls(**d)


@dataclass
class FedEnv:
    """Shared, read-only context of one simulation."""

    net: RoadNetwork
    grid: GridSpec
    model_cfg: object
    fed: FedConfig
    cache: FeatureCache = None

    def __post_init__(self):
        if self.cache is None:
            self.cache = FeatureCache(self.net, self.grid, self.model_cfg)

    def new_model(self, seed: int | None = None) -> LteModel:
        return LteModel(self.model_cfg, self.fed.seed if seed is None else seed)

    def optimizer(self) -> dc.OptimizerState:
        return dc.OptimizerState(lr=self.fed.lr, clip=self.fed.clip, adam=self.fed.adam)


@dataclass
class ClientState:
    client_id: int
    data: object              # ClientDataset
    model: LteModel
    opt: dc.OptimizerState
    teacher: LteModel | None = None


@dataclass
class RoundRecord:
    round: int
    sampled: list
    acc_before: dict = field(default_factory=dict)
    acc_after: dict = field(default_factory=dict)
    lambdas: dict = field(default_factory=dict)
    global_recall: float = float("nan")
    bytes: int = 0

    @property
    def mean_lambda(self) -> float:
        vals = [v for vs in self.lambdas.values() for v in vs]
        return float(np.mean(vals)) if vals else 0.0


def sub_seed(seed: int, *labels) -> int:
    """Deterministic child seed for a labelled purpose."""
    digest = hashlib.sha256(repr((int(seed),) + labels).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def update_lambda(acc_tea: float, acc_stu: float, l_t: float, lambda0: float) -> float:
    for a in (acc_tea, acc_stu):
        if not 0.0 <= a <= 1.0:
            raise OutOfRangeAccuracyError(f"accuracy {a} outside [0, 1]")
    if acc_tea <= acc_stu and acc_stu < l_t:
        return 0.0
    return lambda0 * 10.0 ** (min(1.0, (acc_tea - acc_stu) * 5.0) - 1.0)


def validation_accuracy(model: LteModel, pairs, env: FedEnv) -> float:
    """Mean per-trajectory segment recall of free-running recovery."""
    if not pairs:
        raise EmptySetError("validation set is empty")
    preds = recover_many(model, [p.icp for p in pairs], env.net, env.grid, env.cache)
    return float(np.mean([recall_precision(p, t.truth)[0] for p, t in zip(preds, pairs)]))


def _eval_split(data):
    # tiny clients can end up without a validation split
    return data.valid if data.valid else data.train


def train_epoch(model: LteModel, pairs, env: FedEnv, opt: dc.OptimizerState, rng,
                lam: float = 0.0, teacher: LteModel | None = None) -> float:
    """One pass of seeded mini-batch descent on the total loss; returns mean loss."""
    order = rng.permutation(len(pairs))
    bs = env.fed.batch_size
    total, n = 0.0, 0
    for start in range(0, len(pairs), bs):
        batch = Batch([env.cache.get(pairs[i]) for i in order[start:start + bs]], model.dtype)
        t_out = teacher.teacher_outputs(batch) if (lam > 0 and teacher is not None) else None
        loss, grad, _ = model.loss_and_grad(batch, lam=lam if t_out is not None else 0.0,
                                            teacher_out=t_out, rng=rng)
        opt.apply(model.params.flat, grad)
        total += loss
        n += 1
    return total / max(n, 1)


def aggregate(params: list) -> dc.ParameterVector:
    """Unweighted element-wise mean, accumulated in 64-bit."""
    if not params:
        raise EmptyListError("nothing to aggregate")
    layout = params[0].layout
    # seed with the first vector so identical inputs keep their signed zeros
    acc = params[0].values.astype(np.float64)
    for pv in params[1:]:
        if pv.layout != layout:
            raise LayoutMismatchError("client parameter layouts differ")
        acc += pv.values
    return dc.ParameterVector(acc / len(params), layout)


def sample_clients(n: int, fraction: float, seed: int, round_index: int) -> list[int]:
    if not 0 < fraction <= 1:
        raise ConfigError("client fraction must be in (0, 1]")
    k = max(1, int(math.floor(fraction * n + 0.5)))
    rng = np.random.default_rng(sub_seed(seed, "sample", round_index))
    return sorted(int(i) for i in rng.choice(n, size=min(k, n), replace=False))


def comm_cost(param_count: int, participants: int, rounds: int) -> int:
    """Bytes moved: download plus upload of float32 parameters."""
    return rounds * participants * param_count * BYTES_PER_PARAM * 2


def global_recall(model: LteModel, clients, env: FedEnv) -> float:
    return float(np.mean([validation_accuracy(model, _eval_split(c), env) for c in clients]))


# --------------------------------------------------------------------------
# teacher pre-training
# --------------------------------------------------------------------------

def teacher_subset(data, fraction: float, seed: int) -> list:
    if not data.train:
        raise EmptyTeacherSubsetError(f"client {data.client_id} has no training data")
    n = max(1, math.ceil(fraction * len(data.train)))
    idx = np.random.default_rng(sub_seed(seed, "teacher-subset", data.client_id)).permutation(len(data.train))[:n]
    return [data.train[i] for i in sorted(idx)]


def train_teacher(clients, env: FedEnv, init: dc.ParameterVector | None = None):
    """Cyclic teacher training; returns (teacher params, per-visit log).

    One model travels C_1..C_N for up to ``teacher_cycles`` passes. On each
    visit after the very first, if the incoming model reaches ``l_t`` on the
    client's validation data it is frozen as a distillation reference and
    the client trains against it with the dynamic lambda; otherwise the
    reference is dropped and the client trains on its local loss alone.
    """
    fed = env.fed
    epochs = fed.teacher_epochs if fed.teacher_epochs is not None else fed.local_epochs
    model = env.new_model(sub_seed(fed.seed, "init"))
    if init is not None:
        model.load(init)
    subsets = [teacher_subset(c, fed.teacher_fraction, fed.seed) for c in clients]
    opt = env.optimizer()
    visits = []
    prev_mean = None
    first = True
    for cycle in range(fed.teacher_cycles):
        for i, c in enumerate(clients):
            rng = np.random.default_rng(sub_seed(fed.seed, "teacher", cycle, c.client_id))
            ref = None
            acc_in = None
            if not first:
                acc_in = validation_accuracy(model, _eval_split(c), env)
                if acc_in >= fed.l_t:
                    ref = model.copy()
            first = False
            lams = []
            for _ in range(epochs):
                lam = 0.0
                if ref is not None:
                    lam = update_lambda(acc_in, validation_accuracy(model, _eval_split(c), env),
                                        fed.l_t, fed.lambda0)
                lams.append(lam)
                train_epoch(model, subsets[i], env, opt, rng, lam=lam, teacher=ref)
            visits.append({"cycle": cycle, "client": c.client_id, "acc_in": acc_in,
                           "preserved": ref is not None, "lambdas": lams})
        mean_acc = global_recall(model, clients, env)
        log.info("teacher cycle %d: mean validation recall %.4f", cycle, mean_acc)
        if prev_mean is not None and mean_acc - prev_mean < fed.early_stop_delta:
            break
        prev_mean = mean_acc
    return model.flatten(), visits


# --------------------------------------------------------------------------
# local training and rounds
# --------------------------------------------------------------------------

def local_train(client: ClientState, global_params: dc.ParameterVector, env: FedEnv,
                round_index: int = 0):
    """Distilled local training; returns (params, record fragment)."""
    fed = env.fed
    data = client.data
    if not data.train:
        raise EmptyTrainSplitError(f"client {client.client_id} has no training data")
    model = client.model
    if global_params.layout != model.layout:
        raise LayoutMismatchError("global parameters do not fit the client model")
    model.load(global_params)
    rng = np.random.default_rng(sub_seed(fed.seed, "local", round_index, client.client_id))
    valid = _eval_split(data)
    guided = client.teacher is not None and fed.lambda0 > 0
    acc_tea = validation_accuracy(client.teacher, valid, env) if guided else None
    lams = []
    before = None
    for _ in range(fed.local_epochs):
        lam = 0.0
        if guided:
            acc_stu = validation_accuracy(model, valid, env)
            before = acc_stu if before is None else before
            lam = update_lambda(acc_tea, acc_stu, fed.l_t, fed.lambda0)
        lams.append(lam)
        train_epoch(model, data.train, env, client.opt, rng, lam=lam, teacher=client.teacher)
    frag = {"lambdas": lams, "acc_before": before}
    return model.flatten(), frag


def make_clients(datasets, env: FedEnv, teacher_params: dc.ParameterVector | None = None) -> list[ClientState]:
    teacher = None
    if teacher_params is not None:
        teacher = env.new_model()
        teacher.load(teacher_params)
    return [ClientState(d.client_id, d, env.new_model(), env.optimizer(), teacher) for d in datasets]


def run_rounds(clients: list[ClientState], env: FedEnv, init: dc.ParameterVector | None = None,
               start_round: int = 1, workers: int = 1, track_recall: bool = True):
    """Federated rounds; returns (final global params, list of RoundRecord)."""
    fed = env.fed
    if init is None:
        init = env.new_model(sub_seed(fed.seed, "init")).flatten()
    theta = init
    for c in clients:
        if c.model.layout != theta.layout:
            raise LayoutMismatchError(f"client {c.client_id} model layout differs")
    probe = env.new_model()
    records = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(start_round, start_round + fed.rounds):
            ids = sample_clients(len(clients), fed.fraction, fed.seed, r)
            chosen = [clients[i] for i in ids]
            if pool is None:
                results = [local_train(c, theta, env, r) for c in chosen]
            else:
                futures = [pool.submit(local_train, c, theta, env, r) for c in chosen]
                results = [f.result() for f in futures]
            theta = aggregate([p for p, _ in results])
            rec = RoundRecord(r, ids, bytes=comm_cost(theta.layout.size, len(ids), 1))
            for c, (_, frag) in zip(chosen, results):
                rec.lambdas[c.client_id] = frag["lambdas"]
                if frag["acc_before"] is not None:
                    rec.acc_before[c.client_id] = frag["acc_before"]
            if track_recall:
                probe.load(theta)
                rec.global_recall = global_recall(probe, [c.data for c in clients], env)
            log.info("round %d: clients %s recall %.4f", r, ids, rec.global_recall)
            records.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return theta, records


TELEMETRY_HEADER = ["round", "sampled_ids", "mean_lambda", "global_recall", "bytes"]


def write_telemetry(path, records, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(TELEMETRY_HEADER)
        for rec in records:
            w.writerow([rec.round, ";".join(map(str, rec.sampled)), repr(rec.mean_lambda),
                        repr(rec.global_recall), rec.bytes])


def read_telemetry(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
