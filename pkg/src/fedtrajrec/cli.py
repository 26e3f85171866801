"""Command-line entry point: gen-data, train, evaluate, recover."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import CheckpointError, ConfigError, FedTrajError
from .fedsim import (FedConfig, FedEnv, make_clients, run_rounds, sub_seed, train_teacher,
                     write_telemetry)
from .metrics import evaluate
from .model import LteConfig, LteModel, recover_many
from .roadnet import GridSpec, RoadNetwork, generate_grid_network
from .trajdata import (ClientDataset, TrajPair, generate_synthetic_trajectories, make_pairs,
                       partition_clients, read_incomplete_csv, read_matched_csv, write_matched_csv)

log = logging.getLogger("fedtrajrec")

SPLITS = ("train", "valid", "test")
DERIVED_MODEL_KEYS = {"n_edges", "grid_cols", "grid_rows", "max_tid"}


@dataclass
class DataConfig:
    rows: int = 8
    cols: int = 8
    spacing: float = 100.0
    cell_size: float = 50.0
    count: int = 300
    length: int = 30
    epsilon: float = 15.0
    keep_ratio: float = 0.125
    partition: str = "iid"
    split: list = field(default_factory=lambda: [0.7, 0.2, 0.1])

    def __post_init__(self):
        if not 0 < self.keep_ratio <= 1:
            raise ConfigError("keep_ratio must be in (0, 1]")
        if self.partition not in ("iid", "spatial"):
            raise ConfigError(f"partition must be 'iid' or 'spatial', got {self.partition!r}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    fed: FedConfig = field(default_factory=FedConfig)
    seed: int = 0
    out: str = "run"

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "model": dict(self.model), "fed": asdict(self.fed),
                "seed": self.seed, "out": self.out}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = sorted(set(d) - {"data", "model", "fed", "seed", "out"})
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        data_keys = {f.name for f in fields(DataConfig)}
        for k in d.get("data", {}):
            if k not in data_keys:
                raise ConfigError(f"unknown config key 'data.{k}'")
        model_keys = {f.name for f in fields(LteConfig)} - DERIVED_MODEL_KEYS
        for k in d.get("model", {}):
            if k not in model_keys:
                raise ConfigError(f"unknown config key 'model.{k}'")
        fed_keys = {f.name for f in fields(FedConfig)}
        for k in d.get("fed", {}):
            if k not in fed_keys:
                raise ConfigError(f"unknown config key 'fed.{k}'")
        seed = int(d.get("seed", 0))
        fed = dict(d.get("fed", {}))
        fed["seed"] = seed
        return cls(DataConfig(**d.get("data", {})), dict(d.get("model", {})), FedConfig(**fed),
                   seed, str(d.get("out", "run")))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args, overrides: list[str]) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    if len(overrides) % 2:
        raise ConfigError(f"override {overrides[-1]!r} has no value")
    for flag, value in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--") or "." not in flag:
            raise ConfigError(f"unrecognised argument {flag!r}")
        section, key = flag[2:].split(".", 1)
        if section not in ("data", "model", "fed"):
            raise ConfigError(f"unknown config key {section!r}")
        raw.setdefault(section, {})[key.replace("-", "_")] = _parse_value(value)
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None):
        raw["out"] = args.out
    for name in ("keep_ratio", "partition"):
        if getattr(args, name, None) is not None:
            raw.setdefault("data", {})[name] = getattr(args, name)
    if getattr(args, "clients", None) is not None:
        raw.setdefault("fed", {})["clients"] = args.clients
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "data"


def build_grid(net: RoadNetwork, cfg: ExperimentConfig) -> GridSpec:
    return GridSpec.covering(net, cfg.data.cell_size)


def model_config(net: RoadNetwork, grid: GridSpec, cfg: ExperimentConfig) -> LteConfig:
    return LteConfig.for_network(net, grid, cfg.data.length, **cfg.model)


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    d = cfg.data
    out = data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    net = generate_grid_network(d.rows, d.cols, d.spacing, sub_seed(cfg.seed, "network"))
    trajs = generate_synthetic_trajectories(net, d.count, d.length, d.epsilon,
                                            sub_seed(cfg.seed, "trajectories"))
    pairs = make_pairs(trajs, d.keep_ratio, sub_seed(cfg.seed, "downsample"))
    clients = partition_clients(pairs, cfg.fed.clients, d.partition, sub_seed(cfg.seed, "partition"),
                                net=net, ratios=tuple(d.split))
    net.save(out / "network.json")
    manifest = {"network": "network.json", "epsilon": d.epsilon, "max_steps": d.length,
                "grid": build_grid(net, cfg).to_dict(), "clients": []}
    for c in clients:
        entry = {"id": c.client_id}
        for split in SPLITS:
            pairs_s = getattr(c, split)
            truth, obs = f"client{c.client_id}_{split}_truth.csv", f"client{c.client_id}_{split}_obs.csv"
            write_matched_csv(out / truth, [p.truth for p in pairs_s])
            write_matched_csv(out / obs, [p.icp for p in pairs_s])
            entry[split] = {"truth": truth, "observed": obs, "count": len(pairs_s)}
        manifest["clients"].append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(root: Path):
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"no dataset manifest in {root}; run gen-data first") from None
    net = RoadNetwork.load(root / manifest["network"])
    eps = float(manifest["epsilon"])
    clients = []
    for entry in manifest["clients"]:
        ds = ClientDataset(int(entry["id"]))
        for split in SPLITS:
            truths = read_matched_csv(root / entry[split]["truth"], eps)
            icps = read_incomplete_csv(root / entry[split]["observed"], eps)
            setattr(ds, split, [TrajPair(i, t) for i, t in zip(icps, truths)])
        clients.append(ds)
    return net, GridSpec.from_dict(manifest["grid"]), clients


# --------------------------------------------------------------------------
# training / evaluation / recovery
# --------------------------------------------------------------------------

def _read_ckpt(path) -> dc.ParameterVector:
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return dc.read_checkpoint(path)


def cmd_train(cfg: ExperimentConfig, workers: int = 1, resume: bool = False) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    net, grid, datasets = load_dataset(data_dir(cfg))
    if len(datasets) != cfg.fed.clients:
        raise ConfigError(f"dataset has {len(datasets)} clients but fed.clients = {cfg.fed.clients}")
    mcfg = model_config(net, grid, cfg)
    env = FedEnv(net, grid, mcfg, cfg.fed)
    (out / "model.json").write_text(json.dumps(mcfg.to_dict(), indent=2, sort_keys=True))
    state_path = out / "train_state.json"
    start, init, teacher = 1, None, None
    if resume:
        if not state_path.exists():
            raise CheckpointError(f"nothing to resume in {out}")
        state = json.loads(state_path.read_text())
        start = int(state["last_round"]) + 1
        init = _read_ckpt(out / "global.ckpt")
        if state.get("teacher"):
            teacher = _read_ckpt(out / "teacher.ckpt")
    else:
        if cfg.fed.lambda0 > 0:
            teacher, _ = train_teacher(datasets, env)
            dc.write_checkpoint(out / "teacher.ckpt", teacher)
        state = {"last_round": 0, "teacher": teacher is not None}
    if cfg.fed.rounds == 0:
        state_path.write_text(json.dumps(state))
        return out
    clients = make_clients(datasets, env, teacher)
    theta, records = run_rounds(clients, env, init=init, start_round=start, workers=workers)
    dc.write_checkpoint(out / "global.ckpt", theta)
    write_telemetry(out / "rounds.csv", records, append=resume and (out / "rounds.csv").exists())
    state["last_round"] = records[-1].round
    state_path.write_text(json.dumps(state))
    return out


def _load_model(cfg: ExperimentConfig, net, grid, checkpoint) -> LteModel:
    m = LteModel(model_config(net, grid, cfg), 0)
    m.load(_read_ckpt(checkpoint))
    return m


def cmd_evaluate(cfg: ExperimentConfig, checkpoint) -> dict:
    net, grid, datasets = load_dataset(data_dir(cfg))
    m = _load_model(cfg, net, grid, checkpoint)
    report = evaluate(m, datasets, net, grid).to_json_dict()
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _traj_ids(path) -> list[str]:
    seen: dict[str, None] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                seen.setdefault(row[0], None)
    return list(seen)


RECOVER_HEADER = ["traj_id", "t", "x", "y", "edge", "r", "observed"]


def cmd_recover(cfg: ExperimentConfig, checkpoint, input_csv, output_csv) -> int:
    net, grid, _ = load_dataset(data_dir(cfg))
    m = _load_model(cfg, net, grid, checkpoint)
    icps = read_incomplete_csv(input_csv, cfg.data.epsilon)
    ids = _traj_ids(input_csv)
    recovered = recover_many(m, icps, net, grid)
    rows = 0
    with open(output_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECOVER_HEADER)
        for tid, icp, rec in zip(ids, icps, recovered):
            observed = np.zeros(len(rec), dtype=bool)
            observed[icp.index] = True
            xy = net.positions(rec.edges, rec.ratios)
            for k, (t, e, r) in enumerate(zip(rec.times, rec.edges, rec.ratios)):
                w.writerow([tid, repr(float(t)), repr(float(xy[k, 0])), repr(float(xy[k, 1])),
                            int(e), repr(float(r)), int(observed[k])])
                rows += 1
    return rows


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtrajrec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic federated dataset"))
    g.add_argument("--keep-ratio", dest="keep_ratio", type=float)
    g.add_argument("--partition", choices=["iid", "spatial"])
    g.add_argument("--clients", type=int)

    t = common(sub.add_parser("train", help="teacher pre-training then federated rounds"))
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--resume", action="store_true", help="continue from the last global checkpoint")

    e = common(sub.add_parser("evaluate", help="score a checkpoint on every client's test split"))
    e.add_argument("--checkpoint", required=True)

    r = common(sub.add_parser("recover", help="recover incomplete trajectories from a CSV"))
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args, extra)
        if args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "train":
            print(cmd_train(cfg, workers=args.workers, resume=args.resume))
        elif args.command == "evaluate":
            print(json.dumps(cmd_evaluate(cfg, args.checkpoint), indent=2))
        else:
            print(cmd_recover(cfg, args.checkpoint, args.input, args.output))
    except FedTrajError as exc:
        print(f"{exc.code}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"missing-file: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
