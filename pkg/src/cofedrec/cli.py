"""Command-line experiment runner.

Subcommands: ``prepare`` (split a rating log and export id maps), ``run``,
``sweep``, ``diagnose`` (client-level K-Means on a checkpoint) and ``eval``
(re-evaluate a checkpoint). Experiments are described by a plain
``key = value`` config file; every field can also be given as a flag, which
wins over the file. Exit codes: 0 success, 1 config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import federation
from .dataset import InteractionDataset, build_eval_candidates, build_splits, load_movielens
from .federation import Federation, RoundConfig, ablation_mode
from .model import LossConfig, ScoreFunction, load_matrix, save_matrix

_logger = logging.getLogger("cofedrec")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# fields that change where or how fast a run executes but not its results
_UNHASHED = ("output_dir", "workers")

SWEEP_PARAMS = {"lambda": "lam", "tau": "tau", "item_clusters": "num_clusters"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data_path: str = ""
    data_format: str = "dat"
    min_interactions: int = 5
    embedding_dim: int = 32
    learning_rate: float = 0.1
    batch_size: int = 256
    local_epochs: int = 1
    num_negatives: int = 4
    init_std: float = 0.01
    embedding_lr_scale: float = 1.0
    rounds: int = 100
    participant_fraction: float = 1.0
    num_clusters: int = 30
    lam: float = 0.005
    tau: float = 0.1
    scl_variant: str = "supcontrast"
    scl_max_items: int = 4096
    ablation: str = "full"
    virtual_ratio: float = 0.0
    top_k: int = 10
    eval_mode: str = "sampled"
    eval_every: int = 1
    eval_negatives: int = 99
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs"

    # -- serialisation ------------------------------------------------------

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
        return (base or cls()).updated(values)

    def updated(self, values: dict) -> "ExperimentConfig":
        """Copy with string or typed ``values`` applied and checked."""
        types = {f.name: type(f.default) for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse(key, value, types[key])
        cfg = replace(self, **parsed)
        cfg.validate()
        return cfg

    @property
    def hash(self) -> str:
        text = "".join(line for line in self.dumps().splitlines(keepends=True)
                       if line.split(" = ", 1)[0] not in _UNHASHED)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @property
    def tag(self) -> str:
        return f"{self.hash}-s{self.seed}"

    # -- conversion ---------------------------------------------------------

    def validate(self) -> None:
        if self.data_format not in ("dat", "csv"):
            raise ConfigError("data_format must be 'dat' or 'csv'")
        if self.eval_negatives < 1 or self.min_interactions < 1 or self.num_negatives < 0:
            raise ConfigError("eval_negatives and min_interactions must be >= 1, num_negatives >= 0")
        if self.ablation not in federation.ABLATION_MODES:
            raise ConfigError(f"ablation must be one of {federation.ABLATION_MODES}")
        if not 0.0 <= self.virtual_ratio <= 0.5:
            raise ConfigError("virtual_ratio must lie in [0, 0.5]")
        try:
            self.round_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, tau=self.tau, scl_variant=self.scl_variant,
                          learning_rate=self.learning_rate, local_epochs=self.local_epochs,
                          embedding_lr_scale=self.embedding_lr_scale, scl_max_items=self.scl_max_items)

    def round_config(self) -> RoundConfig:
        cfg = RoundConfig(
            total_rounds=self.rounds, participant_fraction=self.participant_fraction,
            num_clusters=self.num_clusters, loss=self.loss_config(), batch_size=self.batch_size,
            num_negatives=self.num_negatives, embedding_dim=self.embedding_dim, init_std=self.init_std,
            virtual_ratio=self.virtual_ratio, eval_every=self.eval_every, eval_mode=self.eval_mode,
            top_k=self.top_k, workers=self.workers)
        return ablation_mode(cfg, self.ablation)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, value, typ):
    if isinstance(value, typ) and not isinstance(value, bool):
        return value
    text = str(value).strip()
    try:
        if typ is int:
            return int(text)
        if typ is float:
            out = float(text)
            if not np.isfinite(out):
                raise ValueError
            return out
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    return text


# -- data and artefacts --------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> InteractionDataset:
    if not cfg.data_path:
        raise ConfigError("data_path is not set")
    if not os.path.exists(cfg.data_path):
        raise ConfigError(f"data_path {cfg.data_path!r} does not exist")
    return build_splits(load_movielens(cfg.data_path, cfg.data_format), cfg.min_interactions)


def _candidates(cfg: ExperimentConfig, dataset: InteractionDataset):
    # the same stream the federation would use, so eval reproduces run metrics
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(federation.STREAM_EVAL,)))
    return build_eval_candidates(dataset, cfg.eval_mode, rng, cfg.eval_negatives)


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_checkpoint(directory: str, cfg: ExperimentConfig, report: federation.RunReport,
                     dataset: InteractionDataset) -> None:
    """Best-round client models plus the final server state and a manifest."""
    os.makedirs(directory, exist_ok=True)
    models = report.best_models
    if models is None:
        raise ValueError("run kept no best-round models")
    save_matrix(os.path.join(directory, "clients.bin"), np.stack([V.ravel() for V, _ in models]))
    save_matrix(os.path.join(directory, "score_fns.bin"),
                np.stack([np.append(th.weights, th.bias) for _, th in models]))
    server = report.final_server
    if server is not None:
        if server.V_g is not None:
            save_matrix(os.path.join(directory, "global.bin"), server.V_g)
        save_matrix(os.path.join(directory, "group.bin"), server.V_s)
        if server.membership is not None:
            server.membership.to_csv(os.path.join(directory, "membership.csv"))
    manifest = {
        "config": cfg.dumps(),
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "round": report.best_round,
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "embedding_dim": cfg.embedding_dim,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_checkpoint(directory: str):
    """Returns (config, manifest, client models) of a checkpoint directory."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    cfg = ExperimentConfig.loads(manifest["config"])
    n, m, d = manifest["num_users"], manifest["num_items"], manifest["embedding_dim"]
    flat = load_matrix(os.path.join(directory, "clients.bin"))
    thetas = load_matrix(os.path.join(directory, "score_fns.bin"))
    if flat.shape != (n, m * d) or thetas.shape != (n, d + 1):
        raise ValueError("checkpoint matrices do not match the manifest")
    models = [(flat[u].reshape(m, d), ScoreFunction(thetas[u, :d].copy(), float(thetas[u, d]))) for u in range(n)]
    return cfg, manifest, models


# -- commands --------------------------------------------------------------------


def execute(cfg: ExperimentConfig, dataset: InteractionDataset | None = None, checkpoint: bool = True) -> dict:
    """Run one experiment, writing its artefacts under ``cfg.output_dir``; returns the summary."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    rcfg = cfg.round_config()
    if not checkpoint:
        rcfg = replace(rcfg, keep_best_models=False)
    out, tag = cfg.output_dir, cfg.tag
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, f"config-{tag}.cfg"), "w") as fh:
        fh.write(cfg.dumps())

    fed = Federation(dataset, rcfg, cfg.seed, candidates=_candidates(cfg, dataset))
    with open(os.path.join(out, f"metrics-{tag}.ndjson"), "w") as metrics_fh, \
            open(os.path.join(out, f"log-{tag}.ndjson"), "w") as log_fh:
        report = fed.run(
            on_round=lambda f, rec: log_fh.write(_dumps(rec.to_dict()) + "\n"),
            on_metrics=lambda m: metrics_fh.write(_dumps(m) + "\n"),
        )

    summary = {
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "ablation": cfg.ablation,
        "best_round": report.best_round,
        "val_hr": report.best_validation["hr"],
        "val_ndcg": report.best_validation["ndcg"],
        "test_hr": report.best_test["hr"],
        "test_ndcg": report.best_test["ndcg"],
    }
    with open(os.path.join(out, f"summary-{tag}.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary))
        w.writeheader()
        w.writerow(summary)
    np.savetxt(os.path.join(out, f"participation-{tag}.csv"),
               np.column_stack([np.arange(dataset.num_users), report.participation_counts, report.similar_counts]),
               fmt="%d", delimiter=",", header="client,participations,similar_group", comments="")
    if checkpoint:
        write_checkpoint(os.path.join(out, f"checkpoint-{tag}"), cfg, report, dataset)
    summary["report"] = report
    return summary


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    ds = load_dataset(cfg)
    out = os.path.join(cfg.output_dir, f"prepared-{cfg.tag}")
    ds.export_id_maps(out)
    with open(os.path.join(out, "splits.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_index", "split", "item_index"])
        for u in range(ds.num_users):
            for i in ds.train[u]:
                w.writerow([u, "train", int(i)])
            if ds.validation is not None:
                w.writerow([u, "validation", int(ds.validation[u])])
            w.writerow([u, "test", int(ds.test[u])])
    print(f"users={ds.num_users} items={ds.num_items} interactions={ds.num_interactions} "
          f"dropped={len(ds.dropped_users)} -> {out}")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, args) -> int:
    s = execute(cfg, checkpoint=not args.no_checkpoint)
    print(f"best round {s['best_round']}: test HR@{cfg.top_k}={s['test_hr']:.4f} "
          f"NDCG@{cfg.top_k}={s['test_ndcg']:.4f} (validation HR {s['val_hr']:.4f}) [{cfg.tag}]")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {args.param!r}; expected one of {sorted(SWEEP_PARAMS)}")
    key = SWEEP_PARAMS[args.param]
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("no sweep values given")
    configs = [cfg.updated({key: v, "output_dir": os.path.join(cfg.output_dir, f"sweep-{cfg.tag}")}) for v in values]
    dataset = load_dataset(cfg)
    rows = []
    for value, sub in zip(values, configs):
        # every entry shares the master seed so the sweep is a paired comparison
        s = execute(sub, dataset, checkpoint=False)
        rows.append({args.param: getattr(sub, key), "config_hash": sub.hash, "best_round": s["best_round"],
                     "test_hr": s["test_hr"], "test_ndcg": s["test_ndcg"]})
        print(f"{args.param}={value}: HR={s['test_hr']:.4f} NDCG={s['test_ndcg']:.4f}", flush=True)
    path = os.path.join(cfg.output_dir, f"sweep-{cfg.tag}-{args.param}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(path)
    return EXIT_OK


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    ckpt_cfg, manifest, models = read_checkpoint(args.checkpoint)
    rng = np.random.default_rng(np.random.SeedSequence(ckpt_cfg.seed, spawn_key=(federation.STREAM_DIAGNOSE,)))
    sizes = federation.diagnose_client_kmeans(models, args.k, rng)
    path = os.path.join(args.checkpoint, f"diagnose-{ckpt_cfg.tag}-k{args.k}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "size"])
        w.writerows(enumerate(sizes.tolist()))
    if args.dump:
        save_matrix(args.dump, np.stack([V.ravel() for V, _ in models]))
    singletons = int(np.sum(sizes == 1))
    print(f"K={args.k} sizes={sizes.tolist()} max share={sizes.max() / sizes.sum():.4f} "
          f"singletons={singletons} -> {path}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ckpt_cfg, manifest, models = read_checkpoint(args.checkpoint)
    ds = load_dataset(ckpt_cfg)
    if ds.num_users != manifest["num_users"] or ds.num_items != manifest["num_items"]:
        raise ValueError("dataset does not match the checkpoint")
    from .evaluation import evaluate

    cand = _candidates(ckpt_cfg, ds)
    out = {"round": manifest["round"], "mode": ckpt_cfg.eval_mode}
    for split, prefix in (("validation", "val"), ("test", "test")):
        res = evaluate(ds, cand, models, split, ckpt_cfg.top_k)
        out[f"{prefix}_hr"], out[f"{prefix}_ndcg"] = res["hr"], res["ndcg"]
    path = os.path.join(args.checkpoint, f"eval-{ckpt_cfg.tag}.json")
    with open(path, "w") as fh:
        fh.write(_dumps(out) + "\n")
    print(_dumps(out))
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "run": cmd_run, "sweep": cmd_sweep, "diagnose": cmd_diagnose, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofedrec", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value experiment config file")
        for f in fields(ExperimentConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=type(f.default).__name__.upper())
        if name == "run":
            p.add_argument("--no-checkpoint", action="store_true")
        if name == "sweep":
            p.add_argument("--param", required=True, help="lambda, tau or item_clusters")
            p.add_argument("--values", required=True, help="comma-separated values")
        if name in ("diagnose", "eval"):
            p.add_argument("--checkpoint", required=True, help="checkpoint directory of a finished run")
        if name == "diagnose":
            p.add_argument("--k", type=int, default=2)
            p.add_argument("--dump", help="also write the flattened client vectors here")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = ExperimentConfig.loads(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if getattr(args, f.name) is not None}
    return cfg.updated(overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any module failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
