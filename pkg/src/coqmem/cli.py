"""Command-line entry point: ``coqmem {train,encode,search,eval,drift,ablate}``.

Configuration comes from an optional INI file with ``[train]`` and
``[augment]`` sections whose keys are ``TrainConfig`` /
``AugmentationConfig`` field names. Any key can be overridden on the
command line as ``--train.tau 0.3`` or through the short aliases
(``--tau``, ``--lr``, ``--memory-size`` ...).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .analysis import DriftProbe, ablation_variants, degeneration_experiment, drift_comparison, run_ablation
from .dataio import AugmentationConfig, FeatureDataset
from .errors import ConfigError, DataError, DivergenceError
from .retrieval import (
    RetrievalIndex,
    encode_database,
    average_precision,
    pr_curve,
    precision_at_n,
    read_results_csv,
    relevance_from_labels,
    search_batch,
    write_metrics_json,
    write_results_csv,
)
from .synthetic import make_clusters
from .trainer import Trainer, TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("coqmem")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

SECTIONS = {"train": TrainConfig, "augment": AugmentationConfig}

# short flag -> (section, key)
ALIASES = {
    "bits": ("train", "bits"),
    "codebooks": ("train", "codebooks"),
    "codewords": ("train", "codewords"),
    "embed-dim": ("train", "embed_dim"),
    "alpha": ("train", "alpha"),
    "tau": ("train", "tau"),
    "rho-pos": ("train", "rho_pos"),
    "beta": ("train", "beta"),
    "gamma": ("train", "gamma"),
    "batch-size": ("train", "batch_size"),
    "memory-size": ("train", "memory_capacity"),
    "memory-start-epoch": ("train", "memory_start_epoch"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "learning_rate"),
    "lr-schedule": ("train", "lr_schedule"),
    "seed": ("train", "seed"),
    "loss-mode": ("train", "loss_mode"),
    "feature-memory": ("train", "feature_memory"),
    "hard-code-memory": ("train", "hard_code_memory"),
    "deterministic": ("train", "deterministic"),
    "noise-sigma": ("augment", "noise_sigma"),
    "dropout-prob": ("augment", "dropout_prob"),
    "aug-seed": ("augment", "seed"),
}


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fields(section: str) -> dict:
    cls = SECTIONS[section]
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "augmentation":
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = default
    return out


def _coerce(section: str, key: str, text: str):
    defaults = _fields(section)
    if key not in defaults:
        raise ConfigError(f"unknown config key [{section}] {key}")
    default = defaults[key]
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key == "codebooks":
            return None if text.lower() in ("", "none", "auto") else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None
    return text


def load_config(path, overrides: dict) -> TrainConfig:
    """Build a TrainConfig from an INI file plus ``{(section, key): text}`` overrides."""
    values = {s: {} for s in SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in parser.items(section):
                values[section][key] = _coerce(section, key, text)
    for (section, key), text in overrides.items():
        values[section][key] = _coerce(section, key, text)
    aug = AugmentationConfig(**values["augment"])
    return TrainConfig(augmentation=aug, **values["train"])


def write_effective_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    d = cfg.to_dict()
    aug = d.pop("augmentation")
    parser["train"] = {k: str(v) for k, v in d.items()}
    parser["augment"] = {k: str(v) for k, v in aug.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [train] and [augment] sections")
    g = p.add_argument_group("config overrides")
    for section in SECTIONS:
        for key in _fields(section):
            g.add_argument(f"--{section}.{key}", dest=f"ovr:{section}:{key}", metavar="VALUE",
                           help=argparse.SUPPRESS)
    for alias, (section, key) in ALIASES.items():
        g.add_argument(f"--{alias}", dest=f"ovr:{section}:{key}", metavar="VALUE",
                       help=f"override [{section}] {key}")


def _overrides(args) -> dict:
    out = {}
    for name, value in vars(args).items():
        if name.startswith("ovr:") and value is not None:
            _, section, key = name.split(":")
            out[(section, key)] = value
    return out


def _config(args) -> TrainConfig:
    return load_config(args.config, _overrides(args))


class _CsvSink:
    FIELDS = ["epoch", "iter", "loss", "contrastive", "omega_c", "memory_active", "floor_engaged", "lr"]

    def __init__(self, path, append=False):
        fresh = not (append and Path(path).exists())
        self.fh = open(path, "w" if fresh else "a", newline="")
        self.writer = csv.DictWriter(self.fh, self.FIELDS, extrasaction="ignore")
        if fresh:
            self.writer.writeheader()

    def __call__(self, record):
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in record.items()})

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = dataio.load_vectors(args.data)
    if args.resume:
        if args.config or _overrides(args):
            raise ConfigError("--resume takes its configuration from the checkpoint")
        trainer = load_checkpoint(args.resume)
        cfg = trainer.cfg
    else:
        cfg = _config(args)
        trainer = Trainer(cfg, data.dim)
    write_effective_config(cfg, out / "effective_config.ini")
    sink = _CsvSink(out / "metrics.csv", append=bool(args.resume))
    try:
        trainer.fit(data, sinks=[sink], until_epoch=args.until_epoch)
    finally:
        sink.close()
    save_checkpoint(trainer, out / "checkpoint")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


def cmd_encode(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    data = dataio.load_vectors(args.vectors)
    index = encode_database(data.vectors, trainer.layer, trainer.books)
    index.save_codes(args.out)
    print(f"encoded {index.count} vectors into {args.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    index = RetrievalIndex.from_files(trainer.books, args.codes)
    queries = dataio.load_vectors(args.queries)
    ids, scores = search_batch(index, trainer.layer, queries.vectors, args.n)
    write_results_csv(args.out, ids, scores)
    print(f"wrote top-{ids.shape[1]} results for {len(ids)} queries to {args.out}")
    return EXIT_OK


def _parse_grid(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None


def cmd_eval(args) -> int:
    qids, ids, _ = read_results_csv(args.results)
    qlab = dataio.load_vectors(args.query_labels)
    dlab = dataio.load_vectors(args.db_labels)
    if qlab.labels is None or dlab.labels is None:
        raise DataError("label files must carry an LBLS label section")
    if max(qids) >= qlab.count:
        raise DataError(f"results reference query {max(qids)} but only {qlab.count} query labels")
    if ids.size and ids.max() >= dlab.count:
        raise DataError(f"results reference db item {ids.max()} but only {dlab.count} db labels")
    qsets = qlab.label_sets()
    rel = relevance_from_labels([qsets[q] for q in qids], dlab.label_sets())
    report = average_precision(ids, rel, args.n, args.map_convention)
    grid = [k for k in _parse_grid(args.grid) if k <= ids.shape[1]]
    prec = precision_at_n(ids, rel, grid) if grid else {}
    write_metrics_json(args.out, report.value, prec, n=args.n, convention=args.map_convention,
                       excluded_queries=report.excluded)
    if args.pr_out:
        p, r = pr_curve(ids, rel)
        with open(args.pr_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "precision", "recall"])
            for k, (pk, rk) in enumerate(zip(p, r), start=1):
                w.writerow([k, repr(float(pk)), repr(float(rk))])
    if report.excluded:
        print(f"excluded {len(report.excluded)} queries with no relevant items", file=sys.stderr)
    print(f"MAP@{args.n} ({args.map_convention}) = {report.value:.6f}")
    return EXIT_OK


def cmd_drift(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = dataio.load_vectors(args.data)
    probe_vectors = dataio.load_vectors(args.probe).vectors[: args.probe_size]
    write_effective_config(cfg, out / "effective_config.ini")
    result = drift_comparison(data, cfg, DriftProbe(probe_vectors, args.interval))
    result.write_csv(out / "drift.csv")
    summary = {
        "intervals_after_warmup": result.intervals,
        "warmup_iteration": result.warmup_iteration,
        "soft_below_original": result.soft_below_original,
        "hard_above_soft": result.hard_above_soft,
    }
    (out / "drift_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = dataio.load_vectors(args.train)
    query = dataio.load_vectors(args.query)
    database = dataio.load_vectors(args.database)
    if query.labels is None or database.labels is None:
        raise DataError("query and database files must carry labels")
    write_effective_config(cfg, out / "effective_config.ini")
    summary = {}
    if args.gamma_sweep:
        gammas = [float(v) for v in args.gamma_sweep.split(",")]
        deg = degeneration_experiment(train, query, database, cfg, gammas, args.n,
                                      args.map_convention)
        deg.write_csv(out / "degeneration.csv")
        summary["gamma_sweep"] = {
            "gamma0": {"initial_omega_c": deg.baseline.initial_omega,
                       "final_omega_c": deg.baseline.final_omega,
                       "final_map": deg.baseline.final_map},
            "runs": {str(r.cfg.gamma): {"final_omega_c": r.final_omega, "final_map": r.final_map}
                     for r in deg.sweep},
            "best_gamma": deg.best.cfg.gamma,
        }
    variants = ablation_variants(cfg)
    names = [v for v in args.variants.split(",") if v] if args.variants else []
    unknown = set(names) - set(variants)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {sorted(variants)}")
    if names:
        runs = run_ablation(train, query, database, variants, args.n, args.map_convention, names)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "epoch", "omega_c", "map"])
            for name, run in runs.items():
                for row in run.trajectory:
                    w.writerow([name, row["epoch"], repr(row["omega_c"]), repr(row["map"])])
        summary["variants"] = {n: {"final_map": r.final_map, "final_omega_c": r.final_omega}
                               for n, r in runs.items()}
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = make_clusters(args.clusters, args.dim, args.train, args.queries, args.database,
                      seed=args.seed)
    for name, ds in (("train", s.train), ("query", s.query), ("database", s.database)):
        dataio.write_vectors(ds, out / f"{name}.mcqv")
    print(f"wrote train/query/database .mcqv files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = UsageParser(prog="coqmem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    t = sub.add_parser("train", help="train embedding layer and codebooks")
    t.add_argument("--data", required=True, help="training vectors (.mcqv)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--until-epoch", type=int, help="stop after this epoch (resume later)")
    _add_config_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode vectors into hard codes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--vectors", required=True)
    e.add_argument("--out", required=True, help="code file (.mcqb)")
    e.set_defaults(func=cmd_encode)

    s = sub.add_parser("search", help="top-n AQS search for a query file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--codes", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--out", required=True, help="results CSV")
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("eval", help="MAP@n, Precision@k and PR curve from a results CSV")
    v.add_argument("--results", required=True)
    v.add_argument("--query-labels", required=True, help=".mcqv file with labels for queries")
    v.add_argument("--db-labels", required=True, help=".mcqv file with labels for the database")
    v.add_argument("--n", type=int, default=100)
    v.add_argument("--map-convention", choices=("paper", "standard"), default="paper")
    v.add_argument("--grid", default="1,10,50,100")
    v.add_argument("--out", required=True, help="metrics JSON")
    v.add_argument("--pr-out", help="optional PR-curve CSV")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("drift", help="feature drift of raw/soft/hard representations")
    d.add_argument("--data", required=True)
    d.add_argument("--probe", required=True, help="held-out probe vectors (.mcqv)")
    d.add_argument("--probe-size", type=int, default=512)
    d.add_argument("--interval", type=int, default=100)
    d.add_argument("--out", required=True)
    _add_config_args(d)
    d.set_defaults(func=cmd_drift)

    a = sub.add_parser("ablate", help="component ablations and gamma sweep")
    a.add_argument("--train", required=True)
    a.add_argument("--query", required=True)
    a.add_argument("--database", required=True)
    a.add_argument("--variants", default="full,wo_debiasing,wo_omega,wo_memory,"
                   "feature_memory,hard_code_memory,wo_delay",
                   help="comma-separated variant names (empty to skip)")
    a.add_argument("--gamma-sweep", default="", help="comma-separated gammas, compared to gamma=0")
    a.add_argument("--n", type=int, default=100)
    a.add_argument("--map-convention", choices=("paper", "standard"), default="standard")
    a.add_argument("--out", required=True)
    _add_config_args(a)
    a.set_defaults(func=cmd_ablate)

    y = sub.add_parser("synth", help="write a synthetic labelled cluster dataset")
    y.add_argument("--out", required=True)
    y.add_argument("--clusters", type=int, default=10)
    y.add_argument("--dim", type=int, default=64)
    y.add_argument("--train", type=int, default=5000)
    y.add_argument("--queries", type=int, default=1000)
    y.add_argument("--database", type=int, default=5000)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
