"""Command-line entry point: ``gengap <command> ...``.

Settings come from an INI file (``--config``) and command-line flags; flags
win over file values, which win over built-in defaults.  The master seed
defaults to ``$GENGAP_SEED`` (or 0).
"""

import argparse
import configparser
import datetime as dt
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from gengap import __version__
from gengap import crossval as cv
from gengap import metrics as metrics_mod
from gengap.model import TrainConfig, load_checkpoint, make_model
from gengap.registry import DEFAULT_ITEMS, N_DATABASES, Kind, Registry, SynthProfile, synth_all
from gengap.scene import Condition, generate_dataset, read_index, write_dataset

log = logging.getLogger("gengap")


class RunManifest:
    """``run_manifest.json``: config snapshot, version, seed, timestamps and stage status."""

    def __init__(self, root, command, settings, seed):
        self.path = Path(root) / "run_manifest.json"
        self.data = {
            "tool": "gengap", "version": __version__, "command": command,
            "master_seed": seed, "settings": settings,
            "created": _now(), "stages": {},
        }
        self._write()

    def stage(self, name, status, **info):
        self.data["stages"][name] = {"status": status, "time": _now(), **info}
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True, default=str))
        tmp.replace(self.path)


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _default_seed():
    return int(os.environ.get("GENGAP_SEED", "0"))


def _ids(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _read_section(path, section):
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return dict(parser[section]) if parser.has_section(section) else {}


def _check_known(registry, condition):
    for kind in Kind:
        for db in condition.dbs(kind):
            if db not in registry:
                known = ", ".join(str(d) for d in registry.databases())
                raise SystemExit(f"unknown database {db}; known: {known}")


def cmd_synth_db(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise SystemExit(f"{out} exists; use --force to overwrite")
        shutil.rmtree(out)
    file_cfg = _read_section(args.config, "synth")
    items = {kind: int(getattr(args, f"n_{kind.value}") or file_cfg.get(f"n_{kind.value}",
                                                                         DEFAULT_ITEMS[kind]))
             for kind in Kind}
    profile = SynthProfile(noise_s=float(file_cfg.get("noise_s", SynthProfile.noise_s)),
                           rooms=int(file_cfg.get("rooms", SynthProfile.rooms)))
    n_db = int(file_cfg.get("n_databases", N_DATABASES))
    settings = {"items": {k.value: v for k, v in items.items()}, "noise_s": profile.noise_s,
                "rooms": profile.rooms, "n_databases": n_db}
    run = RunManifest(out, "synth-db", settings, args.seed)
    run.stage("synth-db", "running")
    registry = synth_all(out, args.seed, n_db, items, profile)
    run.stage("synth-db", "done", databases=len(registry.databases()))
    print(f"wrote {len(registry.databases())} databases under {out}")


def cmd_simulate(args):
    registry = Registry.load(args.db_root)
    cond = Condition.from_indices(_ids(args.speech), _ids(args.noise), _ids(args.room), args.split)
    _check_known(registry, cond)
    out = Path(args.out)
    run = RunManifest(out, "simulate", vars(args) | {"func": None}, args.seed)
    run.stage("simulate", "running")
    try:
        ds = generate_dataset(cond, args.hours, args.seed, registry)
    except ValueError as exc:
        run.stage("simulate", "failed", error=str(exc))
        raise SystemExit(str(exc))
    write_dataset(ds, out)
    run.stage("simulate", "done", mixtures=len(ds), hours=ds.total_hours)
    print(f"wrote {len(ds)} mixtures ({ds.total_hours * 3600:.1f} s) to {out}")


def _train_config(args, file_cfg):
    def pick(name, cast, default):
        v = getattr(args, name, None)
        return cast(v if v is not None else file_cfg.get(name, default))
    d = TrainConfig()
    return TrainConfig(learning_rate=pick("learning_rate", float, d.learning_rate),
                       epochs=pick("epochs", int, d.epochs),
                       dropout_rate=pick("dropout_rate", float, d.dropout_rate),
                       batch_budget_s=pick("batch_budget_s", float, d.batch_budget_s),
                       n_buckets=pick("n_buckets", int, d.n_buckets), seed=args.seed)


def cmd_train(args):
    registry = Registry.load(args.db_root)
    ds = read_index(Path(args.dataset) / "index.csv", registry)
    config = _train_config(args, _read_section(args.config, "train"))
    out = Path(args.out)
    run = RunManifest(out.parent, "train", {"config": config.__dict__, "dataset": args.dataset,
                                            "architecture": args.arch}, args.seed)
    run.stage("train", "running")
    model = make_model(args.arch, config).train(ds)
    model.save(out)
    run.stage("train", "done", checkpoint=str(out))
    print(f"saved {args.arch} checkpoint to {out}")


def cmd_evaluate(args):
    registry = Registry.load(args.db_root)
    ds = read_index(Path(args.dataset) / "index.csv", registry)
    model = load_checkpoint(args.checkpoint)
    external = dict(kv.split("=", 1) for kv in args.external or [])
    names = [m for m in args.metrics.split(",") if m] + list(external)
    fns = metrics_mod.resolve_metrics(names, external)
    scores = metrics_mod.evaluate(model, ds, fns)
    metrics_mod.write_scores(scores, args.out)
    for metric, mean in metrics_mod.dataset_means(scores).items():
        print(f"{metric}: {mean:.3f}")


def cmd_crossval(args):
    if args.seed is None and "master_seed" not in _read_section(args.config, "experiment"):
        args.seed = _default_seed()
    overrides = {"architecture": args.arch, "master_seed": args.seed, "epochs": args.epochs,
                 "train_hours": args.train_hours, "test_hours": args.test_hours,
                 "n_values": args.n, "mismatches": args.mismatch}
    if args.config:
        config = cv.ExperimentConfig.from_file(args.config, **overrides)
    else:
        config = cv.ExperimentConfig.from_mapping({k: v for k, v in overrides.items()
                                                   if v is not None})
    registry = Registry.load(args.db_root)
    out = Path(args.out)
    run = RunManifest(out, "crossval", config.snapshot(), config.master_seed)
    run.stage("crossval", "running")
    try:
        reports = cv.run_experiment(config, registry, out, resume=args.resume, jobs=args.jobs)
    except RuntimeError as exc:
        run.stage("crossval", "failed", error=str(exc))
        print(exc, file=sys.stderr)
        return 1
    run.stage("crossval", "done", reports=len(reports))
    print((out / "gap_report.txt").read_text(), end="")
    return 0


def cmd_report(args):
    reports = []
    for path in args.reports:
        path = Path(path)
        reports.extend(cv.read_gap_report(path / "gap_report.csv" if path.is_dir() else path))
    out = Path(args.out)
    cv.write_gap_report(reports, out)
    cv.write_summary(cv.aggregate(reports), out)
    print((out / "summary.txt").read_text(), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="gengap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI file with defaults for this command")
        if seed:
            sp.add_argument("--seed", type=int, default=_default_seed(),
                            help="master seed (default: $GENGAP_SEED or 0)")

    sp = sub.add_parser("synth-db", help="create synthetic speech/noise/room databases")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    for kind in Kind:
        sp.add_argument(f"--n-{kind.value}", type=int, dest=f"n_{kind.value}",
                        help=f"items per {kind.value} database")
    sp.set_defaults(func=cmd_synth_db)

    sp = sub.add_parser("simulate", help="render a dataset of mixtures from a condition")
    common(sp)
    sp.add_argument("--db-root", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--speech", default="1")
    sp.add_argument("--noise", default="1")
    sp.add_argument("--room", default="1")
    sp.add_argument("--split", choices=["train", "test"], default="train")
    sp.add_argument("--hours", type=float, default=0.01)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a model on a simulated dataset")
    common(sp)
    sp.add_argument("--db-root", required=True)
    sp.add_argument("--dataset", required=True, help="directory written by 'simulate'")
    sp.add_argument("--arch", default="ffnn")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--learning-rate", type=float, dest="learning_rate")
    sp.add_argument("--batch-budget-s", type=float, dest="batch_budget_s")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a simulated dataset")
    common(sp, seed=False)
    sp.add_argument("--db-root", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--metrics", default="delta_snr")
    sp.add_argument("--external", action="append", metavar="NAME=COMMAND",
                    help="external metric; COMMAND uses {ref} and {sig} placeholders")
    sp.add_argument("--out", required=True, help="per-mixture scores CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("crossval", help="run the five-fold generalization-gap experiment")
    sp.add_argument("--config", help="INI file with an [experiment] section")
    sp.add_argument("--seed", type=int, help="master seed (default: config file, then "
                                               "$GENGAP_SEED, then 0)")
    sp.add_argument("--db-root", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--arch")
    sp.add_argument("--n", help="comma-separated N values (1, 4)")
    sp.add_argument("--mismatch", help="e.g. 'speech,noise,room' or 'single;double'")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--train-hours", type=float, dest="train_hours")
    sp.add_argument("--test-hours", type=float, dest="test_hours")
    sp.add_argument("--resume", action="store_true", help="skip folds that already finished")
    sp.add_argument("--jobs", type=int, default=cv.default_jobs())
    sp.set_defaults(func=cmd_crossval)

    sp = sub.add_parser("report", help="merge gap reports and print summary tables")
    sp.add_argument("reports", nargs="+", help="gap_report.csv files or their directories")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
