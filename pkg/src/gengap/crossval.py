"""Five-fold multi-database cross-validation and the generalization gap.

For fold ``i`` the evaluated model trains on database ``i`` (``N = 1``) or on
all databases but ``i`` (``N = 4``) along every dimension.  Along mismatched
dimensions the test databases are the complement of the training ones; a
reference model with the same architecture trains on the test databases'
training items.  The gap is the fold-averaged relative score difference
between the two models, in percent.
"""

import concurrent.futures
import configparser
import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gengap import metrics as metrics_mod
from gengap.model import TrainConfig, make_model
from gengap.registry import KINDS, N_DATABASES, Kind
from gengap.scene import Condition, dataset_usage, derive_seed, generate_dataset

log = logging.getLogger(__name__)

N_FOLDS = 5
DEGREE_NAMES = {0: "Match", 1: "Single mism.", 2: "Double mism.", 3: "Triple mism."}


class AuditError(RuntimeError):
    """A training item also appears in a test dataset."""


@dataclass(frozen=True)
class MismatchSpec:
    dims: frozenset

    def __post_init__(self):
        dims = frozenset(Kind(d) for d in self.dims)
        if not dims:
            raise ValueError("a mismatch needs at least one dimension")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, text):
        return cls(frozenset(part.strip() for part in text.split(",") if part.strip()))

    @property
    def label(self):
        return ",".join(k.value for k in KINDS if k in self.dims)

    @property
    def degree(self):
        return len(self.dims)


def all_mismatches(degree=None):
    """The seven non-empty subsets of the dimensions, optionally of one size."""
    specs = []
    for mask in range(1, 8):
        dims = frozenset(k for b, k in enumerate(KINDS) if mask >> b & 1)
        if degree is None or len(dims) == degree:
            specs.append(MismatchSpec(dims))
    return sorted(specs, key=lambda s: (s.degree, [KINDS.index(k) for k in KINDS if k in s.dims]))


def parse_mismatches(text):
    """``"single"``, ``"double"``, ``"triple"``, ``"all"`` or ``;``-separated dimension lists."""
    out = []
    for part in text.split(";"):
        part = part.strip()
        keyword = {"single": 1, "double": 2, "triple": 3}.get(part)
        if keyword:
            out.extend(all_mismatches(keyword))
        elif part == "all":
            out.extend(all_mismatches())
        elif part:
            out.append(MismatchSpec.parse(part))
    return out


@dataclass(frozen=True)
class FoldPlan:
    fold: int
    n: int
    mismatch: MismatchSpec
    train_ids: dict
    test_ids: dict

    @property
    def ref_train_ids(self):
        return self.test_ids

    def condition(self, ids, side):
        return Condition.from_indices(ids[Kind.SPEECH], ids[Kind.NOISE], ids[Kind.ROOM], side)


def plan_folds(n, mismatch, m=N_DATABASES):
    if n not in (1, m - 1):
        raise ValueError(f"N must be 1 or {m - 1}, got {n}")
    everything = frozenset(range(1, m + 1))
    plans = []
    for i in range(1, N_FOLDS + 1):
        train = frozenset({i}) if n == 1 else everything - {i}
        train_ids = {d: tuple(sorted(train)) for d in KINDS}
        test_ids = {d: tuple(sorted(everything - train if d in mismatch.dims else train))
                    for d in KINDS}
        plans.append(FoldPlan(i, n, mismatch, train_ids, test_ids))
    return plans


def generalization_gap(scores, ref_scores, exclude_zero=False):
    """Mean relative difference to the reference scores, in percent."""
    pairs = list(zip(scores, ref_scores, strict=True))
    if exclude_zero:
        kept = [(e, r) for e, r in pairs if r != 0]
        if len(kept) < len(pairs):
            log.warning("excluding %d fold(s) with a zero reference score", len(pairs) - len(kept))
        pairs = kept
    if not pairs or any(r == 0 for _, r in pairs):
        raise ValueError("undefined gap: zero reference score")
    total = 0.0
    for e, r in pairs:
        total += (float(e) - float(r)) / float(r)
    return 100.0 * total / len(pairs)


@dataclass
class ExperimentConfig:
    architecture: str = "ffnn"
    n_values: tuple = (1,)
    mismatches: tuple = field(default_factory=lambda: tuple(all_mismatches(3)))
    train_hours: float = 0.02
    test_hours: float = 0.005
    epochs: int = 20
    learning_rate: float = 1e-4
    dropout_rate: float = 0.2
    batch_budget_s: float = 4.0
    n_buckets: int = 10
    master_seed: int = 0
    metrics: tuple = ("delta_snr",)
    external_metrics: dict = field(default_factory=dict)
    evaluate_matched: bool = False
    reuse_eval_models: bool = False
    exclude_zero_ref: bool = False

    def train_config(self, seed):
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           dropout_rate=self.dropout_rate, batch_budget_s=self.batch_budget_s,
                           n_buckets=self.n_buckets, seed=seed)

    @classmethod
    def from_file(cls, path, **overrides):
        """Read the ``[experiment]`` section of an INI file; ``overrides`` win."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        values = dict(parser["experiment"]) if parser.has_section("experiment") else {}
        if parser.has_section("external_metrics"):
            values["external_metrics"] = dict(parser["external_metrics"])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values):
        kw = {}
        for key, raw in values.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown experiment setting {key!r}")
            if not isinstance(raw, str):
                kw[key] = raw
            elif key == "n_values":
                kw[key] = tuple(int(v) for v in raw.split(","))
            elif key == "mismatches":
                kw[key] = tuple(parse_mismatches(raw))
            elif key == "metrics":
                kw[key] = tuple(v.strip() for v in raw.split(",") if v.strip())
            elif key in ("evaluate_matched", "reuse_eval_models", "exclude_zero_ref"):
                kw[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key == "architecture":
                kw[key] = raw.strip()
            else:
                kw[key] = type(cls.__dataclass_fields__[key].default)(raw)
        return cls(**kw)

    def snapshot(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mismatches"] = [s.label for s in self.mismatches]
        d["n_values"] = list(self.n_values)
        d["metrics"] = list(self.metrics)
        return d


@dataclass
class FoldResult:
    fold: int
    scores: dict
    ref_scores: dict
    match_scores: dict | None = None
    audit: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def audit_fold(train_sets, test_set):
    """Raise :class:`AuditError` if any training dataset shares items with the test dataset."""
    test_usage = dataset_usage(test_set)
    checked = {}
    for name, ds in train_sets.items():
        clash = dataset_usage(ds).overlap(test_usage)
        if clash:
            raise AuditError(f"{name} and test data share {len(clash)} item(s): {clash[:5]}")
        checked[name] = len(ds)
    checked["test"] = len(test_set)
    return checked


def _train(config, seed, dataset, cache=None, key=None):
    if cache is not None and key in cache:
        return cache[key]
    model = make_model(config.architecture, config.train_config(seed)).train(dataset)
    if cache is not None:
        cache[key] = model
    return model


def run_fold(plan, config, registry, out_dir=None, cache=None):
    """Train the evaluated and reference models of one fold and score both on its test set."""
    master, n, i, label = config.master_seed, plan.n, plan.fold, plan.mismatch.label
    d_train = generate_dataset(plan.condition(plan.train_ids, "train"), config.train_hours,
                               derive_seed(master, n, i, "train"), registry)
    d_ref = generate_dataset(plan.condition(plan.ref_train_ids, "train"), config.train_hours,
                             derive_seed(master, n, i, label, "ref_train"), registry)
    d_test = generate_dataset(plan.condition(plan.test_ids, "test"), config.test_hours,
                              derive_seed(master, n, i, label, "test"), registry)
    for name, ds in (("train", d_train), ("ref_train", d_ref), ("test", d_test)):
        if len(ds) == 0:
            raise ValueError(f"fold {i}: empty {name} dataset")
    train_sets = {"train": d_train, "ref_train": d_ref}
    d_match = None
    if config.evaluate_matched:
        d_match = generate_dataset(plan.condition(plan.train_ids, "test"), config.test_hours,
                                   derive_seed(master, n, i, "match_test"), registry)
        audit_fold({"train": d_train}, d_match)
    audit = audit_fold(train_sets, d_test)

    reuse = cache if config.reuse_eval_models else None
    model = _train(config, derive_seed(master, n, i, "eval"), d_train, reuse, (n, i))
    ref = _train(config, derive_seed(master, n, i, label, "ref"), d_ref)

    fns = metrics_mod.resolve_metrics(config.metrics, config.external_metrics)
    eval_scores = metrics_mod.evaluate(model, d_test, fns)
    ref_scores = metrics_mod.evaluate(ref, d_test, fns)
    match = None
    if d_match is not None:
        match_scores = metrics_mod.evaluate(model, d_match, fns)
        match = metrics_mod.dataset_means(match_scores)

    result = FoldResult(i, metrics_mod.dataset_means(eval_scores),
                        metrics_mod.dataset_means(ref_scores), match, audit)
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold_{i}"
        model.save(fold_dir / "eval" / "checkpoint.npz")
        ref.save(fold_dir / "ref" / "checkpoint.npz")
        rows = [("eval", s) for s in eval_scores] + [("ref", s) for s in ref_scores]
        if d_match is not None:
            rows += [("match", s) for s in match_scores]
        _write_test_scores(rows, fold_dir / "test_scores.csv")
        _atomic_write(fold_dir / "result.json", result.to_json())
    return result


def _write_test_scores(rows, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "mixture_id", "metric", "value"])
        for model, s in rows:
            w.writerow([model, s.mixture_id, s.metric_id, repr(s.value)])


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def load_fold(out_dir, fold):
    path = Path(out_dir) / f"fold_{fold}" / "result.json"
    if path.exists():
        return FoldResult.from_json(path.read_text())
    return None


@dataclass
class GapReport:
    architecture: str
    n: int
    mismatch: str
    metric: str
    scores: tuple
    ref_scores: tuple
    gap: float
    gap_std: float
    match_scores: tuple | None = None

    @property
    def degree(self):
        return len(self.mismatch.split(","))


def gap_reports(architecture, n, mismatch, results, metric_names, exclude_zero=False):
    reports = []
    for metric in metric_names:
        have = [r for r in results if metric in r.scores and metric in r.ref_scores]
        if len(have) < len(results):
            log.warning("%s unavailable in %d fold(s)", metric, len(results) - len(have))
        if not have:
            continue
        e = tuple(r.scores[metric] for r in have)
        e_ref = tuple(r.ref_scores[metric] for r in have)
        rel = [100.0 * (a - b) / b for a, b in zip(e, e_ref) if b != 0]
        match = None
        if all(r.match_scores and metric in r.match_scores for r in have):
            match = tuple(r.match_scores[metric] for r in have)
        reports.append(GapReport(architecture, n, mismatch.label, metric, e, e_ref,
                                 generalization_gap(e, e_ref, exclude_zero),
                                 float(np.std(rel)) if rel else float("nan"), match))
    return reports


REPORT_COLUMNS = (["architecture", "n", "mismatch", "metric"]
                  + [f"E_{i}" for i in range(1, N_FOLDS + 1)]
                  + [f"E_ref_{i}" for i in range(1, N_FOLDS + 1)]
                  + ["gap_pct", "gap_std_pct"]
                  + [f"E_match_{i}" for i in range(1, N_FOLDS + 1)])


def write_gap_report(reports, out_dir):
    """``gap_report.csv`` (exact float reprs) and an aligned ``gap_report.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = lambda vals: [repr(float(v)) for v in vals] + [""] * (N_FOLDS - len(vals))
    with open(out_dir / "gap_report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.architecture, r.n, r.mismatch, r.metric, *fmt(r.scores),
                        *fmt(r.ref_scores), repr(float(r.gap)), repr(float(r.gap_std)),
                        *fmt(r.match_scores or ())])
    lines = [f"{'arch':<8}{'N':>3}  {'mismatch':<20}{'metric':<12}{'mean E':>9}{'mean Eref':>11}"
             f"{'gap':>9}{'std':>8}"]
    for r in reports:
        lines.append(f"{r.architecture:<8}{r.n:>3}  {r.mismatch:<20}{r.metric:<12}"
                     f"{np.mean(r.scores):>9.2f}{np.mean(r.ref_scores):>11.2f}"
                     f"{format_gap(r.gap):>9}{r.gap_std:>7.1f}%")
    (out_dir / "gap_report.txt").write_text("\n".join(lines) + "\n")


def format_gap(gap):
    return f"{gap:.0f}%".replace("-", "−") if np.isfinite(gap) else ""


def read_gap_report(path):
    def floats(row, prefix):
        return tuple(float(row[f"{prefix}_{i}"]) for i in range(1, N_FOLDS + 1)
                     if row.get(f"{prefix}_{i}"))
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(GapReport(row["architecture"], int(row["n"]), row["mismatch"],
                                 row["metric"], floats(row, "E"), floats(row, "E_ref"),
                                 float(row["gap_pct"]), float(row["gap_std_pct"]),
                                 floats(row, "E_match") or None))
    return out


def aggregate(reports):
    """Mean score and gap per (architecture, N, metric, mismatch degree).

    The ``Match`` row averages the evaluated models' matched-condition
    scores when those were collected.
    """
    cells = {}
    for r in reports:
        key = (r.architecture, r.n, r.metric)
        cells.setdefault(key + (r.degree,), []).append((float(np.mean(r.scores)), r.gap))
        if r.match_scores:
            cells.setdefault(key + (0,), []).append((float(np.mean(r.match_scores)), None))
    rows = []
    for key in sorted(cells):
        vals = cells[key]
        gaps = [g for _, g in vals if g is not None]
        rows.append(dict(architecture=key[0], n=key[1], metric=key[2],
                         scenario=DEGREE_NAMES[key[3]], degree=key[3],
                         score=float(np.mean([s for s, _ in vals])),
                         gap=float(np.mean(gaps)) if gaps else None, runs=len(vals)))
    return rows


def write_summary(rows, out_dir):
    out_dir = Path(out_dir)
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["architecture", "n", "metric", "scenario", "score", "gap_pct", "runs"])
        for r in rows:
            w.writerow([r["architecture"], r["n"], r["metric"], r["scenario"], repr(r["score"]),
                        "" if r["gap"] is None else repr(r["gap"]), r["runs"]])
    lines = []
    for (arch, n, metric) in sorted({(r["architecture"], r["n"], r["metric"]) for r in rows}):
        lines.append(f"{arch}  N={n}  {metric}")
        got = {r["degree"]: r for r in rows
               if (r["architecture"], r["n"], r["metric"]) == (arch, n, metric)}
        for degree, name in DEGREE_NAMES.items():
            r = got.get(degree)
            score = f"{r['score']:8.2f}" if r else f"{'':8}"
            gap = format_gap(r["gap"]) if r and r["gap"] is not None else ""
            lines.append(f"  {name:<14}{score}  {gap:>6}")
        lines.append("")
    (out_dir / "summary.txt").write_text("\n".join(lines))


def _fold_job(args):
    plan, config, registry, out_dir = args
    return run_fold(plan, config, registry, out_dir)


def run_experiment(config, registry, out_dir, resume=False, jobs=1):
    """Run every requested (N, mismatch) scenario; returns the gap reports.

    Folds already holding a ``result.json`` are skipped when ``resume`` is set.
    Failed folds are logged and leave their scenario out of the report; the
    failures are re-raised as one ``RuntimeError`` once everything else ran.
    """
    out_dir = Path(out_dir)
    reports, failures, cache = [], [], {}
    for n in config.n_values:
        for mismatch in config.mismatches:
            scen_dir = out_dir / f"N{n}_{mismatch.label.replace(',', '+')}"
            plans = plan_folds(n, mismatch)
            results = {}
            todo = []
            for plan in plans:
                done = load_fold(scen_dir, plan.fold) if resume else None
                if done is not None:
                    results[plan.fold] = done
                else:
                    todo.append(plan)
            if jobs > 1 and len(todo) > 1:
                with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
                    futures = {pool.submit(_fold_job, (p, config, registry, scen_dir)): p
                               for p in todo}
                    for fut in concurrent.futures.as_completed(futures):
                        p = futures[fut]
                        try:
                            results[p.fold] = fut.result()
                        except Exception as exc:
                            failures.append((n, mismatch.label, p.fold, exc))
            else:
                for p in todo:
                    try:
                        results[p.fold] = run_fold(p, config, registry, scen_dir, cache)
                    except Exception as exc:
                        log.error("N=%d %s fold %d failed: %s", n, mismatch.label, p.fold, exc)
                        failures.append((n, mismatch.label, p.fold, exc))
            if len(results) < len(plans):
                continue
            ordered = [results[p.fold] for p in plans]
            scen = gap_reports(config.architecture, n, mismatch, ordered, config.metrics,
                               config.exclude_zero_ref)
            write_gap_report(scen, scen_dir)
            reports.extend(scen)
    write_gap_report(reports, out_dir)
    write_summary(aggregate(reports), out_dir)
    if failures:
        summary = "; ".join(f"N={n} {m} fold {f}: {e}" for n, m, f, e in failures)
        raise RuntimeError(f"{len(failures)} fold(s) failed: {summary}")
    return reports


def default_jobs():
    return max(1, os.cpu_count() or 1)
