"""``coughpipe`` command line: extract, pretrain, cv, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .audio import COUGH_LABELS, PRETRAIN_LABELS, Label, ManifestError, load_manifest
from .balance import SmoteConfig
from .cache import CachedFeatures, FeatureCache
from .features import FEATURE_GRID, FeatureConfig, feature_grid
from .models import CLASS_ORDER, GRID_FIELDS, TrainConfig, classifier_grid, pretrain
from .nn import Checkpoint

log = logging.getLogger("coughpipe")

CACHE_ENV = "COUGHPIPE_CACHE"
TASKS = ("two_class", "three_class", "pretrain")
ARCHITECTURES = ("cnn", "lstm", "resnet_mini")
PRETRAIN_FEATURES = {"M": 39, "F": 1024, "S": 150}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; built from defaults, then a JSON file, then flags."""

    manifest: str | None = None
    pretrain_manifest: str | None = None
    task: str = "two_class"
    arch: str = "cnn"
    transfer: str | None = None
    seed: int | None = None
    out: str = "coughpipe-out"
    cache: str | None = None
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    # lists of allowed M / F / S values; missing keys use the full grid
    features: dict = field(default_factory=dict)
    # per-field subsets of the classifier search grid
    classifier: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    smote_k: int = 5
    outer_k: int = 5
    inner_k: int = 4
    resnet: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config_path: str | None, flags: dict) -> "RunConfig":
        values: dict = {}
        if config_path:
            try:
                values = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {config_path}: {exc}") from None
            if not isinstance(values, dict):
                raise UsageError("config file must hold a JSON object")
            unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            base = Path(config_path).parent
            for key in ("manifest", "pretrain_manifest", "transfer", "out", "cache"):
                if values.get(key) and not Path(values[key]).is_absolute():
                    values[key] = str(base / values[key])
        values.update({k: v for k, v in flags.items() if v is not None})
        cfg = cls(**values)
        if cfg.task not in TASKS:
            raise UsageError(f"--task must be one of {TASKS}")
        if cfg.arch not in ARCHITECTURES:
            raise UsageError(f"--arch must be one of {ARCHITECTURES}")
        if cfg.workers < 1:
            raise UsageError("--workers must be >= 1")
        return cfg

    def require_seed(self) -> int:
        if self.seed is None:
            raise UsageError("a seed is required (--seed or \"seed\" in the config file)")
        return int(self.seed)

    def cache_dir(self) -> Path:
        if self.cache:
            return Path(self.cache)
        if os.environ.get(CACHE_ENV):
            return Path(os.environ[CACHE_ENV])
        return Path.home() / ".cache" / "coughpipe"

    def feature_configs(self) -> list[FeatureConfig]:
        unknown = set(self.features) - set(FEATURE_GRID)
        if unknown:
            raise UsageError(f"unknown feature keys {sorted(unknown)}")
        return feature_grid(self.features.get("M"), self.features.get("F"), self.features.get("S"))

    def classifier_configs(self):
        space = "transfer" if self.transfer else self.arch
        allowed = set(GRID_FIELDS[space])
        restrict = {k: tuple(v) for k, v in self.classifier.items() if k in allowed}
        try:
            return classifier_grid(space, **restrict)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from None

    def train_config(self, **over) -> TrainConfig:
        opts = {k: v for k, v in self.train.items() if k in {f.name for f in dataclasses.fields(TrainConfig)}}
        opts.update(over)
        return TrainConfig(**opts)


def _load_manifest(path: str | None, flag: str):
    if not path:
        raise UsageError(f"{flag} is required")
    return load_manifest(path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- commands


def cmd_extract(cfg: RunConfig) -> int:
    manifest = _load_manifest(cfg.manifest or cfg.pretrain_manifest, "--manifest")
    cache = FeatureCache(cfg.cache_dir())
    failed = 0
    for fc in cfg.feature_configs():
        summary = cache.extract(manifest, fc, cfg.workers)
        print(f"M={fc.M} F={fc.F} S={fc.S} [{fc.key()}]: {summary.written} written, "
              f"{summary.skipped} cached, {len(summary.failures)} failed -> {summary.directory}")
        for event_id, err in summary.failures:
            print(f"  failed {event_id}: {err}", file=sys.stderr)
        failed += len(summary.failures)
    if failed:
        print(f"{failed} event extraction(s) failed", file=sys.stderr)
        return 1
    return 0


def _pretrain_feature_config(cfg: RunConfig) -> FeatureConfig:
    f = {**PRETRAIN_FEATURES, **cfg.pretrain.get("features", {})}
    return FeatureConfig(int(f["M"]), int(f["F"]), int(f["S"]))


def cmd_pretrain(cfg: RunConfig) -> int:
    seed = cfg.require_seed()
    manifest = _load_manifest(cfg.pretrain_manifest or cfg.manifest, "--pretrain-manifest")
    coughs = sorted(l.value for l in manifest.labels if l not in PRETRAIN_LABELS)
    if coughs:
        raise UsageError(f"pre-training manifest must not contain cough labels; found {coughs}")
    fc = _pretrain_feature_config(cfg)
    examples = CachedFeatures(manifest, FeatureCache(cfg.cache_dir()), cfg.workers)(fc)
    p = cfg.pretrain
    tc = cfg.train_config(seed=seed, **{k: p[k] for k in ("max_epochs", "patience", "learning_rate",
                                                          "batch_size", "dtype") if k in p})
    build_kw = {}
    if cfg.arch == "cnn":
        build_kw = {k: tuple(p[k]) for k in ("conv_filters", "dense_units") if k in p}
    elif cfg.arch == "lstm":
        build_kw = {k: tuple(p[k]) for k in ("lstm_units", "dense_units") if k in p}
    else:
        build_kw = {k: cfg.resnet[k] for k in ("depth_blocks", "base_filters", "dense_units")
                    if k in cfg.resnet}
    result = pretrain(cfg.arch, examples, tc, SmoteConfig(cfg.smote_k, seed=seed), **build_kw)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out / "pretrain.ckpt")
    _write_text(out / "pretrain_history.json", json.dumps(result.history, indent=2) + "\n")
    print(f"pre-trained {cfg.arch} on {len(examples)} events; best epoch {result.best_epoch} "
          f"(val F1 {result.checkpoint.metadata['best_val_f1']}) -> {out / 'pretrain.ckpt'}")
    return 0


def _task_classes(task: str) -> tuple[Label, ...]:
    if task == "pretrain":
        raise UsageError("cv runs on cough tasks; use the pretrain command for --task pretrain")
    return CLASS_ORDER[2 if task == "two_class" else 3]


def _folds_csv(report) -> str:
    rows = ["fold,test_patients,test_events,f1,accuracy,auc,epochs_run,best_epoch,M,F,S"]
    for f in report.folds:
        feat = f["best_feature"]
        auc_ = "" if f["auc"] is None else repr(f["auc"])
        rows.append(f"{f['fold']},{f['test_patients']},{f['test_events']},{f['f1']!r},{f['accuracy']!r},"
                    f"{auc_},{f['epochs_run']},{f['best_epoch']},{feat['M']},{feat['F']},{feat['S']}")
    return "\n".join(rows) + "\n"


def write_tables(report, out: Path) -> None:
    _write_text(out / "folds.csv", _folds_csv(report))
    if report.roc:
        _write_text(out / "roc.csv", report.roc_csv())


def cmd_cv(cfg: RunConfig) -> int:
    from .evalcv.nested import nested_cv
    from .plots import render_figures

    seed = cfg.require_seed()
    classes = _task_classes(cfg.task)
    manifest = _load_manifest(cfg.manifest, "--manifest")
    extra = sorted(l.value for l in manifest.labels - set(classes))
    if extra:
        raise UsageError(f"manifest labels {extra} do not belong to task {cfg.task}")
    missing = sorted(l.value for l in set(classes) - manifest.labels)
    if missing:
        raise UsageError(f"task {cfg.task} needs labels {missing} in the manifest")

    pretrained = None
    grid = cfg.feature_configs()
    if cfg.transfer:
        pretrained = Checkpoint.load(cfg.transfer)
        fc = pretrained.metadata.get("feature_config")
        if not fc:
            raise UsageError(f"{cfg.transfer} carries no feature configuration")
        grid = [FeatureConfig(**fc)]
    source = CachedFeatures(manifest, FeatureCache(cfg.cache_dir()), cfg.workers)
    settings = {"smote_k": cfg.smote_k, "outer_k": cfg.outer_k, "inner_k": cfg.inner_k}
    if cfg.arch == "resnet_mini":
        r = cfg.resnet
        settings.update(depth_blocks=r.get("depth_blocks", 2), base_filters=r.get("base_filters", 8),
                        resnet_dense=r.get("dense_units", 512))
    result = nested_cv(source, grid, cfg.classifier_configs(), cfg.arch, seed=seed, classes=classes,
                       train_cfg=cfg.train_config(), pretrained=pretrained, workers=cfg.workers,
                       **settings)
    report = result.report
    out = Path(cfg.out)
    _write_text(out / "report.json", report.to_json())
    write_tables(report, out)
    for i, ckpt in enumerate(result.checkpoints):
        ckpt.save(out / f"fold{i}.ckpt")
    render_figures(report, out)
    print(summary_text(report), end="")
    return 0


def summary_text(report) -> str:
    lines = [
        f"task: {report.task}  architecture: {report.architecture}  folds: {len(report.folds)}",
        f"mean F1: {report.mean_f1:.4f}",
        f"sigma F1: {report.sigma_f1:.4f}",
    ]
    if report.auc is not None:
        lines.append(f"AUC: {report.auc:.4f}")
    else:
        lines.append(f"accuracy: {report.mean_accuracy:.4f}")
    if report.head:
        lines.append(f"head: {tuple(report.head)}")
    if report.triage_pass is not None:
        lines.append(f"sensitivity at 0.70 specificity: {report.sensitivity_at_70_specificity:.4f}")
        lines.append(f"sensitivity at 0.80 specificity: {report.sensitivity_at_80_specificity:.4f}")
        lines.append(f"WHO triage: {'PASS' if report.triage_pass else 'FAIL'}")
    else:
        lines.append("WHO triage: n/a (two-class task only)")
    return "\n".join(lines) + "\n"


def cmd_report(path: str, out: str | None, figures: bool = True) -> int:
    from .evalcv.nested import MetricsReport

    try:
        data = json.loads(Path(path).read_text())
        report = MetricsReport.from_dict(data)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"malformed report {path}: {exc}") from None
    print(summary_text(report), end="")
    if figures:
        from .plots import render_figures

        target = Path(out) if out else Path(path).parent
        write_tables(report, target)
        for fig in render_figures(report, target):
            print(f"figure: {fig}")
    return 0


# ---------------------------------------------------------------- parsing


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (flags take precedence)")
    common.add_argument("--manifest", help="classification manifest CSV")
    common.add_argument("--pretrain-manifest", dest="pretrain_manifest",
                        help="sneeze/speech/noise manifest CSV")
    common.add_argument("--task", choices=TASKS)
    common.add_argument("--arch", choices=ARCHITECTURES)
    common.add_argument("--transfer", metavar="CKPT", help="pre-trained checkpoint to fine-tune from")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--cache", help=f"feature cache directory (default ${CACHE_ENV})")
    common.add_argument("--workers", type=int, help="worker processes (default: logical cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coughpipe", description="Cough classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", parents=[common], help="cache feature matrices for a manifest")
    sub.add_parser("pretrain", parents=[common], help="pre-train on sneeze/speech/noise")
    sub.add_parser("cv", parents=[common], help="nested cross-validation")
    rep = sub.add_parser("report", help="summarise a report.json and render figures")
    rep.add_argument("report", help="report.json written by cv")
    rep.add_argument("--out", help="directory for tables and figures (default: next to the report)")
    rep.add_argument("--no-figures", action="store_true")
    return parser


FLAG_KEYS = ("manifest", "pretrain_manifest", "task", "arch", "transfer", "seed", "out", "cache",
             "workers")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.report, args.out, not args.no_figures)
        cfg = RunConfig.build(args.config, {k: getattr(args, k) for k in FLAG_KEYS})
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        return cmd_cv(cfg)
    except (UsageError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
