"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Runtime failures
print a single line ``clpscf: error[<kind>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, apply_overrides, load_config
from .dataio import ToySpec, build_label_space, generate_toy_dataset, write_dataset
from .model import ModelCheckpoint
from .pipeline import load_splits, model_config
from .scoring import evaluate, export_latents, plot_tsne, write_report, write_scores_csv
from .training import finetune, pretrain, set_deterministic

log = logging.getLogger("clpscf")

RUN_DIRS = ("checkpoints", "reports", "plots", "logs")


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# --------------------------------------------------------------------------- helpers

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise CLIError("usage", f"--set expects section.key=value, got {item!r}")
        out[(section.strip(), name.strip())] = value.strip()
    return out


def _resolve_config(args, base: RunConfig | None = None, extra: dict | None = None) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    overrides.update(extra or {})
    try:
        if base is not None and not getattr(args, "config", None):
            return apply_overrides(base, overrides)
        return load_config(getattr(args, "config", None), overrides)
    except (ValueError, OSError) as exc:
        raise CLIError("config", str(exc)) from exc


def _run_dir(out) -> Path:
    root = Path(out)
    for d in RUN_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    return root


def _snapshot(cfg: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def _load_checkpoint(path) -> ModelCheckpoint:
    if not Path(path).is_file():
        raise CLIError("missing-file", f"checkpoint not found: {path}")
    try:
        return ModelCheckpoint.load(path)
    except (ValueError, KeyError) as exc:
        raise CLIError("bad-checkpoint", f"{path}: {exc}") from exc


def _config_from_checkpoint(ckpt: ModelCheckpoint) -> RunConfig:
    if ckpt.run_config:
        return RunConfig.from_dict(ckpt.run_config)
    return RunConfig()


def _data_root(args, cfg: RunConfig) -> str:
    root = getattr(args, "data", None) or cfg.data.root
    if not root:
        raise CLIError("usage", "no dataset given (--data) and none recorded in the checkpoint")
    if not Path(root).is_dir():
        raise CLIError("missing-file", f"dataset root not found: {root}")
    return str(root)


# --------------------------------------------------------------------------- commands

def cmd_gen_toy(args) -> int:
    spec = ToySpec(num_types=args.types, ids_per_type=args.ids, clips_per_id=args.clips,
                   clip_seconds=args.seconds, sample_rate=args.rate,
                   anomaly_fraction_test=args.anomaly_fraction, seed=args.seed,
                   anomaly_snr_db=args.snr_db)
    train, test = generate_toy_dataset(spec)
    manifest = write_dataset(train + test, args.out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    print(f"wrote {len(train)} train and {len(test)} test clips to {args.out} "
          f"(manifest sha256 {digest[:16]})")
    return 0


def cmd_config(args) -> int:
    cfg = _resolve_config(args)
    print(json.dumps(cfg.resolved(), indent=2, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    extra = {("data", "root"): args.data} if args.data else {}
    cfg = _resolve_config(args, extra=extra)
    root = _data_root(args, cfg)
    run = _run_dir(args.out)
    set_deterministic(True)
    train, _ = load_splits(root, cfg)
    labels = build_label_space(train)
    ckpt = pretrain(train, labels, model_config(cfg, len(labels)), cfg.pretrain,
                    log_path=run / "logs" / "pretrain.jsonl", checkpoint_dir=run / "checkpoints",
                    checkpoint_every=args.checkpoint_every, workers=args.workers,
                    run_config=cfg.to_dict())
    path = ckpt.save(run / "checkpoints" / "pretrained.ckpt")
    _snapshot(cfg, run / "checkpoints" / "pretrained.config.json")
    print(f"pretrained checkpoint: {path}")
    return 0


def cmd_finetune(args) -> int:
    pre = _load_checkpoint(args.from_)
    if pre.stage != "pretrained":
        raise CLIError("stage-mismatch", f"{args.from_} is a {pre.stage} checkpoint; "
                                         "finetune needs a pretrained one")
    extra = {("data", "root"): args.data} if args.data else {}
    cfg = _resolve_config(args, base=_config_from_checkpoint(pre), extra=extra)
    root = _data_root(args, cfg)
    run = _run_dir(args.out)
    set_deterministic(True)
    train, _ = load_splits(root, cfg)
    labels = build_label_space(train)
    if labels != pre.label_space:
        raise CLIError("label-mismatch", f"data has {len(labels)} machines, checkpoint has "
                                         f"{len(pre.label_space)}")
    fin = finetune(pre, train, cfg.finetune, label_space=labels,
                   log_path=run / "logs" / "finetune.jsonl", checkpoint_dir=run / "checkpoints",
                   checkpoint_every=args.checkpoint_every, workers=args.workers,
                   run_config=cfg.to_dict())
    path = fin.save(run / "checkpoints" / "finetuned.ckpt")
    _snapshot(cfg, run / "checkpoints" / "finetuned.config.json")
    print(f"finetuned checkpoint: {path}")
    return 0


def _finetuned_and_config(args):
    ckpt = _load_checkpoint(args.ckpt)
    if ckpt.stage != "finetuned":
        raise CLIError("stage-mismatch", f"{args.ckpt} is a {ckpt.stage} checkpoint; "
                                         "a finetuned checkpoint is required")
    cfg = _resolve_config(args, base=_config_from_checkpoint(ckpt))
    if cfg.features != ckpt.model_config.feature_cfg:
        raise CLIError("config-mismatch", "feature config differs from the one the checkpoint "
                                          "was trained with")
    return ckpt, cfg


def cmd_evaluate(args) -> int:
    ckpt, cfg = _finetuned_and_config(args)
    if args.score_with_margin:
        cfg = cfg.with_updates(eval={"score_with_margin": True})
    if args.p is not None:
        cfg = cfg.with_updates(eval={"p": args.p})
    root = _data_root(args, cfg)
    run = _run_dir(args.out)
    _, test = load_splits(root, cfg)
    if not test:
        raise CLIError("no-data", f"no labelled test clips under {root}")
    margin = cfg.finetune.margin if cfg.eval.score_with_margin else None
    try:
        report, records = evaluate(ckpt, test, ckpt.label_space, cfg.eval.p,
                                   scale=cfg.finetune.scale, margin=margin, config_hash=cfg.hash)
    except KeyError as exc:
        raise CLIError("label-mismatch", str(exc)) from exc
    write_scores_csv(records, run / "reports" / "scores.csv", ckpt.label_space)
    write_report(report, run / "reports" / "report.json", run / "reports" / "report.txt")
    _snapshot(cfg, run / "reports" / "report.config.json")
    print(report.table())
    return 0


def cmd_tsne(args) -> int:
    ckpt, cfg = _finetuned_and_config(args)
    root = _data_root(args, cfg)
    run = _run_dir(args.out)
    _, test = load_splits(root, cfg)
    if args.machine_type:
        test = [c for c in test if c.machine_type == args.machine_type]
    if not test:
        raise CLIError("no-data", "no test clips to plot")
    table = export_latents(ckpt, test)
    table.write_csv(run / "plots" / "latents.csv")
    perplexity = args.perplexity if args.perplexity is not None else cfg.eval.tsne_perplexity
    for path in plot_tsne(table, run / "plots", perplexity):
        print(f"wrote {path}")
    _snapshot(cfg, run / "plots" / "tsne.config.json")
    return 0


def cmd_run_all(args) -> int:
    run = _run_dir(args.out)
    data = run / "data"
    args.data = str(data)
    rc = cmd_gen_toy(argparse.Namespace(types=args.types, ids=args.ids, clips=args.clips,
                                        seconds=args.seconds, rate=16000,
                                        anomaly_fraction=0.5, seed=args.seed,
                                        snr_db=0.0, out=str(data)))
    if rc:
        return rc
    cmd_pretrain(args)
    args.from_ = str(run / "checkpoints" / "pretrained.ckpt")
    cmd_finetune(args)
    args.ckpt = str(run / "checkpoints" / "finetuned.ckpt")
    args.score_with_margin = False
    args.p = None
    return cmd_evaluate(args)


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clpscf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="config file (default: $CLPSCF_CONFIG)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        p.add_argument("--out", default="run", help="run directory")
        p.add_argument("--workers", type=_positive_int, default=1,
                       help="feature extraction threads (never changes results)")
        if data:
            p.add_argument("--data", help="dataset root in DCASE 2020 layout")

    def toy_args(p):
        p.add_argument("--types", type=_positive_int, default=2)
        p.add_argument("--ids", type=_positive_int, default=2)
        p.add_argument("--clips", type=_positive_int, default=20)
        p.add_argument("--seconds", type=float, default=1.0)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-toy", help="synthesize a toy dataset in DCASE layout")
    toy_args(p)
    p.add_argument("--rate", type=_positive_int, default=16000)
    p.add_argument("--anomaly-fraction", type=float, default=0.5)
    p.add_argument("--snr-db", type=float, default=0.0,
                   help="injected tone power relative to the machine signature")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("config", help="print the resolved configuration")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("pretrain", help="stage 1: contrastive pretraining")
    common(p)
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: ArcFace fine-tuning")
    common(p)
    p.add_argument("--from", dest="from_", required=True, help="pretrained checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score test clips and report AUC/pAUC/mAUC")
    common(p)
    p.add_argument("--ckpt", required=True, help="finetuned checkpoint")
    p.add_argument("--p", type=float, default=None, help="pAUC FPR limit")
    p.add_argument("--score-with-margin", action="store_true",
                   help="apply the ArcFace margin to the claimed class when scoring")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tsne", help="export latent features and plot t-SNE per machine type")
    common(p)
    p.add_argument("--ckpt", required=True, help="finetuned checkpoint")
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--machine-type", default=None)
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("run-all", help="gen-toy, pretrain, finetune and evaluate in one go")
    common(p, data=False)
    toy_args(p)
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        if exc.kind == "usage":
            parser.error(str(exc))
        print(f"clpscf: error[{exc.kind}]: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"clpscf: error[missing-file]: {exc}", file=sys.stderr)
    except (ValueError, RuntimeError, KeyError) as exc:
        print(f"clpscf: error[runtime]: {' '.join(str(exc).split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
