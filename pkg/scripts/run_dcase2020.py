"""Full-scale run on the DCASE 2020 Task 2 development data.

    python3 scripts/run_dcase2020.py --data /path/to/dcase2020 --out runs/dcase2020

``--data`` is the directory holding ``<machine_type>/train`` and
``<machine_type>/test`` (dev and additional-training roots are merged).
Uses configs/dcase2020.cfg: STgram-MFN backbone, 100 + 300 epochs.
This is GPU-scale work; on CPU expect days.
"""

import argparse
from pathlib import Path

from clpscf.config import load_config
from clpscf.pipeline import load_splits, run_two_stage
from clpscf.scoring import write_report, write_scores_csv

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--config", default=str(ROOT / "configs" / "dcase2020.cfg"))
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--baseline", action="store_true", help="skip pretraining (random init)")
    ap.add_argument("--out", default="runs/dcase2020")
    args = ap.parse_args()

    overrides = {}
    for item in args.set:
        key, _, value = item.partition("=")
        section, _, name = key.partition(".")
        overrides[(section, name)] = value
    cfg = load_config(args.config, overrides)
    train, test = load_splits(args.data, cfg)
    out = Path(args.out)
    fin, report, records, pre = run_two_stage(train, test, cfg, pretrained=not args.baseline,
                                              workers=args.workers, log_dir=out / "logs")
    pre.save(out / "checkpoints" / "pretrained.ckpt")
    fin.save(out / "checkpoints" / "finetuned.ckpt")
    write_scores_csv(records, out / "reports" / "scores.csv", fin.label_space)
    write_report(report, out / "reports" / "report.json", out / "reports" / "report.txt")
    print(report.table())


if __name__ == "__main__":
    main()
