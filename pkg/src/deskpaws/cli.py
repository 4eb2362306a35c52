"""Command-line interface: ``deskpaws {train,eval-nn,fine-tune,verify,gen-data}``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure (including
failed verification checks).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from deskpaws import kernels
from deskpaws.config import load_config
from deskpaws.data import build_dataset, nearest_neighbor_accuracy, write_dataset_csv
from deskpaws.encoder import CheckpointFormatError, ConfigError, load_checkpoint

log = logging.getLogger("deskpaws")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p, out_dir=False, checkpoint=False):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    if out_dir:
        p.add_argument("--out-dir", default=".", help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint file (.paws)")


def build_parser():
    parser = _Parser(prog="deskpaws", description="Desk-scale PAWS semi-supervised training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="pre-train an encoder")
    _common(p, out_dir=True, checkpoint=True)
    p = sub.add_parser("eval-nn", help="soft nearest-neighbour accuracy of a checkpoint")
    _common(p, checkpoint=True)
    p = sub.add_parser("fine-tune", help="linear fine-tuning of a checkpoint")
    _common(p, out_dir=True, checkpoint=True)
    p = sub.add_parser("verify", help="run the non-collapse checks")
    p.add_argument("--out-dir", default=".", help="where to write collapse_escape.csv")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--steps", type=int, default=100)
    p = sub.add_parser("gen-data", help="write the configured dataset as CSV")
    _common(p, out_dir=True)
    return parser


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.insert(0, f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def _require_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_train(args):
    from deskpaws.train import train

    cfg = _config(args)
    result = train(cfg, out_dir=args.out_dir, resume=args.checkpoint)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"step {last.step} epoch {last.epoch} loss {last.loss:.6f} consistency {last.paws_consistency:.6f} "
              f"nn_accuracy {last.nn_accuracy:.4f}")
    print(f"wrote {Path(args.out_dir) / 'checkpoint.paws'}")
    return 0


def cmd_eval_nn(args):
    from deskpaws.train import eval_nn

    cfg = _config(args)
    ckpt = _require_checkpoint(args)
    ds = build_dataset(cfg.data)
    if ckpt.params.input_dim not in (None, ds.train_x.shape[1]):
        raise CheckpointFormatError(f"checkpoint expects {ckpt.params.input_dim} inputs, data has {ds.train_x.shape[1]}")
    acc = eval_nn(ckpt.params, ds.labeled_x, ds.labeled_y, ds.test_x, ds.test_y, ds.num_classes, cfg.paws.tau)
    base = nearest_neighbor_accuracy(ds.labeled_x, ds.labeled_y, ds.test_x, ds.test_y)
    print(f"paws_nn_accuracy {acc:.4f}")
    print(f"raw_1nn_accuracy {base:.4f}")
    return 0


def cmd_fine_tune(args):
    from deskpaws.train import fine_tune_linear

    cfg = _config(args)
    ckpt = _require_checkpoint(args)
    ds = build_dataset(cfg.data)
    res = fine_tune_linear(ckpt.params, ds.labeled_x, ds.labeled_y, ds.test_x, ds.test_y, ds.num_classes, cfg,
                           feature_std=float(ds.train_x.std()))
    print(f"selected lr {res.lr} epochs {res.epochs} val_accuracy {res.val_accuracy:.4f} test_accuracy {res.test_accuracy:.4f}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fine_tune.json").write_text(json.dumps({
        "lr": res.lr, "epochs": res.epochs, "val_accuracy": res.val_accuracy, "test_accuracy": res.test_accuracy,
        "grid": [dict(zip(("lr", "epochs", "val_accuracy", "val_loss"), g)) for g in res.grid],
    }, indent=2))
    return 0


def cmd_verify(args):
    from deskpaws import verification as v

    rows = v.run_all(seed_count=args.seeds, escape_steps=args.steps)
    width = max(len(r[0]) for r in rows)
    print(f"{'check':<{width}}  result  detail")
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL':<6}  {detail}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = v.run_collapse_escape(v.escape_config(T=0.25), steps=args.steps)
    with (out / "collapse_escape.csv").open("w") as fh:
        fh.write("step,mean_pairwise_distance,mean_pairwise_cosine_distance,prediction_entropy,loss\n")
        for i, d, c, e, l in rep.rows():
            fh.write(f"{i},{d:.17g},{c:.17g},{e:.17g},{'' if np.isnan(l) else f'{l:.17g}'}\n")
    return 0 if all(ok for _, ok, _ in rows) else 2


def cmd_gen_data(args):
    cfg = _config(args)
    ds = build_dataset(cfg.data)
    for path in write_dataset_csv(ds, args.out_dir):
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-nn": cmd_eval_nn,
    "fine-tune": cmd_fine_tune,
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"deskpaws: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.info("kernel backend: %s", kernels.BACKEND)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointFormatError, ValueError, FileNotFoundError) as exc:
        print(f"deskpaws: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"deskpaws: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
