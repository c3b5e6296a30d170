"""Shared argument handling for the experiment scripts."""

import argparse
import logging
from pathlib import Path

from vqloc.config import load_config


def base_parser(description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--config", help="JSON config; defaults reproduce the reference setup")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--n-train", type=int, help="override train.n_train")
    parser.add_argument("--n-val", type=int, help="override train.n_val")
    parser.add_argument("--n-test", type=int, help="override eval.n_test")
    parser.add_argument("--epochs", type=int, help="override train.epochs")
    parser.add_argument("--out", default="results", help="output directory")
    return parser


def resolve(args):
    """Config with command-line overrides applied, plus the output directory."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    train = {k: v for k, v in (("n_train", args.n_train), ("n_val", args.n_val), ("epochs", args.epochs)) if v}
    cfg = cfg.replace(train=train, eval={"n_test": args.n_test} if args.n_test else {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out
