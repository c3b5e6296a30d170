"""Per-epoch train and validation loss over several seeds.

Writes one log per seed and ``learning_curves.csv`` with the seed mean and
standard deviation of every logged quantity per epoch.

    python3 scripts/learning_curves.py --seeds 0 1 2 3 4 --mode vq
"""

import csv

import numpy as np
from _common import base_parser, resolve

from vqloc.training import LOG_FIELDS, train


def main():
    parser = base_parser(__doc__.splitlines()[0])
    parser.add_argument("--mode", choices=("vq", "mpnn"), default="vq")
    args = parser.parse_args()
    cfg, out = resolve(args)
    logs = [train(cfg, seed=s, mode=args.mode, log_path=out / f"train_log_seed{s}.csv").log for s in args.seeds]
    # seeds may stop early at different epochs; aggregate over the common span
    span = min(len(log) for log in logs)
    fields = [f for f in LOG_FIELDS if f != "epoch"]
    with open(out / "learning_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"{f}_{stat}" for f in fields for stat in ("mean", "std")])
        for e in range(span):
            vals = [[log[e][f] for log in logs] for f in fields]
            w.writerow([logs[0][e]["epoch"]] + [x for v in vals for x in (np.mean(v), np.std(v))])
    print(f"wrote {span} epochs for {len(logs)} seeds to {out / 'learning_curves.csv'}")


if __name__ == "__main__":
    main()
