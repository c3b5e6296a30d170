"""Evaluate models trained at one agent count on other agent counts.

Trains one model per seed at the configured count (or loads ``--checkpoint``)
and reports the seed-mean RMSE per evaluated count.

    python3 scripts/sweep_agents.py --counts 10 15 20 25 30 --seeds 0 1 2
"""

import numpy as np
from _common import base_parser, resolve

from vqloc.evaluation import AGENT_SWEEP_FIELDS, sweep_agents, write_csv
from vqloc.training import load_checkpoint, train


def main():
    parser = base_parser(__doc__.splitlines()[0])
    parser.add_argument("--counts", type=int, nargs="+", default=[10, 15, 20, 25, 30])
    parser.add_argument("--checkpoint")
    parser.add_argument("--mode", choices=("vq", "mpnn"), default="vq")
    args = parser.parse_args()
    cfg, out = resolve(args)
    per_seed = []
    for seed in args.seeds:
        if args.checkpoint:
            params = load_checkpoint(args.checkpoint, cfg.model)["params"]
        else:
            params = train(cfg, seed=seed, mode=args.mode).params
        per_seed.append(sweep_agents(params, cfg, args.counts, seed=seed, mode=args.mode))
    rows = [
        {"N_a": group[0]["N_a"], "rmse": float(np.mean([r["rmse"] for r in group])), "n_mc": sum(r["n_mc"] for r in group)}
        for group in zip(*per_seed)
    ]
    write_csv(rows, AGENT_SWEEP_FIELDS, out / "sweep_agents.csv")
    for r in rows:
        print(f"N_a={r['N_a']:3d}  rmse={r['rmse']:.3f}")


if __name__ == "__main__":
    main()
