"""RMSE and bits per agent for the prior, least squares, MPNN and VQ-MPNN.

    python3 scripts/compare_methods.py --n-train 600 --n-val 100 --n-test 100
"""

from _common import base_parser, resolve

from vqloc.evaluation import EVAL_FIELDS, evaluate, write_csv
from vqloc.training import make_dataset, train


def main():
    args = base_parser(__doc__.splitlines()[0]).parse_args()
    cfg, out = resolve(args)
    rows = []
    for seed in args.seeds:
        test = make_dataset(cfg.scenario, cfg.eval.n_test, "test", seed)
        reports = [evaluate(test, "prior", seed=seed), evaluate(test, "lsq", lsq_iterations=cfg.eval.lsq_iterations, seed=seed)]
        for mode in ("mpnn", "vq"):
            params = train(cfg, seed=seed, mode=mode).params
            reports.append(evaluate(test, mode, params, cfg.model, cfg.comms.H, cfg.comms.Q, seed=seed))
        rows += [r.row() for r in reports]
        for r in reports:
            print(f"seed {seed}  {r.method:8s}  rmse={r.rmse:.3f}  bits/agent={r.bits_per_node:.0f}")
    write_csv(rows, EVAL_FIELDS, out / "compare_methods.csv")


if __name__ == "__main__":
    main()
