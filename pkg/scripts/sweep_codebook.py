"""RMSE against communication bits for a range of codebook sizes.

    python3 scripts/sweep_codebook.py --K 64 256 1024 2048 --seeds 0 1 2 3 4
"""

from _common import base_parser, resolve

from vqloc.evaluation import CODEBOOK_SWEEP_FIELDS, sweep_codebook, write_csv


def main():
    parser = base_parser(__doc__.splitlines()[0])
    parser.add_argument("--K", type=int, nargs="+", default=[64, 256, 1024])
    args = parser.parse_args()
    cfg, out = resolve(args)
    rows = sweep_codebook(cfg, args.K, seeds=args.seeds)
    write_csv(rows, CODEBOOK_SWEEP_FIELDS, out / "sweep_codebook.csv")
    for r in rows:
        print(f"K={r['K']:5d}  bits={r['bits']:5d}  rmse={r['rmse']:.3f} +/- {r['rmse_std']:.3f}")


if __name__ == "__main__":
    main()
