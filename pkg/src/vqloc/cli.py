"""Command-line entry point: ``vqloc {gen,train,eval,sweep,cost}``.

Exit codes: 0 success, 1 invalid configuration or checkpoint, 2 training
diverged.  ``VQLOC_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import comms
from .config import MODES, ConfigError, RunConfig, load_config, save_config
from .evaluation import (
    AGENT_SWEEP_FIELDS,
    CODEBOOK_SWEEP_FIELDS,
    EVAL_FIELDS,
    evaluate,
    sweep_agents,
    sweep_codebook,
    write_csv,
)
from .scenario import NoiseModel, ScenarioError, generate_scenario
from .training import (
    CheckpointError,
    load_checkpoint,
    make_dataset,
    save_checkpoint,
    scenario_seed,
    train,
)

log = logging.getLogger("vqloc")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return cfg, out


def cmd_gen(cfg: RunConfig, out: Path, args) -> int:
    sc = cfg.scenario
    noise = NoiseModel(sc.noise, sc.sigma)
    seed = cfg.seeds[0]
    if cfg.gen.count:
        (out / "scenarios").mkdir(exist_ok=True)
    for k in range(cfg.gen.count):
        scenario = generate_scenario(
            sc.num_agents, sc.area, sc.comm_range, noise, sc.prior_var, scenario_seed(seed, "test", k)
        )
        scenario.save(out / "scenarios" / f"scenario_{k:04d}.json")
    log.info("wrote %d scenarios", cfg.gen.count)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    mode = args.mode or "vq"
    if mode not in ("vq", "mpnn"):
        raise ConfigError("--mode", "training needs 'vq' or 'mpnn'")
    resume = load_checkpoint(args.checkpoint, cfg.model) if args.checkpoint else None
    result = train(cfg, mode=mode, resume=resume, log_path=out / "train_log.csv")
    last_epoch = result.log[-1]["epoch"] if result.log else (resume["epoch"] if resume else 0)
    save_checkpoint(out / "checkpoint.npz", result.params, cfg.model, last_epoch, result.best_val, result.optimizer)
    log.info("best epoch %d, val %.4f (%s)", result.best_epoch, result.best_val, result.stop_reason)
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def _trained(cfg: RunConfig, args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "required for this mode")
    return load_checkpoint(args.checkpoint, cfg.model)["params"]


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    mode = args.mode or cfg.eval.mode
    params = _trained(cfg, args) if mode in ("vq", "mpnn") else None
    seed = cfg.seeds[0]
    test = make_dataset(cfg.scenario, cfg.eval.n_test, "test", seed)
    report = evaluate(
        test, mode, params, cfg.model, cfg.comms.H, cfg.comms.Q, lsq_iterations=cfg.eval.lsq_iterations, seed=seed
    )
    write_csv([report.row()], EVAL_FIELDS, out / "eval.csv")
    log.info("%s rmse %.4f m over %d runs", report.method, report.rmse, report.n_mc)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    if cfg.sweep.kind == "codebook":
        rows = sweep_codebook(cfg, cfg.sweep.K_values)
        write_csv(rows, CODEBOOK_SWEEP_FIELDS, out / "sweep_codebook.csv")
    else:
        params = _trained(cfg, args)
        rows = sweep_agents(params, cfg, cfg.sweep.agent_counts, seed=cfg.seeds[0], mode=args.mode or "vq")
        write_csv(rows, AGENT_SWEEP_FIELDS, out / "sweep_agents.csv")
    return EXIT_OK


def cmd_cost(cfg: RunConfig, out: Path, args) -> int:
    c = cfg.comms
    specs = comms.reference_cost_specs(
        Q=c.Q, H=c.H, neighbors=c.neighbors, T=cfg.model.T, T_admm=c.T_admm, J=c.J, C=c.C, N_p=c.N_p,
        K=cfg.model.K, M=cfg.model.M,
    )
    rows = comms.cost_table(specs)
    comms.write_cost_csv(rows, out / "cost_table.csv")
    for method, bits in rows:
        log.info("%-8s %d bits", method, bits)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "cost": cmd_cost}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqloc", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config; omitted fields take defaults")
    parser.add_argument("--seed", type=int, help="overrides the config seed list")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--checkpoint", help="model checkpoint (.npz)")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("VQLOC_THREADS")
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            cfg, out = _prepare(args)
            return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, CheckpointError, ScenarioError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
