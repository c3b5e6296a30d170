"""RMSE evaluation, parameter sweeps and a least-squares reference solver."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .comms import CommCostSpec, Method, comm_cost, count_runtime_bits
from .config import ModelConfig, RunConfig
from .mpnn import ModelParams, collate, forward
from .scenario import Scenario
from .training import Dataset, make_dataset, train

log = logging.getLogger(__name__)

EVAL_FIELDS = ("method", "K", "bits_per_node", "rmse", "n_mc", "seed")
CODEBOOK_SWEEP_FIELDS = ("K", "bits", "rmse", "rmse_std", "n_seeds")
AGENT_SWEEP_FIELDS = ("N_a", "rmse", "n_mc")


class EvaluationError(ValueError):
    pass


def rmse(estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Mean over runs of the per-run root-mean-square agent error."""
    return float(np.mean(per_run_rmse(estimates, truths)))


def per_run_rmse(estimates, truths) -> np.ndarray:
    if len(estimates) == 0 or len(estimates) != len(truths):
        raise EvaluationError("need the same, non-zero number of estimate and truth runs")
    out = []
    for est, tru in zip(estimates, truths):
        est = np.asarray(est, dtype=float).reshape(-1, 2)
        tru = np.asarray(tru, dtype=float).reshape(-1, 2)
        if est.shape != tru.shape or len(est) == 0:
            raise EvaluationError(f"shape mismatch {est.shape} vs {tru.shape}")
        out.append(np.sqrt(np.sum((est - tru) ** 2) / len(est)))
    return np.array(out)


@dataclass
class EvalReport:
    method: str
    rmse: float
    n_mc: int
    bits_per_node: float
    per_run: list[float] = field(default_factory=list)
    K: int | None = None
    seed: int | None = None

    def row(self) -> dict:
        return {
            "method": self.method,
            "K": self.K if self.K is not None else "",
            "bits_per_node": self.bits_per_node,
            "rmse": self.rmse,
            "n_mc": self.n_mc,
            "seed": self.seed if self.seed is not None else "",
        }


# -- least squares reference ---------------------------------------------------


def _range_residuals(x_agents, scenario: Scenario, free: np.ndarray, use: np.ndarray):
    pos = scenario.positions.copy()
    pos[free] = x_agents.reshape(-1, 2)
    e = scenario.edges[use]
    diff = pos[e[:, 1]] - pos[e[:, 0]]
    d = np.sqrt(np.sum(diff * diff, axis=1))
    return scenario.measurements[use] - d, diff, np.maximum(d, 1e-12), e


def least_squares_oracle(scenario: Scenario, iterations: int = 100, init: np.ndarray | None = None) -> np.ndarray:
    """Levenberg-damped Gauss-Newton on all range residuals touching an agent.

    Anchors stay fixed; agents start at their prior means unless ``init``
    (agent rows only) is given.  Returns agent positions in agent order.
    """
    free = scenario.agents
    slot = -np.ones(scenario.num_nodes, dtype=np.intp)
    slot[free] = np.arange(len(free))
    use = (slot[scenario.edges[:, 0]] >= 0) | (slot[scenario.edges[:, 1]] >= 0)
    x = (scenario.prior_means[free] if init is None else np.asarray(init, dtype=float)).reshape(-1).copy()
    n = x.size
    lam = 1e-3
    r, diff, d, e = _range_residuals(x, scenario, free, use)
    cost = float(r @ r)
    for _ in range(iterations):
        # d(distance)/d(position): +u for receiver i, -u for sender j
        u = diff / d[:, None]
        J = np.zeros((len(r), n))
        rows = np.arange(len(r))
        for end, sign in ((1, 1.0), (0, -1.0)):
            s = slot[e[:, end]]
            m = s >= 0
            J[rows[m], 2 * s[m]] += sign * u[m, 0]
            J[rows[m], 2 * s[m] + 1] += sign * u[m, 1]
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < 1e-13:
            break
        A = J.T @ J
        while True:
            try:
                step = np.linalg.solve(A + lam * np.eye(n), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new, diff_new, d_new, _ = _range_residuals(x + step, scenario, free, use)
            new_cost = float(r_new @ r_new)
            if new_cost < cost:
                x = x + step
                r, diff, d, cost = r_new, diff_new, d_new, new_cost
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e12:
                return x.reshape(-1, 2)
        if np.max(np.abs(step)) < 1e-12:
            break
    return x.reshape(-1, 2)


# -- evaluation ------------------------------------------------------------


def evaluate(
    data: Dataset,
    mode: str,
    params: ModelParams | None = None,
    model: ModelConfig | None = None,
    header_bits: int = 32,
    scalar_bits: int = 32,
    batch_size: int = 64,
    lsq_iterations: int = 100,
    seed: int | None = None,
) -> EvalReport:
    """RMSE of one estimator over every scenario in ``data``.

    ``bits_per_node`` is the transmitted bits per agent counted from the run
    trace, averaged over scenarios (0 for the prior, NaN for the centralized
    least-squares solver).
    """
    truths = [sc.positions[sc.agents] for sc in data.scenarios]
    bits = []
    if mode == "prior":
        estimates = [sc.prior_means[sc.agents] for sc in data.scenarios]
        bits = [0.0]
    elif mode == "lsq":
        estimates = [least_squares_oracle(sc, lsq_iterations) for sc in data.scenarios]
        bits = [float("nan")]
    elif mode in ("vq", "mpnn"):
        if params is None or model is None:
            raise EvaluationError(f"mode {mode!r} needs trained parameters")
        estimates = []
        for start in range(0, len(data), batch_size):
            rows = range(start, min(start + batch_size, len(data)))
            batch = collate([data.scenarios[r] for r in rows], [data.inits[r] for r in rows])
            out = forward(params, model, batch, mode=mode, header_bits=header_bits, scalar_bits=scalar_bits)
            est = out.estimates.value
            sent = count_runtime_bits(out.state.trace, batch.num_nodes)
            for k, r in enumerate(rows):
                a0, a1 = batch.agent_offsets[k], batch.agent_offsets[k + 1]
                estimates.append(est[a0:a1])
                bits.append(float(np.mean(sent[batch.node_offsets[k] + data.scenarios[r].agents])))
    else:
        raise EvaluationError(f"unknown mode {mode!r}")
    runs = per_run_rmse(estimates, truths)
    return EvalReport(
        method={"vq": "VQ-MPNN", "mpnn": "MPNN", "prior": "prior", "lsq": "LSQ"}[mode],
        rmse=float(np.mean(runs)),
        n_mc=len(runs),
        bits_per_node=float(np.mean(bits)),
        per_run=runs.tolist(),
        K=model.K if (model is not None and mode == "vq") else None,
        seed=seed,
    )


# -- sweeps ------------------------------------------------------------------


def sweep_codebook(cfg: RunConfig, K_values: Sequence[int], seeds: Sequence[int] | None = None, test_size: int | None = None) -> list[dict]:
    """Train one VQ model per (K, seed) and report seed-mean test RMSE per K.

    ``bits`` follows the closed-form cost with the configured neighbour count.
    """
    seeds = list(cfg.seeds if seeds is None else seeds)
    rows = []
    for K in sorted(set(K_values)):
        run_cfg = cfg.replace(model={"K": K})
        scores = []
        for seed in seeds:
            result = train(run_cfg, seed=seed, mode="vq")
            test = make_dataset(cfg.scenario, test_size or cfg.eval.n_test, "test", seed)
            scores.append(evaluate(test, "vq", result.params, run_cfg.model, cfg.comms.H, cfg.comms.Q).rmse)
            log.info("K=%d seed=%d rmse=%.3f", K, seed, scores[-1])
        bits = comm_cost(
            Method.VQ_MPNN, CommCostSpec(neighbors=cfg.comms.neighbors, H=cfg.comms.H, T=cfg.model.T, K=K)
        )
        rows.append(
            {"K": K, "bits": bits, "rmse": float(np.mean(scores)), "rmse_std": float(np.std(scores)), "n_seeds": len(scores)}
        )
    return rows


def sweep_agents(
    params: ModelParams,
    cfg: RunConfig,
    agent_counts: Sequence[int],
    seed: int = 0,
    n_test: int | None = None,
    mode: str = "vq",
) -> list[dict]:
    """Evaluate one trained model on test scenarios with other agent counts."""
    rows = []
    for n_agents in sorted(set(agent_counts)):
        scen = dataclasses.replace(cfg.scenario, num_agents=n_agents)
        test = make_dataset(scen, n_test or cfg.eval.n_test, "test", seed)
        rep = evaluate(test, mode, params, cfg.model, cfg.comms.H, cfg.comms.Q)
        rows.append({"N_a": n_agents, "rmse": rep.rmse, "n_mc": rep.n_mc})
    return rows


def write_csv(rows: Sequence[dict], fields: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)
