"""Datasets, the composite loss, the training loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vq
from .config import ModelConfig, RunConfig, ScenarioConfig, TrainConfig
from .diffcore import AdamState, Frozen, Tape, Var, grad_check, optimizer_step
from .mpnn import GraphBatch, ModelParams, collate, forward, init_params, param_shapes
from .scenario import NoiseModel, Scenario, generate_scenario, substream

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "val": 1, "test": 2}
CHECKPOINT_VERSION = 1
LOG_FIELDS = (
    "epoch",
    "train_total",
    "train_mse",
    "train_vq",
    "val_total",
    "codebook_utilization",
    "wall_seconds",
)


class LossError(FloatingPointError):
    """Non-finite loss; ``scenario`` is the offending index within the batch."""

    def __init__(self, message: str, scenario: int | None = None):
        super().__init__(message)
        self.scenario = scenario


class CheckpointError(ValueError):
    pass


# -- data ------------------------------------------------------------------


@dataclass
class Dataset:
    split: str
    scenarios: list[Scenario]
    inits: list[np.ndarray]

    def __len__(self):
        return len(self.scenarios)

    def batch(self, rows) -> GraphBatch:
        return collate([self.scenarios[r] for r in rows], [self.inits[r] for r in rows])


def scenario_seed(seed: int, split: str, index: int) -> int:
    """Independent integer seed per (run seed, split, sample index)."""
    ss = np.random.SeedSequence([int(seed), 7919, SPLITS[split], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_dataset(cfg: ScenarioConfig, n: int, split: str, seed: int) -> Dataset:
    """``n`` scenarios with one frozen prior draw of initial positions each."""
    noise = NoiseModel(cfg.noise, cfg.sigma)
    scenarios, inits = [], []
    for k in range(n):
        sc = generate_scenario(
            cfg.num_agents, cfg.area, cfg.comm_range, noise, cfg.prior_var, scenario_seed(seed, split, k)
        )
        scenarios.append(sc)
        inits.append(sc.initial_positions())
    return Dataset(split, scenarios, inits)


# -- loss ------------------------------------------------------------------


@dataclass
class LossBreakdown:
    mse: Var
    vq_scaled: Var
    total: Var
    utilization_indices: list = field(default_factory=list)

    @property
    def values(self) -> tuple[float, float, float]:
        return (
            float(self.mse.value[0, 0]),
            float(self.vq_scaled.value[0, 0]),
            float(self.total.value[0, 0]),
        )


def total_loss(
    params: ModelParams,
    model: ModelConfig,
    batch: GraphBatch,
    alpha: float = 0.1,
    beta: float = 0.25,
    mode: str = "vq",
    tape: Tape | None = None,
) -> LossBreakdown:
    """Squared position error over agents plus ``alpha`` times all VQ terms.

    The VQ sum runs over every node and every encode event (the initial
    encoding and one after each round).
    """
    tape = tape or Tape()
    out = forward(params, model, batch, mode=mode, beta=beta, tape=tape)
    truth = tape.constant(batch.truth[batch.agent_rows])
    mse = tape.sum_squares(tape.sub(out.estimates, truth))
    terms = []
    for ev in out.state.events:
        terms += [ev.terms.reconstruction, ev.terms.codebook_term, ev.terms.commitment_term]
    raw = tape.total(terms) if terms else tape.constant([[0.0]])
    vq_scaled = tape.scale(raw, alpha)
    total = tape.total([mse, vq_scaled])
    if not np.isfinite(total.value[0, 0]):
        err = np.sum((out.estimates.value - truth.value) ** 2, axis=1)
        bad = None
        for s, (a, b) in enumerate(zip(batch.agent_offsets[:-1], batch.agent_offsets[1:])):
            if not np.all(np.isfinite(err[a:b])):
                bad = s
                break
        raise LossError(f"non-finite loss (scenario {bad} of batch)", bad)
    return LossBreakdown(mse, vq_scaled, total, [ev.quantized.index for ev in out.state.events])


def loss_and_grad(params, model, batch, alpha, beta, mode="vq"):
    tape = Tape()
    loss = total_loss(params, model, batch, alpha, beta, mode, tape)
    return loss, tape.backward(loss.total)


def check_loss_gradient(
    params: ModelParams,
    model: ModelConfig,
    batch: GraphBatch,
    alpha: float = 0.1,
    beta: float = 0.25,
    mode: str = "vq",
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Worst relative error of the analytic loss gradient, per parameter block.

    Finite differences run on a surrogate that replays the recorded codeword
    choices and stop-gradient values, so its exact derivative is the
    straight-through gradient.  Codebook rows that were never selected have
    zero gradient on both sides and are skipped when subsampling.
    """
    tape = Tape()
    loss = total_loss(params, model, batch, alpha, beta, mode, tape)
    grads = tape.backward(loss.total)
    frozen = Frozen(tape.record.sg, tape.record.choices)
    mse0, vq0, _ = loss.values

    def value(p):
        # each component relative to its base value: a constant shift that
        # keeps a large MSE from swamping small changes in the VQ terms
        mse, vqs, _ = total_loss(p, model, batch, alpha, beta, mode, Tape(frozen=frozen)).values
        return (mse - mse0) + (vqs - vq0)

    rng = np.random.default_rng(seed)
    errors = {}
    for key in params:
        if key == vq.CODEBOOK:
            used = np.unique(np.concatenate([np.ravel(i) for i in loss.utilization_indices])) if loss.utilization_indices else []
            sub = {key: params[key][used]}

            def on_rows(p, _used=used):
                full = dict(params)
                book = params[key].copy()
                book[_used] = p[key]
                full[key] = book
                return value(full)

            errors[key] = grad_check(on_rows, sub, {key: grads[key][used]}, eps, max_entries=max_entries, rng=rng)
        else:
            errors[key] = grad_check(value, params, grads, eps, keys=[key], max_entries=max_entries, rng=rng)
    return errors


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val: float
    optimizer: AdamState
    last_params: ModelParams
    stop_reason: str
    diverged: bool = False


def _copy(params: ModelParams) -> ModelParams:
    return {k: v.copy() for k, v in params.items()}


def evaluate_loss(params, model, data: Dataset, tcfg: TrainConfig, mode: str):
    """Per-scenario mean (total, mse, vq) and codebook utilization."""
    sums = np.zeros(3)
    indices = []
    for start in range(0, len(data), tcfg.batch_size):
        rows = range(start, min(start + tcfg.batch_size, len(data)))
        loss = total_loss(params, model, data.batch(rows), tcfg.alpha, tcfg.beta, mode)
        mse, vqs, tot = loss.values
        sums += (tot, mse, vqs)
        indices += loss.utilization_indices
    util = vq.codebook_utilization(indices, model.K) if indices else 0.0
    return sums / len(data), util


def train(
    cfg: RunConfig,
    seed: int | None = None,
    mode: str = "vq",
    train_data: Dataset | None = None,
    val_data: Dataset | None = None,
    resume: dict | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Mini-batch training with early stopping on validation loss.

    Returns the parameters of the best validation epoch.  A non-finite loss
    stops training early with ``diverged`` set; the log up to that point is
    kept.  ``resume`` is a loaded checkpoint (see :func:`load_checkpoint`).
    """
    seed = cfg.seeds[0] if seed is None else seed
    tcfg, model = cfg.train, cfg.model
    if train_data is None:
        train_data = make_dataset(cfg.scenario, tcfg.n_train, "train", seed)
    if val_data is None:
        val_data = make_dataset(cfg.scenario, tcfg.n_val, "val", seed)

    if resume is not None:
        params = _copy(resume["params"])
        opt = resume["optimizer"] or AdamState(lr=tcfg.lr)
        opt.lr = tcfg.lr
        first_epoch = resume["epoch"] + 1
        best_val = resume.get("best_val", np.inf)
    else:
        params = init_params(model, seed)
        opt = AdamState(lr=tcfg.lr)
        first_epoch = 1
        best_val = np.inf
    best_params = _copy(params)
    best_epoch = first_epoch - 1
    shuffle_rng = substream(seed, 17 + first_epoch)
    history: list[dict] = []
    stale = 0
    stop_reason = "epoch cap"
    diverged = False
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if fh.tell() == 0:
            writer.writeheader()
    t0 = time.perf_counter()
    try:
        for epoch in range(first_epoch, first_epoch + tcfg.epochs):
            order = shuffle_rng.permutation(len(train_data))
            sums = np.zeros(3)
            try:
                for start in range(0, len(order), tcfg.batch_size):
                    batch = train_data.batch(order[start : start + tcfg.batch_size])
                    loss, grads = loss_and_grad(params, model, batch, tcfg.alpha, tcfg.beta, mode)
                    mse, vqs, tot = loss.values
                    sums += (tot, mse, vqs)
                    optimizer_step(opt, params, grads)
                (val_total, _, _), util = evaluate_loss(params, model, val_data, tcfg, mode)
                if not np.isfinite(val_total):
                    raise LossError("non-finite validation loss")
            except (LossError, FloatingPointError) as exc:
                log.warning("training diverged at epoch %d: %s", epoch, exc)
                stop_reason = f"diverged: {exc}"
                diverged = True
                break
            tr = sums / len(train_data)
            row = {
                "epoch": epoch,
                "train_total": tr[0],
                "train_mse": tr[1],
                "train_vq": tr[2],
                "val_total": val_total,
                "codebook_utilization": util if mode == "vq" else 0.0,
                "wall_seconds": time.perf_counter() - t0,
            }
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            log.info("epoch %d train %.4f val %.4f util %.3f", epoch, tr[0], val_total, row["codebook_utilization"])
            if val_total < best_val - tcfg.min_delta:
                best_val = val_total
                best_epoch = epoch
                best_params = _copy(params)
                stale = 0
            else:
                stale += 1
                if stale >= tcfg.patience:
                    stop_reason = f"no improvement for {tcfg.patience} epochs"
                    break
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(best_params, history, best_epoch, float(best_val), opt, params, stop_reason, diverged)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(
    path,
    params: ModelParams,
    model: ModelConfig,
    epoch: int = 0,
    best_val: float = float("inf"),
    optimizer: AdamState | None = None,
) -> None:
    """Write params (and optionally optimizer moments) to an ``.npz`` archive."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": {"M": model.M, "D": model.D, "K": model.K, "T": model.T, "input_scale": model.input_scale},
        "epoch": int(epoch),
        "best_val": float(best_val),
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    if optimizer is not None:
        meta["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step": optimizer.step,
        }
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    # fixed entry timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)


def load_checkpoint(path, model: ModelConfig | None = None) -> dict:
    """Read a checkpoint; with ``model`` given, shapes are validated against it.

    Returns a dict with ``params``, ``model`` (a :class:`ModelConfig`),
    ``epoch``, ``best_val`` and ``optimizer`` (an :class:`AdamState` or None).
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise
    except (OSError, ValueError, EOFError, zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    stored = ModelConfig(**meta["model"])
    if model is not None and (stored.M, stored.D, stored.K, stored.T) != (model.M, model.D, model.K, model.T):
        raise CheckpointError(f"{path}: checkpoint model {stored} does not match config {model}")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = param_shapes(stored)
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter blocks do not match the architecture")
    for k, shape in expected.items():
        if params[k].shape != tuple(shape):
            raise CheckpointError(f"{path}: block {k} has shape {params[k].shape}, expected {shape}")
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        opt.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return {
        "params": params,
        "model": stored,
        "epoch": meta["epoch"],
        "best_val": meta["best_val"],
        "optimizer": opt,
    }


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
