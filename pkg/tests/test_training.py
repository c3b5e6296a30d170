import csv
import dataclasses

import numpy as np
import pytest

from vqloc import training
from vqloc.config import ModelConfig, RunConfig
from vqloc.diffcore import AdamState
from vqloc.mpnn import collate, init_params, predict
from vqloc.scenario import NodeKind, NoiseModel, build_scenario
from vqloc.training import (
    CheckpointError,
    LossError,
    check_loss_gradient,
    load_checkpoint,
    make_dataset,
    save_checkpoint,
    scenario_seed,
    total_loss,
    train,
)

TINY = ModelConfig(M=8, D=4, K=16, T=2, input_scale=50.0)


def tiny_cfg(**train_kw):
    base = {"n_train": 8, "n_val": 4, "epochs": 2, "batch_size": 4}
    base.update(train_kw)
    return RunConfig().replace(
        scenario={"num_agents": 5},
        model=dataclasses.asdict(TINY),
        train=base,
    )


def one_agent_scenario():
    pos = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [4.0, 4.0]])
    kinds = [NodeKind.ANCHOR] * 3 + [NodeKind.AGENT]
    return build_scenario(pos, kinds, 20.0, NoiseModel("awgn", 1.0))


class TestLoss:
    def test_single_agent_offset_gives_25(self):
        model = ModelConfig(M=8, D=4, K=16, T=1, input_scale=1.0)
        sc = one_agent_scenario()
        params = init_params(model, 0)
        params["g_v_est.layer3.weight"][:] = 0.0
        params["g_v_est.layer3.bias"][:] = sc.positions[3] + [3.0, 4.0]
        loss = total_loss(params, model, collate([sc], [sc.initial_positions()]), mode="mpnn")
        assert loss.values == (25.0, 0.0, 25.0)

    def test_total_is_sum(self):
        data = make_dataset(tiny_cfg().scenario, 3, "train", 0)
        loss = total_loss(init_params(TINY, 1), TINY, data.batch(range(3)))
        mse, vqs, tot = loss.values
        assert tot == pytest.approx(mse + vqs, rel=1e-15)
        assert mse > 0 and vqs > 0

    def test_alpha_is_linear(self):
        data = make_dataset(tiny_cfg().scenario, 2, "train", 0)
        params = init_params(TINY, 2)
        a = total_loss(params, TINY, data.batch(range(2)), alpha=0.1).values[1]
        b = total_loss(params, TINY, data.batch(range(2)), alpha=0.2).values[1]
        assert b == 2 * a

    def test_vq_term_counts_every_event(self):
        data = make_dataset(tiny_cfg().scenario, 1, "train", 0)
        loss = total_loss(init_params(TINY, 3), TINY, data.batch([0]))
        assert len(loss.utilization_indices) == TINY.T + 1

    def test_unquantized_has_no_vq_term(self):
        data = make_dataset(tiny_cfg().scenario, 2, "train", 0)
        assert total_loss(init_params(TINY, 4), TINY, data.batch(range(2)), mode="mpnn").values[1] == 0.0

    def test_non_finite_names_scenario(self):
        data = make_dataset(tiny_cfg().scenario, 3, "train", 0)
        inits = list(data.inits)
        inits[1] = inits[1].copy()
        inits[1][-1] = np.nan
        batch = collate(data.scenarios, inits)
        with pytest.raises(LossError) as info:
            total_loss(init_params(TINY, 5), TINY, batch, mode="mpnn")
        assert info.value.scenario == 1


def test_full_model_gradient(grad_point):
    params, model, batch = grad_point
    errors = check_loss_gradient(params, model, batch, max_entries=12)
    assert set(errors) == set(params)
    assert max(errors.values()) < 1e-4


class TestData:
    def test_splits_disjoint(self):
        seeds = {split: {scenario_seed(0, split, k) for k in range(200)} for split in ("train", "val", "test")}
        assert not seeds["train"] & seeds["val"]
        assert not seeds["train"] & seeds["test"]
        assert not seeds["val"] & seeds["test"]

    def test_dataset_reproducible(self):
        a = make_dataset(tiny_cfg().scenario, 3, "val", 9)
        b = make_dataset(tiny_cfg().scenario, 3, "val", 9)
        for x, y in zip(a.inits, b.inits):
            assert np.array_equal(x, y)


class TestTrainLoop:
    def test_frozen_optimizer_stops_after_patience(self):
        for patience in (1, 3):
            result = train(tiny_cfg(lr=0.0, patience=patience, epochs=50))
            assert len(result.log) == patience + 1
            assert result.best_epoch == 1
            assert "no improvement" in result.stop_reason

    def test_returns_best_params(self):
        cfg = tiny_cfg(lr=0.0, patience=1, epochs=5)
        result = train(cfg)
        init = init_params(cfg.model, cfg.seeds[0])
        assert all(np.array_equal(result.params[k], init[k]) for k in init)

    def test_smoke_run_improves(self):
        cfg = RunConfig().replace(model={"input_scale": 50.0}, train={"n_train": 64, "n_val": 16, "epochs": 30})
        result = train(cfg)
        assert result.log[-1]["train_total"] < result.log[0]["train_total"]
        best = min(r["val_total"] for r in result.log)
        assert result.best_val == best

    def test_log_csv(self, tmp_path):
        path = tmp_path / "log.csv"
        result = train(tiny_cfg(), log_path=path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == training.LOG_FIELDS
        assert [int(r["epoch"]) for r in rows] == [r["epoch"] for r in result.log]

    def test_deterministic(self):
        a, b = train(tiny_cfg()), train(tiny_cfg())
        strip = lambda log: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in log]
        assert strip(a.log) == strip(b.log)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_divergence_keeps_log(self, monkeypatch):
        real = training.loss_and_grad
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] > 2:
                raise LossError("boom", 0)
            return real(*args, **kw)

        monkeypatch.setattr(training, "loss_and_grad", flaky)
        result = train(tiny_cfg(epochs=5))
        assert result.diverged
        assert len(result.log) == 1

    def test_resume_continues_epochs(self, tmp_path):
        cfg = tiny_cfg(epochs=2)
        first = train(cfg)
        ck = tmp_path / "ck.npz"
        save_checkpoint(ck, first.last_params, cfg.model, first.log[-1]["epoch"], first.best_val, first.optimizer)
        second = train(cfg, resume=load_checkpoint(ck, cfg.model))
        assert [r["epoch"] for r in second.log] == [3, 4]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(TINY, 7)
        opt = AdamState(lr=1e-3, step=4, m={k: v * 0.5 for k, v in params.items()}, v={k: v**2 for k, v in params.items()})
        save_checkpoint(tmp_path / "c.npz", params, TINY, 12, 3.5, opt)
        back = load_checkpoint(tmp_path / "c.npz", TINY)
        assert back["epoch"] == 12 and back["best_val"] == 3.5
        assert all(np.array_equal(back["params"][k], params[k]) for k in params)
        assert back["optimizer"].step == 4
        assert all(np.array_equal(back["optimizer"].m[k], opt.m[k]) for k in params)

    def test_large_codebook_rmse_reproduced(self, tmp_path):
        model = ModelConfig(input_scale=50.0)
        params = init_params(model, 8)
        data = make_dataset(RunConfig().scenario, 2, "test", 0)
        before = predict(params, model, data.scenarios, data.inits)
        save_checkpoint(tmp_path / "c.npz", params, model)
        after = predict(load_checkpoint(tmp_path / "c.npz", model)["params"], model, data.scenarios, data.inits)
        assert all(np.array_equal(x, y) for x, y in zip(before, after))
        assert load_checkpoint(tmp_path / "c.npz")["params"]["codebook"].shape == (1024, 12)

    def test_truncated_file(self, tmp_path):
        save_checkpoint(tmp_path / "c.npz", init_params(TINY, 0), TINY)
        raw = (tmp_path / "c.npz").read_bytes()
        (tmp_path / "t.npz").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.npz")

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.npz", init_params(TINY, 0), TINY)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.npz", dataclasses.replace(TINY, K=32))

    def test_version_mismatch(self, tmp_path, monkeypatch):
        monkeypatch.setattr(training, "CHECKPOINT_VERSION", 99)
        save_checkpoint(tmp_path / "c.npz", init_params(TINY, 0), TINY)
        monkeypatch.undo()
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "c.npz")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.npz")
