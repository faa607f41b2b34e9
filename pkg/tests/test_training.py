import math

import numpy as np
import pytest

from screenalign import autodiff as ad
from screenalign.checkpoint import (
    Checkpoint,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)
from screenalign.data import ScreenDataset
from screenalign.synth import SynthConfig, generate_synthetic
from screenalign.training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    lr_schedule,
    named_checkpoint_arrays,
    train,
)


def small_dataset(n_perturbations=6, seed=30, **kwargs):
    cfg = SynthConfig(n_perturbations=n_perturbations, n_clusters=2, sister_groups=0,
                      channels=5, width=32, instances_min=3, instances_max=5,
                      seed=seed, **kwargs)
    bundle, records, _, _, _ = generate_synthetic(cfg)
    return ScreenDataset(bundle, records)


def memo_config(**overrides):
    base = dict(epochs=150, batch_size=4, lr_max=1e-3, lr_min=1e-5, warmup_steps=10,
                loss="clip", seed=1, split=(1.0, 0.0, 0.0))
    base.update(overrides)
    return TrainConfig(**base)


class TestLrSchedule:
    def test_warmup_is_linear(self):
        for step in range(10):
            lr = lr_schedule(step, 110, 1.0, 0.0, warmup_steps=10, restarts=1)
            assert lr == pytest.approx((step + 1) / 10)

    def test_cycle_start_is_lr_max(self):
        assert lr_schedule(10, 110, 1.0, 0.1, 10, 1) == pytest.approx(1.0)

    def test_cycle_end_is_lr_min(self):
        assert lr_schedule(110, 110, 1.0, 0.1, 10, 1) == pytest.approx(0.1)

    def test_cycle_midpoint_is_mean(self):
        assert lr_schedule(60, 110, 1.0, 0.1, 10, 1) == pytest.approx(0.55)

    def test_interior_restart_jumps_back_to_max(self):
        # two cycles of length 50: step 60 starts the second cycle
        assert lr_schedule(60, 110, 1.0, 0.1, 10, 2) == pytest.approx(1.0)
        assert lr_schedule(59, 110, 1.0, 0.1, 10, 2) < 0.15

    def test_no_warmup(self):
        assert lr_schedule(0, 100, 1.0, 0.0, 0, 1) == pytest.approx(1.0)


class TestAdamW:
    def scalar_param(self, value):
        return ad.Tensor(np.array([[value]], dtype=np.float32), requires_grad=True)

    def test_zero_grad_zero_decay_unchanged(self):
        p = self.scalar_param(1.5)
        state = OptimizerState.zeros_like([("p", p)])
        adamw_step([("p", p)], state, lr=0.1, weight_decay=0.0)
        assert p.data[0, 0] == np.float32(1.5)

    def test_single_step_matches_pencil_computation(self):
        p = self.scalar_param(1.0)
        p.grad = np.array([[0.5]], dtype=np.float32)
        state = OptimizerState.zeros_like([("p", p)])
        adamw_step([("p", p)], state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=0.0)
        # zero moments: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8))
        assert p.data[0, 0] == pytest.approx(expected, rel=1e-6)

    def test_decay_only(self):
        p = self.scalar_param(2.0)
        state = OptimizerState.zeros_like([("p", p)])
        adamw_step([("p", p)], state, lr=0.1, weight_decay=0.05)
        assert p.data[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.05), rel=1e-6)

    def test_nan_gradient_aborts_with_diagnostics(self):
        p = self.scalar_param(1.0)
        p.grad = np.array([[np.nan]], dtype=np.float32)
        state = OptimizerState.zeros_like([("p", p)])
        with pytest.raises(FloatingPointError, match="p"):
            adamw_step([("p", p)], state, lr=0.1)


class TestTrainConfig:
    def test_defaults_match_reference_settings(self):
        cfg = TrainConfig()
        assert cfg.lr_max == 2e-4
        assert cfg.epochs == 50
        assert cfg.batch_size == 512
        assert cfg.scale_init == 14.3
        assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.eps == 1e-8

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_min=1.0, lr_max=0.1)
        with pytest.raises(ValueError):
            TrainConfig(restarts=0)
        with pytest.raises(ValueError):
            TrainConfig(loss="nope")
        with pytest.raises(ValueError):
            TrainConfig(split=(0.5, 0.5, 0.5))


class TestCheckpointFormat:
    def arrays(self):
        rng = np.random.default_rng(31)
        return [("a.w", rng.normal(size=(3, 4)).astype(np.float32)),
                ("b.bias", rng.normal(size=(1, 4)).astype(np.float32))]

    def test_round_trip(self, tmp_path):
        named = self.arrays()
        cfg = {"alpha": 1, "nested": {"b": [1, 2]}}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, step=7, named_arrays=named)
        loaded = load_checkpoint(path)
        assert loaded.step == 7
        assert loaded.config == cfg
        assert loaded.order == ["a.w", "b.bias"]
        for name, arr in named:
            assert np.array_equal(loaded.arrays[name], arr)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, 0, self.arrays())
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(ValueError, match="expected"):
            load_checkpoint(path)

    def test_config_hash_stable_under_key_order(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


class TestTraining:
    def test_memorization_loss_below_threshold_within_500_steps(self):
        res = train(small_dataset(), memo_config())
        losses = [v for _, _, m, v in res.log if m == "loss"]
        assert len(losses) <= 500
        assert min(losses) < 0.05

    def test_loss_trend_non_increasing_over_20_step_windows(self):
        res = train(small_dataset(), memo_config(epochs=120))
        losses = np.array([v for _, _, m, v in res.log if m == "loss"])
        windows = [losses[i:i + 20].mean() for i in range(0, 100, 20)]
        for prev, nxt in zip(windows, windows[1:]):
            assert nxt <= prev * 1.05 + 1e-6

    def test_same_seed_bitwise_identical_checkpoints(self, tmp_path):
        def run(path):
            res = train(small_dataset(), memo_config(epochs=6))
            named = named_checkpoint_arrays(res.model, res.final_arrays)
            save_checkpoint(path, res.model.config_dict(), res.total_steps, named)

        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        run(p1)
        run(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_reproduces_uninterrupted_run_bitwise(self, tmp_path):
        ds = small_dataset(n_perturbations=8)
        cfg = memo_config(epochs=8, split=(0.8, 0.1, 0.1))
        full = train(ds, cfg)

        # interrupt the identical run half-way, round-trip through the file
        # format, then continue
        half = train(ds, cfg, stop_after_steps=4)
        path = tmp_path / "half.ckpt"
        save_checkpoint(path, half.config, half.last_step,
                        named_checkpoint_arrays(half.model, half.final_arrays))
        resumed = train(ds, cfg, resume=load_checkpoint(path))
        for name in full.final_arrays:
            assert np.array_equal(full.final_arrays[name],
                                  resumed.final_arrays[name]), name

    def test_resume_rejects_config_mismatch(self):
        ds = small_dataset()
        res = train(ds, memo_config(epochs=2))
        ckpt = Checkpoint(step=2, config={"not": "matching"}, arrays={}, order=[])
        with pytest.raises(ValueError, match="configuration"):
            train(ds, memo_config(epochs=2), resume=ckpt)

    def test_validation_logged_and_best_tracked(self):
        ds = small_dataset(n_perturbations=16)
        cfg = memo_config(epochs=4, batch_size=8, split=(0.6, 0.2, 0.2))
        res = train(ds, cfg)
        val_rows = [(s, v) for s, sp, m, v in res.log if sp == "val"]
        assert val_rows
        assert res.best_arrays is not None
        assert set(res.best_arrays) == set(res.final_arrays)

    def test_invalid_dataset_rejected(self):
        ds = small_dataset()
        ds.records.append(type(ds.records[0])(
            id="ghost", pert_class="compound", cell_type="U2OS",
            payload="CCO", batch_id="batch0"))
        with pytest.raises(ValueError, match="validation"):
            train(ds, memo_config(epochs=1))
