import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmoe.dataio import SplitPlan, prepare
from cpmoe.learn import (
    TrainConfig,
    domain_shift,
    finetune_transfer,
    mmd,
    task_loss,
    train_single_expert,
    train_source,
    warmup_lr,
)
from cpmoe.model import CPMoEModel, ModelConfig
from cpmoe.synthplant import PlantConfig, ShiftSpec, gen_plant, shift_plant


@pytest.fixture(scope="module")
def prepared():
    df = gen_plant(PlantConfig(), 1400, seed=51)
    return prepare(df, SplitPlan(seed=5), T=24)


@pytest.fixture(scope="module")
def prepared_target():
    cfg = shift_plant(PlantConfig(), ShiftSpec(target_multipliers={"CO": 1.6}))
    df = gen_plant(cfg, 1400, seed=52)
    return prepare(df, SplitPlan(seed=6), T=24)


class TestTaskLoss:
    def test_perfect_fit_is_zero(self):
        y = torch.randn(5, 6)
        probs = torch.zeros(5, 4)
        labels = torch.tensor([0, 1, 2, 3, 0])
        probs[torch.arange(5), labels] = 1.0
        assert float(task_loss(y, y, probs, labels)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_phase_probs_give_ln4(self):
        y = torch.zeros(3, 6)
        probs = torch.full((3, 4), 0.25)
        labels = torch.tensor([0, 2, 3])
        assert float(task_loss(y, y, probs, labels)) == pytest.approx(math.log(4), abs=1e-6)

    def test_offset_predictions(self):
        y = torch.zeros(4, 6)
        probs = torch.zeros(4, 4)
        labels = torch.zeros(4, dtype=torch.long)
        probs[:, 0] = 1.0
        # each of the six targets off by 2 -> summed squared error 24
        assert float(task_loss(y + 2, y, probs, labels)) == pytest.approx(24.0, abs=1e-5)

    def test_unlabeled_rows_skip_ce(self):
        y = torch.zeros(3, 6)
        probs = torch.full((3, 4), 0.25)
        labels = torch.tensor([-1, -1, -1])
        assert float(task_loss(y, y, probs, labels)) == 0.0

    def test_mixed_labels_use_only_labeled(self):
        y = torch.zeros(2, 6)
        probs = torch.tensor([[1.0, 0, 0, 0], [0.25, 0.25, 0.25, 0.25]])
        loss_lab = float(task_loss(y, y, probs, torch.tensor([0, -1])))
        assert loss_lab == pytest.approx(0.0, abs=1e-6)


class TestDomainShift:
    def _cols(self, mu_s, mu_t):
        s = np.full((10, 6), 100.0)
        t = np.full((10, 6), 100.0)
        s[:, 4] = mu_s
        t[:, 4] = mu_t
        return s, t

    def test_low_medium_high(self):
        for mu_t, cat in [(100.0, "Low"), (114.0, "Low"), (120.0, "Medium"),
                          (130.0, "Medium"), (160.0, "High")]:
            rep = domain_shift(*self._cols(100.0, mu_t))
            assert rep.per_pollutant["CO"]["category"] == cat, mu_t

    def test_boundaries_inclusive_for_medium(self):
        assert domain_shift(*self._cols(100.0, 115.0)).per_pollutant["CO"]["category"] == "Medium"
        assert domain_shift(*self._cols(100.0, 130.0)).per_pollutant["CO"]["category"] == "Medium"
        assert domain_shift(*self._cols(100.0, 130.01)).per_pollutant["CO"]["category"] == "High"

    def test_decrease_counts_too(self):
        rep = domain_shift(*self._cols(100.0, 40.0))
        assert rep.per_pollutant["CO"]["delta_pct"] == pytest.approx(60.0)
        assert rep.per_pollutant["CO"]["category"] == "High"

    def test_zero_source_mean_undefined(self):
        rep = domain_shift(*self._cols(0.0, 10.0))
        assert rep.per_pollutant["CO"]["category"] == "Undefined"
        assert rep.per_pollutant["CO"]["delta_pct"] is None


class TestMMD:
    def test_identical_sets_zero(self):
        z = torch.randn(20, 8, dtype=torch.float64)
        assert float(mmd(z, z)) == pytest.approx(0.0, abs=1e-12)

    def test_single_pair_hand_value(self):
        z_s = torch.tensor([[0.0]], dtype=torch.float64)
        z_t = torch.tensor([[1.0]], dtype=torch.float64)
        expected = sum(2 - 2 * math.exp(-1 / (2 * s * s)) for s in (0.1, 1.0, 10.0)) / 3
        assert float(mmd(z_s, z_t)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.93231, abs=1e-4)

    def test_symmetry(self):
        g = torch.Generator().manual_seed(4)
        a = torch.randn(12, 5, generator=g, dtype=torch.float64)
        b = torch.randn(9, 5, generator=g, dtype=torch.float64)
        assert float(mmd(a, b)) == pytest.approx(float(mmd(b, a)), rel=1e-12)

    def test_permutation_invariance(self):
        g = torch.Generator().manual_seed(5)
        a = torch.randn(15, 4, generator=g, dtype=torch.float64)
        b = torch.randn(15, 4, generator=g, dtype=torch.float64)
        perm = torch.randperm(15)
        assert float(mmd(a, b)) == pytest.approx(float(mmd(a[perm], b[perm])), rel=1e-10)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(8, 3, generator=g, dtype=torch.float64)
        b = 3 * torch.randn(6, 3, generator=g, dtype=torch.float64)
        assert float(mmd(a, b)) >= -1e-12


class TestWarmup:
    def test_linear_ramp(self):
        for e in range(10):
            assert warmup_lr(0.001, e, 10) == pytest.approx(0.001 * (e + 1) / 10)

    def test_flat_after_warmup(self):
        assert warmup_lr(0.001, 10, 10) == 0.001
        assert warmup_lr(0.001, 250, 10) == 0.001


class TestTrainSource:
    def _run(self, prepared, tmp_path, seed=9, epochs=3):
        spec, ws, tr, va = prepared
        cfg = ModelConfig.tiny(T=24, F=ws.features.shape[2])
        model = CPMoEModel(cfg, seed=seed)
        tc = TrainConfig(max_epochs=epochs, batch_size=64, seed=seed, patience=50)
        return train_source(ws.subset(tr), ws.subset(va), model, tc, spec,
                            history_path=tmp_path / "hist.csv")

    def test_history_contents(self, prepared, tmp_path):
        _, history = self._run(prepared, tmp_path)
        assert len(history) == 3
        row = history[-1]
        for key in ["epoch", "lr", "task_loss", "phy_loss", "val_avg_r2",
                    "val_r2_CO", "eur_transformer", "eur_mlp", "masked_frac"]:
            assert key in row
        assert (tmp_path / "hist.csv").exists()
        assert row["lr"] == pytest.approx(0.001 * 3 / 10)
        # expert use adds up to 100% because gate weights sum to one
        eur_sum = sum(row[f"eur_{k}"] for k in ["transformer", "cnn", "lstm", "mlp"])
        assert eur_sum == pytest.approx(100.0, abs=1e-3)

    def test_deterministic(self, prepared, tmp_path):
        _, h1 = self._run(prepared, tmp_path / "a")
        _, h2 = self._run(prepared, tmp_path / "b")
        assert h1 == h2

    def test_best_state_restored(self, prepared, tmp_path):
        spec, ws, tr, va = prepared
        model, history = self._run(prepared, tmp_path, epochs=4)
        from cpmoe.learn import _avg_r2, _tensors
        Xv, yv, _, _ = _tensors(ws.subset(va))
        r2, _ = _avg_r2(model, Xv, yv)
        assert r2 == pytest.approx(max(h["val_avg_r2"] for h in history), abs=1e-6)

    def test_loss_decreases(self, prepared, tmp_path):
        _, history = self._run(prepared, tmp_path, epochs=6)
        assert history[-1]["task_loss"] < history[0]["task_loss"]


class TestTransfer:
    def test_noop_when_lr_zero(self, prepared, prepared_target, tmp_path):
        spec_s, ws_s, tr_s, _ = prepared
        spec_t, ws_t, tr_t, va_t = prepared_target
        cfg = ModelConfig.tiny(T=24, F=ws_s.features.shape[2])
        model = CPMoEModel(cfg, seed=3)
        tc = TrainConfig(transfer_lr=0.0, gamma_mmd=0.0, delta_phy=0.0,
                         transfer_max_epochs=2, batch_size=64, seed=3)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model, report = finetune_transfer(model, ws_s.subset(tr_s), ws_t.subset(tr_t),
                                          ws_t.subset(va_t), tc, spec_t)
        for k, v in model.state_dict().items():
            torch.testing.assert_close(v, before[k], atol=0, rtol=0)
        assert report["final_avg_r2"] == pytest.approx(report["zero_shot_avg_r2"], abs=1e-6)
        assert report["probe_mmd_after"] == pytest.approx(report["probe_mmd_before"], abs=1e-6)

    def test_report_fields_and_improvement_tracking(self, prepared, prepared_target, tmp_path):
        spec_s, ws_s, tr_s, va_s = prepared
        spec_t, ws_t, tr_t, va_t = prepared_target
        cfg = ModelConfig.tiny(T=24, F=ws_s.features.shape[2])
        model = CPMoEModel(cfg, seed=3)
        src_tc = TrainConfig(max_epochs=4, batch_size=64, seed=3)
        model, _ = train_source(ws_s.subset(tr_s), ws_s.subset(va_s), model, src_tc, spec_s)
        tc = TrainConfig(transfer_lr=3e-4, transfer_max_epochs=4, batch_size=64, seed=3)
        model, report = finetune_transfer(model, ws_s.subset(tr_s), ws_t.subset(tr_t),
                                          ws_t.subset(va_t), tc, spec_t,
                                          history_path=tmp_path / "t.csv")
        for key in ["zero_shot_avg_r2", "final_avg_r2", "probe_mmd_before",
                    "probe_mmd_after", "epochs_run", "best_epoch", "final_r2"]:
            assert key in report
        assert report["epochs_run"] == 4
        # best-restore guarantees the fine-tuned model never scores below zero-shot
        assert report["final_avg_r2"] >= report["zero_shot_avg_r2"] - 1e-9
        assert (tmp_path / "t.csv").exists()


class TestSingleExpertTraining:
    def test_runs_and_tracks_history(self, prepared):
        spec, ws, tr, va = prepared
        cfg = ModelConfig.tiny(T=24, F=ws.features.shape[2])
        tc = TrainConfig(max_epochs=3, batch_size=64, seed=1)
        model, history = train_single_expert("mlp", ws.subset(tr), ws.subset(va), cfg, tc)
        assert len(history) == 3
        out = model(torch.from_numpy(ws.features[:2]))
        assert out.shape == (2, 6)
