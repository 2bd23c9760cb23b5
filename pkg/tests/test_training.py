"""Adam optimizer, training loop, omega logging and evaluation."""

import numpy as np
import pytest

from dmfnet import autograd as ag, network, training
from dmfnet.errors import GradientError, TrainingDiverged

from oracles import adam_reference, make_balanced_case

TOY = dict(groups=2, stage_channels=(4, 8, 8, 8, 8, 8, 4))


def toy_net(seed=0, **overrides):
    cfg = network.toy_config(**{**TOY, **overrides})
    return network.build_network(cfg, seed=seed)


class TestAdamStep:
    def test_zero_grads_zero_decay_leave_params(self):
        p = ag.Parameter("p", np.array([1.0, -2.0, 3.0]))
        state = training.AdamState([p])
        cfg = training.TrainConfig(weight_decay=0.0)
        for _ in range(5):
            training.adam_step([p], {"p": np.zeros(3)}, state, cfg)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_matches_scalar_reference_over_ten_steps(self):
        cfg = training.TrainConfig(lr=0.01, weight_decay=0.0)
        p = ag.Parameter("p", np.array([0.5]))
        state = training.AdamState([p])
        grads = [1.0, -0.5, 2.0, 0.1, -1.0, 0.7, 0.3, -0.2, 1.5, -0.9]
        got = []
        for g in grads:
            training.adam_step([p], {"p": np.array([g])}, state, cfg)
            got.append(float(p.data[0]))
        ref = adam_reference(0.5, grads, lr=0.01)
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_reference_with_coupled_decay(self):
        cfg = training.TrainConfig(lr=0.01, weight_decay=0.1)
        p = ag.Parameter("p", np.array([0.5]))
        state = training.AdamState([p])
        grads = [0.4, -0.3, 0.8]
        got = []
        for g in grads:
            training.adam_step([p], {"p": np.array([g])}, state, cfg)
            got.append(float(p.data[0]))
        ref = adam_reference(0.5, grads, lr=0.01, weight_decay=0.1)
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_pure_decay_shrinks_monotonically(self):
        cfg = training.TrainConfig(lr=0.01, weight_decay=0.5)
        p = ag.Parameter("p", np.array([2.0]))
        state = training.AdamState([p])
        values = [2.0]
        for _ in range(20):
            training.adam_step([p], {"p": np.zeros(1)}, state, cfg)
            values.append(float(p.data[0]))
        assert all(0 <= b < a for a, b in zip(values, values[1:]))

    def test_omega_exempt_from_decay(self):
        omega = ag.Parameter("omega", np.ones(3), decay=False)
        state = training.AdamState([omega])
        cfg = training.TrainConfig(lr=0.01, weight_decay=0.5)
        training.adam_step([omega], {"omega": np.zeros(3)}, state, cfg)
        np.testing.assert_array_equal(omega.data, 1.0)

    def test_nonfinite_gradient_aborts(self):
        p = ag.Parameter("p", np.ones(2))
        state = training.AdamState([p])
        cfg = training.TrainConfig()
        with pytest.raises(GradientError, match="p"):
            training.adam_step([p], {"p": np.array([1.0, np.nan])}, state, cfg)

    def test_lr_zero_keeps_params_invariant(self):
        p = ag.Parameter("p", np.array([1.5]))
        state = training.AdamState([p])
        cfg = training.TrainConfig(lr=0.0, weight_decay=0.0)
        for g in (1.0, -3.0, 0.2):
            training.adam_step([p], {"p": np.array([g])}, state, cfg)
        np.testing.assert_array_equal(p.data, [1.5])

    def test_poly_schedule_decays(self):
        cfg = training.TrainConfig(lr=0.1, lr_schedule="poly")
        lrs = [cfg.lr_at(s, 100) for s in (0, 50, 99, 100)]
        assert lrs[0] == 0.1
        assert lrs[0] > lrs[1] > lrs[2] > lrs[3] == 0.0


class TestTrainLoop:
    def test_loss_mostly_decreases_on_one_case(self):
        vol, lab = make_balanced_case(size=16, seed=3)
        net = toy_net(seed=0)
        cfg = training.TrainConfig(epochs=50, lr=1e-3, seed=0)
        log = training.train(net, [(vol, lab)], cfg)
        losses = log.losses
        assert len(losses) == 50
        decreasing = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert decreasing / (len(losses) - 1) >= 0.8

    def test_omega_moves_when_learnable(self):
        vol, lab = make_balanced_case(size=16, seed=3)
        net = toy_net(seed=0)
        cfg = training.TrainConfig(epochs=20, lr=1e-3, seed=0)
        log = training.train(net, [(vol, lab)], cfg)
        final = [rec for rec in log.omega if rec["epoch"] == 19]
        assert len(final) == 6  # every dilated unit, every epoch
        assert any(abs(rec["w1"] - 1.0) > 1e-4 for rec in final)

    def test_fixed_equal_keeps_omega_at_one(self):
        vol, lab = make_balanced_case(size=16, seed=3)
        net = toy_net(seed=0, weight_mode="fixed_equal")
        cfg = training.TrainConfig(epochs=10, lr=1e-3, seed=0)
        log = training.train(net, [(vol, lab)], cfg)
        for rec in log.omega:
            assert rec["w1"] == rec["w2"] == rec["w3"] == 1.0
        for _, omega in net.omega_parameters():
            np.testing.assert_array_equal(omega.data, 1.0)

    def test_bitwise_reproducible(self):
        vol, lab = make_balanced_case(size=16, seed=3)
        runs = []
        for _ in range(2):
            net = toy_net(seed=7)
            cfg = training.TrainConfig(epochs=5, lr=1e-3, seed=11)
            log = training.train(net, [(vol, lab)], cfg)
            runs.append((log.losses, {n: a.copy() for n, a in net.state_items()}))
        assert runs[0][0] == runs[1][0]
        for name in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name], err_msg=name)

    def test_gradient_reaches_every_parameter(self):
        # 32^3 keeps the deepest stage at 2^3: batch-1 BN over a single voxel
        # would zero that stage's body and (correctly) stall its gradients
        vol, lab = make_balanced_case(size=32, seed=3)
        net = toy_net(seed=0)
        before = {p.name: p.data.copy() for p in net.parameters()}
        cfg = training.TrainConfig(epochs=1, lr=1e-3, seed=0)
        training.train(net, [(vol, lab)], cfg)
        unchanged = [p.name for p in net.parameters()
                     if np.array_equal(before[p.name], p.data)]
        assert unchanged == []

    def test_nan_loss_halts_with_diagnostics(self):
        vol, lab = make_balanced_case(size=16, seed=3)
        bad = vol.copy()
        bad[0, 0, 0, 0] = np.inf
        net = toy_net(seed=0)
        cfg = training.TrainConfig(epochs=2, lr=1e-3, seed=0)
        with pytest.raises(TrainingDiverged) as err, np.errstate(invalid="ignore"):
            training.train(net, [(bad, lab)], cfg)
        assert err.value.step == 0
        assert err.value.last_finite_loss is None

    def test_empty_dataset_rejected(self):
        with pytest.raises(Exception, match="empty"):
            training.train(toy_net(), [], training.TrainConfig())

    def test_augmented_training_runs(self):
        from dmfnet import data as dio
        vol, lab = make_balanced_case(size=24, seed=3)
        net = toy_net(seed=0)
        aug = dio.AugmentConfig(crop_size=(16, 16, 16), seed=0)
        cfg = training.TrainConfig(epochs=3, lr=1e-3, seed=0)
        log = training.train(net, [(vol, lab)], cfg, aug_cfg=aug)
        assert len(log.losses) == 3
        assert all(np.isfinite(v) for v in log.losses)


class TestLogPersistence:
    def test_jsonl_and_csv(self, tmp_path):
        vol, lab = make_balanced_case(size=16, seed=3)
        net = toy_net(seed=0)
        cfg = training.TrainConfig(epochs=2, lr=1e-3, seed=0)
        log = training.train(net, [(vol, lab)], cfg)
        log.save_jsonl(tmp_path / "log.jsonl")
        log.save_omega_csv(tmp_path / "omega.csv")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2 + 12  # 2 steps + 6 units x 2 epochs
        csv = (tmp_path / "omega.csv").read_text().splitlines()
        assert csv[0] == "epoch,unit,w1,w2,w3"
        assert len(csv) == 1 + 12


class TestEvaluate:
    def test_ground_truth_against_itself(self):
        """Logits crafted from the labels give dice 1 everywhere."""
        from dmfnet import losses

        class Oracle:
            dtype = np.float32

            def forward(self, x, mode="eval"):
                return self._logits

        vol, lab = make_balanced_case(size=16, seed=3)
        net = Oracle()
        net._logits = losses.one_hot(lab[None]).astype(np.float32) * 10
        records, means = training.evaluate(net, [(vol, lab)])
        assert means == {"dice_et": 1.0, "dice_wt": 1.0, "dice_tc": 1.0}
        assert records[0]["case_id"] == "case000"

    def test_all_background_scores_zero_on_nonempty(self):
        class Background:
            dtype = np.float32

            def forward(self, x, mode="eval"):
                logits = np.zeros((1, 4) + x.shape[2:], dtype=np.float32)
                logits[:, 0] = 10.0
                return logits

        vol, lab = make_balanced_case(size=16, seed=3)
        records, means = training.evaluate(Background(), [(vol, lab)])
        assert means == {"dice_et": 0.0, "dice_wt": 0.0, "dice_tc": 0.0}

    def test_mean_is_arithmetic_mean(self):
        class Alternating:
            dtype = np.float32

            def __init__(self):
                self.calls = 0

            def forward(self, x, mode="eval"):
                logits = np.zeros((1, 4) + x.shape[2:], dtype=np.float32)
                logits[:, 0 if self.calls else 3] = 10.0
                self.calls += 1
                return logits

        lab_et = np.full((8, 8, 8), 4, dtype=np.uint8)
        vol = np.zeros((4, 8, 8, 8), dtype=np.float32)
        dataset = [(vol, lab_et), (vol, lab_et)]
        records, means = training.evaluate(Alternating(), dataset)
        per_case = [rec["dice_et"] for rec in records]
        assert means["dice_et"] == pytest.approx(sum(per_case) / 2)
        assert per_case == [1.0, 0.0]
