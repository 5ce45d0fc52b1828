from __future__ import annotations

import math

import numpy as np
import pytest

from diffseg import tensor as tn
from diffseg.data import decode_mask, encode_mask, gen_dataset
from diffseg.model import init
from diffseg.schedule import ImportanceState, linear_schedule
from diffseg.tensor import Tensor
from diffseg.train import (
    AdamW,
    NonFiniteError,
    StepHooks,
    Strategy,
    TrainConfig,
    fit,
    learning_rate,
    seg_loss,
    seg_loss_terms,
    train_step,
)
from helpers import gradcheck, micro_config, tiny_config

S = linear_schedule()
TWO_PASS = [Strategy.SELF_COND_SAME_T, Strategy.SELF_COND_NEXT_T, Strategy.RECYCLE_NEXT_T, Strategy.RECYCLE_MAX_T]


def model_for(strategy, base=micro_config):
    return base(with_self_cond_input=strategy.self_conditioning, diffusion=strategy.diffusion)


def batch(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    h, w = cfg.spatial
    return rng.standard_normal((n, 1, h, w)).astype(np.float32), rng.integers(0, cfg.classes, (n, h, w))


def loop_seg_loss(logits, labels, smooth=1e-6):
    """Scalar-loop reference for 20 * CE + (1 - mean foreground soft Dice)."""
    n, c, h, w = logits.shape
    total = 0.0
    for i in range(n):
        ce = 0.0
        inter = [0.0] * c
        psum = [0.0] * c
        ysum = [0.0] * c
        for y in range(h):
            for x in range(w):
                z = [logits[i, k, y, x] for k in range(c)]
                m = max(z)
                e = [math.exp(v - m) for v in z]
                p = [v / sum(e) for v in e]
                ce -= math.log(p[labels[i, y, x]])
                for k in range(c):
                    hit = 1.0 if labels[i, y, x] == k else 0.0
                    inter[k] += p[k] * hit
                    psum[k] += p[k]
                    ysum[k] += hit
        ce /= h * w
        dice_loss = sum(1 - (2 * inter[k] + smooth) / (psum[k] + ysum[k] + smooth) for k in range(1, c)) / (c - 1)
        total += 20 * ce + dice_loss
    return total / n


class TestSegLoss:
    def test_perfect_prediction(self):
        labels = np.random.default_rng(0).integers(0, 3, (2, 6, 6))
        logits = Tensor(60.0 * (encode_mask(labels, 3, np.float64) + 1), dtype=np.float64)
        assert float(seg_loss(logits, labels).data) < 1e-6

    def test_uniform_logits_give_log_c(self):
        labels = np.random.default_rng(1).integers(0, 4, (1, 5, 5))
        _, ce, _ = seg_loss_terms(Tensor(np.zeros((1, 4, 5, 5)), dtype=np.float64), labels)
        assert float(ce.data[0]) == pytest.approx(math.log(4), rel=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((2, 2, 4, 4))
        labels = rng.integers(0, 2, (2, 4, 4))
        got = float(seg_loss(Tensor(logits, dtype=np.float64), labels).data)
        assert got == pytest.approx(loop_seg_loss(logits, labels), rel=1e-10)

    def test_empty_foreground_is_finite(self):
        labels = np.zeros((1, 4, 4), dtype=int)
        logits = Tensor(np.stack([np.full((4, 4), 30.0), np.zeros((4, 4))])[None], dtype=np.float64)
        total, _, dice_loss = seg_loss_terms(logits, labels)
        assert np.isfinite(total.data).all() and float(dice_loss.data[0]) < 1e-3

    def test_gradient(self):
        labels = np.random.default_rng(3).integers(0, 3, (2, 3, 3))
        assert gradcheck(lambda z: seg_loss(z, labels), np.random.default_rng(4).standard_normal((2, 3, 3, 3))) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            seg_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 3, 4), dtype=int))


class TestOptimiser:
    def test_learning_rate_anchor_points(self):
        cfg = TrainConfig(warmup_steps=100, decay_steps=1000)
        assert learning_rate(0, cfg) == pytest.approx(1e-5)
        assert learning_rate(100, cfg) == pytest.approx(8e-4)
        assert learning_rate(1000, cfg) == pytest.approx(5e-5)
        assert learning_rate(5000, cfg) == pytest.approx(5e-5)
        mid = [learning_rate(s, cfg) for s in range(100, 1001, 50)]
        assert all(a >= b for a, b in zip(mid, mid[1:]))

    def test_zero_grads_zero_decay_leave_params(self):
        cfg = TrainConfig(weight_decay=0.0)
        params = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        opt = AdamW(params)
        new = opt.update(params, {"w": np.zeros(2, dtype=np.float32)}, 0, cfg)
        np.testing.assert_array_equal(new["w"].data, params["w"].data)

    def test_first_step_is_signed_lr(self):
        # with bias correction the first update is lr * g / |g| (up to eps)
        cfg = TrainConfig(weight_decay=0.0, warmup_steps=10, decay_steps=20)
        params = {"w": Tensor(np.array([1.0, 1.0, 1.0], dtype=np.float64), requires_grad=True)}
        new = AdamW(params).update(params, {"w": np.array([3.0, -0.2, 1e-3])}, 0, cfg)
        np.testing.assert_allclose(1.0 - new["w"].data, 1e-5 * np.array([1, -1, 1]), rtol=1e-4)

    def test_quadratic_converges(self):
        cfg = TrainConfig(lr_init=0.1, lr_peak=0.1, lr_end=1e-4, warmup_steps=0, decay_steps=500, weight_decay=0.0)
        params = {"x": Tensor(np.array([-4.0]), requires_grad=True, dtype=np.float64)}
        opt = AdamW(params)
        for step in range(500):
            x = params["x"]
            loss = tn.sum_((x - 2.5) * (x - 2.5))
            params = opt.update(params, {"x": tn.backward(loss, wrt=[x])[x]}, step, cfg)
        assert abs(float(params["x"].data[0]) - 2.5) < 1e-4

    def test_non_finite_gradient_rejected(self):
        params = {"w": Tensor(np.ones(2), requires_grad=True)}
        opt = AdamW(params)
        with pytest.raises(NonFiniteError):
            opt.update(params, {"w": np.array([np.nan, 0.0])}, 0, TrainConfig())
        assert opt.count == 0

    @pytest.mark.parametrize("kw", [dict(lr_peak=0.0), dict(warmup_steps=50, decay_steps=10), dict(batch_size=0), dict(self_cond_dropout=1.5)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


class TestTrainStep:
    @pytest.mark.parametrize("strategy", TWO_PASS)
    def test_stop_gradient_boundary(self, strategy):
        cfg = model_for(strategy, tiny_config)
        params = init(cfg, seed=1)
        images, labels = batch(cfg)
        res = train_step(strategy, params, cfg, images, labels, S, None, np.random.default_rng(0), hooks=StepHooks(inspect=True))
        assert all(not np.any(g) for g in res.info["step1_grads"].values())
        assert not np.any(res.info["step1_input_grad"])
        assert any(np.any(g) for g in res.grads.values())

    def test_recycling_loss_uses_ground_truth(self):
        # truth is all background and the head is biased towards background;
        # the recycled prediction claims all foreground. Scoring against the
        # prediction would give a huge loss, scoring against the truth a tiny one.
        strategy = Strategy.RECYCLE_MAX_T
        cfg = model_for(strategy)
        params = init(cfg, seed=2)
        params["out.b"] = Tensor(np.array([10.0, -10.0], dtype=np.float32), requires_grad=True)
        images, _ = batch(cfg, n=3)
        labels = np.zeros((3,) + cfg.spatial, dtype=np.int64)
        hooks = StepHooks(step1_override=lambda x0: -x0)
        res = train_step(strategy, params, cfg, images, labels, S, None, np.random.default_rng(1), hooks=hooks)
        assert np.all(decode_mask(res.info["x0hat"]) == 1)
        logits = Tensor(res.info["logits"])
        assert res.loss == pytest.approx(float(seg_loss(logits, labels).data), rel=1e-6)
        assert res.loss < 1.0
        assert float(seg_loss(logits, decode_mask(res.info["x0hat"])).data) > 100.0

    def test_recycling_with_oracle_first_pass_matches_standard(self):
        # forcing the first pass to return x0 makes step-2 noising identical in law to Standard
        t = 400
        cfg_rec = model_for(Strategy.RECYCLE_MAX_T)
        params = init(cfg_rec, seed=3)
        images, labels = batch(cfg_rec, n=1)
        x0 = encode_mask(labels, 2)[0]
        sa, sb = math.sqrt(S.bar_alphas[t]), math.sqrt(1 - S.bar_alphas[t])
        residuals = {}
        for strategy, hooks in [
            (Strategy.RECYCLE_MAX_T, StepHooks(step1_override=lambda x: x, fixed_t=t)),
            (Strategy.STANDARD, StepHooks(fixed_t=t)),
        ]:
            rng = np.random.default_rng(4)
            draws = [train_step(strategy, params, cfg_rec, images, labels, S, None, rng, hooks=hooks).info["x_t"][0] for _ in range(400)]
            residuals[strategy] = (np.stack(draws) - sa * x0).ravel() / sb
        for r in residuals.values():
            se = 1 / math.sqrt(r.size)
            assert abs(r.mean()) < 4 * se and abs(r.var() - 1) < 4 * math.sqrt(2) * se
        a, b = residuals.values()
        assert abs(a.mean() - b.mean()) < 4 * math.sqrt(2 / a.size)

    @pytest.mark.parametrize("strategy", [Strategy.RECYCLE_MAX_T, Strategy.RECYCLE_NEXT_T, Strategy.SELF_COND_NEXT_T])
    def test_next_step_kinds_never_sample_T(self, strategy):
        cfg = model_for(strategy)
        params = init(cfg)
        images, labels = batch(cfg, n=4)
        imp = ImportanceState(S.T, buckets=10, history=1)
        rng = np.random.default_rng(5)
        seen = np.concatenate([train_step(strategy, params, cfg, images, labels, S, imp, rng).t for _ in range(100)])
        assert seen.max() <= S.T - 1
        with pytest.raises(ValueError):
            train_step(strategy, params, cfg, images, labels, S, None, rng, hooks=StepHooks(fixed_t=S.T))

    def test_self_cond_dropout_rate(self):
        strategy = Strategy.SELF_COND_SAME_T
        cfg = model_for(strategy)
        params = init(cfg)
        images, labels = batch(cfg, n=1)
        rng = np.random.default_rng(6)
        dropped = [bool(train_step(strategy, params, cfg, images, labels, S, None, rng).info["dropped"][0]) for _ in range(2000)]
        # 3 standard deviations of a Bernoulli(0.5) mean over 2000 trials
        assert abs(np.mean(dropped) - 0.5) < 3 * 0.5 / math.sqrt(2000)

    def test_dropped_samples_get_zero_self_cond(self):
        strategy = Strategy.SELF_COND_SAME_T
        cfg = model_for(strategy)
        params = init(cfg)
        # a zero head predicts p = 1/2, i.e. x0hat = 0 even when kept
        params["out.b"] = Tensor(np.array([0.7, -0.7], dtype=np.float32), requires_grad=True)
        images, labels = batch(cfg, n=8)
        res = train_step(strategy, params, cfg, images, labels, S, None, np.random.default_rng(7))
        x0hat = res.info["x0hat"]
        assert res.info["dropped"].any() and (~res.info["dropped"]).any()
        assert not np.any(x0hat[res.info["dropped"]])
        assert np.all(np.any(x0hat[~res.info["dropped"]] != 0, axis=(1, 2, 3)))

    def test_next_t_posterior_source_hook(self):
        strategy = Strategy.SELF_COND_NEXT_T
        cfg = model_for(strategy)
        params = init(cfg)
        images, labels = batch(cfg, n=2)
        a = train_step(strategy, params, cfg, images, labels, S, None, np.random.default_rng(8), hooks=StepHooks(fixed_t=2))
        b = train_step(strategy, params, cfg, images, labels, S, None, np.random.default_rng(8), hooks=StepHooks(fixed_t=2, posterior_from_prediction=True))
        assert not np.allclose(a.info["x_t"], b.info["x_t"])

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_bit_reproducible(self, strategy):
        cfg = model_for(strategy)
        params = init(cfg, seed=9)
        images, labels = batch(cfg, n=2)
        runs = [train_step(strategy, params, cfg, images, labels, S, ImportanceState(S.T), np.random.default_rng(10)) for _ in range(2)]
        assert runs[0].loss == runs[1].loss
        assert all(np.array_equal(runs[0].grads[k], runs[1].grads[k]) for k in params)

    def test_importance_state_receives_losses(self):
        cfg = model_for(Strategy.STANDARD)
        imp = ImportanceState(S.T)
        images, labels = batch(cfg, n=3)
        res = train_step(Strategy.STANDARD, init(cfg), cfg, images, labels, S, imp, np.random.default_rng(11))
        for t, loss in zip(res.t, res.per_sample_loss):
            assert loss in imp.losses(imp.bucket_of(int(t)))

    def test_strategy_model_mismatch(self):
        cfg = micro_config()
        images, labels = batch(cfg)
        with pytest.raises(ValueError):
            train_step(Strategy.SELF_COND_SAME_T, init(cfg), cfg, images, labels, S, None, np.random.default_rng(0))

    def test_overfit_one_batch(self):
        cfg = tiny_config(classes=2)
        tasks = gen_dataset(3, 2, size=16, classes=2, difficulty=0.2)
        images = np.stack([t.image for t in tasks])
        labels = np.stack([t.labels for t in tasks])
        tcfg = TrainConfig(strategy=Strategy.STANDARD, lr_peak=3e-3, warmup_steps=10, decay_steps=200)
        params = init(cfg, seed=0)
        opt = AdamW(params)
        rng = np.random.default_rng(0)
        losses = []
        for step in range(200):
            res = train_step(Strategy.STANDARD, params, cfg, images, labels, S, None, rng, tcfg)
            losses.append(res.loss)
            params = opt.update(params, res.grads, step, tcfg)
        assert np.mean(losses[-10:]) < losses[0]


class TestFit:
    def test_log_checkpoints_and_best(self):
        cfg = micro_config()
        tasks = gen_dataset(0, 6, size=16, classes=2)
        val = gen_dataset(1, 3, size=16, classes=2)
        cfg = micro_config(spatial=(16, 16))
        tcfg = TrainConfig(strategy=Strategy.STANDARD, batch_size=2, total_steps=12, checkpoint_interval=4, warmup_steps=2, decay_steps=12, val_steps=2)
        res = fit(cfg, tcfg, tasks, val)
        assert [row["step"] for row in res.log] == list(range(1, 13))
        assert sorted(res.checkpoints) == [4, 8, 12]
        dice = [row["val_dice"] for row in res.val_log]
        assert res.best_step == res.val_log[int(np.argmax(dice))]["step"]
        assert all(len(row["sampled_t"].split()) == 2 for row in res.log)
