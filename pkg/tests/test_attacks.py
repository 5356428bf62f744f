import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothinf import engine
from smoothinf.attacks import (AttackConfig, BlackBox, epgd, fgsm, nes_blackbox, nes_gradient_estimate,
                               parse_attack_spec, pgd, project, random_perturbation, run_attack,
                               smoothadv_pgd, transfer_attack)
from smoothinf.engine import Dense, Model
from smoothinf.errors import ConfigError
from smoothinf.noise import NoiseDraw, NoiseSpec
from smoothinf.smoothing import smoothed_loss_grad

from conftest import same_pattern

FUZZ_MODEL = engine.mlp((5,), [7], 3, seed=21, noise=NoiseSpec("weight", alpha=0.2))


def binary_linear(w, b=0.0):
    """Two-class linear model with logits ``[0, w.x + b]``."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    layer = Dense(len(w), 2)
    layer.params = [np.vstack([np.zeros_like(w), w]), np.array([0.0, b])]
    return Model([layer], (len(w),))


def loss(model, x, y, draw=None):
    """Per-example cross-entropy."""
    p = engine.softmax(engine.forward(model, x, draw))
    return -np.log(p[np.arange(len(y)), y])


class TestConfig:
    def test_default_alpha(self):
        assert AttackConfig(epsilon=0.1, k=5).alpha == pytest.approx(0.05)

    @pytest.mark.parametrize("kwargs", [dict(family="cw"), dict(epsilon=-1.0), dict(k=0), dict(M_b=0),
                                        dict(nes_population=3), dict(step_alpha=-0.1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)

    @pytest.mark.parametrize("family", ["fgsm", "pgd", "epgd", "smoothadv", "nes"])
    def test_spec_round_trip(self, family):
        cfg = AttackConfig(family=family, epsilon=3 / 255, k=4, M_b=2, sigma_attack=0.1, seed=9)
        again = parse_attack_spec(cfg.to_spec())
        assert again.to_spec() == cfg.to_spec()

    def test_parse_aliases(self):
        cfg = parse_attack_spec("family:epgd, eps:0.03, k:3, mb:4, sigma:0.2, rs:true")
        assert (cfg.family, cfg.epsilon, cfg.k, cfg.M_b, cfg.sigma_attack, cfg.random_start) == \
            ("epgd", 0.03, 3, 4, 0.2, True)

    @pytest.mark.parametrize("text", ["family", "colour:red", "k:seven", "rs:maybe"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_attack_spec(text)

    @pytest.mark.parametrize("family,evals", [("fgsm", 1), ("pgd", 7), ("epgd", 28), ("smoothadv", 28)])
    def test_grad_evals(self, family, evals):
        assert AttackConfig(family=family, k=7, M_b=4).grad_evals == evals


class TestBudget:
    @settings(max_examples=40, deadline=None)
    @given(family=st.sampled_from(["fgsm", "pgd", "epgd", "smoothadv"]),
           epsilon=st.floats(0, 0.5), k=st.integers(1, 4), M_b=st.integers(1, 3),
           alpha=st.one_of(st.none(), st.floats(0, 1)), random_start=st.booleans(),
           sigma=st.floats(0, 0.5), seed=st.integers(0, 2 ** 32 - 1))
    def test_white_box_inside_ball(self, family, epsilon, k, M_b, alpha, random_start, sigma, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.random((6, 5)), rng.integers(0, 3, 6)
        cfg = AttackConfig(family=family, epsilon=epsilon, k=k, M_b=M_b, step_alpha=alpha,
                           random_start=random_start, sigma_attack=sigma, seed=seed)
        x_adv = run_attack(FUZZ_MODEL, x, y, cfg)
        assert np.abs(x_adv - x).max() <= epsilon + 1e-12
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0

    @settings(max_examples=15, deadline=None)
    @given(epsilon=st.floats(0, 0.5), k=st.integers(1, 3), seed=st.integers(0, 1000))
    def test_nes_inside_ball(self, epsilon, k, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.random((4, 5)), rng.integers(0, 3, 4)
        cfg = AttackConfig(family="nes", epsilon=epsilon, k=k, nes_population=6, seed=seed)
        x_adv = run_attack(FUZZ_MODEL, x, y, cfg)
        assert np.abs(x_adv - x).max() <= epsilon + 1e-12
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0

    def test_project(self):
        x = np.array([0.0, 0.5, 1.0])
        np.testing.assert_array_equal(project(np.array([-1.0, 0.9, 2.0]), x, 0.1), [0.0, 0.6, 1.0])


class TestReductions:
    @pytest.fixture
    def batch(self, rng):
        return rng.random((20, 4)), rng.integers(0, 3, 20)

    @pytest.mark.parametrize("eps", [0.0, 2 / 255, 0.1])
    def test_fgsm_is_one_step_pgd(self, eps, noisy_mlp, batch):
        x, y = batch
        np.testing.assert_array_equal(fgsm(noisy_mlp, x, y, AttackConfig(epsilon=eps, seed=3)),
                                      pgd(noisy_mlp, x, y, AttackConfig(epsilon=eps, k=1, step_alpha=eps, seed=3)))

    @pytest.mark.parametrize("k", [1, 7])
    def test_pgd_epgd_smoothadv_chain(self, k, noisy_mlp, batch):
        x, y = batch
        cfg = AttackConfig(epsilon=8 / 255, k=k, seed=5)
        ref = pgd(noisy_mlp, x, y, cfg)
        for attack in (epgd, smoothadv_pgd):
            np.testing.assert_array_equal(attack(noisy_mlp, x, y, AttackConfig(epsilon=8 / 255, k=k, M_b=1,
                                                                               sigma_attack=0.0, seed=5)), ref)

    @pytest.mark.parametrize("M_b", [2, 5])
    def test_sigma_zero_any_mb_noiseless(self, M_b, small_mlp, batch):
        x, y = batch
        ref = pgd(small_mlp, x, y, AttackConfig(k=4))
        for attack in (epgd, smoothadv_pgd):
            np.testing.assert_array_equal(attack(small_mlp, x, y, AttackConfig(k=4, M_b=M_b)), ref)

    def test_epgd_and_smoothadv_agree_at_mb1(self, noisy_mlp, batch):
        x, y = batch
        cfg = AttackConfig(k=3, M_b=1, sigma_attack=0.3, seed=2)
        np.testing.assert_array_equal(epgd(noisy_mlp, x, y, cfg), smoothadv_pgd(noisy_mlp, x, y, cfg))

    def test_epgd_and_smoothadv_diverge(self, batch):
        # averaging before or after the softmax yields different gradient signs somewhere
        model = engine.mlp((4,), [16], 3, seed=8, noise=NoiseSpec("weight", alpha=0.5))
        x, y = batch
        cfg = AttackConfig(epsilon=0.2, k=3, M_b=2, sigma_attack=0.5, seed=1)
        assert not np.array_equal(epgd(model, x, y, cfg), smoothadv_pgd(model, x, y, cfg))

    def test_random_start_changes_trajectory(self, small_mlp, batch):
        x, y = batch
        assert not np.array_equal(pgd(small_mlp, x, y, AttackConfig(k=2)),
                                  pgd(small_mlp, x, y, AttackConfig(k=2, random_start=True)))


class TestClosedForms:
    @pytest.mark.parametrize("attack", [fgsm, pgd])
    def test_epsilon_zero(self, attack, noisy_mlp, rng):
        x = rng.random((5, 4))
        np.testing.assert_array_equal(attack(noisy_mlp, x, [0, 1, 2, 0, 1], AttackConfig(epsilon=0.0)), x)

    def test_one_dim_logistic(self):
        model = binary_linear([2.0])
        x = np.array([[0.5], [0.01]])
        out = fgsm(model, x, [1, 1], AttackConfig(epsilon=0.03))
        np.testing.assert_allclose(out, np.clip(x - 0.03, 0, 1), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("k,alpha", [(1, 0.05), (4, 0.0125), (7, None), (3, 0.5)])
    def test_linear_boundary(self, k, alpha, rng):
        w = rng.choice([-1.0, 1.0], 6) * rng.uniform(0.5, 2.0, 6)
        model = binary_linear(w)
        x, y = rng.random((10, 6)), rng.integers(0, 2, 10)
        out = pgd(model, x, y, AttackConfig(epsilon=0.05, k=k, step_alpha=alpha))
        s = np.where(y == 1, 1.0, -1.0)[:, None]
        np.testing.assert_allclose(out, np.clip(x - 0.05 * s * np.sign(w), 0, 1), atol=1e-15)

    def test_fgsm_sign_matches_finite_differences(self, rng):
        model = engine.mlp((8,), [12], 4, seed=13)
        x, y = rng.random((1, 8)), np.array([2])
        g = engine.grad_input(model, x, y)
        out = fgsm(model, x, y, AttackConfig(epsilon=1e-3))
        checked = 0
        for _ in range(200):
            i = int(rng.integers(8))
            xp, xm = x.copy(), x.copy()
            xp[0, i] += 1e-6
            xm[0, i] -= 1e-6
            if not same_pattern(model, xp, xm) or not 1e-6 < x[0, i] < 1 - 1e-3:
                continue
            num = (loss(model, xp, y)[0] - loss(model, xm, y)[0]) / 2e-6
            if abs(num) < 1e-8:
                continue
            assert np.sign(out[0, i] - x[0, i]) == np.sign(num) == np.sign(g[0, i])
            checked += 1
            if checked == 50:
                break
        assert checked == 50

    def test_pgd_increases_loss(self, rng):
        model = engine.mlp((4,), [16], 3, seed=17)
        x, y = rng.random((200, 4)), rng.integers(0, 3, 200)
        out = pgd(model, x, y, AttackConfig(k=7))
        assert np.mean(loss(model, out, y) >= loss(model, x, y)) >= 0.95

    def test_epgd_step_gradient_finite_differences(self, noisy_mlp, rng):
        x, y = rng.random((2, 4)), np.array([1, 0])
        draw = NoiseDraw(4, 0)
        _, g = smoothed_loss_grad(noisy_mlp, x, y, 8, 0.2, draw, "soft")
        errors = []
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp.flat[i] += 1e-5
            xm.flat[i] -= 1e-5
            num = (smoothed_loss_grad(noisy_mlp, xp, y, 8, 0.2, draw, "soft")[0]
                   - smoothed_loss_grad(noisy_mlp, xm, y, 8, 0.2, draw, "soft")[0]) / 2e-5
            errors.append(abs(g.flat[i] - num) / max(abs(g.flat[i]), abs(num), 1e-7))
        assert np.median(errors) < 1e-3


class TestBlackBox:
    def test_no_gradient_entry_point(self, small_mlp):
        box = BlackBox(small_mlp)
        public = {name for name in dir(box) if not name.startswith("_")}
        assert public == {"input_domain", "predict", "predict_probs", "queries"}

    def test_counts_queries(self, small_mlp, rng):
        box = BlackBox(small_mlp)
        box.predict(rng.random((7, 4)))
        assert box.queries == 7

    def test_self_transfer_is_white_box(self, noisy_mlp, rng):
        x, y = rng.random((30, 4)), rng.integers(0, 3, 30)
        cfg = AttackConfig(k=5, epsilon=0.1)
        x_adv, correct = transfer_attack(noisy_mlp, lambda z: engine.predict(noisy_mlp, z), x, y, cfg)
        np.testing.assert_array_equal(x_adv, pgd(noisy_mlp, x, y, cfg))
        np.testing.assert_array_equal(correct, engine.predict(noisy_mlp, x_adv) == y)

    def test_transfer_epsilon_zero_is_clean(self, small_mlp, noisy_mlp, rng):
        x, y = rng.random((30, 4)), rng.integers(0, 3, 30)
        _, correct = transfer_attack(small_mlp, BlackBox(noisy_mlp).predict, x, y, AttackConfig(epsilon=0.0))
        np.testing.assert_array_equal(correct, engine.predict(noisy_mlp, x) == y)

    def test_transfer_rejects_nes(self, small_mlp):
        with pytest.raises(ConfigError):
            transfer_attack(small_mlp, None, np.zeros((1, 4)), [0], AttackConfig(family="nes"))


class TestNES:
    def test_linear_clt(self):
        c = np.array([1.0, -2.0, 0.5])
        rng = np.random.default_rng(0)
        P = 10 ** 5
        est = nes_gradient_estimate(lambda pts: pts @ c, np.array([0.3, 0.2, 0.9]), P, 0.01, rng)
        sd = np.sqrt((c @ c + c ** 2) / (P // 2))
        assert np.all(np.abs(est - c) < 4 * sd)

    def test_antithetic_cancels_offset(self):
        c = np.array([0.7, -1.1])
        x = np.array([0.4, 0.6])
        est = nes_gradient_estimate(lambda pts: pts @ c + 1e3, x, 10, 0.05, np.random.default_rng(1))
        half = np.random.default_rng(1).standard_normal((5, 2))
        np.testing.assert_allclose(est, 2 * (half @ c) @ half / 10, rtol=0, atol=1e-9)

    def test_constant_loss_pair_is_exactly_zero(self):
        est = nes_gradient_estimate(lambda pts: np.full(len(pts), 3.0), np.zeros(4), 2, 0.1,
                                    np.random.default_rng(2))
        np.testing.assert_array_equal(est, 0.0)

    def test_odd_population(self):
        with pytest.raises(ConfigError):
            nes_gradient_estimate(lambda p: p.sum(axis=1), np.zeros(2), 3, 0.1, np.random.default_rng())

    def test_budget_flag(self, small_mlp, rng):
        x, y = rng.random((3, 4)), np.array([0, 1, 2])
        cfg = AttackConfig(family="nes", k=10, nes_population=10, nes_max_queries=25, epsilon=0.05)
        x_adv, exhausted = nes_blackbox(BlackBox(small_mlp).predict_probs, x, y, cfg)
        assert exhausted
        assert np.abs(x_adv - x).max() <= 0.05 + 1e-12

    def test_beats_random_noise(self, trained_digits_model, digits):
        x, y = digits.test[0][:150], digits.test[1][:150]
        eps = 16 / 255
        box = BlackBox(trained_digits_model)
        nes_x, _ = nes_blackbox(box.predict_probs, x, y, AttackConfig(family="nes", epsilon=eps, k=10,
                                                                      nes_population=20, nes_sigma=0.01))
        rand_x = random_perturbation(x, eps, seed=0)
        assert np.mean(box.predict(nes_x) != y) > np.mean(box.predict(rand_x) != y)
