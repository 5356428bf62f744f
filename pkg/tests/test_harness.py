import csv
import io
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothinf import engine, harness
from smoothinf.attacks import AttackConfig
from smoothinf.engine import Dense, Model
from smoothinf.errors import ConfigError
from smoothinf.harness import (FIELDS, EvalReport, EvalRow, binomial_std, evaluate, format_mean_std, kM_triples,
                               svm_noise_experiment, svm_repetitions, sweep_epsilon, sweep_kM, sweep_sigma_M)
from smoothinf.smoothing import SmoothingConfig

PGD = AttackConfig(epsilon=8 / 255, k=3)


@pytest.fixture(scope="module")
def split(digits):
    x, y = digits.test
    return x[:80], y[:80]


def constant_model(cls=0, classes=3, dim=4):
    layer = Dense(dim, classes)
    b = np.zeros(classes)
    b[cls] = 1.0
    layer.params = [np.zeros((classes, dim)), b]
    return Model([layer], (dim,))


def parse(csv_text):
    return list(csv.DictReader(io.StringIO(csv_text)))


class TestFormatting:
    def test_mean_std(self):
        assert format_mean_std(55.92, 0.22) == "55.92±0.22"

    def test_missing_std(self):
        assert format_mean_std(60.0, None) == "60.00"

    def test_binomial_std(self):
        assert binomial_std(50.0, 100) == pytest.approx(5.0)
        assert binomial_std(100.0, 10) == 0.0

    def test_single_seed_has_no_std(self):
        row = EvalRow("m", "none", "prediction", 1, 0.0, "none", 0, [70.0], None, [0])
        rec = row.as_record()
        assert rec["clean_std"] is None and rec["adv_mean"] is None
        assert parse(EvalReport([row]).to_csv())[0]["clean_std"] == ""

    def test_csv_header_and_line_endings(self):
        text = EvalReport([EvalRow("m", "none", "p", 1, 0.1, "none", 0, [1.0, 2.0], [0.5, 1.5], [0, 1])]).to_csv()
        assert text.splitlines()[0] == ",".join(FIELDS)
        assert "\r" not in text and text.endswith("\n")

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=2, max_size=8))
    def test_report_integrity(self, values):
        row = EvalRow("m", "none", "p", 4, 0.1, "pgd", 3, values, list(reversed(values)), list(range(len(values))))
        rec = parse(EvalReport([row]).to_csv())[0]
        per_seed = [float(v) for v in rec["clean_per_seed"].split()]
        assert per_seed == values
        mean = float(rec["clean_mean"])
        assert min(values) - 1e-9 <= mean <= max(values) + 1e-9
        assert abs(float(rec["clean_std"]) - statistics.stdev(per_seed)) <= 1e-9


class TestEvaluate:
    def test_constant_correct(self):
        model = constant_model()
        x, y = np.random.default_rng(0).random((25, 4)), np.zeros(25, int)
        row = evaluate(model, (x, y), PGD, seeds=(0, 1, 2)).rows[0]
        assert row.clean_mean == 100.0 and row.clean_std == 0.0
        assert row.adv_mean == 100.0

    def test_epsilon_zero_matches_clean(self, trained_digits_model, split):
        row = evaluate(trained_digits_model, split, AttackConfig(epsilon=0.0, k=3), seeds=(0, 1)).rows[0]
        assert row.adv == row.clean

    def test_accuracy_definition(self, trained_digits_model, split):
        x, y = split
        row = evaluate(trained_digits_model, split, seeds=(4,)).rows[0]
        draw_pred = harness.smooth_predict(trained_digits_model, x,
                                           SmoothingConfig(M=1, base_seed=harness.smoothing_seed(4)))[0]
        assert row.clean == [100.0 * np.count_nonzero(draw_pred == y) / len(y)]

    def test_seed_order_kept(self, trained_digits_model, split):
        row = evaluate(trained_digits_model, split, seeds=(3, 1, 2)).rows[0]
        assert row.seeds == [3, 1, 2]

    def test_attack_lowers_accuracy(self, trained_digits_model, split):
        row = evaluate(trained_digits_model, split, AttackConfig(epsilon=16 / 255, k=5)).rows[0]
        assert row.adv_mean < row.clean_mean

    def test_no_seeds(self, small_mlp):
        with pytest.raises(ConfigError):
            evaluate(small_mlp, (np.zeros((1, 4)), [0]), seeds=())

    def test_threads_do_not_change_output(self, trained_digits_model, split):
        a = evaluate(trained_digits_model, split, PGD, SmoothingConfig(M=4, sigma=0.1), seeds=range(4))
        b = evaluate(trained_digits_model, split, PGD, SmoothingConfig(M=4, sigma=0.1), seeds=range(4), threads=4)
        assert a.to_csv() == b.to_csv()

    def test_nes_row(self, trained_digits_model, split):
        attack = AttackConfig(family="nes", epsilon=8 / 255, k=2, nes_population=4)
        row = evaluate(trained_digits_model, split, attack, SmoothingConfig(M=2, sigma=0.05)).rows[0]
        assert row.attack.startswith("family:nes") and row.adv_mean <= row.clean_mean


class TestSweeps:
    def test_single_point_grid_equals_evaluate(self, trained_digits_model, split):
        grid = sweep_sigma_M(trained_digits_model, split, PGD, [0.0], [1], seeds=(0, 1))
        plain = evaluate(trained_digits_model, split, PGD, SmoothingConfig(M=1, sigma=0.0), seeds=(0, 1))
        assert len(grid.rows) == 1
        assert grid.to_csv() == plain.to_csv()

    def test_grid_rows_and_order(self, trained_digits_model, split):
        report = sweep_sigma_M(trained_digits_model, split, None, [0.0, 0.1, 0.2], [1, 4])
        assert [(r.sigma, r.M) for r in report.rows] == [(s, m) for s in (0.0, 0.1, 0.2) for m in (1, 4)]
        assert all(r.adv is None for r in report.rows)

    def test_sigma_zero_constant_across_m(self, split):
        model = engine.mlp((1, 8, 8), [16], 10, seed=1)
        report = sweep_sigma_M(model, split, PGD, [0.0], [1, 2, 8])
        assert len({(tuple(r.clean), tuple(r.adv)) for r in report.rows}) == 1

    def test_grid_uses_sample_prefixes(self, trained_digits_model, split):
        grid = sweep_sigma_M(trained_digits_model, split, None, [0.15], [3, 9], seeds=(2,))
        for M in (3, 9):
            direct = evaluate(trained_digits_model, split, None, SmoothingConfig(M=M, sigma=0.15), seeds=(2,))
            assert grid.find(M=M)[0].clean == direct.rows[0].clean

    def test_km_triples(self):
        triples = kM_triples(["pgd", "epgd"], [1, 8], [1, 8])
        assert triples == [("pgd", 1, 1), ("pgd", 8, 1), ("epgd", 1, 1), ("epgd", 1, 8),
                           ("epgd", 8, 1), ("epgd", 8, 8)]

    def test_km_buckets(self, trained_digits_model, split):
        triples = kM_triples(["pgd", "epgd", "smoothadv"], [1, 4], [1, 4])
        attack = AttackConfig(epsilon=8 / 255, sigma_attack=0.1)
        report = sweep_kM(trained_digits_model, split, triples, attack, SmoothingConfig(M=2, sigma=0.1))
        assert len(report.rows) == len(triples)
        budget = {(t[0], t[1], t[2]): r.grad_evals for t, r in zip(triples, report.rows)}
        assert budget["pgd", 4, 1] == budget["epgd", 1, 4] == budget["smoothadv", 1, 4] == 4
        assert budget["epgd", 4, 4] == 16

    def test_epsilon_sweep(self, trained_digits_model, split):
        eps = [0.0, 4 / 255, 16 / 255]
        report = sweep_epsilon(trained_digits_model, split, PGD, eps, seeds=(0, 1))
        assert len(report.rows) == 3
        assert report.rows[0].adv == report.rows[0].clean
        assert report.rows[-1].adv_mean <= report.rows[0].adv_mean
        again = sweep_epsilon(trained_digits_model, split, PGD, eps, seeds=(0, 1))
        assert report.to_csv() == again.to_csv()

    @pytest.mark.parametrize("kwargs", [dict(sigmas=[], Ms=[1]), dict(sigmas=[0.1], Ms=[0])])
    def test_grid_validation(self, small_mlp, kwargs):
        with pytest.raises(ConfigError):
            sweep_sigma_M(small_mlp, (np.zeros((1, 4)), [0]), None, **kwargs)


class TestSVM:
    def test_sigma_zero_exact(self):
        rep = svm_noise_experiment(dim=4, n=40, sigma=0.0, trials=1000, seed=1)
        assert rep.objective_noisy == rep.objective_clean
        assert rep.half_width == 0.0 and rep.hinge_noisy == rep.hinge_clean

    def test_noise_term_clt(self):
        rep = svm_noise_experiment(dim=6, n=50, sigma=0.3, trials=4000, seed=2)
        assert abs(rep.noise_term_mean) < 4 * rep.w_l2 * 0.3 / np.sqrt(4000 * 50)

    def test_separable_flag(self):
        assert svm_noise_experiment(dim=3, n=60, trials=1000, separation=10.0).separable
        assert not svm_noise_experiment(dim=3, n=60, trials=1000, separation=0.5).separable

    def test_convexity_gap_reported(self):
        rep = svm_noise_experiment(dim=5, n=80, sigma=0.5, trials=1000, seed=3, separation=2.0)
        assert rep.hinge_noisy >= rep.hinge_clean

    def test_repetitions_use_fresh_noise(self):
        reps = svm_repetitions(repetitions=3, dim=3, n=30, trials=1000)
        assert len({r.objective_noisy for r in reps}) == 3
        assert len({r.objective_clean for r in reps}) == 1

    def test_too_few_trials(self):
        with pytest.raises(ConfigError):
            svm_noise_experiment(trials=10)
