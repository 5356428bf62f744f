"""Evaluation, sweeps and report emission.

Every work unit is a pure function of its derived seed. Units may run on a
thread pool; results are assembled in grid order so the CSV output does not
depend on scheduling.
"""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.svm import LinearSVC

from . import data
from .attacks import AttackConfig, BlackBox, WHITE_BOX, nes_blackbox
from .errors import ConfigError
from .smoothing import SmoothingConfig, aggregate_votes, smooth_predict, winners
from .training import derive_seed

FIELDS = ("model_id", "layer_noise", "smoothing", "M", "sigma", "attack", "grad_evals",
          "clean_mean", "clean_std", "adv_mean", "adv_std", "seeds",
          "clean_per_seed", "adv_per_seed")

# two-sided 99% normal quantile for the Monte Carlo half-width
Z99 = 2.5758293035489004


def format_mean_std(mean: float, std: float | None, digits: int = 2) -> str:
    """``55.92±0.22`` style cell; the std part is dropped when absent."""
    if std is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def binomial_std(accuracy: float, n: int) -> float:
    """Standard deviation, in percentage points, of an accuracy measured on ``n`` examples."""
    p = accuracy / 100.0
    return 100.0 * float(np.sqrt(max(p * (1 - p), 0.0) / max(n, 1)))


def _mean(values):
    return float(np.mean(values)) if values else None


def _std(values):
    return float(np.std(values, ddof=1)) if values is not None and len(values) >= 2 else None


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class EvalRow:
    model_id: str
    layer_noise: str
    smoothing: str
    M: int
    sigma: float
    attack: str
    grad_evals: int
    clean: list
    adv: list | None
    seeds: list

    @property
    def clean_mean(self):
        return _mean(self.clean)

    @property
    def clean_std(self):
        return _std(self.clean)

    @property
    def adv_mean(self):
        return _mean(self.adv) if self.adv is not None else None

    @property
    def adv_std(self):
        return _std(self.adv)

    def as_record(self) -> dict:
        return {
            "model_id": self.model_id, "layer_noise": self.layer_noise,
            "smoothing": self.smoothing, "M": self.M, "sigma": float(self.sigma),
            "attack": self.attack, "grad_evals": self.grad_evals,
            "clean_mean": self.clean_mean, "clean_std": self.clean_std,
            "adv_mean": self.adv_mean, "adv_std": self.adv_std,
            "seeds": " ".join(str(s) for s in self.seeds),
            "clean_per_seed": " ".join(repr(float(v)) for v in self.clean),
            "adv_per_seed": " ".join(repr(float(v)) for v in self.adv) if self.adv is not None else "",
        }


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(FIELDS)
        for row in self.rows:
            rec = row.as_record()
            writer.writerow([_cell(rec[f]) for f in FIELDS])
        return buf.getvalue()

    def find(self, **match) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows, self.wall_time + other.wall_time)


def layer_noise_label(model) -> str:
    parts = [f"{l}:{spec.target}:{alpha:g}" for l, alpha in model.alphas().items()
             for spec in [model.noise[l]]]
    return " ".join(parts) if parts else "none"


def _accuracy(pred, y) -> float:
    y = np.asarray(y)
    if not len(y):
        return 0.0
    return 100.0 * int(np.count_nonzero(np.asarray(pred) == y)) / len(y)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def attack_seed(seed: int) -> int:
    return derive_seed(seed, 1)


def smoothing_seed(seed: int) -> int:
    return derive_seed(seed, 2)


def craft(model, x, y, attack: AttackConfig, seed: int, smoothing: SmoothingConfig | None = None):
    """Adversarial inputs for one evaluation seed.

    White-box families differentiate the base model. NES only queries the
    classifier under evaluation, i.e. the smoothed one when smoothing is given.
    """
    cfg = replace(attack, seed=attack_seed(seed))
    if cfg.family == "nes":
        if smoothing is not None:
            smoothing = replace(smoothing, base_seed=smoothing_seed(seed))
        return nes_blackbox(BlackBox(model, smoothing).predict_probs, x, y, cfg, model.input_domain)[0]
    return WHITE_BOX[cfg.family](model, x, y, cfg)


def _smoothing_or_base(smoothing):
    return smoothing if smoothing is not None else SmoothingConfig(M=1, sigma=0.0)


def evaluate(model, split, attack: AttackConfig | None = None, smoothing: SmoothingConfig | None = None,
             seeds=(0,), model_id: str = "model", threads: int = 1) -> EvalReport:
    """Clean and (optionally) adversarial accuracy of the smoothed classifier.

    Without ``smoothing`` the classifier is the base model evaluated once
    (``M=1``, ``sigma=0``, layer noise from sample 0 of the seed's stream).
    """
    start = time.perf_counter()
    x, y = split
    sm = _smoothing_or_base(smoothing)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("evaluate needs at least one seed")

    def unit(seed):
        cfg = replace(sm, base_seed=smoothing_seed(seed))
        clean = _accuracy(smooth_predict(model, x, cfg)[0], y)
        if attack is None:
            return clean, None
        x_adv = craft(model, x, y, attack, seed, sm)
        return clean, _accuracy(smooth_predict(model, x_adv, cfg)[0], y)

    results = _map(unit, seeds, threads)
    row = EvalRow(model_id, layer_noise_label(model), sm.label, sm.M, sm.sigma,
                  attack.to_spec() if attack else "none", attack.grad_evals if attack else 0,
                  [r[0] for r in results], None if attack is None else [r[1] for r in results], seeds)
    return EvalReport([row], time.perf_counter() - start)


def _grid_accuracies(model, x, y, sigmas, Ms, voting, C, base_seed):
    """Accuracy for every (sigma, M); smaller M reuse the leading samples of the largest."""
    out = {}
    m_max = max(Ms)
    for sigma in sigmas:
        cfg = SmoothingConfig(M=m_max, sigma=sigma, voting=voting, C=C, base_seed=base_seed)
        _, tally = smooth_predict(model, x, cfg)
        for M in Ms:
            agg = aggregate_votes(tally.probs[:, :M], replace(cfg, M=M))
            out[sigma, M] = _accuracy(winners(agg), y)
    return out


def sweep_sigma_M(model, split, attack: AttackConfig | None, sigmas, Ms, voting="prediction", C=0.5,
                  seeds=(0,), model_id="model", threads=1) -> EvalReport:
    """Cross product of noise scales and sample counts, clean and attacked.

    Adversarial inputs are crafted once per seed against the base model and
    shared by every grid point; noise streams are paired across the grid.
    """
    start = time.perf_counter()
    sigmas, Ms, seeds = [float(s) for s in sigmas], [int(m) for m in Ms], list(seeds)
    if not sigmas or not Ms or not seeds:
        raise ConfigError("sigma/M grid and seed list must be non-empty")
    SmoothingConfig(M=max(Ms), sigma=max(sigmas), voting=voting, C=C)  # validate
    x, y = split

    def unit(seed):
        base = smoothing_seed(seed)
        clean = _grid_accuracies(model, x, y, sigmas, Ms, voting, C, base)
        if attack is None:
            return clean, None
        x_adv = craft(model, x, y, attack, seed)
        return clean, _grid_accuracies(model, x_adv, y, sigmas, Ms, voting, C, base)

    results = _map(unit, seeds, threads)
    label = SmoothingConfig(voting=voting, C=C).label
    noise = layer_noise_label(model)
    rows = []
    for sigma in sigmas:
        for M in Ms:
            rows.append(EvalRow(
                model_id, noise, label, M, sigma,
                attack.to_spec() if attack else "none", attack.grad_evals if attack else 0,
                [r[0][sigma, M] for r in results],
                None if attack is None else [r[1][sigma, M] for r in results], seeds))
    return EvalReport(rows, time.perf_counter() - start)


def kM_triples(families, ks, M_bs):
    """Requested (family, k, M_b) triples; single-sample families only take ``M_b=1``."""
    return [(f, int(k), int(mb)) for f in families for k in ks
            for mb in (M_bs if f in ("epgd", "smoothadv") else [1])]


def sweep_kM(model, split, triples, base_attack: AttackConfig, smoothing: SmoothingConfig | None = None,
             seeds=(0,), model_id="model", threads=1) -> EvalReport:
    """One row per (family, k, M_b); ``grad_evals`` holds the ``k*M_b`` budget."""
    start = time.perf_counter()
    report = EvalReport()
    for family, k, m_b in triples:
        cfg = replace(base_attack, family=family, k=k, M_b=m_b)
        report += evaluate(model, split, cfg, smoothing, seeds, model_id, threads)
    report.wall_time = time.perf_counter() - start
    return report


def sweep_epsilon(model, split, attack: AttackConfig, epsilons, smoothing: SmoothingConfig | None = None,
                  seeds=(0,), model_id="model", threads=1) -> EvalReport:
    """Adversarial accuracy per attack radius (the step size follows ``epsilon`` unless fixed)."""
    if not len(epsilons):
        raise ConfigError("epsilon list must be non-empty")
    start = time.perf_counter()
    report = EvalReport()
    for eps in epsilons:
        report += evaluate(model, split, replace(attack, epsilon=float(eps)), smoothing,
                           seeds, model_id, threads)
    report.wall_time = time.perf_counter() - start
    return report


# -- linear SVM under input noise ------------------------------------------

@dataclass
class SVMReport:
    objective_clean: float
    objective_noisy: float
    half_width: float
    noise_term_mean: float
    hinge_clean: float
    hinge_noisy: float
    w_l1: float
    w_l2: float
    separable: bool
    trials: int

    @property
    def within(self) -> bool:
        return abs(self.objective_noisy - self.objective_clean) <= self.half_width

    def as_record(self) -> dict:
        rec = {f.name: getattr(self, f.name) for f in self.__dataclass_fields__.values()}
        rec["within"] = self.within
        return rec


SVM_FIELDS = ("repetition", "objective_clean", "objective_noisy", "half_width", "within",
              "noise_term_mean", "hinge_clean", "hinge_noisy", "w_l1", "w_l2", "separable", "trials")


def fit_linear_svm(x, labels, seed=0):
    """Hinge-loss linear SVM; labels in {-1, +1}. Returns ``(w, b)``."""
    svm = LinearSVC(C=1.0, loss="hinge", dual=True, max_iter=100_000, random_state=seed)
    svm.fit(x, labels)
    return svm.coef_[0].astype(np.float64), float(svm.intercept_[0])


def svm_noise_experiment(dim=10, n=200, sigma=0.1, trials=10_000, seed=0, epsilon=0.05,
                         separation=8.0, w=None, b=None, noise_seed=None, chunk=250) -> SVMReport:
    """Monte Carlo check that zero-mean input noise leaves the adversarial SVM objective unchanged.

    Per example the worst-case l-infinity objective decomposes into
    ``eps*||w||_1 + hinge_i - y_i w.eta_i``; averaging over noise removes the
    last term. ``objective_noisy`` is the Monte Carlo mean of that quantity,
    ``half_width`` its 99% normal interval. ``hinge_clean`` and ``hinge_noisy``
    evaluate the hinge of the worst case, ``relu(1 - margin + eps*||w||_1)``,
    without and with noise; by convexity the noisy value is not smaller.
    Pass ``w``/``b`` to reuse a trained separator and ``noise_seed`` to draw
    fresh noise for the same data.
    """
    if trials < 1000:
        raise ConfigError("svm experiment needs at least 1000 trials")
    if sigma < 0 or epsilon < 0:
        raise ConfigError("sigma and epsilon must be non-negative")
    x, y01 = data.blobs(n, 2, dim, separation, seed)
    labels = 2.0 * y01 - 1.0
    if w is None:
        w, b = fit_linear_svm(x, labels, seed)
    margins = labels * (x @ w + b)
    separable = bool(np.all(margins > 0))
    hinge = np.maximum(0.0, 1.0 - margins)
    l1, l2 = float(np.abs(w).sum()), float(np.linalg.norm(w))
    clean = float(np.mean(epsilon * l1 + hinge))
    worst = 1.0 - margins + epsilon * l1

    noise_seed = seed if noise_seed is None else noise_seed
    rng = np.random.default_rng([noise_seed & 0xFFFFFFFF, 4])
    per_trial = np.empty(trials)
    jensen = np.empty(trials)
    noise_sum = 0.0
    for s in range(0, trials, chunk):
        t = min(chunk, trials - s)
        eta = sigma * rng.standard_normal((t, n, dim))
        w_eta = eta @ w                                               # (t, n)
        noise_sum += float(w_eta.sum())
        per_trial[s:s + t] = np.mean(epsilon * l1 + hinge - labels * w_eta, axis=1)
        jensen[s:s + t] = np.mean(np.maximum(0.0, worst - labels * w_eta), axis=1)
    noisy = clean + float(np.mean(per_trial - clean))
    half = Z99 * float(np.std(per_trial, ddof=1)) / float(np.sqrt(trials))
    return SVMReport(clean, noisy, half, noise_sum / (trials * n),
                     float(np.mean(np.maximum(0.0, worst))), float(np.mean(jensen)),
                     l1, l2, separable, trials)


def svm_repetitions(repetitions=100, seed=0, **kwargs) -> list:
    """Repeat the noise experiment on one trained separator with independent noise seeds."""
    dim, n = kwargs.get("dim", 10), kwargs.get("n", 200)
    x, y01 = data.blobs(n, 2, dim, kwargs.get("separation", 8.0), seed)
    w, b = fit_linear_svm(x, 2.0 * y01 - 1.0, seed)
    return [svm_noise_experiment(seed=seed, w=w, b=b, noise_seed=derive_seed(seed, r), **kwargs)
            for r in range(repetitions)]
