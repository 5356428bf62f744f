"""l-infinity evasion attacks: FGSM, PGD, EPGD, SmoothAdv-PGD, transfer and NES.

White-box attacks differentiate the base model's cross-entropy. Iteration ``t``
of an attack with ``M_b`` backward samples uses noise samples
``t*M_b .. t*M_b + M_b - 1`` of ``cfg.seed``, so PGD and its smoothed variants
consume identical noise whenever ``M_b == 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import engine
from .errors import ConfigError
from .noise import NoiseDraw
from .smoothing import SmoothingConfig, smooth_predict, smoothed_loss_grad

FAMILIES = ("fgsm", "pgd", "epgd", "smoothadv", "nes")

_ALIASES = {"eps": "epsilon", "alpha": "step_alpha", "mb": "M_b", "m_b": "M_b",
            "sigma": "sigma_attack", "rs": "random_start"}


@dataclass
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 8 / 255
    step_alpha: float | None = None
    k: int = 7
    M_b: int = 1
    sigma_attack: float = 0.0
    random_start: bool = False
    nes_population: int = 50
    nes_sigma: float = 0.01
    nes_max_queries: int = 10_000
    seed: int = 0

    def __post_init__(self):
        self.family = self.family.lower().replace("_pgd", "").replace("smoothadvpgd", "smoothadv")
        if self.family not in FAMILIES:
            raise ConfigError(f"attack family must be one of {FAMILIES}, got {self.family!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if int(self.k) < 1 or int(self.M_b) < 1:
            raise ConfigError("attack needs k >= 1 and M_b >= 1")
        if self.sigma_attack < 0 or self.nes_sigma <= 0:
            raise ConfigError("attack noise scales must be non-negative (nes_sigma positive)")
        if self.nes_population < 2 or self.nes_population % 2:
            raise ConfigError("nes_population must be a positive even number (antithetic pairs)")
        if self.step_alpha is not None and self.step_alpha < 0:
            raise ConfigError("step_alpha must be non-negative")
        self.k, self.M_b = int(self.k), int(self.M_b)

    @property
    def alpha(self) -> float:
        """Per-step size; defaults to ``2.5 * epsilon / k``."""
        return 2.5 * self.epsilon / self.k if self.step_alpha is None else self.step_alpha

    @property
    def grad_evals(self) -> int:
        if self.family == "fgsm":
            return 1
        return self.k * (self.M_b if self.family in ("epgd", "smoothadv") else 1)

    def to_spec(self) -> str:
        parts = [f"family:{self.family}", f"eps:{self.epsilon!r}", f"k:{self.k}",
                 f"alpha:{self.alpha!r}"]
        if self.family in ("epgd", "smoothadv"):
            parts += [f"M_b:{self.M_b}", f"sigma_attack:{self.sigma_attack!r}"]
        if self.family == "nes":
            parts += [f"nes_population:{self.nes_population}", f"nes_sigma:{self.nes_sigma!r}",
                      f"nes_max_queries:{self.nes_max_queries}"]
        parts += [f"random_start:{int(self.random_start)}", f"seed:{self.seed}"]
        return ",".join(parts)


def parse_attack_spec(text: str, **defaults) -> AttackConfig:
    """Parse ``family:pgd,eps:0.031,k:7,alpha:0.011`` into an :class:`AttackConfig`."""
    types = {f.name: f.type for f in fields(AttackConfig)}
    values = dict(defaults)
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ":" not in item:
            raise ConfigError(f"attack spec item {item!r} is not key:value")
        key, raw = (s.strip() for s in item.split(":", 1))
        key = _ALIASES.get(key.lower(), key)
        if key not in types:
            raise ConfigError(f"unknown attack spec key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return AttackConfig(**values)


def _coerce(key, raw, annotation):
    try:
        if "bool" in str(annotation):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if "int" in str(annotation) and "float" not in str(annotation):
            return int(raw)
        if "float" in str(annotation):
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for attack key {key!r}") from None


# -- projection ------------------------------------------------------------

def project(x_adv, x, epsilon, domain=(0.0, 1.0)) -> np.ndarray:
    """Clip onto the l-infinity ball around ``x`` intersected with the input box."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), domain[0], domain[1])


def _start(x, cfg: AttackConfig, domain):
    if not cfg.random_start:
        return x.copy()
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 1])
    return project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon, domain)


def _base_grad(model, x, y, t, cfg):
    return engine.grad_input(model, x, y, NoiseDraw(cfg.seed, t))


def _smoothed_grad(mode):
    def grad(model, x, y, t, cfg):
        draw = NoiseDraw(cfg.seed, t * cfg.M_b)
        return smoothed_loss_grad(model, x, y, cfg.M_b, cfg.sigma_attack, draw, mode)[1]
    return grad


def _iterate(model, x, y, cfg: AttackConfig, grad_fn) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    domain = model.input_domain
    x_adv = _start(x, cfg, domain)
    for t in range(cfg.k):
        g = grad_fn(model, x_adv, y, t, cfg)
        x_adv = project(x_adv + cfg.alpha * np.sign(g), x, cfg.epsilon, domain)
    return x_adv


def fgsm(model, x, y, cfg: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = _base_grad(model, x, y, 0, cfg)
    return project(x + cfg.epsilon * np.sign(g), x, cfg.epsilon, model.input_domain)


def pgd(model, x, y, cfg: AttackConfig) -> np.ndarray:
    return _iterate(model, x, y, cfg, _base_grad)


def epgd(model, x, y, cfg: AttackConfig) -> np.ndarray:
    """PGD on ``-log mean_i softmax(f(x + eta_i))[y]``, fresh noise every step."""
    return _iterate(model, x, y, cfg, _smoothed_grad("soft"))


def smoothadv_pgd(model, x, y, cfg: AttackConfig) -> np.ndarray:
    """PGD on ``-log softmax(mean_i f(x + eta_i))[y]``, fresh noise every step."""
    return _iterate(model, x, y, cfg, _smoothed_grad("logit"))


WHITE_BOX = {"fgsm": fgsm, "pgd": pgd, "epgd": epgd, "smoothadv": smoothadv_pgd}


def run_attack(model, x, y, cfg: AttackConfig) -> np.ndarray:
    """Dispatch a white-box attack by ``cfg.family``. NES needs a black box instead."""
    if cfg.family == "nes":
        return nes_blackbox(BlackBox(model).predict_probs, x, y, cfg)[0]
    return WHITE_BOX[cfg.family](model, x, y, cfg)


# -- black box -------------------------------------------------------------

class BlackBox:
    """Query-only view of a (possibly smoothed) model. Exposes no gradients."""

    def __init__(self, model, smoothing: SmoothingConfig | None = None):
        self._model = model
        self._smoothing = smoothing
        self.input_domain = model.input_domain
        self.queries = 0

    def predict_probs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.queries += len(x)
        if self._smoothing is None:
            return engine.softmax(engine.forward(self._model, x))
        _, tally = smooth_predict(self._model, x, self._smoothing)
        return tally.aggregate / tally.aggregate.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_probs(x), axis=1)


def transfer_attack(source_model, target_predict: Callable, x, y, cfg: AttackConfig):
    """Craft on ``source_model`` only, then query the target once.

    Returns ``(x_adv, target_correct)``.
    """
    if cfg.family == "nes":
        raise ConfigError("transfer attacks need a white-box family on the source model")
    x_adv = WHITE_BOX[cfg.family](source_model, x, y, cfg)
    return x_adv, np.asarray(target_predict(x_adv)) == np.asarray(y)


def nes_gradient_estimate(loss_fn: Callable, x, population: int, sigma: float, rng) -> np.ndarray:
    """Antithetic NES estimate ``(1/(P*sigma)) * sum_j L(x + sigma*u_j) u_j``.

    ``loss_fn`` maps a stack ``(P, *x.shape)`` of query points to losses
    ``(P, *batch)`` where ``batch`` is the leading axis of ``x`` (or ``()``).
    """
    if population < 2 or population % 2:
        raise ConfigError("population must be a positive even number")
    x = np.asarray(x, dtype=np.float64)
    half = rng.standard_normal((population // 2,) + x.shape)
    u = np.concatenate([half, -half], axis=0)
    losses = np.asarray(loss_fn(x[None] + sigma * u), dtype=np.float64)
    losses = losses.reshape(losses.shape + (1,) * (u.ndim - losses.ndim))
    return (losses * u).sum(axis=0) / (population * sigma)


def _prob_loss(probs, y):
    return -np.log(np.maximum(probs[np.arange(len(y)), y], 1e-12))


def nes_blackbox(predict_probs: Callable, x, y, cfg: AttackConfig, domain=(0.0, 1.0)):
    """Score-based l-infinity attack driven by NES gradient estimates.

    Each example stops once misclassified. Returns ``(x_adv, budget_exhausted)``;
    when the per-example query budget runs out the best iterate seen so far
    (highest loss) is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, shape = x.shape[0], x.shape[1:]
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 2])
    lo, hi = domain

    def losses(points):
        flat = np.clip(points, lo, hi).reshape((-1,) + shape)
        return _prob_loss(predict_probs(flat), np.tile(y, len(flat) // n)).reshape(points.shape[:2])

    x_adv = _start(x, cfg, domain)
    probs = predict_probs(x_adv)
    best, best_loss = x_adv.copy(), _prob_loss(probs, y)
    done = np.argmax(probs, axis=1) != y
    queries = 1
    exhausted = False
    for _ in range(cfg.k):
        if done.all():
            break
        if queries + cfg.nes_population + 1 > cfg.nes_max_queries:
            exhausted = True
            break
        g = nes_gradient_estimate(losses, x_adv, cfg.nes_population, cfg.nes_sigma, rng)
        step = project(x_adv + cfg.alpha * np.sign(g), x, cfg.epsilon, domain)
        x_adv = np.where(done.reshape((-1,) + (1,) * len(shape)), x_adv, step)
        probs = predict_probs(x_adv)
        queries += cfg.nes_population + 1
        cur = _prob_loss(probs, y)
        better = (cur > best_loss) | (np.argmax(probs, axis=1) != y)
        better &= ~done
        best[better], best_loss[better] = x_adv[better], cur[better]
        done |= np.argmax(probs, axis=1) != y
    return best, exhausted


def random_perturbation(x, epsilon, seed=0, domain=(0.0, 1.0)) -> np.ndarray:
    """Random corner of the l-infinity ball: ``x + epsilon * Rademacher``."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 3])
    return project(x + epsilon * rng.choice([-1.0, 1.0], size=x.shape), x, epsilon, domain)
