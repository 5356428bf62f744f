"""Monte Carlo smoothed inference and its differentiable relatives.

The smoothed classifier evaluates the base model on ``M`` Gaussian-perturbed
copies of the input and aggregates the per-sample class probabilities with a
voting function:

* ``prediction``    -- one vote for each sample's argmax
* ``weighted_exp``  -- ``2 ** (1 - rank)`` for every class
* ``weighted_topc`` -- 1 for rank 1, ``C`` for rank 2, 0 otherwise
* ``soft``          -- the probabilities themselves

Sample ``i`` uses ``NoiseDraw(base_seed, i)``, so a run at ``M`` sees the first
``M`` samples of any run at ``M' > M``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import ConfigError
from .noise import NoiseDraw, add_input_noise

VOTING = ("prediction", "weighted_exp", "weighted_topc", "soft")

# upper bound on floats materialised at once by the stacked sampling path
_CHUNK_ELEMENTS = 1 << 22


@dataclass
class SmoothingConfig:
    M: int = 1
    sigma: float = 0.0
    voting: str = "prediction"
    C: float = 0.5
    base_seed: int = 0

    def __post_init__(self):
        if int(self.M) < 1:
            raise ConfigError(f"smoothing needs M >= 1, got {self.M}")
        if self.sigma < 0:
            raise ConfigError("smoothing sigma must be non-negative")
        if self.voting not in VOTING:
            raise ConfigError(f"voting must be one of {VOTING}, got {self.voting!r}")
        if self.voting == "weighted_topc" and not 0.0 <= self.C <= 1.0:
            raise ConfigError("WeightedTopC requires 0 <= C <= 1")
        self.M = int(self.M)

    @property
    def label(self) -> str:
        if self.voting == "weighted_topc":
            return f"weighted_topc(C={self.C:g})"
        return self.voting


@dataclass
class VoteTally:
    """Per-sample probabilities ``(N, M, K)``, their ranks, the aggregate ``(N, K)`` and winners."""

    probs: np.ndarray
    ranks: np.ndarray
    aggregate: np.ndarray
    winner: np.ndarray

    def to_csv(self, example: int = 0) -> str:
        buf = io.StringIO()
        buf.write("sample_index,class,probability,rank\n")
        p, r = self.probs[example], self.ranks[example]
        for i in range(p.shape[0]):
            for k in range(p.shape[1]):
                buf.write(f"{i},{k},{p[i, k]!r},{r[i, k]}\n")
        return buf.getvalue()


# -- voting ----------------------------------------------------------------

def class_ranks(probs) -> np.ndarray:
    """Rank 1 for the most probable class; equal probabilities rank by class index."""
    p = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-p, axis=-1, kind="stable")
    ranks = np.empty(p.shape, dtype=np.int64)
    np.put_along_axis(ranks, order, np.arange(1, p.shape[-1] + 1), axis=-1)
    return ranks


def _reduce_samples(values: np.ndarray) -> np.ndarray:
    # sorting first makes the float sum independent of sample order
    return np.sort(values, axis=-2).sum(axis=-2)


def vote_prediction(probs) -> np.ndarray:
    """Count of samples whose argmax is each class. ``probs`` is ``(..., M, K)``."""
    p = np.asarray(probs, dtype=np.float64)
    return _reduce_samples((class_ranks(p) == 1).astype(np.float64))


def vote_weighted(probs, scheme: str = "exp", C: float | None = None) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    ranks = class_ranks(p)
    if scheme == "exp":
        weights = np.ldexp(1.0, 1 - ranks)
    elif scheme == "topc":
        if C is None or not 0.0 <= C <= 1.0:
            raise ConfigError("top-C weighting needs 0 <= C <= 1")
        weights = np.where(ranks == 1, 1.0, np.where(ranks == 2, float(C), 0.0))
    else:
        raise ConfigError(f"unknown weighting scheme {scheme!r}")
    return _reduce_samples(weights)


def vote_soft(probs) -> np.ndarray:
    return _reduce_samples(np.asarray(probs, dtype=np.float64))


def aggregate_votes(probs, cfg: SmoothingConfig) -> np.ndarray:
    if cfg.voting == "prediction":
        return vote_prediction(probs)
    if cfg.voting == "weighted_exp":
        return vote_weighted(probs, "exp")
    if cfg.voting == "weighted_topc":
        return vote_weighted(probs, "topc", cfg.C)
    return vote_soft(probs)


def winners(aggregate) -> np.ndarray:
    """Argmax over classes; ``np.argmax`` already returns the lowest tied index."""
    return np.argmax(aggregate, axis=-1)


# -- sampling --------------------------------------------------------------

def _sample_passes(model, x, M, sigma, draw: NoiseDraw, keep_tape=False):
    """Yield ``(first_sample, count, logits (count, N, K), tape)`` chunks."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if model.has_layer_noise:
        # each sample carries its own layer-noise realisation
        for i in range(M):
            d = draw.shifted(i)
            xi = add_input_noise(x, sigma, d)[0]
            logits, tape = engine.run(model, xi, d)
            yield i, 1, logits[None], (tape if keep_tape else None)
        return
    per_sample = max(1, x.size)
    step = max(1, _CHUNK_ELEMENTS // per_sample)
    for start in range(0, M, step):
        count = min(step, M - start)
        xs = add_input_noise(x, sigma, draw.shifted(start), count)
        logits, tape = engine.run(model, xs.reshape((count * n,) + x.shape[1:]))
        yield start, count, logits.reshape(count, n, -1), (tape if keep_tape else None)


def sample_logits(model, x, M: int, sigma: float, draw: NoiseDraw) -> np.ndarray:
    """Logits of all samples, shape ``(M, N, K)``."""
    if M < 1:
        raise ConfigError("M must be at least 1")
    return np.concatenate([z for _, _, z, _ in _sample_passes(model, x, M, sigma, draw)], axis=0)


def smooth_predict(model, x, cfg: SmoothingConfig):
    """Smoothed labels for a batch ``x``. Returns ``(winner, VoteTally)``."""
    if cfg.M < 1:
        raise ConfigError("M must be at least 1")
    z = sample_logits(model, x, cfg.M, cfg.sigma, NoiseDraw(cfg.base_seed, 0))
    probs = np.swapaxes(engine.softmax(z), 0, 1)
    aggregate = aggregate_votes(probs, cfg)
    win = winners(aggregate)
    return win, VoteTally(probs, class_ranks(probs), aggregate, win)


def _anchored_mean(values: np.ndarray) -> np.ndarray:
    # mean over axis 0 that returns values[0] bit-exactly when all samples agree
    return values[0] + (values - values[0]).sum(axis=0) / values.shape[0]


def smooth_soft_forward(model, x, M: int, sigma: float, draw: NoiseDraw) -> np.ndarray:
    """``(1/M) sum_i softmax(f(x + eta_i))`` (softmax, then average)."""
    return _anchored_mean(engine.softmax(sample_logits(model, x, M, sigma, draw)))


def smooth_logit_forward(model, x, M: int, sigma: float, draw: NoiseDraw) -> np.ndarray:
    """``softmax((1/M) sum_i f(x + eta_i))`` (average, then softmax)."""
    return engine.softmax(_anchored_mean(sample_logits(model, x, M, sigma, draw)))


def smoothed_loss_grad(model, x, y, M: int, sigma: float, draw: NoiseDraw, mode: str = "soft"):
    """Cross-entropy of a smoothed forward and its gradient w.r.t. ``x``.

    ``mode="soft"`` differentiates ``-log mean_i softmax(z_i)[y]``;
    ``mode="logit"`` differentiates ``-log softmax(mean_i z_i)[y]``.
    Both reduce exactly to the base cross-entropy gradient when ``M == 1``.
    """
    if M < 1:
        raise ConfigError("M must be at least 1")
    if mode not in ("soft", "logit"):
        raise ConfigError(f"unknown smoothing mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    passes = list(_sample_passes(model, x, M, sigma, draw, keep_tape=True))
    z = np.concatenate([c[2] for c in passes], axis=0)
    onehot = engine.one_hot(y, z.shape[-1])
    rows = np.arange(n)
    if mode == "soft":
        logp = engine.log_softmax(z)
        lp_y = logp[:, rows, y]                                    # (M, N)
        top = lp_y.max(axis=0)
        w = np.exp(lp_y - top)
        total = w.sum(axis=0)
        loss = float(-(top + np.log(total) - np.log(M)).mean())
        resp = w / total                                           # p_iy / sum_j p_jy
        dz = (resp[..., None] * (engine.softmax(z) - onehot)) / max(n, 1)
    else:
        zbar = _anchored_mean(z)
        loss = engine.cross_entropy(zbar, y)
        dz = np.broadcast_to(engine.cross_entropy_grad(zbar, y) / M, z.shape)
    dx = None
    for start, count, _, tape in passes:
        block = dz[start:start + count].reshape((count * n,) + dz.shape[2:])
        g, _, _ = engine.backprop(model, tape, block)
        g = g.reshape((count,) + x.shape)
        part = g[0] if count == 1 else g.sum(axis=0)
        dx = part if dx is None else dx + part
    return loss, dx
