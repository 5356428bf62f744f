"""Gaussian noise injection with reproducible, counter-based streams.

Every Gaussian vector is addressed by ``(seed, slot, sample)``. The seed and
slot form a Philox key; the sample index selects a block of the counter space.
Slot 0 is reserved for input-smoothing noise and slot ``l + 1`` for the noise of
layer ``l``. Because sample ``i`` always maps to the same block, drawing ``M``
samples at once yields exactly the first ``M`` single-sample draws, so sample
sets for different ``M`` are nested and evaluation order does not matter.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from . import engine
from .errors import ConfigError

INPUT_SLOT = 0
TARGETS = ("input", "weight", "activation")

_MASK64 = (1 << 64) - 1


def _words_per_sample(size: int) -> int:
    # Philox4x64 emits 4 words per counter step; pad so samples start on a step.
    return max(4, -(-size // 4) * 4)


def gaussian_block(seed: int, slot: int, start: int, count: int, shape) -> np.ndarray:
    """Standard normals for samples ``start .. start+count-1``, shape ``(count, *shape)``."""
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape)) if shape else 1
    if count < 0 or start < 0:
        raise ConfigError("sample range must be non-negative")
    stride = _words_per_sample(size)
    bitgen = np.random.Philox(key=[seed & _MASK64, slot & _MASK64],
                              counter=[start * stride // 4, 0, 0, 0])
    words = bitgen.random_raw(count * stride).reshape(count, stride)[:, :size]
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u).reshape((count,) + shape)


@dataclass(frozen=True)
class NoiseDraw:
    """Handle on one Monte Carlo sample: a seed plus a sample index."""

    seed: int
    sample: int = 0

    def normal(self, slot: int, shape) -> np.ndarray:
        return gaussian_block(self.seed, slot, self.sample, 1, shape)[0]

    def shifted(self, offset: int) -> "NoiseDraw":
        return NoiseDraw(self.seed, self.sample + offset)


@dataclass
class NoiseSpec:
    """Per-layer Gaussian noise.

    For ``target="weight"`` with ``relative=True`` the perturbation is
    ``alpha * base_sigma * std(W) * xi``, which keeps ``alpha`` dimensionless.
    Otherwise the perturbation is ``alpha * base_sigma * xi``.
    """

    target: str = "weight"
    base_sigma: float = 1.0
    alpha: float = 0.25
    learnable: bool = True
    enabled: bool = True
    relative: bool = True

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"noise target must be one of {TARGETS}, got {self.target!r}")
        if self.base_sigma < 0:
            raise ConfigError("base_sigma must be non-negative")

    @property
    def scale(self) -> float:
        return self.alpha * self.base_sigma

    def to_dict(self) -> dict:
        return dict(target=self.target, base_sigma=float(self.base_sigma), alpha=float(self.alpha),
                    learnable=bool(self.learnable), enabled=bool(self.enabled),
                    relative=bool(self.relative))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


def draw_gaussian(spec: NoiseSpec, shape, draw: NoiseDraw, slot: int = INPUT_SLOT) -> np.ndarray:
    """I.i.d. ``N(0, (alpha*base_sigma)^2)`` entries for one (seed, slot, sample) stream."""
    if not spec.enabled:
        raise ConfigError("draw_gaussian called on a disabled NoiseSpec")
    scale = spec.scale
    if scale < 0:
        raise ConfigError(f"negative effective noise scale {scale}")
    if scale == 0:
        return np.zeros(shape)
    return scale * draw.normal(slot, shape)


def add_input_noise(batch: np.ndarray, sigma: float, draw: NoiseDraw, count: int = 1) -> np.ndarray:
    """``count`` noisy copies of ``batch`` stacked on a new leading axis."""
    if sigma < 0:
        raise ConfigError("input noise sigma must be non-negative")
    eta = gaussian_block(draw.seed, INPUT_SLOT, draw.sample, count, batch.shape)
    return batch[None] + sigma * eta


def noisy_forward(model, batch, sigma_input: float, draw: NoiseDraw | None) -> np.ndarray:
    """Logits of ``model`` at ``batch + eta`` with ``eta ~ N(0, sigma_input^2 I)``.

    Layer noise configured on the model is applied with the same ``draw``.
    """
    if draw is None:
        if sigma_input != 0:
            raise ConfigError("input noise requires an explicit NoiseDraw")
        return engine.forward(model, batch)
    x = add_input_noise(np.asarray(batch, dtype=np.float64), sigma_input, draw)[0]
    return engine.forward(model, x, draw)


def grad_alpha(model, batch, labels, draw: NoiseDraw) -> dict[int, float]:
    """Pathwise dL/dalpha for every learnable noise scale, noise sample held fixed."""
    logits, tape = engine.run(model, batch, draw)
    engine.cross_entropy(logits, labels)
    _, _, dalpha = engine.backprop(model, tape, engine.cross_entropy_grad(logits, labels))
    return {l: dalpha.get(l, 0.0) for l, s in enumerate(model.noise)
            if s is not None and s.learnable}


def with_alpha(spec: NoiseSpec, alpha: float) -> NoiseSpec:
    return replace(spec, alpha=alpha)
