"""Training procedures: clean, adversarial, CNI-I+W, TRADES-style and EPGD fine-tuning.

Every step is reproducible from ``(cfg.seed, step)``: the layer-noise draw, the
attack seed and the Bernoulli gate are all derived from those two numbers, so
two runs with the same configuration produce bit-identical parameters.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine
from .attacks import AttackConfig, project, run_attack
from .errors import ConfigError
from .noise import NoiseDraw, add_input_noise

MODES = ("clean", "adversarial", "cni_iw", "trades", "epgd_adv")
SELECTIONS = ("best", "diverged", "last")

_TAG_NOISE, _TAG_ATTACK, _TAG_GATE, _TAG_SHUFFLE, _TAG_TRADES = range(5)


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class TrainConfig:
    mode: str = "clean"
    w: float = 0.5
    attack: AttackConfig = field(default_factory=AttackConfig)
    q: float = 0.5
    sigma_train: float = 0.0
    inv_lambda: float = 1.0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = (0.5, 0.75)
    lr_gamma: float = 0.1
    selection: str = "best"
    log_adversarial: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"training mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError("adversarial weight w must lie in [0, 1]")
        if not 0.0 <= self.q <= 1.0:
            raise ConfigError("Bernoulli probability q must lie in [0, 1]")
        if self.sigma_train < 0 or self.inv_lambda < 0:
            raise ConfigError("sigma_train and inv_lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)

    def lr_at(self, epoch: int) -> float:
        """Step decay by ``lr_gamma`` at each milestone fraction of ``epochs``."""
        passed = sum(epoch >= int(round(m * self.epochs)) for m in self.lr_milestones if m > 0)
        return self.lr * self.lr_gamma ** passed


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        if not self.rows:
            return "epoch,train_loss,clean_val_acc,adv_val_acc,lr\n"
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


# -- single steps ----------------------------------------------------------

def _draw(cfg, step):
    return NoiseDraw(derive_seed(cfg.seed, _TAG_NOISE), step)


def _attack_cfg(cfg, step, family=None):
    attack = replace(cfg.attack, seed=derive_seed(cfg.seed, _TAG_ATTACK, step))
    return replace(attack, family=family) if family else attack


def _grads(model, x, y, draw):
    logits, tape = engine.run(model, x, draw)
    _, dparams, dalpha = engine.backprop(model, tape, engine.cross_entropy_grad(logits, y))
    return engine.cross_entropy(logits, y), dparams, dalpha


def _combine(a, b, wa, wb):
    params = [wa * ga + wb * gb for ga, gb in zip(a[1], b[1])]
    alpha = {l: wa * a[2].get(l, 0.0) + wb * b[2].get(l, 0.0) for l in set(a[2]) | set(b[2])}
    return params, alpha


def clean_step(model, batch, labels, cfg: TrainConfig, opt: engine.SGD, step: int = 0) -> float:
    loss, dparams, dalpha = _grads(model, batch, labels, _draw(cfg, step))
    opt.step(dparams, dalpha)
    return loss


def adversarial_training_step(model, batch, labels, cfg: TrainConfig, opt: engine.SGD,
                              step: int = 0, family: str | None = None):
    """``(1-w) CE(f(x), y) + w CE(f(x_adv), y)``; returns ``(clean_loss, adv_loss)``."""
    x_adv = run_attack(model, batch, labels, _attack_cfg(cfg, step, family))
    draw = _draw(cfg, step)
    clean = _grads(model, batch, labels, draw)
    adv = _grads(model, x_adv, labels, draw)
    opt.step(*_combine(clean, adv, 1.0 - cfg.w, cfg.w))
    return clean[0], adv[0]


def bernoulli_gate(n: int, q: float, seed: int, step: int = 0) -> np.ndarray:
    """Per-example ``B ~ Ber(q)`` used to mix adversarial perturbations into training."""
    rng = np.random.default_rng(derive_seed(seed, _TAG_GATE, step))
    return rng.random(n) < q


def cni_iw_step(model, batch, labels, cfg: TrainConfig, opt: engine.SGD, step: int = 0) -> float:
    """Train on ``x + eta + B * delta`` with ``eta ~ N(0, sigma^2 I)`` and ``B ~ Ber(q)``."""
    x = np.asarray(batch, dtype=np.float64)
    gate = bernoulli_gate(len(x), cfg.q, cfg.seed, step)
    if gate.any():
        x_adv = run_attack(model, x, labels, _attack_cfg(cfg, step))
        x = np.where(gate.reshape((-1,) + (1,) * (x.ndim - 1)), x_adv, x)
    draw = _draw(cfg, step)
    x = add_input_noise(x, cfg.sigma_train, draw)[0]
    loss, dparams, dalpha = _grads(model, x, labels, draw)
    opt.step(dparams, dalpha)
    return loss


def trades_adversary(model, x, targets, attack: AttackConfig) -> np.ndarray:
    """Maximise ``CE(f(x_adv), targets)`` over the epsilon-ball by signed ascent."""
    x = np.asarray(x, dtype=np.float64)
    domain = model.input_domain
    rng = np.random.default_rng(derive_seed(attack.seed, _TAG_TRADES))
    # CE to the model's own soft prediction is stationary at x, so start just off it
    x_adv = project(x + 1e-3 * rng.standard_normal(x.shape), x, attack.epsilon, domain)
    for t in range(attack.k):
        logits, tape = engine.run(model, x_adv, NoiseDraw(attack.seed, t))
        d = (engine.softmax(logits) - targets) / max(len(x), 1)
        g = engine.backprop(model, tape, d)[0]
        x_adv = project(x_adv + attack.alpha * np.sign(g), x, attack.epsilon, domain)
    return x_adv


def trades_step(model, batch, labels, cfg: TrainConfig, opt: engine.SGD, step: int = 0):
    """``CE(f(x), y) + (1/lambda) CE(f(x_adv), stopgrad softmax f(x))``; returns both terms."""
    draw = _draw(cfg, step)
    logits, tape = engine.run(model, batch, draw)
    targets = engine.softmax(logits)
    clean_loss = engine.cross_entropy(logits, labels)
    _, dp_c, da_c = engine.backprop(model, tape, engine.cross_entropy_grad(logits, labels))
    x_adv = trades_adversary(model, batch, targets, _attack_cfg(cfg, step))
    logits_a, tape_a = engine.run(model, x_adv, draw)
    adv_loss = engine.soft_cross_entropy(logits_a, targets)
    _, dp_a, da_a = engine.backprop(model, tape_a, (engine.softmax(logits_a) - targets) / len(batch))
    opt.step(*_combine((clean_loss, dp_c, da_c), (adv_loss, dp_a, da_a), 1.0, cfg.inv_lambda))
    return clean_loss, adv_loss


def train_step(model, batch, labels, cfg: TrainConfig, opt: engine.SGD, step: int) -> float:
    """Run the step selected by ``cfg.mode`` and return the scalar training loss."""
    if cfg.mode == "clean":
        return clean_step(model, batch, labels, cfg, opt, step)
    if cfg.mode == "cni_iw":
        return cni_iw_step(model, batch, labels, cfg, opt, step)
    if cfg.mode == "trades":
        c, a = trades_step(model, batch, labels, cfg, opt, step)
        return c + cfg.inv_lambda * a
    family = None
    if cfg.mode == "epgd_adv" and cfg.attack.family not in ("epgd", "smoothadv"):
        family = "epgd"
    c, a = adversarial_training_step(model, batch, labels, cfg, opt, step, family)
    return (1.0 - cfg.w) * c + cfg.w * a


# -- loops -----------------------------------------------------------------

def accuracy(model, x, y, draw=None) -> float:
    if len(y) == 0:
        return 0.0
    return 100.0 * float(np.mean(engine.predict(model, x, draw) == y))


def _eval_draw(cfg, model):
    return NoiseDraw(derive_seed(cfg.seed, 99), 0) if model.has_layer_noise else None


def fit(model, train, val, cfg: TrainConfig):
    """Train ``model`` in place for ``cfg.epochs``; returns ``(selected_model, TrainLog)``.

    ``train`` and ``val`` are ``(x, y)`` pairs. Selection uses clean validation
    accuracy: the best epoch, the worst one (``"diverged"``) or the last.
    """
    x, y = (np.asarray(a) for a in train)
    if len(x) == 0:
        raise ConfigError("training set is empty")
    xv, yv = (np.asarray(a) for a in val)
    opt = engine.SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    log = TrainLog()
    snapshots = []
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = np.random.default_rng(derive_seed(cfg.seed, _TAG_SHUFFLE, epoch)).permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses.append(train_step(model, x[idx], y[idx], cfg, opt, step))
            step += 1
        draw = _eval_draw(cfg, model)
        clean_acc = accuracy(model, xv, yv, draw)
        adv_acc = float("nan")
        if cfg.log_adversarial and len(yv):
            monitor = replace(cfg.attack, family="pgd", seed=derive_seed(cfg.seed, 98))
            adv_acc = accuracy(model, run_attack(model, xv, yv, monitor), yv, draw)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)),
               "clean_val_acc": clean_acc, "adv_val_acc": adv_acc}
        for l, a in model.alphas().items():
            row[f"alpha_{l}"] = float(a)
        row["lr"] = float(opt.lr)
        log.append(row)
        snapshots.append(model.copy())
    if not snapshots:
        return model.copy(), log
    accs = log.column("clean_val_acc")
    if cfg.selection == "best":
        pick = int(np.argmax(accs))
    elif cfg.selection == "diverged":
        pick = int(np.argmin(accs))
    else:
        pick = len(snapshots) - 1
    return snapshots[pick], log


def finetune(model, dataset, cfg: TrainConfig):
    """Fine-tune a copy of a pretrained ``model``; the input model is left untouched.

    ``dataset`` is either a :class:`~smoothinf.data.Splits` or a ``(train, val)`` pair.
    """
    train, val = (dataset.train, dataset.val) if hasattr(dataset, "train") else dataset
    if len(train[0]) == 0:
        raise ConfigError("fine-tuning dataset is empty")
    if cfg.epochs == 0:
        return model.copy(), TrainLog()
    return fit(model.copy(), train, val, cfg)
