import numpy as np
import pytest

from smoothinf import data, engine, training
from smoothinf.attacks import AttackConfig
from smoothinf.engine import ReLU
from smoothinf.noise import NoiseSpec

FD_STEP = 1e-4
# relative error denominator floor: coordinates whose gradient is ~0 on both sides
FD_FLOOR = 1e-7


def relu_masks(model, x, draw=None):
    _, tape = engine.run(model, x, draw)
    return [rec["cache"] for layer, rec in zip(model.layers, tape) if isinstance(layer, ReLU)]


def same_pattern(model, xa, xb, draw=None):
    return all(np.array_equal(a, b) for a, b in zip(relu_masks(model, xa, draw), relu_masks(model, xb, draw)))


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), FD_FLOOR)


def fd_input_errors(model, x, y, coords, draw=None, rng=None, step=FD_STEP):
    """Relative errors of ``grad_input`` at ``coords`` flat indices.

    Coordinates whose +-step straddles a ReLU kink are resampled.
    """
    rng = rng or np.random.default_rng(0)
    g = engine.grad_input(model, x, y, draw).ravel()
    errors = []
    tried = 0
    while len(errors) < coords and tried < 20 * coords:
        tried += 1
        i = int(rng.integers(x.size))
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[i] += step
        xm[i] -= step
        xp, xm = xp.reshape(x.shape), xm.reshape(x.shape)
        if not same_pattern(model, xp, xm, draw):
            continue
        num = (engine.cross_entropy(engine.forward(model, xp, draw), y)
               - engine.cross_entropy(engine.forward(model, xm, draw), y)) / (2 * step)
        errors.append(rel_error(g[i], num))
    return np.array(errors)


def fd_param_errors(model, x, y, coords, draw=None, rng=None, step=FD_STEP):
    rng = rng or np.random.default_rng(1)
    grads = engine.grad_params(model, x, y, draw)
    params = model.params
    errors = []
    tried = 0
    while len(errors) < coords and tried < 20 * coords:
        tried += 1
        k = int(rng.integers(len(params)))
        j = int(rng.integers(params[k].size))
        base = [p.copy() for p in params]

        def loss_at(delta):
            trial = [p.copy() for p in base]
            trial[k].flat[j] += delta
            m = model.copy()
            m.set_params(trial)
            return m, engine.cross_entropy(engine.forward(m, x, draw), y)

        mp, lp = loss_at(step)
        mm, lm = loss_at(-step)
        masks_p, masks_m = relu_masks(mp, x, draw), relu_masks(mm, x, draw)
        if not all(np.array_equal(a, b) for a, b in zip(masks_p, masks_m)):
            continue
        errors.append(rel_error(grads[k].flat[j], (lp - lm) / (2 * step)))
    return np.array(errors)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mlp():
    return engine.mlp((4,), [6, 5], 3, seed=3)


@pytest.fixture
def noisy_mlp():
    return engine.mlp((4,), [6], 3, seed=4, noise=NoiseSpec("weight", alpha=0.3))


@pytest.fixture
def small_cnn():
    return engine.cnn((1, 6, 6), 3, 4, seed=5)


@pytest.fixture(scope="session")
def digits():
    return data.load_dataset(data.DatasetSpec(source="digits", n=900, seed=0))


@pytest.fixture(scope="session")
def trained_digits_model(digits):
    """Small adversarially trained noisy MLP shared by slower tests."""
    model = engine.mlp(digits.input_shape, [48], 10, seed=0,
                       noise=NoiseSpec("weight", alpha=0.2, learnable=False))
    cfg = training.TrainConfig(mode="adversarial", epochs=6, lr=0.1, attack=AttackConfig(k=3),
                               log_adversarial=False, selection="last", seed=0)
    model, _ = training.fit(model, digits.train, digits.val, cfg)
    return model


# one "criterion N: PASS|FAIL ..." line per acceptance criterion, shown after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
