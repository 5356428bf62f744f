"""White-box and black-box attacks against one smoothed classifier.

Compares PGD, EPGD and SmoothAdv-PGD at equal gradient budget, a transfer
attack from an independently trained surrogate, NES and random noise.
"""
import numpy as np

from smoothinf import data, engine, harness, training
from smoothinf.attacks import AttackConfig, BlackBox, nes_blackbox, random_perturbation, transfer_attack
from smoothinf.noise import NoiseSpec
from smoothinf.smoothing import SmoothingConfig

EPS = 16 / 255
splits = data.load_dataset(data.DatasetSpec(source="digits", n=3000, seed=1))
x, y = splits.test


def train(seed):
    model = engine.mlp(splits.input_shape, [96], 10, seed=seed, noise=NoiseSpec("weight", alpha=0.2))
    cfg = training.TrainConfig(mode="adversarial", epochs=8, lr=0.05, attack=AttackConfig(epsilon=EPS, k=5),
                               log_adversarial=False, selection="last", seed=seed)
    return training.fit(model, splits.train, splits.val, cfg)[0]


target, surrogate = train(0), train(1)
smoothing = SmoothingConfig(M=16, sigma=0.1)

# equal budget k * M_b = 8 for every white-box family
budget = [AttackConfig(family="pgd", epsilon=EPS, k=8),
          AttackConfig(family="epgd", epsilon=EPS, k=2, M_b=4, sigma_attack=0.1),
          AttackConfig(family="smoothadv", epsilon=EPS, k=2, M_b=4, sigma_attack=0.1)]
report = harness.sweep_kM(target, (x, y), [(a.family, a.k, a.M_b) for a in budget], budget[1], smoothing)
print("clean smoothed accuracy:", report.rows[0].clean_mean)
for row in report.rows:
    print(f"{row.attack.split(',')[0]:>18}  k*M_b={row.grad_evals:<3} adv acc {row.adv_mean:.2f}")

box = BlackBox(target, smoothing)
_, correct = transfer_attack(surrogate, box.predict, x, y, AttackConfig(epsilon=EPS, k=8))
print(f"{'transfer':>18}  adv acc {100 * correct.mean():.2f}")

xs, ys = x[:200], y[:200]
x_nes, exhausted = nes_blackbox(box.predict_probs, xs, ys,
                                AttackConfig(family="nes", epsilon=EPS, k=20, nes_population=20, nes_sigma=0.05))
print(f"{'NES':>18}  success {100 * np.mean(box.predict(x_nes) != ys):.1f}%  ({box.queries} queries)")
print(f"{'random corner':>18}  success {100 * np.mean(box.predict(random_perturbation(xs, EPS)) != ys):.1f}%")
