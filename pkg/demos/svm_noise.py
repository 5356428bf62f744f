"""Zero-mean input noise and the adversarial hinge objective of a linear SVM.

The noise term averages out, so the Monte Carlo objective matches the
noiseless one up to sampling error; the hinge of the worst case does not.
"""
from smoothinf.harness import svm_repetitions

reports = svm_repetitions(repetitions=20, seed=0, dim=10, n=200, sigma=0.1, trials=10_000)
print(f"separable: {all(r.separable for r in reports)}   ||w||_1 = {reports[0].w_l1:.3f}")
print(f"{'rep':>3} {'clean':>10} {'noisy':>10} {'half':>9} in  {'hinge':>8} {'hinge~':>8}")
for i, r in enumerate(reports):
    print(f"{i:3d} {r.objective_clean:10.6f} {r.objective_noisy:10.6f} {r.half_width:9.2e} "
          f"{'y' if r.within else 'n'}   {r.hinge_clean:8.5f} {r.hinge_noisy:8.5f}")
print(f"inside the 99% interval: {sum(r.within for r in reports)}/{len(reports)}")
