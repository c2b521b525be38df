"""
How much noise buys epsilon = 10?
=================================

Poisson-subsampled Gaussian steps composed in Renyi DP and converted to
(epsilon, delta) once at the end.
"""

from dppeft.accountant import PrivacyLedger, calibrate_sigma, compute_epsilon

n, batch, steps, delta = 2048, 64, 2000, 1 / 2048
q = batch / n
sigma = calibrate_sigma(q, steps, 10.0, delta)
print(f"q={q:.4f} steps={steps} -> sigma={sigma:.4f}")
print(compute_epsilon(q, sigma, steps, delta).to_dict())

# bigger batches at the same number of examples processed
for m in (1, 2, 4, 8, 12):
    s = calibrate_sigma(q * m, steps // m, 10.0, delta)
    # effective noise on the mean gradient shrinks as sigma / batch
    print(f"x{m:<2d} batch={batch * m:4d} steps={steps // m:4d} sigma={s:.3f} sigma/batch={s / (batch * m):.5f}")

ledger = PrivacyLedger(q, sigma)
for chunk in range(4):
    ledger.step(500)
    print("after", ledger.steps_taken, "steps:", round(ledger.spent(delta).epsilon, 3))
