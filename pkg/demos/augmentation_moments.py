"""Moments of the augmentation distributions used by the variational updates.

Prints Polya-gamma, Poisson-inverse-gamma and power-truncated-normal moments
next to brute-force references, then checks that the Polya-gamma
augmentation turns the logistic-type likelihood into a Gaussian factor.
"""

import numpy as np

from ccgpfa.augdist import pg_mean, pig_mean, ptn_moments, ptn_sample


def pg_series(b, c, terms=200_000):
    k = np.arange(1, terms + 1)
    return np.sum(b / (2 * np.pi ** 2 * ((k - 0.5) ** 2 + c * c / (4 * np.pi ** 2))))


def main():
    print("Polya-gamma mean E[omega], PG(b, c)")
    for b, c in [(1.0, 0.0), (1.0, 2.0), (7.5, 0.3), (40.0, 5.0)]:
        print(f"  b={b:5.1f} c={c:4.1f}  closed form {pg_mean(b, c):.10f}  series {pg_series(b, c):.10f}")

    print("\nP-IG mean against the harmonic-number identity (integer tilts)")
    for m in (1, 2, 10, 50):
        harmonic = sum(1.0 / j for j in range(1, m + 1))
        print(f"  m={m:3d}  pig_mean {pig_mean(m):.14f}  H_m/(2m) {harmonic / (2 * m):.14f}")

    print("\nPower-truncated normal: quadrature moments vs sampler (200k draws)")
    for p, a, b in [(1.0, 1 / np.pi, 0.0), (12.0, 0.8, 2.5), (200.0, 3.0, 40.0)]:
        mean, second = ptn_moments(p, a, b)
        x = ptn_sample(p, a, b, 200_000, seed=0)
        print(f"  p={p:6.1f} a={a:5.2f} b={b:5.1f}  E[x] {mean:.5f} vs {x.mean():.5f}"
              f"   E[x^2] {second:.5f} vs {np.mean(x * x):.5f}")

    # kappa f - omega f^2 / 2 is a Gaussian log-density in f up to a constant
    y, r, omega = 4, 2.5, pg_mean(6.5, 1.2)
    kappa = (y - r) / 2
    f = np.linspace(-3, 3, 7)
    z = kappa / omega
    ratio = np.exp(kappa * f - 0.5 * omega * f ** 2) / np.sqrt(omega / (2 * np.pi)) / np.exp(-0.5 * omega * (z - f) ** 2)
    print("\nexp(kappa f - omega f^2/2) / N(z | f, 1/omega) over f:", np.array2string(ratio, precision=12))


if __name__ == "__main__":
    main()
