"""How the inverse temperature moves a Gaussian policy from its prior
toward the greedy action of a concave quadratic action value.

Run: python3 demos/soft_policy.py
"""
import numpy as np

from market_irl.entropy_rl import (GaussianPolicy, LinearizationPoint, QuadraticG, f_from_g,
                                   policy_update)


def main():
    prior = GaussianPolicy([0.0], [[0.0]], [[1.0]])
    # G(a) = -(a - 2)^2 / 2 written about the origin
    g = QuadraticG([[-0.5]], [[0.0]], [[0.0]], [2.0], [0.0], -2.0)
    pt = LinearizationPoint([0.0], [0.0], [0.0])
    y = np.zeros(1)
    print("   beta   mean   variance   F(y)")
    for beta in (0.0, 0.1, 1.0, 10.0, 100.0):
        pol = policy_update(g, prior, beta, pt)
        f, _ = f_from_g(g, prior, beta, pt)
        print(f"{beta:7.1f} {pol.mean(y)[0]:6.3f} {pol.Sigma_p[0, 0]:10.4f} {f.at(y):7.4f}")
    print("greedy action 2.0 with value 0; beta = 0 keeps the prior and averages G")


if __name__ == "__main__":
    main()
