"""Coefficient error of the resolvent generator on xdot = -x + u.

Sweeps the Yosida parameter and the trajectory count with exact-flow data and
prints the maximum coefficient error of the coordinate column.
"""

import numpy as np

from koopman_pi.identify import YosidaConfig, dataset_from_flow, identify_resolvent
from koopman_pi.observables import MaxPerVariable, MultiIndex, enumerate_dictionary

TIMES = np.arange(101) * 0.01


def flow(x0, u, t):
    return x0 * np.exp(-t) + u * (1 - np.exp(-t))


def coef_error(d, truth, lam, M, invert, seed=0):
    z = np.random.default_rng(seed).uniform(-1, 1, (M, 2))
    data = dataset_from_flow(flow, z[:, :1], z[:, 1:], TIMES)
    model = identify_resolvent(data, d, YosidaConfig(lam=lam, t_max=1.0, invert=invert))
    return float(np.max(np.abs(model.L_hat[:, d.coordinate_slots[0]] - truth)))


def main():
    d = enumerate_dictionary(1, 1, MaxPerVariable(1))
    truth = np.zeros(d.N)
    truth[d.indices.index(MultiIndex((1,), (0,)))] = -1.0
    truth[d.indices.index(MultiIndex((0,), (1,)))] = 1.0
    print(f"{'lam':>6}{'M':>6}{'plain':>12}{'inverted':>12}")
    for lam in (5.0, 20.0, 100.0):
        for M in (50, 200, 1000):
            plain = coef_error(d, truth, lam, M, invert=False)
            inv = coef_error(d, truth, lam, M, invert=True)
            print(f"{lam:>6.0f}{M:>6d}{plain:>12.3e}{inv:>12.3e}")


if __name__ == "__main__":
    main()
