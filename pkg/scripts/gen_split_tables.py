"""Generate the univariate Gaussian splitting libraries.

For each odd number of components n we approximate the standard normal by
a symmetric mixture of n equal-variance Gaussians, minimizing the exact L2
distance between the densities plus a small penalty on the shared standard
deviation (without it the optimum collapses onto the original Gaussian and
the split is useless).  Weights and the shared standard deviation are
eliminated through the moment constraints (sum of weights = 1, mixture
variance = 1), so the saved tables satisfy both identities to machine
precision by construction.

Run from the repository root:
    python scripts/gen_split_tables.py
"""

import math
import pathlib
import sys

import numpy as np
from scipy.optimize import minimize


def gauss_overlap(d, s2):
    # integral of N(x; 0, s2) at x = d
    return math.exp(-0.5 * d * d / s2) / math.sqrt(2.0 * math.pi * s2)


def assemble(params, n):
    """Free params -> (weights, means, sigma) with moments exact."""
    k = (n - 1) // 2
    m = np.asarray(params[:k])
    g = np.asarray(params[k:])
    means = np.concatenate([-m[::-1], [0.0], m])
    w0 = 1.0 - 2.0 * g.sum()
    weights = np.concatenate([g[::-1], [w0], g])
    var = 1.0 - 2.0 * np.sum(g * m * m)
    if w0 <= 0.0 or var <= 1e-8:
        return None
    return weights, means, math.sqrt(var)


SIGMA_PENALTY = 1e-3


def l2_distance(params, n, lam=SIGMA_PENALTY):
    out = assemble(params, n)
    if out is None:
        return 1e6
    w, mu, s = out
    s2 = s * s
    d = 0.0
    for i in range(n):
        for j in range(n):
            d += w[i] * w[j] * gauss_overlap(mu[i] - mu[j], 2.0 * s2)
    for i in range(n):
        d -= 2.0 * w[i] * gauss_overlap(mu[i], 1.0 + s2)
    d += gauss_overlap(0.0, 2.0)
    return d + lam * s2


def solve(n, seed=0):
    k = (n - 1) // 2
    rng = np.random.default_rng(seed)
    best = None
    for trial in range(40):
        m0 = np.sort(rng.uniform(0.3, 2.2, k))
        g0 = rng.uniform(0.05, 0.8 / n, k)
        x0 = np.concatenate([m0, g0])
        bounds = [(1e-3, 4.0)] * k + [(1e-4, 0.49)] * k
        res = minimize(l2_distance, x0, args=(n,), method="SLSQP",
                       bounds=bounds, options={"maxiter": 500, "ftol": 1e-16})
        if assemble(res.x, n) is None:
            continue
        if best is None or res.fun < best.fun:
            best = res
    return best


def main():
    out_dir = pathlib.Path(__file__).resolve().parents[1] / "src" / "camopt" / "data"
    out_dir.mkdir(exist_ok=True)
    for n in (3, 5, 7):
        res = solve(n)
        w, mu, s = assemble(res.x, n)
        print(f"n={n}  L2={res.fun:.3e}  sigma={s:.12f}")
        print("  weights:", np.array2string(w, precision=12))
        print("  means:  ", np.array2string(mu, precision=12))
        path = out_dir / f"split_n{n}.txt"
        with open(path, "w") as fh:
            fh.write("# weight mean sigma (shared)\n")
            for i in range(n):
                fh.write(f"{w[i]:.16e} {mu[i]:.16e} {s:.16e}\n")
        print("  wrote", path)
        # sanity: moments must be exact
        assert abs(w.sum() - 1.0) < 1e-14
        assert abs(np.sum(w * (mu ** 2 + s ** 2)) - 1.0) < 1e-12
        assert abs(np.sum(w * mu)) < 1e-14


if __name__ == "__main__":
    sys.exit(main())
