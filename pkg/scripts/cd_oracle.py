"""Compare CD-k gradient estimates with the exact enumerated gradient of a small binary RBM.

Prints the cosine similarity for several chain lengths and chain counts, which shows how the
estimate's bias shrinks with k and its variance with the number of chains.
"""
import argparse
import itertools
import time

import numpy as np

from sitfuse.dbn import RbmLayer, cd_gradient


def exact_gradient(layer: RbmLayer, data: np.ndarray) -> np.ndarray:
    """Data term minus model term, with the model term summed over every visible state."""
    V = layer.W.shape[0]
    states = np.array(list(itertools.product([0.0, 1.0], repeat=V)))
    # free energy of a binary RBM: -b.v - sum log(1 + exp(c + vW))
    free = -(states @ layer.b) - np.logaddexp(0.0, layer.c + states @ layer.W).sum(axis=1)
    p = np.exp(-free - np.logaddexp.reduce(-free))
    ph_model = 1.0 / (1.0 + np.exp(-(layer.c + states @ layer.W)))
    ph_data = 1.0 / (1.0 + np.exp(-(layer.c + data @ layer.W)))
    gW = data.T @ ph_data / len(data) - (states * p[:, None]).T @ ph_model
    gb = data.mean(axis=0) - p @ states
    gc = ph_data.mean(axis=0) - p @ ph_model
    return np.concatenate([gW.ravel(), gb, gc])


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--visible", type=int, default=6)
    parser.add_argument("--hidden", type=int, default=3)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()

    print(f"{'seed':>4} {'k':>4} {'chains':>8} {'cosine':>9} {'seconds':>8}")
    for seed in range(args.seeds):
        r = np.random.default_rng(seed)
        layer = RbmLayer("BB", r.normal(0, 0.5, (args.visible, args.hidden)), r.normal(0, 0.5, args.visible),
                         r.normal(0, 0.5, args.hidden), np.zeros(args.visible))
        data = r.integers(0, 2, (50, args.visible)).astype(float)
        exact = exact_gradient(layer, data)
        for k in (1, 5, 20, 50):
            for copies in (20, 2000):
                start = time.perf_counter()
                g = cd_gradient(layer, np.repeat(data, copies, axis=0), k, np.random.default_rng(seed + 1))
                est = np.concatenate([g["W"].ravel(), g["b"], g["c"]])
                cos = est @ exact / (np.linalg.norm(est) * np.linalg.norm(exact))
                print(f"{seed:>4} {k:>4} {len(data) * copies:>8} {cos:>9.5f} {time.perf_counter() - start:>8.2f}")


if __name__ == "__main__":
    main()
