"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times conv3d forward/backward at desk shapes, region growing, and one full
training iteration of the default network.
"""
import argparse
import timeit

import numpy as np

from powdr._backend import compiled_available, get_kernels
from powdr.denoiser import Denoiser, DenoiserConfig, init_params
from powdr.trainer import loss_wavelet_mse


def cases(k, rng):
    x = rng.normal(size=(4, 16, 8, 8, 8))
    w = rng.normal(size=(8, 16, 3, 3, 3))
    b = np.zeros(8)
    g = rng.normal(size=(4, 8, 8, 8, 8))
    allowed = np.ones((16, 16, 16), np.uint8)
    draws = rng.random(499)
    cfg = DenoiserConfig()
    net = Denoiser(cfg, backend=k)
    params = init_params(cfg, np.random.default_rng(0))
    xt, c = rng.normal(size=(2, 4, 8, 8, 8, 8))
    kern = get_kernels(k)

    def train_iter():
        pred, cache = net.forward(params, xt, c, np.array([1, 10, 100, 1000]), "train", np.random.default_rng(1))
        _, gp = loss_wavelet_mse(pred, xt)
        net.backward(params, cache, gp)

    return {
        "conv fwd 16->8 @8^3 x4": lambda: kern.conv3d_forward(x, w, b, 1),
        "conv bwd 16->8 @8^3 x4": lambda: kern.conv3d_backward(x, w, g, 1),
        "conv fwd stride 2": lambda: kern.conv3d_forward(x, w, b, 2),
        "grow region 500 vox": lambda: kern.grow_region(allowed, 2000, 500, draws),
        "train iteration (batch 4)": train_iter,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    names = ["python"] + (["compiled"] if compiled_available() else [])
    results = {}
    for name in names:
        for label, fn in cases(name, np.random.default_rng(0)).items():
            fn()
            results.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    header = f"{'case':28s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) == 2 else "")
    print(header)
    for label, row in results.items():
        line = f"{label:28s}" + "".join(f"{row[n] * 1e3:10.2f}ms" for n in names)
        if len(names) == 2:
            line += f"{row['python'] / row['compiled']:11.1f}x"
        print(line)
    if len(names) == 1:
        print("compiled extension not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
