"""Micro benchmark: compiled kernel core vs the numpy fallback.

Times the four hot grid kernels on representative shapes, cross-checks that
both backends agree numerically, then (optionally) times one full training
epoch per backend in subprocesses so the EVIDOSE_KERNELS switch is exercised
the same way a user would flip it.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --extent 48 --repeats 7 --skip-full-step
"""

import argparse
import importlib
import os
import subprocess
import sys
import time

import numpy as np

from evidose.kernels import numpy_backend


def _load_compiled():
    try:
        return importlib.import_module("evidose.kernels._core")
    except ImportError:
        return None


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _conv_flops(cout, cin, k, extent):
    # stride-1 same-padding conv: one multiply-add per tap per output voxel
    return 2.0 * cout * cin * k**3 * extent**3


def bench_ops(extent, channels, repeats):
    rng = np.random.default_rng(0)
    cin, cout, k = channels, 2 * channels, 3
    x = rng.standard_normal((cin, extent, extent, extent)).astype(np.float32)
    w = (0.1 * rng.standard_normal((cout, cin, k, k, k))).astype(np.float32)
    b = np.zeros(cout, dtype=np.float32)
    gy = rng.standard_normal((cout, extent, extent, extent)).astype(np.float32)

    compiled = _load_compiled()
    backends = [("python", numpy_backend)]
    if compiled is not None:
        backends.insert(0, ("cython", compiled))
    else:
        print("compiled core not built; benchmarking the numpy fallback alone\n")

    fwd_flops = _conv_flops(cout, cin, k, extent)
    pooled = numpy_backend.maxpool3d_forward(x, 2)

    cases = [
        ("conv3d_forward", fwd_flops, lambda m: m.conv3d_forward(x, w, b, 1)),
        # weight grad + input grad each cost about one forward pass
        ("conv3d_backward", 2 * fwd_flops, lambda m: m.conv3d_backward(x, w, gy, 1)),
        ("maxpool3d_forward", None, lambda m: m.maxpool3d_forward(x, 2)),
        (
            "maxpool3d_backward",
            None,
            lambda m: m.maxpool3d_backward(pooled[0], pooled[1], x.shape[1:]),
        ),
    ]

    print(f"shapes: x {x.shape}, w {w.shape}; best of {repeats}\n")
    header = f"{'op':<20} " + " ".join(f"{name:>14}" for name, _ in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    times = {}
    for label, flops, call in cases:
        row = f"{label:<20} "
        per_backend = []
        for name, mod in backends:
            secs = _best_of(lambda: call(mod), repeats)
            per_backend.append(secs)
            times[(label, name)] = secs
            if flops:
                row += f"{1e-9 * flops / secs:>10.2f} GF/s"
            else:
                row += f"{1e3 * secs:>11.3f} ms"
        if len(per_backend) == 2:
            row += f" {per_backend[1] / per_backend[0]:>8.2f}x"
        print(row)

    if compiled is not None:
        ya = compiled.conv3d_forward(x, w, b, 1)
        yb = numpy_backend.conv3d_forward(x, w, b, 1)
        print(f"\nbackend agreement, conv forward max |diff|: {np.abs(ya - yb).max():.3g}")


_FULL_STEP_CODE = """
import time
import numpy as np
from evidose import kernels, network, phantom

cfg = phantom.PhantomConfig(grid_extent=16, train_cases=2, val_cases=1, test_cases=0, seed=0)
ds = phantom.generate(cfg)
net_cfg = network.NetConfig(
    grid_extent=16, depth=2, filters=(4, 8), bottleneck=16,
    dropout=(0.1, 0.1), head_hidden=4, head_out=4, seed=0,
)
import evidose.losses as losses
net = network.Network(net_cfg)
t0 = time.perf_counter()
network.train(net, ds.train, ds.val, losses.LossConfig(), network.TrainConfig(epochs=1))
print(f"{kernels.BACKEND}: one 16^3 epoch (2 cases) in {time.perf_counter() - t0:.3f}s")
"""


def bench_full_step():
    print("\nfull training epoch per backend (subprocesses):")
    for backend in ("cython", "python"):
        env = dict(os.environ, EVIDOSE_KERNELS=backend)
        proc = subprocess.run(
            [sys.executable, "-c", _FULL_STEP_CODE],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode:
            tail = proc.stderr.strip().splitlines()[-1] if proc.stderr else "?"
            print(f"{backend}: unavailable ({tail})")
        else:
            print(proc.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--extent", type=int, default=32)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--skip-full-step", action="store_true")
    args = ap.parse_args()

    bench_ops(args.extent, args.channels, args.repeats)
    if not args.skip_full_step:
        bench_full_step()


if __name__ == "__main__":
    main()
