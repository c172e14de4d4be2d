"""Compare the numba and pure-numpy kernel paths.

Kernel timings call both implementations directly.  The end-to-end timings
run a flow estimate and a few training steps in child processes with
MOTIONPOSE_NUMBA set to 1 and to 0, since the flag is read at import time.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--no-end-to-end]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from motionpose import kernels as K
from motionpose.kernels import out_size


def cases(rng):
    x = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    oh = out_size(16, 3, 1, 1)
    cols = rng.standard_normal((16 * oh * oh, 32 * 9)).astype(np.float32)
    p = rng.standard_normal((16, 32, 32, 32)).astype(np.float32)
    _, arg = K.maxpool_forward_numpy(p, 2, 2)
    g = rng.standard_normal((16, 32, 16, 16)).astype(np.float32)
    img = rng.random((96, 96))
    ix, iy, it = (rng.standard_normal((96, 96)) for _ in range(3))
    z = np.zeros((96, 96))
    u, v = rng.standard_normal((96, 96)), rng.standard_normal((96, 96))
    return {
        "im2col 16x32x16x16 k3": (K.im2col_numpy, K.im2col_numba, (x, 3, 3, 1, 1)),
        "col2im 16x32x16x16 k3": (K.col2im_numpy, K.col2im_numba, (cols, x.shape, 3, 3, 1, 1)),
        "maxpool fwd 16x32x32x32": (K.maxpool_forward_numpy, K.maxpool_forward_numba, (p, 2, 2)),
        "maxpool bwd 16x32x32x32": (K.maxpool_backward_numpy, K.maxpool_backward_numba, (g, arg, p.shape)),
        "hs jacobi 96x96 x100": (K.hs_jacobi_numpy, K.hs_jacobi_numba, (ix, iy, it, z, z, 225.0, 100)),
        "warp bilinear 96x96": (K.warp_bilinear_numpy, K.warp_bilinear_numba, (img, u, v)),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max |diff|")
    for name, (f_np, f_nb, args) in cases(rng).items():
        f_nb(*args)  # compile outside the timing
        diff = float(np.max(np.abs(np.asarray(_first(f_np(*args)), float) - np.asarray(_first(f_nb(*args)), float))))
        t_np = min(timeit.repeat(lambda: f_np(*args), number=3, repeat=repeat)) / 3 * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=3, repeat=repeat)) / 3 * 1e3
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


CHILD = r"""
import time
import numpy as np
from motionpose import USE_NUMBA, tensor as T
from motionpose.flow import estimate_flow
from motionpose.layers import sgd_momentum_step
from motionpose.nets import JointModel

rng = np.random.default_rng(0)
a = rng.random((96, 96))
b = np.roll(a, 1, axis=1)
estimate_flow(a, b, iterations=5)
t = time.perf_counter()
for _ in range(5):
    estimate_flow(a, b)
flow_ms = (time.perf_counter() - t) / 5 * 1e3
m = JointModel("vggm-mini", 4, rng=rng)
pa, pb = rng.random((8, 1, 64, 64)), rng.random((8, 1, 64, 64))
fl = rng.standard_normal((8, 8, 64, 64))
ai, fi = np.repeat(np.arange(8), 3), np.concatenate([[i, (i + 1) % 8, (i + 2) % 8] for i in range(8)])
y = np.tile([1, 0, 0], 8)

def step():
    loss = T.softmax_cross_entropy(m.forward_arrays(pa, pb, fl, ai, fi), y)
    loss.backward()
    sgd_momentum_step(m.params, 1e-3, 0.9)

step()
t = time.perf_counter()
for _ in range(5):
    step()
step_ms = (time.perf_counter() - t) / 5 * 1e3
print(f"{USE_NUMBA} {flow_ms:.1f} {step_ms:.1f}")
"""


def bench_end_to_end():
    print(f"\n{'path':<8}{'flow 96x96 ms':>15}{'train step ms':>15}")
    for flag in ("1", "0"):
        env = dict(os.environ, MOTIONPOSE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", CHILD], env=env, capture_output=True, text=True, check=True)
        use, flow_ms, step_ms = out.stdout.split()
        print(f"{'numba' if use == 'True' else 'numpy':<8}{float(flow_ms):>15.1f}{float(step_ms):>15.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-end-to-end", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.no_end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
