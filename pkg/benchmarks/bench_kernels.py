"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one row per kernel with the median time of each backend and the
speed-up, after checking both backends agree bit for bit on the inputs.
"""
import argparse
import time

import numpy as np

from crtyolo import kernels, ops
from crtyolo.tensor import Tensor


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def conv_step(x, w):
    xt = Tensor(x, requires_grad=True)
    wt = Tensor(w, requires_grad=True)
    ops.conv2d(xt, wt, None, stride=1, padding=1).sum().backward()


def workloads(rng):
    x = rng.standard_normal((8, 32, 24, 24)).astype(np.float32)
    cols = kernels.python.im2col(x, 3, 3, 1, 1)
    w = rng.standard_normal((32, 32, 3, 3)).astype(np.float32) * 0.1
    xy = rng.uniform(0, 90, (400, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(4, 20, (400, 2))], axis=1)
    order = np.argsort(-rng.random(400), kind="stable").astype(np.int64)
    return {
        "im2col 8x32x24x24 k3": (lambda k: k.im2col(x, 3, 3, 1, 1), True),
        "col2im 8x32x24x24 k3": (lambda k: k.col2im(cols, 24, 24, 1, 1), True),
        "nms 400 boxes": (lambda k: k.nms(boxes, order, 0.5), True),
        "conv2d fwd+bwd 8x32x24x24": (lambda k: conv_step(x, w), False),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if kernels.compiled is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>11}{'compiled ms':>13}{'speed-up':>10}")
    for name, (fn, direct) in workloads(rng).items():
        if direct:
            a, b = fn(kernels.python), fn(kernels.compiled)
            assert np.array_equal(a, b), f"{name}: backends disagree"
        timings = {}
        for backend in ("python", "compiled"):
            kernels.use_backend(backend)
            impl = getattr(kernels, backend)
            fn(impl)                                   # warm-up
            timings[backend] = median_time(lambda: fn(impl), args.repeat)
        print(f"{name:<28}{timings['python'] * 1e3:>11.3f}{timings['compiled'] * 1e3:>13.3f}"
              f"{timings['python'] / timings['compiled']:>9.2f}x")


if __name__ == "__main__":
    main()
