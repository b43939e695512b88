"""Time the numba kernels against the numpy fallback.

Covers each hot kernel at decoder-sized shapes plus one full decoder forward
(and backward) on a desk-scale scene.  Results of both backends are compared
before timing so a fast but wrong kernel shows up as a mismatch.

    python benchmarks/bench_backends.py [--repeat 20] [--csv out.csv]
"""
import argparse
import csv
import time

import numpy as np

from dyss import config as C
from dyss import simworld as W
from dyss.decoder import DySSDecoder, forward
from dyss.kernels import backend
from dyss.kernels.tensor import backward, no_grad
from dyss.supervision import total_loss
from dyss.training import inputs_for


def kernel_cases(rng):
    T, M, d, N = 8, 900 * 4, 32, 128
    a = np.tanh(rng.standard_normal(N)) * 0.999
    B = rng.standard_normal((N, 2 * d)) * 0.1
    Cm = rng.standard_normal((d, N)) * 0.1
    P = rng.standard_normal((d, N)) * 0.1
    X = rng.standard_normal((T, M, d))
    H, Y, YP = backend.impl("ssm_scan", "numpy")(a, B, Cm, P, X)
    gY, gYP = rng.standard_normal(Y.shape), rng.standard_normal(YP.shape)

    K, Hm, Wm, Ch = 48, 8, 16, 32
    maps = rng.standard_normal((K, Hm, Wm, Ch))
    pix = rng.uniform(-1, 17, size=(K, 2000, 2))
    valid = rng.random((K, 2000)) < 0.8
    gout = rng.standard_normal((K, 2000, Ch))

    z = rng.standard_normal((2000, 64)) + 1j * rng.standard_normal((2000, 64))
    z7 = rng.standard_normal((2000, 7)) + 0j
    cost = rng.random((60, 300))
    return {
        "ssm_scan": ("ssm_scan", (a, B, Cm, P, X)),
        "ssm_scan_backward": ("ssm_scan_backward", (a, B, Cm, P, X, H, YP, gY, gYP)),
        "bilinear_gather": ("bilinear_gather", (maps, pix, valid)),
        "bilinear_backward": ("bilinear_backward", (maps, pix, valid, gout, True)),
        "fft_rows_pow2": ("fft_rows", (z, False)),
        "fft_rows_len7": ("fft_rows", (z7, False)),
        "hungarian_rows": ("hungarian_rows", (cost,)),
    }


def _flatten(out):
    if isinstance(out, tuple):
        return [np.asarray(o) for o in out if o is not None]
    return [np.asarray(out)]


def time_call(fn, args, repeat):
    fn(*args)  # warm-up (and jit compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, (name, args) in kernel_cases(rng).items():
        outs = {b: _flatten(backend.impl(name, b)(*args)) for b in backend.BACKENDS}
        diff = max(float(np.max(np.abs(x - y))) if x.size else 0.0
                   for x, y in zip(outs["numba"], outs["numpy"]))
        t = {b: time_call(backend.impl(name, b), args, repeat) for b in backend.BACKENDS}
        rows.append((label, t["numba"], t["numpy"], t["numpy"] / t["numba"], diff))
    return rows


def bench_decoder(repeat):
    cfg = C.desk_config()
    scene = W.gen_scene(0, cfg.world)
    inputs = inputs_for(scene, cfg.world.stride)
    model = DySSDecoder(cfg.decoder, seed=0)
    rows = []
    for label, train in (("decoder_forward", False), ("decoder_forward_backward", True)):
        t = {}
        for b in backend.BACKENDS:
            with backend.use_backend(b):
                def step():
                    if train:
                        res = forward(model, inputs, training=True, seed=0)
                        backward(total_loss(res, scene.classes, scene.gt_boxes()).total)
                        model.zero_grad()
                    else:
                        with no_grad():
                            forward(model, inputs)
                t[b] = time_call(step, (), max(3, repeat // 4))
        rows.append((label, t["numba"], t["numpy"], t["numpy"] / t["numba"], float("nan")))
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--csv", help="optional CSV output path")
    args = p.parse_args()
    if not backend.numba_available():
        raise SystemExit("numba is not installed; nothing to compare")
    rows = bench_kernels(args.repeat) + bench_decoder(args.repeat)
    print(f"{'case':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for label, tn, tp, sp, diff in rows:
        print(f"{label:<26}{tn * 1e3:>10.2f}{tp * 1e3:>10.2f}{sp:>8.1f}x{diff:>11.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "numba_s", "numpy_s", "speedup", "max_abs_diff"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
