"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on the same inputs under both backends; the table lists
the best-of-N wall time and the largest absolute output difference.
"""
import argparse
import json
import time

import numpy as np

from speckletact import _fallback
from speckletact.scene import default_scene

try:
    from speckletact import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases():
    rng = np.random.default_rng(0)
    scene = default_scene()
    pixels = scene.camera.pixel_coordinates()
    nu = np.array([scene.geometry.refractive_index / 635e-6])
    render_args = (pixels, np.array(scene.source.position), scene.scatterers.positions,
                   scene.scatterers.amplitudes, scene.geometry.thickness_mm, 1, nu, 0.05)
    x = rng.standard_normal((32, 16, 64, 64)).astype(np.float32)
    cols = _fallback.im2col3x3(x)
    mean, var = _fallback.channel_moments(x)
    inv = (1 / np.sqrt(var + 1e-5)).astype(np.float32)
    g = np.ones(16, np.float32)
    b = np.zeros(16, np.float32)
    xhat, _ = _fallback.bn_apply(x, mean.astype(np.float32), inv, g, b)
    y, idx = _fallback.maxpool2x2_forward(x)
    flat = x.reshape(-1)
    return [
        ("render_intensity 192x192, 500 scatterers", "render_intensity", render_args),
        ("im2col3x3 32x16x64x64", "im2col3x3", (x,)),
        ("col2im3x3 32x16x64x64", "col2im3x3", (cols, 32, 16, 64, 64)),
        ("maxpool2x2_forward 32x16x64x64", "maxpool2x2_forward", (x,)),
        ("maxpool2x2_backward 32x16x32x32", "maxpool2x2_backward", (y, idx)),
        ("channel_moments 32x16x64x64", "channel_moments", (x,)),
        ("bn_apply 32x16x64x64", "bn_apply", (x, mean.astype(np.float32), inv, g, b)),
        ("bn_backward 32x16x64x64", "bn_backward", (x, xhat, g, inv, True)),
        ("relu_forward 2M", "relu_forward", (flat,)),
        ("relu_backward 2M", "relu_backward", (flat, flat)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows as JSON")
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the fallback is available")
    rows = []
    print(f"{'kernel':44s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, name, fargs in cases():
        t_np, out_np = best_of(lambda: getattr(_fallback, name)(*fargs), args.repeat)
        row = {"kernel": label, "numpy_ms": t_np * 1e3}
        if _kernels is not None:
            t_c, out_c = best_of(lambda: getattr(_kernels, name)(*fargs), args.repeat)
            row.update(compiled_ms=t_c * 1e3, speedup=t_np / t_c, max_abs_diff=max_diff(out_np, out_c))
            print(f"{label:44s} {t_np * 1e3:10.2f} {t_c * 1e3:12.2f} {t_np / t_c:8.1f} {row['max_abs_diff']:11.2e}")
        else:
            print(f"{label:44s} {t_np * 1e3:10.2f}")
        rows.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
