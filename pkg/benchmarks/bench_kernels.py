"""Time the segmentation kernels with numba and with the plain-Python fallback.

Each mode runs in its own interpreter because the switch is read at import
time.  Label maps from both modes are hashed to confirm identical output.

    python3 benchmarks/bench_kernels.py --sizes 32,64,128 --images 5
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from rnnprop._accel import HAS_NUMBA
from rnnprop.imagecore import SceneConfig, generate_scene
from rnnprop.overseg import build_region_graph, fh_segment

sizes, n_images, k = json.loads(sys.argv[1])
out = {"numba": HAS_NUMBA, "rows": []}
for size in sizes:
    scenes = [generate_scene(SceneConfig(width=size, height=size, seed=i))[0] for i in range(n_images)]
    fh_segment(scenes[0], k, 8)  # compile / warm caches outside the timed loop
    digest = hashlib.sha256()
    t0 = time.perf_counter()
    for img in scenes:
        seg = fh_segment(img, k, max(4, size * size // 500))
        build_region_graph(seg)
        digest.update(seg.region_of.tobytes())
    dt = (time.perf_counter() - t0) / n_images
    out["rows"].append({"size": size, "ms_per_image": dt * 1e3, "digest": digest.hexdigest()})
print(json.dumps(out))
"""


def run_mode(disable: bool, sizes, n_images, k):
    env = dict(os.environ, RNNPROP_DISABLE_NUMBA="1" if disable else "0")
    proc = subprocess.run([sys.executable, "-c", WORKER, json.dumps([sizes, n_images, k])],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="32,64,128", help="comma-separated square canvas sizes")
    p.add_argument("--images", type=int, default=5, help="scenes per size")
    p.add_argument("--k", type=float, default=100.0)
    args = p.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]

    jit = run_mode(False, sizes, args.images, args.k)
    plain = run_mode(True, sizes, args.images, args.k)
    if not jit["numba"]:
        print("numba not importable: both columns use the Python path", file=sys.stderr)

    print(f"{'size':>6} {'numba ms':>10} {'python ms':>10} {'speedup':>8}  identical")
    ok = True
    for a, b in zip(jit["rows"], plain["rows"]):
        same = a["digest"] == b["digest"]
        ok &= same
        print(f"{a['size']:>6} {a['ms_per_image']:>10.2f} {b['ms_per_image']:>10.2f} "
              f"{b['ms_per_image'] / a['ms_per_image']:>7.1f}x  {'yes' if same else 'NO'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
