"""Time the numba and numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

The backend is fixed at import, so each one runs in its own interpreter with
BAGGAGEDET_NUMBA set accordingly. Numba times exclude the first (compiling) call.
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from baggagedet import kernels

rng = np.random.default_rng(0)
lo = rng.uniform(0, 90, (2000, 3))
boxes = np.concatenate([lo, lo + rng.uniform(2, 20, (2000, 3))], axis=1)
scores = rng.random(2000)
vox = rng.random((2, 144, 144, 144)).astype(np.float32)
mask = rng.random((64, 64, 64)) > 0.7

cases = {
    "iou_matrix 2000x2000": lambda: kernels.iou_matrix(boxes, boxes),
    "nms_greedy 2000 boxes": lambda: kernels.nms_greedy(boxes, scores, 0.1),
    "block_mean 2x144^3 s=3": lambda: kernels.block_mean(vox, 3),
    "label_components 64^3": lambda: kernels.label_components(mask),
}
repeat = int(sys.argv[1])
out = {"backend": kernels.BACKEND}
for name, fn in cases.items():
    fn()  # warm-up / JIT compile
    t = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        t.append(time.perf_counter() - t0)
    out[name] = min(t)
print(json.dumps(out))
"""


def run(flag: str, repeat: int) -> dict:
    env = dict(os.environ, BAGGAGEDET_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", CHILD, str(repeat)], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    nb = run("1", args.repeat)
    np_ = run("0", args.repeat)
    print(f"{'kernel':28s} {nb['backend']:>10s} {np_['backend']:>10s} {'speedup':>8s}")
    for name in nb:
        if name == "backend":
            continue
        print(f"{name:28s} {nb[name] * 1e3:8.2f}ms {np_[name] * 1e3:8.2f}ms {np_[name] / nb[name]:7.1f}x")


if __name__ == "__main__":
    main()
