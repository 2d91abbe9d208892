"""Train the handle and rim models and run every transfer evaluation.

    python3 scripts/part_transfer.py [--iterations N] [--out DIR]
"""

import argparse
import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from sais.evaluation import emit_reports
from sais.experiments import (PartSetup, handle_on_cylinders, handle_transfer, nocs_comparison, pose_report,
                              rim_on_bowls, train_part_model)


def show(cases):
    for c in cases:
        print(f"  {c.method:8s} yaw {c.yaw_deg:5.1f} {c.name}: err {c.translation_error:.4f} "
              f"accepted {c.accepted} residual {c.residual:.5f}", flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=PartSetup.iterations)
    ap.add_argument("--out", type=Path, default=Path("runs/part_transfer"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    args.out.mkdir(parents=True, exist_ok=True)
    log = lambda i, v, loss: print(f"  it {i} loss {v:.4f}", flush=True)  # noqa: E731

    handle = train_part_model(PartSetup("handle", iterations=args.iterations), progress=log)
    handle.bundle.save(args.out / "handle.ckpt")
    print("handle model", f"{handle.seconds:.0f}s", "calibration", np.round(handle.calibration, 5),
          "threshold", handle.model.threshold(), flush=True)
    t0 = time.perf_counter()
    cases = handle_transfer(handle)
    show(cases)
    print(f"handle transfer {time.perf_counter() - t0:.0f}s", flush=True)
    t0 = time.perf_counter()
    cyl = handle_on_cylinders(handle)
    show(cyl)
    print(f"cylinders {time.perf_counter() - t0:.0f}s", flush=True)
    t0 = time.perf_counter()
    nocs = nocs_comparison(handle)
    show(nocs)
    print(f"nocs {time.perf_counter() - t0:.0f}s", flush=True)

    rim = train_part_model(PartSetup("rim", iterations=args.iterations), progress=log)
    rim.bundle.save(args.out / "rim.ckpt")
    print("rim model", f"{rim.seconds:.0f}s", "calibration", np.round(rim.calibration, 5),
          "threshold", rim.model.threshold(), flush=True)
    t0 = time.perf_counter()
    bowls = rim_on_bowls(rim)
    show(bowls)
    print(f"bowls {time.perf_counter() - t0:.0f}s", flush=True)

    emit_reports(args.out, poses=pose_report(cases + nocs), meta={"script": "part_transfer"})
    (args.out / "cross_category.json").write_text(json.dumps(
        {"bowls": [c.to_json() for c in bowls], "cylinders": [c.to_json() for c in cyl]}, indent=2) + "\n")


if __name__ == "__main__":
    main()
