"""Train the alignment model on perturbed mugs and report pose recovery and Chamfer distances.

    python3 scripts/align_experiment.py [--iterations N] [--out DIR]
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from sais.evaluation import emit_reports
from sais.experiments import AlignmentSetup, run_alignment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=AlignmentSetup.iterations)
    ap.add_argument("--out", type=Path, default=Path("runs/alignment"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    args.out.mkdir(parents=True, exist_ok=True)
    log = lambda i, v, loss: print(f"  it {i} loss {v:.4f}", flush=True)  # noqa: E731

    outcome = run_alignment(replace(AlignmentSetup(), iterations=args.iterations), progress=log)
    outcome.bundle.save(args.out / "model.ckpt")
    m = outcome.metrics()
    for k, (r, t) in enumerate(zip(outcome.rotation_errors, outcome.translation_errors)):
        print(f"shape {k}: rotation {r:.3f} deg translation {t:.4f}")
    print(f"recovered {outcome.recovered()}/{len(outcome.rotation_errors)}")
    print(f"chamfer ratio perturbed/reconstructed {m['chamfer_ratio']:.1f}")
    print(f"trained in {outcome.seconds:.0f}s")
    emit_reports(args.out, outcome.chamfer, meta={"seconds": outcome.seconds})
    (args.out / "metrics.json").write_text(json.dumps(m, indent=2))


if __name__ == "__main__":
    main()
