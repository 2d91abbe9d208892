"""Acceptance criteria 1-9; each prints one PASS/FAIL line in the terminal summary.

Criteria 4-7 train full models and take several minutes each on one core;
criterion 9 repeats them.
"""

import math
import time

import numpy as np
import pytest
import torch

from sais.encoding import EncodingConfig
from sais.evaluation import marching_cubes
from sais.experiments import (AlignmentSetup, PartSetup, handle_on_cylinders, handle_transfer, nocs_comparison,
                              rim_on_bowls, run_alignment, train_part_model)
from sais.lie import TwistVector, exp_se3
from sais.network import HyperSdfNet, LocalSurfaceModel, NetworkConfig, batch_loss, gradients
from sais.sampling import MeshSdf
from sais.shapes import make_box

from conftest import ACCEPTANCE_LINES, expm_oracle, twist_matrix

TOL = 0.05


def report(n: int, ok: bool, detail: str, seconds: float):
    ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}")


# -- 1: Lie algebra ------------------------------------------------------------


def test_criterion_1_exp_se3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        axis = rng.normal(size=3)
        theta = np.pi * (1.0 - rng.uniform(0, 1))  # (0, pi]
        v = np.concatenate([axis / np.linalg.norm(axis) * theta, rng.normal(size=3)])
        worst = max(worst, np.max(np.abs(exp_se3(TwistVector.from_vector(v)).matrix - expm_oracle(twist_matrix(v)))))
    branch = 0.0
    for theta in (1e-3, 1e-4, 1e-5):
        for _ in range(50):
            axis = rng.normal(size=3)
            v = TwistVector.from_vector(np.concatenate([axis / np.linalg.norm(axis) * theta, rng.normal(size=3)]))
            branch = max(branch, np.max(np.abs(exp_se3(v, "series").matrix - exp_se3(v, "closed").matrix)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and branch < 1e-9 and dt < 5
    report(1, ok, f"oracle max err {worst:.2e}, branch max diff {branch:.2e}", dt)
    assert ok


# -- 2: gradients --------------------------------------------------------------


class _ReluSigns:
    """Records the sign pattern of every ReLU input during a forward pass."""

    def __init__(self):
        self.signs = []
        self._relu = torch.relu

    def __enter__(self):
        def relu(x):
            self.signs.append((x > 0).flatten())
            return self._relu(x)

        torch.relu = relu
        return self

    def __exit__(self, *exc):
        torch.relu = self._relu

    def pattern(self):
        return torch.cat(self.signs)


def _relative_fd_error(seed: int, h: float = 1e-5) -> tuple[float, int]:
    """Worst relative error over all tensors, and the number of redrawn probe directions.

    A probe whose +h and -h evaluations see different ReLU sign patterns
    straddles a kink where the derivative does not exist; its direction is
    redrawn.
    """
    g = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(code_dim=8, width=16, hidden_layers=3, hyper_width=16, encoding=EncodingConfig(3))
    model = LocalSurfaceModel(HyperSdfNet(cfg, seed=seed), 0.7)
    b, n = 2, 48
    codes = torch.randn(b, 8, generator=g, dtype=torch.float64) * 0.1
    betas = torch.randn(b, 6, generator=g, dtype=torch.float64) * 0.2
    scales = 1 + torch.randn(b, 3, generator=g, dtype=torch.float64) * 0.05
    x = torch.rand(b, n, 3, generator=g, dtype=torch.float64) * 1.6 - 0.8
    s = torch.rand(b, n, generator=g, dtype=torch.float64) * 0.2 - 0.1
    alpha = float(rng.uniform(0, 3))  # part-way through the coarse-to-fine ramp
    with torch.no_grad():
        _, xa = model.field(codes, betas, scales, x)
        # a finite-difference step must not move a sample across the gate
        keep = ((xa.norm(dim=-1) - model.sphere_radius).abs() > 1e-3)
    tensors = [codes, betas, scales] + list(model.net.parameters())
    for t in tensors:
        t.requires_grad_(True)

    def loss():
        with _ReluSigns() as rec:
            value = float(batch_loss(model, codes, betas, scales, x, s, alpha=alpha, valid=keep).total)
        return value, rec.pattern()

    grads = gradients(batch_loss(model, codes, betas, scales, x, s, alpha=alpha, valid=keep), tensors)
    worst, redrawn = 0.0, 0
    with torch.no_grad():
        for t, gr in zip(tensors, grads):
            for _ in range(10):
                d = torch.as_tensor(rng.normal(size=tuple(t.shape)), dtype=t.dtype)
                d /= d.norm()
                t += h * d
                up, p_up = loss()
                t -= 2 * h * d
                down, p_down = loss()
                t += h * d
                if torch.equal(p_up, p_down):
                    break
                redrawn += 1
            fd, an = (up - down) / (2 * h), float((gr * d).sum())
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst, redrawn


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    runs = [_relative_fd_error(seed) for seed in range(100)]
    worst = max(r[0] for r in runs)
    redrawn = sum(r[1] for r in runs)
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60
    report(2, ok, f"max relative error {worst:.2e} over 100 configurations "
                  f"({redrawn} probe directions redrawn for straddling a ReLU kink)", dt)
    assert ok


# -- 3: SDF oracle -------------------------------------------------------------


def test_criterion_3_sdf_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(1000, 3))
    q = np.abs(x) - 0.5
    exact = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
    sdf = MeshSdf(make_box())
    err = np.max(np.abs(sdf.signed_distance(x) - exact))
    gap = np.max(np.abs(sdf.distance(x) - sdf.brute_force_distance(x)))
    dt = time.perf_counter() - t0
    ok = err < 1e-6 and gap <= 1e-12 and dt < 30
    report(3, ok, f"cube SDF max err {err:.2e}, BVH vs brute force {gap:.2e}", dt)
    assert ok


# -- 4-7: experiments ----------------------------------------------------------


def _run_alignment():
    out = run_alignment(AlignmentSetup())
    return out, out.metrics()


def _run_parts():
    t0 = time.perf_counter()
    handle = train_part_model(PartSetup("handle"))
    t_handle = time.perf_counter() - t0
    runs, times = {}, {}
    for name, fn in (("handle", handle_transfer), ("cylinders", handle_on_cylinders), ("nocs", nocs_comparison)):
        t0 = time.perf_counter()
        runs[name] = fn(handle)
        times[name] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rim = train_part_model(PartSetup("rim"))
    times["rim_model"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    runs["bowls"] = rim_on_bowls(rim)
    times["bowls"] = time.perf_counter() - t0
    times["handle_model"] = t_handle
    runs["thresholds"] = (handle.model.threshold(), rim.model.threshold())
    return runs, times


@pytest.fixture(scope="module")
def alignment():
    return _run_alignment()


@pytest.fixture(scope="module")
def parts():
    return _run_parts()


def test_criterion_4_alignment(alignment):
    out, m = alignment
    good = out.recovered(5.0, 0.02)
    ratio = m["chamfer_ratio"]
    ok = good >= 7 and ratio >= 3.0 and out.seconds < 20 * 60
    report(4, ok, f"recovered {good}/8 within 5 deg/0.02; Chamfer perturbed/reconstructed {ratio:.1f}x "
                  f"(max rot err {max(m['rotation_errors']):.2f} deg, max trans err "
                  f"{max(m['translation_errors']):.4f})", out.seconds)
    assert ok


def test_criterion_5_handle_transfer(parts):
    runs, times = parts
    learned = [c for c in runs["handle"] if c.method == "learned"]
    naive30 = [c for c in runs["handle"] if c.method == "naive" and c.yaw_deg >= 30]
    rate = np.mean([c.translation_error < TOL for c in learned])
    naive_ok = all(c.translation_error > TOL for c in naive30)
    dt = times["handle"]
    ok = rate >= 0.9 and naive_ok and dt < 600
    report(5, ok, f"learned within {TOL}: {rate:.1%} of {len(learned)}; naive > {TOL} at 30 deg: "
                  f"{sum(c.translation_error > TOL for c in naive30)}/{len(naive30)} "
                  f"(model training {times['handle_model']:.0f}s not counted)", dt)
    assert ok


def test_criterion_6_cross_category(parts):
    runs, times = parts
    bowls = runs["bowls"]
    bowl_rate = np.mean([c.accepted and c.translation_error < TOL for c in bowls])
    cyl_rate = np.mean([not c.accepted for c in runs["cylinders"]])
    dt = times["bowls"] + times["cylinders"]
    ok = bowl_rate >= 0.9 and cyl_rate >= 0.9 and dt < 600
    report(6, ok, f"bowls accepted within {TOL}: {bowl_rate:.0%}; cylinders rejected: {cyl_rate:.0%} "
                  f"(rim model training {times['rim_model']:.0f}s not counted)", dt)
    assert ok


def test_criterion_7_nocs(parts):
    runs, times = parts
    cases = runs["nocs"]
    at0 = [c for c in cases if c.method == "nocs" and c.yaw_deg == 0]
    at40 = [c for c in cases if c.method == "nocs" and c.yaw_deg == 40]
    learned = [c for c in cases if c.method == "learned"]
    ok0 = all(c.translation_error < TOL for c in at0)
    ok40 = all(c.translation_error > TOL for c in at40)
    rate = np.mean([c.translation_error < TOL for c in learned])
    dt = times["nocs"]
    ok = ok0 and ok40 and rate >= 0.9 and dt < 300
    report(7, ok, f"NOCS 0 deg max err {max(c.translation_error for c in at0):.4f}; NOCS 40 deg min err "
                  f"{min(c.translation_error for c in at40):.4f}; learned at 40 deg within {TOL}: {rate:.0%}", dt)
    assert ok


# -- 8: marching cubes ---------------------------------------------------------


def test_criterion_8_marching_cubes():
    t0 = time.perf_counter()
    ticks = np.linspace(-1, 1, 64)
    g = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1)
    h = ticks[1] - ticks[0]
    mesh = marching_cubes(np.linalg.norm(g, axis=-1) - 0.5, origin=(-1, -1, -1), spacing=h)
    dev = np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5))
    dt = time.perf_counter() - t0
    ok = dev < math.sqrt(3) * h and dt < 10
    report(8, ok, f"max radial deviation {dev:.4f} vs cell diagonal {math.sqrt(3) * h:.4f}", dt)
    assert ok


# -- 9: determinism ------------------------------------------------------------


def _flatten(alignment_metrics, runs):
    values = [v for key in ("rotation_errors", "translation_errors", "chamfer_reconstructed", "chamfer_perturbed")
              for v in alignment_metrics[key]]
    values += [alignment_metrics["chamfer_ratio"], alignment_metrics["final_loss"], *runs["thresholds"]]
    for name in ("handle", "cylinders", "nocs", "bowls"):
        for c in runs[name]:
            values += [c.translation_error, c.rotation_error, c.residual, float(c.accepted)]
    return np.asarray(values, dtype=np.float64)


def test_criterion_9_determinism(alignment, parts):
    t0 = time.perf_counter()
    first = _flatten(alignment[1], parts[0])
    second = _flatten(_run_alignment()[1], _run_parts()[0])
    dt = time.perf_counter() - t0
    same_nan = np.array_equal(np.isnan(first), np.isnan(second))
    finite = np.isfinite(first) & np.isfinite(second)
    gap = float(np.max(np.abs(first[finite] - second[finite]))) if finite.any() else 0.0
    same_inf = np.array_equal(first[~finite & ~np.isnan(first)], second[~finite & ~np.isnan(second)])
    ok = first.shape == second.shape and same_nan and same_inf and gap <= 1e-12
    report(9, ok, f"{len(first)} metrics repeated; max difference {gap:.1e}", dt)
    assert ok
