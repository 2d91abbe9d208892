"""Grasp transfer to new objects through candidate-frame fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .lie import AffineTransform, RigidTransform, invert, nearest_rotation, rotation_about_z, strip_scale
from .network import LocalSurfaceModel, LossWeights, alignment_transform, inference_loss
from .sampling import SdfSampleSet, cloud_unsigned_samples, padded_bounds
from .training import DTYPES, AdamState, adam_step


@dataclass(frozen=True)
class CandidateFrame:
    index: int
    candidate_to_world: RigidTransform

    def __post_init__(self):
        if not np.all(np.isfinite(self.candidate_to_world.matrix)):
            raise ValueError("candidate frame must be finite")


@dataclass
class FitResult:
    candidate: int
    code: np.ndarray
    beta: np.ndarray
    scale: np.ndarray
    residual: float
    accepted: bool = False
    # frame the fit started from (the candidate, or a refined restart)
    frame: RigidTransform | None = None
    # observed surface points inside the fitted sphere times the squared
    # point spacing over r^2, so it does not depend on cloud density
    coverage: float = math.nan

    @property
    def field_transform(self) -> AffineTransform:
        """Fitted ``H``: candidate coordinates -> alignment frame."""
        return AffineTransform(alignment_transform(self.beta, self.scale))

    def to_json(self) -> dict:
        return {"candidate_index": self.candidate, "residual": self.residual if math.isfinite(self.residual) else None,
                "accepted": self.accepted, "beta": self.beta.tolist(), "scale": self.scale.tolist(),
                "coverage": self.coverage if math.isfinite(self.coverage) else None,
                "frame_matrix": None if self.frame is None else self.frame.matrix.reshape(-1).tolist()}


@dataclass
class GraspSolution:
    grasp: RigidTransform
    fit: FitResult

    def to_json(self) -> dict:
        return {**self.fit.to_json(), "grasp_matrix": self.grasp.matrix.reshape(-1).tolist()}


@dataclass
class TransferResult:
    """Accepted solutions (best first), every coarse fit and the refined fits."""

    solutions: list[GraspSolution]
    fits: list[FitResult]
    threshold: float
    refined: list[FitResult] = field(default_factory=list)

    @property
    def best(self) -> GraspSolution | None:
        return self.solutions[0] if self.solutions else None

    def to_json(self) -> dict:
        return {"threshold": self.threshold,
                "accepted": [s.to_json() for s in self.solutions],
                "candidates": [f.to_json() for f in self.fits],
                "refined": [f.to_json() for f in self.refined]}


@dataclass(frozen=True)
class TransferConfig:
    n_candidates: int = 12
    yaw_step: float = math.radians(30.0)
    # coarse fits of every candidate
    iterations: int = 150
    # the best refine_top coarse fits restart from their fitted frames
    refine_top: int = 3
    refine_iterations: int = 300
    learning_rate: float = 1e-3
    pose_lr_factor: float = 1.0
    # cosine decay of the step size down to this fraction by the last iteration
    lr_final_factor: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    # None: residual_mean + threshold_k * residual_std of the trained model
    threshold: float | None = None
    threshold_k: float = 2.0
    n_uniform: int = 20000
    bounds_padding: float = 0.1
    # samples farther than this multiple of the sphere radius from a
    # candidate origin are never considered for that candidate
    preselect_factor: float = 1.5
    # cap on samples per candidate, drawn from a stream keyed by (seed, index)
    max_samples: int | None = 2048
    # weigh observed surface points and free-space samples equally, and
    # reject fits that see fewer than min_surface observed points
    balance: bool = True
    min_surface: int = 20
    # reject fits whose sphere sees less than this fraction of the model's
    # calibrated surface coverage (a sphere drifting off the object sees
    # little surface and fits it trivially)
    min_coverage: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.n_candidates < 1 or self.yaw_step <= 0:
            raise ValueError("need n_candidates >= 1 and yaw_step > 0")
        if min(self.iterations, self.refine_iterations, self.refine_top) < 0 or self.learning_rate <= 0 \
                or self.n_uniform < 0:
            raise ValueError("invalid optimisation settings")


def sample_candidates(reference: RigidTransform, n: int, yaw_step: float, axis_point=None) -> list[CandidateFrame]:
    """Reference frame rotated about a vertical axis in ``yaw_step`` increments.

    The axis passes through ``axis_point`` (default: the world origin);
    candidate 0 is the reference itself.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not yaw_step > 0:
        raise ValueError("yaw_step must be positive")
    center = np.zeros(3) if axis_point is None else np.asarray(axis_point, dtype=np.float64)
    out = []
    for j in range(n):
        rot = rotation_about_z(j * yaw_step, center)
        out.append(CandidateFrame(j, RigidTransform.from_matrix((rot @ reference).matrix)))
    return out


def fit_candidates(model: LocalSurfaceModel, samples: SdfSampleSet, candidates: list[CandidateFrame],
                   config: TransferConfig = TransferConfig(), threshold: float | None = None,
                   iterations: int | None = None) -> list[FitResult]:
    """Optimise one (code, pose) per candidate with the network frozen.

    All candidates are solved as one batch; the summed loss keeps them
    independent, every fit starts from zero code and identity pose, and any
    subsampling draws from a stream keyed by the candidate index, so results
    do not depend on candidate order.
    """
    if not candidates:
        return []
    dtype = model.dtype
    r = model.sphere_radius
    limit = config.preselect_factor * r
    world = samples.positions
    pools, targets, flags = [], [], []
    for c in candidates:
        local = invert(c.candidate_to_world).apply(world)
        keep = np.flatnonzero(np.einsum("ij,ij->i", local, local) <= limit * limit)
        if config.max_samples is not None and len(keep) > config.max_samples:
            rng = np.random.default_rng([config.seed, c.index])
            keep = np.sort(rng.choice(keep, size=config.max_samples, replace=False))
        pools.append(local[keep])
        targets.append(samples.distances[keep])
        flags.append(samples.unsigned[keep])
    n = max(1, max(len(p) for p in pools))
    b = len(candidates)
    pos = np.zeros((b, n, 3))
    tgt = np.zeros((b, n))
    valid = np.zeros((b, n), dtype=bool)
    uns = np.zeros((b, n), dtype=bool)
    for k, (p, t, u) in enumerate(zip(pools, targets, flags)):
        pos[k, :len(p)] = p
        tgt[k, :len(t)] = t
        uns[k, :len(u)] = u
        valid[k, :len(p)] = True
    pos_t = torch.as_tensor(pos, dtype=dtype)
    tgt_t = torch.as_tensor(tgt, dtype=dtype)
    valid_t = torch.as_tensor(valid)
    uns_t = torch.as_tensor(uns)
    # observed points carry an unsigned distance of exactly zero
    surf_t = (uns_t & (tgt_t == 0)) if config.balance else None

    codes = torch.zeros(b, model.config.code_dim, dtype=dtype, requires_grad=True)
    betas = torch.zeros(b, 6, dtype=dtype, requires_grad=True)
    scales = torch.ones(b, 3, dtype=dtype, requires_grad=True)
    pose_lr = config.learning_rate * config.pose_lr_factor
    state = AdamState([codes, betas, scales], [config.learning_rate, pose_lr, pose_lr])
    iterations = config.iterations if iterations is None else iterations
    net_params = list(model.net.parameters())
    saved = [p.requires_grad for p in net_params]
    for p in net_params:
        p.requires_grad_(False)
    try:
        for it in range(iterations):
            loss = inference_loss(model, codes, betas, scales, pos_t, tgt_t, config.weights,
                                  valid=valid_t, unsigned=uns_t, surface=surf_t)
            if not torch.isfinite(loss.total):
                break
            grads = torch.autograd.grad(loss.total, [codes, betas, scales])
            frac = it / max(iterations - 1, 1)
            lo = config.lr_final_factor
            adam_step(state, grads, lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        with torch.no_grad():
            final = inference_loss(model, codes, betas, scales, pos_t, tgt_t, config.weights,
                                   valid=valid_t, unsigned=uns_t, surface=surf_t)
    finally:
        for p, flag in zip(net_params, saved):
            p.requires_grad_(flag)

    if threshold is None:
        threshold = config.threshold if config.threshold is not None else model.threshold(config.threshold_k)
    surface_pts, spacing = _surface_points(samples)
    floor = config.min_coverage * model.coverage_mean
    out = []
    for k, c in enumerate(candidates):
        fit = FitResult(c.index, codes[k].detach().to(torch.float64).numpy().copy(),
                        betas[k].detach().to(torch.float64).numpy().copy(),
                        scales[k].detach().to(torch.float64).numpy().copy(), math.inf, False, c.candidate_to_world)
        fit.coverage = _coverage(model, fit, surface_pts, spacing)
        count = float(final.counts[k])
        if final.surface_counts is not None and float(final.surface_counts[k]) < config.min_surface:
            count = 0.0
        if fit.coverage < floor:
            count = 0.0
        res = float(final.sdf[k]) if count > 0 else math.inf
        fit.residual = res if math.isfinite(res) else math.inf
        fit.accepted = fit.residual < threshold
        out.append(fit)
    return out


def _surface_points(samples: SdfSampleSet) -> tuple[np.ndarray, float]:
    """Observed points of a cloud sample set and their median neighbour spacing."""
    pts = samples.positions[samples.unsigned & (samples.distances == 0)]
    if len(pts) < 2:
        return pts, 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return pts, float(np.median(d[:, 1]))


def _coverage(model: LocalSurfaceModel, fit: FitResult, pts: np.ndarray, spacing: float) -> float:
    if len(pts) == 0 or spacing == 0:
        return 0.0
    aligned = (fit.field_transform @ invert(fit.frame)).apply(pts)
    r = model.sphere_radius
    inside = int(np.count_nonzero(np.einsum("ij,ij->i", aligned, aligned) <= r * r))
    return inside * spacing**2 / r**2


def fit_candidate(model: LocalSurfaceModel, samples: SdfSampleSet, candidate: CandidateFrame,
                  config: TransferConfig = TransferConfig(), threshold: float | None = None,
                  iterations: int | None = None) -> FitResult:
    return fit_candidates(model, samples, [candidate], config, threshold, iterations)[0]


def aligned_frame(fit: FitResult) -> RigidTransform:
    """World pose of the fitted alignment frame, ``T_WC @ invert(H)`` without scale."""
    return strip_scale(fit.frame @ invert(fit.field_transform))


def grasp_from_fit(model: LocalSurfaceModel, fit: FitResult) -> RigidTransform:
    """``T_WC_j @ invert(H_j) @ T_AG`` with any residual scale removed."""
    if fit.frame is None:
        raise ValueError("fit carries no starting frame")
    return strip_scale(fit.frame @ invert(fit.field_transform) @ model.align_to_grasp)


def _cloud_samples(model, pts, config, seed) -> SdfSampleSet:
    lo, hi = padded_bounds(pts.min(axis=0), pts.max(axis=0), config.bounds_padding)
    # keep the sampling box from collapsing on flat clouds
    span = np.maximum(hi - lo, model.sphere_radius)
    mid = (lo + hi) / 2
    return cloud_unsigned_samples(pts, (mid - span / 2, mid + span / 2), config.n_uniform, seed)


def transfer_grasp(model: LocalSurfaceModel, cloud, reference: RigidTransform,
                   config: TransferConfig = TransferConfig(), axis_point=None) -> TransferResult:
    """Fit every candidate frame to an observed cloud and return accepted grasps.

    Candidates rotate ``reference`` about the vertical axis through
    ``axis_point`` (default: the cloud centroid).  An empty ``solutions``
    list means no candidate matched; ``fits`` still carries every residual.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    if axis_point is None:
        axis_point = pts.mean(axis=0)
    samples = _cloud_samples(model, pts, config, config.seed)
    candidates = sample_candidates(reference, config.n_candidates, config.yaw_step, axis_point)
    threshold = config.threshold if config.threshold is not None else model.threshold(config.threshold_k)
    fits = fit_candidates(model, samples, candidates, config, threshold)
    final = fits
    refined = []
    if config.refine_top > 0:
        for f in fits:
            f.accepted = False
        ranked = sorted((f for f in fits if math.isfinite(f.residual)), key=lambda f: (f.residual, f.candidate))
        restarts = [CandidateFrame(f.candidate, aligned_frame(f)) for f in ranked[:config.refine_top]]
        refined = fit_candidates(model, samples, restarts, config, threshold, config.refine_iterations)
        final = refined
    solutions = [GraspSolution(grasp_from_fit(model, f), f) for f in final if f.accepted]
    solutions.sort(key=lambda s: (s.fit.residual, s.fit.candidate))
    return TransferResult(solutions, fits, threshold, refined)


def naive_transfer(anchor_grasp: RigidTransform) -> RigidTransform:
    """Baseline: reuse the demonstrated grasp unchanged."""
    return anchor_grasp


def _normaliser(points: np.ndarray, per_axis: bool):
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = hi - lo
    if per_axis:
        if np.any(extent <= 0):
            raise ValueError("point set has zero extent along an axis")
        return lo, extent
    s = float(extent.max())
    if s <= 0:
        raise ValueError("point set has zero extent")
    # uniform scale, centred so the longest axis spans [0, 1]
    return (lo + hi) / 2 - s / 2, np.full(3, s)


def nocs_transfer(source_points, target_points, source_grasp: RigidTransform,
                  injected_yaw_error: float = 0.0, per_axis: bool = True) -> RigidTransform:
    """Baseline: carry a grasp across through normalised object coordinates.

    Both point sets are assumed to be in a canonical yaw; the target's
    canonical frame is then rotated by ``injected_yaw_error`` about the
    vertical axis through its bounding-box centre.
    """
    src = np.asarray(source_points, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("point sets must be non-empty")
    s_off, s_ext = _normaliser(src, per_axis)
    t_off, t_ext = _normaliser(dst, per_axis)
    ratio = t_ext / s_ext
    linear = np.diag(ratio)
    m = np.eye(4)
    m[:3, :3] = nearest_rotation(linear @ source_grasp.rotation) if per_axis else source_grasp.rotation
    m[:3, 3] = t_off + ratio * (source_grasp.translation - s_off)
    out = RigidTransform.from_matrix(m)
    if injected_yaw_error:
        center = (dst.min(axis=0) + dst.max(axis=0)) / 2
        out = RigidTransform.from_matrix((rotation_about_z(injected_yaw_error, center) @ out).matrix)
    return out


def calibrate_threshold(model: LocalSurfaceModel, clouds, frames, config: TransferConfig = TransferConfig(),
                        ) -> np.ndarray:
    """Residual statistics measured the way inference measures them.

    Each cloud (world frame) is fitted at its known frame with the same
    sampling and optimisation as :func:`transfer_grasp`; the model's
    residual mean and standard deviation are replaced by those of the
    resulting residuals, which are returned.  The mean surface coverage of
    these fits becomes the model's coverage reference.
    """
    residuals, coverage = [], []
    saved = model.coverage_mean
    model.coverage_mean = 0.0
    try:
        for k, (cloud, frame) in enumerate(zip(clouds, frames)):
            pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
            samples = _cloud_samples(model, pts, config, config.seed + k)
            fit = fit_candidate(model, samples, CandidateFrame(0, frame), config, math.inf, config.refine_iterations)
            residuals.append(fit.residual)
            coverage.append(fit.coverage)
    finally:
        model.coverage_mean = saved
    res = np.asarray(residuals)
    if not np.all(np.isfinite(res)):
        raise ValueError("a calibration cloud produced no usable fit")
    model.residual_mean = float(res.mean())
    model.residual_std = float(res.std())
    model.coverage_mean = float(np.mean(coverage))
    return res
