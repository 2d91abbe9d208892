"""Joint optimisation of network weights, shape codes and pose codes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .encoding import EncodingConfig
from .lie import FrameSet, RigidTransform, AffineTransform, training_grasp_pose
from .network import (HyperSdfNet, LocalSurfaceModel, LossWeights, NetworkConfig, alignment_matrices,
                      alignment_transform, batch_loss)
from .sampling import SdfSampleSet

log = logging.getLogger(__name__)

DTYPES = {"float64": torch.float64, "float32": torch.float32}


class TrainingDiverged(RuntimeError):
    pass


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment estimates for a list of tensors updated in place."""

    params: list[torch.Tensor]
    lrs: list[float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.lrs) != len(self.params):
            raise ValueError("one learning rate per parameter tensor is required")
        if not self.m:
            self.m = [torch.zeros_like(p) for p in self.params]
            self.v = [torch.zeros_like(p) for p in self.params]


def adam_step(state: AdamState, grads, lr_scale: float = 1.0) -> AdamState:
    """One bias-corrected Adam update of every tensor in ``state``."""
    grads = list(grads)
    if len(grads) != len(state.params):
        raise ValueError(f"expected {len(state.params)} gradients, got {len(grads)}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for p, g, m, v, lr in zip(state.params, grads, state.m, state.v, state.lrs):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr * lr_scale / c1)
    return state


# -- configuration and results -------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 512
    learning_rate: float = 1e-3
    pose_lr_factor: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    # coarse-to-fine ramp as fractions of the iteration budget
    schedule_start: float = 0.0
    schedule_end: float = 0.3
    # cosine decay of every learning rate from decay_start (fraction of the
    # budget) down to lr_final_factor at the last iteration
    decay_start: float = 0.0
    lr_final_factor: float = 0.05
    sphere_radius: float = 0.15
    anchor_index: int = 0
    freeze_pose_codes: bool = False
    freeze_scale_codes: bool = False
    seed: int = 0
    dtype: str = "float64"
    log_every: int = 1000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.network, dict):
            object.__setattr__(self, "network", NetworkConfig(**self.network))
        if self.iterations < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("iterations, batch_size and learning_rate must be positive")
        if not 0.0 <= self.schedule_start <= self.schedule_end:
            raise ValueError("coarse-to-fine schedule must satisfy 0 <= start <= end")
        if self.sphere_radius <= 0:
            raise ValueError("sphere_radius must be positive")
        if not (0.0 <= self.decay_start <= 1.0 and 0.0 < self.lr_final_factor <= 1.0):
            raise ValueError("decay_start must lie in [0, 1] and lr_final_factor in (0, 1]")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def encoding(self) -> EncodingConfig:
        bands = self.network.encoding.num_bands
        return EncodingConfig(bands, int(round(self.schedule_start * self.iterations)),
                              int(round(self.schedule_end * self.iterations)))

    def lr_scale(self, it: int) -> float:
        start = self.decay_start * self.iterations
        if it < start or self.iterations - start <= 1:
            return 1.0
        u = (it - start) / (self.iterations - 1 - start)
        return self.lr_final_factor + (1.0 - self.lr_final_factor) * 0.5 * (1.0 + math.cos(math.pi * u))


@dataclass
class TrainedBundle:
    model: LocalSurfaceModel
    codes: np.ndarray
    betas: np.ndarray
    scales: np.ndarray
    loss_history: np.ndarray
    world_to_demo: RigidTransform
    anchor_index: int
    shape_ids: list[int]
    residuals: np.ndarray
    excluded: list[int] = field(default_factory=list)

    def field_transform(self, k: int) -> AffineTransform:
        """``H`` of the k-th trained shape (demonstration -> alignment frame)."""
        return AffineTransform(alignment_transform(self.betas[k], self.scales[k]))

    def field_transforms(self) -> list[AffineTransform]:
        return [self.field_transform(k) for k in range(len(self.codes))]

    def frames(self) -> FrameSet:
        return FrameSet.from_field_transforms(self.world_to_demo, self.field_transforms(),
                                              self.anchor_index)

    def training_grasps(self) -> list[RigidTransform]:
        frames = self.frames()
        return [training_grasp_pose(frames, k) for k in range(len(self.codes))]

    def save(self, path):
        self.model.save(path, {"codes": self.codes, "betas": self.betas, "scales": self.scales,
                               "world_to_demo": self.world_to_demo.matrix,
                               "shape_ids": np.asarray(self.shape_ids, dtype=np.float64),
                               "residuals": self.residuals})


def load_bundle(path) -> TrainedBundle:
    from .network import load_checkpoint

    model, extra = load_checkpoint(path)
    return TrainedBundle(model, extra["codes"], extra["betas"], extra["scales"], np.zeros(0),
                         RigidTransform.from_matrix(extra["world_to_demo"]),
                         int(model.extra.get("anchor_index", 0)),
                         [int(v) for v in extra["shape_ids"]], extra["residuals"])


# -- training ------------------------------------------------------------------


def _in_sphere(pool: torch.Tensor, linear: torch.Tensor, trans: torch.Tensor, r: float) -> torch.Tensor:
    moved = pool @ linear.T + trans
    return (moved * moved).sum(-1) <= r * r


def train(corpus: list[SdfSampleSet], demo: RigidTransform, config: TrainConfig,
          progress=None) -> TrainedBundle:
    """Fit one local-surface model to a corpus already in the demonstration frame.

    Each step draws ``batch_size`` samples per shape from those currently
    inside the sphere (re-evaluated against the shape's current ``H``),
    evaluates the weighted loss and takes one Adam step.  The anchor's pose
    code is reset to identity after every step.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    if not 0 <= config.anchor_index < len(corpus):
        raise ValueError(f"anchor_index {config.anchor_index} out of range")
    dtype = DTYPES[config.dtype]
    r = config.sphere_radius

    shape_ids = []
    for k, s in enumerate(corpus):
        inside = np.einsum("ij,ij->i", s.positions, s.positions) <= r * r
        if not inside.any():
            if k == config.anchor_index:
                raise ValueError("anchor shape has no samples inside the sphere")
            log.warning("shape %d has no samples inside the sampling sphere; excluded", k)
            continue
        shape_ids.append(k)
    excluded = [k for k in range(len(corpus)) if k not in shape_ids]
    anchor = shape_ids.index(config.anchor_index)
    pools = [torch.as_tensor(corpus[k].positions, dtype=dtype) for k in shape_ids]
    targets = [torch.as_tensor(corpus[k].distances, dtype=dtype) for k in shape_ids]
    n_shapes = len(shape_ids)

    net_config = replace(config.network, encoding=config.encoding())
    net = HyperSdfNet(net_config, seed=config.seed, dtype=dtype)
    model = LocalSurfaceModel(net, r, extra={"anchor_index": anchor})
    gen = torch.Generator().manual_seed(config.seed + 1)
    codes = (torch.randn(n_shapes, net_config.code_dim, generator=gen, dtype=dtype)
             * net_config.code_init_std).requires_grad_()
    betas = torch.zeros(n_shapes, 6, dtype=dtype, requires_grad=True)
    scales = torch.ones(n_shapes, 3, dtype=dtype, requires_grad=True)
    rngs = [np.random.default_rng([config.seed, k]) for k in range(n_shapes)]

    net_params = list(net.parameters())
    params = net_params + [codes]
    lrs = [config.learning_rate] * len(params)
    pose_lr = config.learning_rate * config.pose_lr_factor
    if not config.freeze_pose_codes:
        params.append(betas)
        lrs.append(pose_lr)
        if not config.freeze_scale_codes:
            params.append(scales)
            lrs.append(pose_lr)
    state = AdamState(params, lrs)
    enc = net_config.encoding
    history = np.zeros(config.iterations)
    m = config.batch_size

    for it in range(config.iterations):
        alpha = enc.alpha_at(it)
        with torch.no_grad():
            linear, trans = alignment_matrices(betas, scales)
        idx_pos, idx_tgt, valid = [], [], []
        for k in range(n_shapes):
            inside = torch.nonzero(_in_sphere(pools[k], linear[k], trans[k], r)).squeeze(-1)
            if len(inside) == 0:
                pick = torch.zeros(m, dtype=torch.long)
                valid.append(torch.zeros(m, dtype=torch.bool))
            else:
                pick = inside[torch.as_tensor(rngs[k].integers(0, len(inside), size=m))]
                valid.append(torch.ones(m, dtype=torch.bool))
            idx_pos.append(pools[k][pick])
            idx_tgt.append(targets[k][pick])
        pos = torch.stack(idx_pos)
        tgt = torch.stack(idx_tgt)
        loss = batch_loss(model, codes, betas, scales, pos, tgt, config.weights, alpha,
                          valid=torch.stack(valid))
        value = float(loss.total.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at iteration {it}")
        history[it] = value
        grads = torch.autograd.grad(loss.total, params)
        adam_step(state, grads, config.lr_scale(it))
        with torch.no_grad():
            betas[anchor].zero_()
            scales[anchor].fill_(1.0)
        if progress is not None and (it % config.log_every == 0 or it == config.iterations - 1):
            progress(it, value, loss)

    codes_np = codes.detach().to(torch.float64).numpy().copy()
    betas_np = betas.detach().to(torch.float64).numpy().copy()
    scales_np = scales.detach().to(torch.float64).numpy().copy()
    residuals = shape_residuals(model, codes, betas, scales, pools, targets)
    if not (np.all(np.isfinite(residuals)) and np.all(np.isfinite(codes_np)) and np.all(np.isfinite(betas_np))):
        raise TrainingDiverged("training ended with non-finite codes or residuals")
    model.residual_mean = float(residuals.mean())
    model.residual_std = float(residuals.std())
    frames = FrameSet.from_field_transforms(
        demo, [AffineTransform(alignment_transform(b, c)) for b, c in zip(betas_np, scales_np)], anchor)
    model.align_to_grasp = frames.align_to_grasp
    model.extra.update({"shape_ids": shape_ids, "excluded": excluded, "seed": config.seed})
    return TrainedBundle(model, codes_np, betas_np, scales_np, history, demo, anchor, shape_ids,
                         residuals, excluded)


def shape_residuals(model, codes, betas, scales, pools, targets, chunk: int = 8192) -> np.ndarray:
    """Mean absolute SDF error over each shape's in-sphere samples."""
    out = np.zeros(len(pools))
    with torch.no_grad():
        for k, (pool, tgt) in enumerate(zip(pools, targets)):
            errs = []
            for s in range(0, len(pool), chunk):
                pred, xa = model.field(codes[k:k + 1], betas[k:k + 1], scales[k:k + 1],
                                       pool[None, s:s + chunk])
                inside = (xa[0] * xa[0]).sum(-1) <= model.sphere_radius**2
                errs.append((pred[0] - tgt[s:s + chunk]).abs()[inside])
            e = torch.cat(errs)
            out[k] = float(e.mean()) if len(e) else math.inf
    return out


def smoothed(history: np.ndarray, window: int = 100) -> np.ndarray:
    """Mean over consecutive non-overlapping windows."""
    n = len(history) // window
    return history[: n * window].reshape(n, window).mean(axis=1)
