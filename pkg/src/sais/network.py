"""Hypernetwork-conditioned SDF network and the differentiable field pipeline.

Everything here is batched over *instances* (training shapes or inference
candidates): codes are ``[B, D]``, twists ``[B, 6]``, scales ``[B, 3]`` and
query points ``[B, N, 3]``.  Gradients come from torch autograd; a loss
tensor returned by :func:`batch_loss` or :func:`inference_loss` carries the
recorded graph and can be differentiated with :func:`gradients`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoding import EncodingConfig, band_weights, positional_encoding
from .lie import SMALL_ANGLE, RigidTransform

CHECKPOINT_MAGIC = b"SAISCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    code_dim: int = 128
    width: int = 256
    hidden_layers: int = 5
    hyper_width: int = 256
    # number of leading SDF-Net layers whose weights/biases the hypernetwork
    # predicts; None means every layer
    predicted_layers: int | None = None
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    code_init_std: float = 1e-4
    init_radius: float = 0.1

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            object.__setattr__(self, "encoding", EncodingConfig.from_json(self.encoding))
        n = self.hidden_layers + 1
        if self.predicted_layers is not None and not 0 <= self.predicted_layers <= n:
            raise ValueError(f"predicted_layers must lie in [0, {n}]")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.encoding.out_dim] + [self.width] * self.hidden_layers + [1]
        return [(dims[k + 1], dims[k]) for k in range(len(dims) - 1)]

    @property
    def num_predicted(self) -> int:
        n = self.hidden_layers + 1
        return n if self.predicted_layers is None else self.predicted_layers

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoding"] = self.encoding.to_json()
        return d


class HyperSdfNet(nn.Module):
    """SDF-Net whose leading layers are emitted by per-tensor hyper-MLPs.

    Each predicted tensor (weight or bias) gets its own 2-layer ReLU MLP
    mapping the shape code to the flattened tensor.  The output-layer bias
    of a hyper-MLP holds the SDF-Net initialisation, so a near-zero code
    yields a geometrically initialised network (a sphere of
    ``init_radius``).
    """

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        self.tensor_specs: list[tuple[str, tuple[int, ...]]] = []
        base = _geometric_init(config, gen, dtype)
        self.hyper = nn.ParameterDict()
        self.shared = nn.ParameterDict()
        for k, (out_dim, in_dim) in enumerate(config.layer_dims):
            for kind, shape in (("w", (out_dim, in_dim)), ("b", (out_dim,))):
                name = f"{kind}{k}"
                self.tensor_specs.append((name, shape))
                init = base[name]
                if k < config.num_predicted:
                    self._add_hyper(name, init, gen, dtype)
                else:
                    self.shared[name] = nn.Parameter(init)

    def _add_hyper(self, name, init, gen, dtype):
        cfg = self.config
        numel = init.numel()
        bound1 = 1.0 / math.sqrt(cfg.code_dim)
        w1 = (torch.rand(cfg.hyper_width, cfg.code_dim, generator=gen, dtype=dtype) * 2 - 1) * bound1
        b1 = (torch.rand(cfg.hyper_width, generator=gen, dtype=dtype) * 2 - 1) * bound1
        bound2 = math.sqrt(6.0 / cfg.hyper_width) / numel
        w2 = (torch.rand(numel, cfg.hyper_width, generator=gen, dtype=dtype) * 2 - 1) * bound2
        # output bias is the base network, corrected for the ReLU(b1) term so
        # that the zero code reproduces it exactly
        b2 = init.reshape(-1) - w2 @ torch.relu(b1)
        for suffix, value in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            self.hyper[f"{name}_{suffix}"] = nn.Parameter(value)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def sdf_params(self, codes: torch.Tensor) -> dict[str, torch.Tensor]:
        """SDF-Net tensors for each code: ``[B, *shape]`` or shared ``[*shape]``."""
        if codes.ndim != 2 or codes.shape[1] != self.config.code_dim:
            raise ValueError(f"codes must be [B, {self.config.code_dim}], got {tuple(codes.shape)}")
        out = {}
        for name, shape in self.tensor_specs:
            if name in self.shared:
                out[name] = self.shared[name]
                continue
            h = torch.relu(codes @ self.hyper[f"{name}_w1"].T + self.hyper[f"{name}_b1"])
            flat = h @ self.hyper[f"{name}_w2"].T + self.hyper[f"{name}_b2"]
            out[name] = flat.reshape(codes.shape[0], *shape)
        return out

    def forward(self, codes: torch.Tensor, x: torch.Tensor, alpha: float | None = None) -> torch.Tensor:
        """SDF at aligned points ``x [B, N, 3]`` -> ``[B, N]``."""
        params = self.sdf_params(codes)
        return sdf_forward(params, x, self.config, alpha)


def sdf_forward(params, x, config: NetworkConfig, alpha=None) -> torch.Tensor:
    enc = config.encoding
    weights = None
    if alpha is not None and enc.num_bands:
        weights = torch.as_tensor(band_weights(alpha, enc.num_bands), dtype=x.dtype)
    y = positional_encoding(x, enc.num_bands, weights)
    n_layers = config.hidden_layers + 1
    for k in range(n_layers):
        w, b = params[f"w{k}"], params[f"b{k}"]
        y = torch.matmul(y, w.transpose(-1, -2)) + b.unsqueeze(-2)
        if k < n_layers - 1:
            y = torch.relu(y)
    return y.squeeze(-1)


def _geometric_init(config: NetworkConfig, gen, dtype) -> dict[str, torch.Tensor]:
    """Geometric initialisation: the untrained net approximates a sphere SDF."""
    out = {}
    dims = config.layer_dims
    for k, (out_dim, in_dim) in enumerate(dims):
        if k == len(dims) - 1:
            mean = math.sqrt(math.pi) / math.sqrt(in_dim)
            w = mean + 1e-4 * torch.randn(out_dim, in_dim, generator=gen, dtype=dtype)
            b = torch.full((out_dim,), -config.init_radius, dtype=dtype)
        else:
            w = torch.randn(out_dim, in_dim, generator=gen, dtype=dtype) * (math.sqrt(2.0) / math.sqrt(out_dim))
            if k == 0:
                w[:, 3:] = 0.0
            b = torch.zeros(out_dim, dtype=dtype)
        out[f"w{k}"], out[f"b{k}"] = w, b
    return out


# -- pose refinement ---------------------------------------------------------


def alignment_matrices(betas: torch.Tensor, scales: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Linear block ``R diag(c)`` and translation ``V t`` of ``H`` per instance.

    Differentiable twin of :func:`sais.lie.compose_alignment`, with the same
    small-angle Taylor branch.
    """
    omega, t = betas[..., :3], betas[..., 3:]
    theta2 = (omega * omega).sum(-1)
    small = theta2 < SMALL_ANGLE**2
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    s = torch.sin(theta)
    a_closed = s / theta
    half = torch.sin(theta / 2) / (theta / 2)
    b_closed = 0.5 * half * half
    c_closed = (theta - s) / (theta2_safe * theta)
    t4 = theta2 * theta2
    a = torch.where(small, 1 - theta2 / 6 + t4 / 120, a_closed)
    b = torch.where(small, 0.5 - theta2 / 24 + t4 / 720, b_closed)
    cc = torch.where(small, 1.0 / 6 - theta2 / 120 + t4 / 5040, c_closed)
    w = _skew(omega)
    w2 = w @ w
    eye = torch.eye(3, dtype=betas.dtype).expand_as(w)
    rot = eye + a[..., None, None] * w + b[..., None, None] * w2
    v = eye + b[..., None, None] * w + cc[..., None, None] * w2
    linear = rot * scales.unsqueeze(-2)
    trans = (v @ t.unsqueeze(-1)).squeeze(-1)
    return linear, trans


def _skew(v: torch.Tensor) -> torch.Tensor:
    z = torch.zeros_like(v[..., 0])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([z, -w, y], -1),
        torch.stack([w, z, -x], -1),
        torch.stack([-y, x, z], -1),
    ], -2)


def transform_points(linear, trans, x):
    return torch.matmul(x, linear.transpose(-1, -2)) + trans.unsqueeze(-2)


def alignment_transform(beta, scale) -> np.ndarray:
    """4x4 ``H`` (float64 numpy) for one instance's pose code."""
    b = torch.as_tensor(np.asarray(beta, dtype=np.float64)).reshape(1, 6)
    c = torch.as_tensor(np.asarray(scale, dtype=np.float64)).reshape(1, 3)
    lin, tr = alignment_matrices(b, c)
    m = np.eye(4)
    m[:3, :3] = lin[0].numpy()
    m[:3, 3] = tr[0].numpy()
    return m


# -- model -----------------------------------------------------------------


@dataclass
class LocalSurfaceModel:
    """A trained local-surface model plus the metadata needed at inference."""

    net: HyperSdfNet
    sphere_radius: float
    align_to_grasp: RigidTransform = field(default_factory=RigidTransform)
    residual_mean: float = 0.0
    residual_std: float = 0.0
    extra: dict = field(default_factory=dict)
    # mean density-normalised surface coverage of the calibration fits (0: unknown)
    coverage_mean: float = 0.0

    def __post_init__(self):
        if not self.sphere_radius > 0:
            raise ValueError("sphere_radius must be positive")
        if not (np.isfinite(self.residual_mean) and np.isfinite(self.residual_std)):
            raise ValueError("residual statistics must be finite")

    @property
    def config(self) -> NetworkConfig:
        return self.net.config

    @property
    def dtype(self):
        return self.net.dtype

    def field(self, codes, betas, scales, x, alpha=None):
        """Return ``(sdf [B, N], aligned points [B, N, 3])``."""
        linear, trans = alignment_matrices(betas, scales)
        xa = transform_points(linear, trans, x)
        return self.net(codes, xa, alpha), xa

    def threshold(self, k: float = 2.0) -> float:
        return self.residual_mean + k * self.residual_std

    def save(self, path, tensors: dict[str, np.ndarray] | None = None):
        save_checkpoint(self, path, tensors)


def predict_sdf(model: LocalSurfaceModel, code, beta, scale, x, alpha=None) -> np.ndarray:
    """Signed distance of points ``x`` (``(3,)`` or ``(N, 3)``) for one shape."""
    dt = model.dtype
    pts = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dt)
    single = pts.ndim == 1
    pts = pts.reshape(1, -1, 3)
    with torch.no_grad():
        out, _ = model.field(
            torch.as_tensor(np.asarray(code, dtype=np.float64), dtype=dt).reshape(1, -1),
            torch.as_tensor(np.asarray(beta, dtype=np.float64), dtype=dt).reshape(1, 6),
            torch.as_tensor(np.asarray(scale, dtype=np.float64), dtype=dt).reshape(1, 3),
            pts, alpha)
    out = out[0].numpy().astype(np.float64)
    return out[0] if single else out


# -- losses ----------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    sdf: float = 3e3
    shape: float = 1e4
    translation: float = 1e2
    scale: float = 2.5e2


@dataclass
class Loss:
    """Weighted objective; ``total`` keeps the autograd graph.

    Per-instance terms are unweighted ``[B]`` tensors detached from the graph.
    """

    total: torch.Tensor
    per_instance: torch.Tensor
    sdf: torch.Tensor
    shape: torch.Tensor
    translation: torch.Tensor
    scale: torch.Tensor
    counts: torch.Tensor
    surface_counts: torch.Tensor | None = None

    def backward(self):
        self.total.backward()


def sphere_gate(x_aligned: torch.Tensor, radius: float) -> torch.Tensor:
    with torch.no_grad():
        return (x_aligned * x_aligned).sum(-1) <= radius * radius


def _loss(model, codes, betas, scales, positions, targets, weights, alpha, valid,
          unsigned, scale_term, reduction, surface=None) -> Loss:
    if positions.numel() == 0:
        raise ValueError("empty sample set")
    pred, xa = model.field(codes, betas, scales, positions, alpha)
    mask = sphere_gate(xa, model.sphere_radius)
    if valid is not None:
        mask = mask & valid
    maskf = mask.to(pred.dtype)
    counts = maskf.sum(-1)
    if isinstance(unsigned, torch.Tensor):
        resid = torch.where(unsigned, pred.abs(), pred) - targets
    else:
        resid = (pred.abs() if unsigned else pred) - targets
    err = resid.abs()
    surface_counts = None
    if surface is None:
        sdf = (err * maskf).sum(-1) / counts.clamp_min(1.0)
    else:
        # equal say for observed surface points and free-space samples
        sm = (mask & surface).to(pred.dtype)
        fm = (mask & ~surface).to(pred.dtype)
        surface_counts = sm.sum(-1)
        sdf = 0.5 * ((err * sm).sum(-1) / surface_counts.clamp_min(1.0)
                     + (err * fm).sum(-1) / fm.sum(-1).clamp_min(1.0))
    shape = (codes * codes).sum(-1)
    trans = (betas[:, 3:] ** 2).sum(-1)
    scale = ((scales - 1.0) ** 2).sum(-1)
    per = weights.sdf * sdf + weights.shape * shape + weights.translation * trans
    if scale_term:
        per = per + weights.scale * scale
    if reduction == "mean":
        total = per.mean()
    elif reduction == "sum":
        total = per.sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return Loss(total, per.detach(), sdf.detach(), shape.detach(), trans.detach(),
                scale.detach(), counts.detach(),
                None if surface_counts is None else surface_counts.detach())


def batch_loss(model, codes, betas, scales, positions, targets, weights=LossWeights(),
               alpha=None, valid=None, reduction="mean") -> Loss:
    """Training objective ``w1 L_sdf + w2 |code|^2 + w3 |t|^2``.

    ``L_sdf`` is the mean absolute error over in-sphere samples of each
    instance; samples outside the (transformed) sphere are excluded.  The
    total averages the per-instance objectives.
    """
    return _loss(model, codes, betas, scales, positions, targets, weights, alpha, valid,
                 unsigned=False, scale_term=False, reduction=reduction)


def inference_loss(model, codes, betas, scales, positions, targets, weights=LossWeights(),
                   alpha=None, valid=None, unsigned=True, reduction="sum", surface=None) -> Loss:
    """Training objective plus ``w4 |c - 1|^2``.

    With ``unsigned`` targets the residual is ``|f| - u``; a boolean tensor
    shaped like ``targets`` selects this per sample.  The default sum
    reduction keeps the gradients of batched candidates independent.  With a
    ``surface`` mask, the SDF term averages observed surface points and the
    remaining samples separately and weighs the two means equally.
    """
    return _loss(model, codes, betas, scales, positions, targets, weights, alpha, valid,
                 unsigned=unsigned, scale_term=True, reduction=reduction, surface=surface)


def gradients(loss: Loss | torch.Tensor, tensors) -> list[torch.Tensor]:
    total = loss.total if isinstance(loss, Loss) else loss
    grads = torch.autograd.grad(total, list(tensors), allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: LocalSurfaceModel, path, tensors: dict[str, np.ndarray] | None = None):
    """JSON header followed by a little-endian float64 blob.

    Layout: magic ``SAISCKPT``, uint64 header length, UTF-8 JSON header,
    then every tensor in header order.
    """
    state = {k: v.detach().cpu().to(torch.float64).numpy() for k, v in model.net.state_dict().items()}
    extra = {k: np.asarray(v, dtype=np.float64) for k, v in (tensors or {}).items()}
    entries = [(f"net/{k}", v) for k, v in state.items()] + [(f"extra/{k}", v) for k, v in extra.items()]
    header = {
        "format": "sais-checkpoint",
        "version": CHECKPOINT_VERSION,
        "architecture": model.config.to_json(),
        "num_bands": model.config.encoding.num_bands,
        "schedule_start": model.config.encoding.schedule_start,
        "schedule_end": model.config.encoding.schedule_end,
        "code_dim": model.config.code_dim,
        "dtype": str(model.dtype).replace("torch.", ""),
        "sphere_radius": model.sphere_radius,
        "align_to_grasp": model.align_to_grasp.to_json("alignment->grasp"),
        "residual_stats": {"mean": model.residual_mean, "std": model.residual_std,
                           "coverage": model.coverage_mean},
        "metadata": model.extra,
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in entries],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in entries)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(raw)) + raw + blob)


def load_checkpoint(path) -> tuple[LocalSurfaceModel, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a sais checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    offset = 16 + n
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += 8 * count
    config = NetworkConfig(**header["architecture"])
    dtype = getattr(torch, header.get("dtype", "float64"))
    net = HyperSdfNet(config, dtype=dtype)
    state = {k[4:]: torch.as_tensor(v, dtype=dtype) for k, v in arrays.items() if k.startswith("net/")}
    net.load_state_dict(state)
    stats = header["residual_stats"]
    model = LocalSurfaceModel(net, float(header["sphere_radius"]),
                              RigidTransform.from_json(header["align_to_grasp"]),
                              float(stats["mean"]), float(stats["std"]), header.get("metadata", {}),
                              float(stats.get("coverage", 0.0)))
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, extra
