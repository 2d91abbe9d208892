"""SE(3) and affine transform algebra.

Transforms are small immutable wrappers around 4x4 float64 matrices.  The
convention everywhere is ``x_out = M @ [x, 1]``: a transform stored as
``frame_a_to_b`` maps coordinates expressed in frame ``a`` into frame ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Below this rotation angle the Rodrigues coefficients switch to their
# Taylor series (4th order), which avoids the 0/0 without losing precision.
SMALL_ANGLE = 1e-4


def skew(v) -> np.ndarray:
    """Hat operator: the 3x3 matrix ``[v]`` with ``[v] @ u == cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class TwistVector:
    """se(3) element: axis-angle rotation ``omega`` and translation generator ``t``."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega", _as_vec3(self.omega, "omega"))
        object.__setattr__(self, "t", _as_vec3(self.t, "t"))

    @classmethod
    def from_vector(cls, v) -> "TwistVector":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.t])

    def __neg__(self) -> "TwistVector":
        return TwistVector(-self.omega, -self.t)


@dataclass(frozen=True)
class ScaleCode:
    c: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        c = _as_vec3(self.c, "scale")
        if np.any(c <= 0):
            raise ValueError(f"scale components must be strictly positive, got {c}")
        object.__setattr__(self, "c", c)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """General 4x4 homogeneous transform with bottom row ``[0, 0, 0, 1]``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform matrix must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"bottom row must be [0, 0, 0, 1], got {m[3]}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        if not isinstance(other, AffineTransform):
            return NotImplemented
        product = self.matrix @ other.matrix
        product[3] = (0.0, 0.0, 0.0, 1.0)
        if isinstance(self, RigidTransform) and isinstance(other, RigidTransform):
            return RigidTransform.from_matrix(product, check=False)
        return AffineTransform(product)

    def apply(self, points) -> np.ndarray:
        return apply_transform(self, points)

    def inverse(self) -> "AffineTransform":
        return invert(self)

    def to_json(self, frame_id: str | None = None) -> dict:
        out = {"matrix": [float(v) for v in self.matrix.reshape(-1)]}
        if frame_id is not None:
            out["frame_id"] = frame_id
        return out

    @classmethod
    def from_json(cls, payload: dict):
        m = np.asarray(payload["matrix"], dtype=np.float64).reshape(4, 4)
        if cls is RigidTransform:
            return RigidTransform.from_matrix(m)
        return cls(m)

    def __repr__(self):
        return f"{type(self).__name__}(\n{self.matrix!r})"


class RigidTransform(AffineTransform):
    """Proper rigid motion: orthonormal rotation with det +1 plus translation."""

    def __init__(self, rotation=None, translation=None, *, _check: bool = True):
        rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        translation = np.zeros(3) if translation is None else translation
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = _as_vec3(translation, "translation")
        if _check:
            _check_rotation(m[:3, :3])
        super().__init__(m)

    @classmethod
    def from_matrix(cls, matrix, check: bool = True) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3], _check=check)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, _check=False)


def _check_rotation(r: np.ndarray, tol: float = 1e-9):
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation is not orthonormal with determinant +1")


def rodrigues_coefficients(theta: float, branch: str = "auto") -> tuple[float, float, float]:
    """Return ``(a, b, c)`` with ``R = I + a[w] + b[w]^2`` and ``V = I + b[w] + c[w]^2``.

    ``branch`` forces the Taylor series (``"series"``) or the closed form
    (``"closed"``); ``"auto"`` switches to the series below ``SMALL_ANGLE``.
    The closed-form ``c`` cancels catastrophically for tiny angles, but it
    only ever multiplies ``[w]^2 ~ theta^2``.
    """
    if branch not in ("auto", "series", "closed"):
        raise ValueError(f"unknown branch {branch!r}")
    if branch == "series" or (branch == "auto" and theta < SMALL_ANGLE):
        t2 = theta * theta
        t4 = t2 * t2
        a = 1.0 - t2 / 6.0 + t4 / 120.0
        b = 0.5 - t2 / 24.0 + t4 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        return a, b, c
    if theta == 0.0:
        raise ValueError("closed form is undefined at theta = 0")
    s = np.sin(theta)
    half = np.sin(theta / 2) / (theta / 2)
    return s / theta, 0.5 * half * half, (theta - s) / theta**3


def exp_se3(beta: TwistVector, branch: str = "auto") -> RigidTransform:
    """Exponential map se(3) -> SE(3) via the Rodrigues formulas."""
    if not isinstance(beta, TwistVector):
        beta = TwistVector.from_vector(beta)
    theta = float(np.linalg.norm(beta.omega))
    a, b, c = rodrigues_coefficients(theta, branch)
    w = skew(beta.omega)
    w2 = w @ w
    rotation = np.eye(3) + a * w + b * w2
    v = np.eye(3) + b * w + c * w2
    return RigidTransform(rotation, v @ beta.t, _check=False)


def scale_transform(c: ScaleCode | Sequence[float]) -> AffineTransform:
    if not isinstance(c, ScaleCode):
        c = ScaleCode(c)
    return AffineTransform(np.diag([*c.c, 1.0]))


def compose_alignment(beta: TwistVector, c: ScaleCode | Sequence[float]) -> AffineTransform:
    """``H = exp(beta) @ diag(c, 1)``: scale first, then rotate and translate."""
    return AffineTransform(exp_se3(beta).matrix @ scale_transform(c).matrix)


def apply_transform(h: AffineTransform, x) -> np.ndarray:
    """Apply ``h`` to a single point ``(3,)`` or a batch ``(N, 3)``."""
    m = h.matrix if isinstance(h, AffineTransform) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(x, dtype=np.float64)
    return pts @ m[:3, :3].T + m[:3, 3]


def invert(t: AffineTransform) -> AffineTransform:
    if isinstance(t, RigidTransform):
        return t.inverse()
    linear = t.linear
    if abs(np.linalg.det(linear)) < 1e-12:
        raise np.linalg.LinAlgError("cannot invert a singular transform")
    inv_linear = np.linalg.inv(linear)
    m = np.eye(4)
    m[:3, :3] = inv_linear
    m[:3, 3] = -inv_linear @ t.translation
    return AffineTransform(m)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Orthonormal polar factor of a 3x3 matrix (closest proper rotation)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def strip_scale(h: AffineTransform) -> RigidTransform:
    """Drop the scale of an affine transform, keeping its translation.

    The linear block is replaced by its polar rotation factor, which for
    ``H = T diag(c)`` is exactly the rotation of ``T``.
    """
    if isinstance(h, RigidTransform):
        return h
    return RigidTransform(nearest_rotation(h.linear), h.translation, _check=False)


def rotation_about_z(angle: float, center=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Yaw rotation by ``angle`` radians about the vertical axis through ``center``."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    center = _as_vec3(center, "center")
    return RigidTransform(rot, center - rot @ center, _check=False)


def translation(d) -> RigidTransform:
    return RigidTransform(np.eye(3), d)


def anchor_align_to_grasp(anchor_demo_to_align: AffineTransform, tol: float = 1e-9) -> RigidTransform:
    """``T_AG`` from the anchor's demo->alignment frame transform.

    The anchor carries the demonstrated grasp, so the grasp frame seen from
    the alignment frame is the inverse of the anchor's own frame transform.
    The anchor's scale is pinned to one; anything else is rejected.
    """
    lin = anchor_demo_to_align.linear
    if np.max(np.abs(lin.T @ lin - np.eye(3))) > tol:
        raise ValueError("anchor transform must have unit scale")
    return RigidTransform.from_matrix(invert(anchor_demo_to_align).matrix, check=False)


@dataclass(frozen=True)
class FrameSet:
    """Grasp-frame bookkeeping for one trained local-surface model.

    ``demo_to_align[i]`` is the pose of the alignment frame expressed in the
    demonstration frame of shape ``i``.  A learned field transform ``H``
    maps demonstration coordinates *into* the alignment frame, so this is
    ``invert(H)``; use :meth:`from_field_transforms` to build it from the
    per-shape ``H`` matrices.
    """

    world_to_demo: RigidTransform
    demo_to_align: tuple[AffineTransform, ...]
    anchor_index: int = 0
    candidates: tuple[RigidTransform, ...] = ()
    align_to_grasp: RigidTransform = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "demo_to_align", tuple(self.demo_to_align))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not 0 <= self.anchor_index < len(self.demo_to_align):
            raise IndexError(f"anchor index {self.anchor_index} out of range")
        anchor = self.demo_to_align[self.anchor_index]
        object.__setattr__(self, "align_to_grasp", anchor_align_to_grasp(anchor))

    @classmethod
    def from_field_transforms(cls, world_to_demo, field_transforms, anchor_index=0, candidates=()):
        return cls(world_to_demo, tuple(invert(h) for h in field_transforms), anchor_index, candidates)


def training_grasp_pose(frames: FrameSet, i: int) -> RigidTransform:
    """World-frame grasp of training shape ``i``: ``T_WD @ T_DA[i] @ T_AG``."""
    if not 0 <= i < len(frames.demo_to_align):
        raise IndexError(f"shape index {i} out of range")
    chain = frames.world_to_demo @ frames.demo_to_align[i] @ frames.align_to_grasp
    return strip_scale(chain)


def inference_grasp_pose(frames: FrameSet, i: int, j: int, h_ij: AffineTransform) -> RigidTransform:
    """World-frame grasp from candidate ``j``: ``T_WC_j @ invert(H_ij) @ T_AG``.

    ``h_ij`` is the optimised field transform of the fit, mapping candidate
    coordinates into the alignment frame.  ``i`` names the observed object;
    a FrameSet holds candidates for a single object, so only ``j`` indexes.
    """
    if i < 0:
        raise IndexError(f"object index {i} out of range")
    if not 0 <= j < len(frames.candidates):
        raise IndexError(f"candidate index {j} out of range")
    chain = frames.candidates[j] @ invert(h_ij) @ frames.align_to_grasp
    return strip_scale(chain)
