"""Sinusoidal positional encoding with a coarse-to-fine band mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class EncodingConfig:
    """Number of frequency bands and the iteration window of the mask ramp.

    The mask parameter ``alpha`` rises linearly from 0 at ``schedule_start``
    to ``num_bands`` at ``schedule_end``.
    """

    num_bands: int = 6
    schedule_start: int = 0
    schedule_end: int = 0

    def __post_init__(self):
        if self.num_bands < 0:
            raise ValueError("num_bands must be non-negative")
        if self.schedule_start > self.schedule_end:
            raise ValueError("schedule_start must not exceed schedule_end")

    @property
    def out_dim(self) -> int:
        return 3 + 6 * self.num_bands

    def alpha_at(self, iteration: int) -> float:
        if iteration >= self.schedule_end:
            return float(self.num_bands)
        if iteration <= self.schedule_start:
            return 0.0
        frac = (iteration - self.schedule_start) / (self.schedule_end - self.schedule_start)
        return frac * self.num_bands

    def to_json(self) -> dict:
        return {"num_bands": self.num_bands, "schedule_start": self.schedule_start,
                "schedule_end": self.schedule_end}

    @classmethod
    def from_json(cls, d: dict) -> "EncodingConfig":
        return cls(int(d["num_bands"]), int(d["schedule_start"]), int(d["schedule_end"]))


def band_weights(alpha: float, num_bands: int) -> np.ndarray:
    """Cosine ramp per band: 0 until ``alpha`` reaches the band, 1 one unit later."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ramp = np.clip(alpha - np.arange(num_bands, dtype=np.float64), 0.0, 1.0)
    return (1.0 - np.cos(ramp * math.pi)) / 2.0


def positional_encoding(x: torch.Tensor, num_bands: int, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Encode ``x[..., 3]`` to ``[..., 3 + 6L]``.

    Layout per band ``m``: ``cos(2^m pi x)`` for the three axes, then the
    matching ``sin`` triple.  ``weights`` (length ``L``) scales each band;
    the raw coordinates are never masked.
    """
    if num_bands == 0:
        return x
    freqs = (2.0 ** torch.arange(num_bands, dtype=x.dtype, device=x.device)) * math.pi
    angles = x.unsqueeze(-2) * freqs.unsqueeze(-1)  # [..., L, 3]
    bands = torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)  # [..., L, 6]
    if weights is not None:
        bands = bands * weights.to(x.dtype).unsqueeze(-1)
    return torch.cat([x, bands.flatten(-2)], dim=-1)


def encode(x, config: EncodingConfig) -> np.ndarray:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return positional_encoding(t, config.num_bands).numpy()


def encode_masked(x, config: EncodingConfig, alpha: float) -> np.ndarray:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    w = torch.as_tensor(band_weights(alpha, config.num_bands))
    return positional_encoding(t, config.num_bands, w).numpy()
