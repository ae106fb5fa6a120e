from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np


class AccessClass(IntEnum):
    LOCAL_L2_HIT = 0
    LOCAL_DRAM = 1
    REMOTE_L2_HIT = 2
    REMOTE_DRAM = 3


CLASS_NAMES = ("local_l2_hit", "local_dram", "remote_l2_hit", "remote_dram")


@dataclass(frozen=True)
class LatencyModel:
    """Truncated-Gaussian cycle distributions for the four access classes."""

    local_l2_hit: tuple[float, float] = (270.0, 12.0)
    local_dram: tuple[float, float] = (470.0, 25.0)
    remote_l2_hit: tuple[float, float] = (650.0, 20.0)
    remote_dram: tuple[float, float] = (850.0, 30.0)
    contention_coeff: float = 8.0

    def __post_init__(self):
        m = self.means
        if not (m[0] < m[1] < m[2] < m[3]):
            raise ValueError(f"class means must be strictly increasing, got {m}")
        if any(s < 0 for s in self.sigmas) or self.contention_coeff < 0:
            raise ValueError("sigmas and contention_coeff must be non-negative")

    @property
    def means(self) -> tuple[float, ...]:
        return tuple(float(c[0]) for c in self._classes())

    @property
    def sigmas(self) -> tuple[float, ...]:
        return tuple(float(c[1]) for c in self._classes())

    def _classes(self):
        return (self.local_l2_hit, self.local_dram, self.remote_l2_hit, self.remote_dram)

    def mean_array(self) -> np.ndarray:
        return np.array(self.means, dtype=np.float64)

    def sigma_array(self) -> np.ndarray:
        return np.array(self.sigmas, dtype=np.float64)

    def extra_sigma(self, active_probed_sets: int) -> float:
        return self.contention_coeff * max(0, active_probed_sets - 1)

    def scaled(self, sigma_scale: float = 1.0, contention_coeff: float | None = None) -> "LatencyModel":
        """Copy with every sigma multiplied by ``sigma_scale``."""
        cls = [(m, s * sigma_scale) for m, s in self._classes()]
        return replace(
            self,
            local_l2_hit=cls[0],
            local_dram=cls[1],
            remote_l2_hit=cls[2],
            remote_dram=cls[3],
            contention_coeff=self.contention_coeff if contention_coeff is None else contention_coeff,
        )

    def midpoints(self) -> tuple[float, float, float]:
        m = self.means
        return tuple((m[i] + m[i + 1]) / 2 for i in range(3))


ZERO_NOISE = LatencyModel().scaled(0.0, 0.0)
