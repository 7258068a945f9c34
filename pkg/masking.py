"""
Masking patterns and the adaptive weight rule.

Pattern A masks a fixed number of joints in every frame, pattern B a fixed
number of cells anywhere in the T x J grid, pattern C draws cells without
replacement with probability proportional to the adaptive weight
w = omega * exp(-sum_v rho_v) + sigma.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


class MaskingError(ValueError):
    """Base class for masking errors."""


class MissingSignals(MaskingError):
    """Pattern C needs quality signals."""


class RatioOutOfRange(MaskingError):
    """Masking ratio must lie strictly between 0 and 1."""


class InvalidSignals(MaskingError):
    """Quality signals have the wrong shape or values outside [0, 1]."""


class MaskPattern(str, Enum):
    A = 'A'
    B = 'B'
    C = 'C'


@dataclass(frozen=True)
class MaskingConfig:
    pattern: MaskPattern = MaskPattern.A
    ratio: float = 0.5
    omega: float = 1.0
    seed: int = 0
    force_invisible: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'pattern', MaskPattern(self.pattern))
        if not 0.0 < self.ratio < 1.0:
            raise RatioOutOfRange(f"masking ratio must be in (0, 1), got {self.ratio}")
        if self.omega < 0:
            raise MaskingError(f"omega must be >= 0, got {self.omega}")


@dataclass(frozen=True)
class QualitySignals:
    """Per-view confidences rho (V x T x J) and triangulation errors sigma (T x J)."""

    rho: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if rho.ndim != 3 or sigma.shape != rho.shape[1:]:
            raise InvalidSignals(f"rho must be V x T x J and sigma T x J, got {rho.shape} and {sigma.shape}")
        for name, arr in (('rho', rho), ('sigma', sigma)):
            if not np.all((arr >= 0.0) & (arr <= 1.0)):
                raise InvalidSignals(f"{name} entries must lie in [0, 1]")
        rho.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, 'rho', rho)
        object.__setattr__(self, 'sigma', sigma)

    def reorder_joints(self, order) -> 'QualitySignals':
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.sigma.shape[1])):
            raise InvalidSignals(f"joint order must permute 0..{self.sigma.shape[1] - 1}, got {order.tolist()}")
        return QualitySignals(self.rho[:, :, order], self.sigma[:, order])

    @property
    def invisible(self) -> np.ndarray:
        """T x J cells with zero confidence in every view."""
        return np.all(self.rho == 0.0, axis=0)


def adaptive_weight(rho_col, sigma_val: float, omega: float) -> float:
    """w = omega * exp(-sum of confidences) + sigma for one (t, j) cell."""
    return float(omega * np.exp(-np.sum(rho_col)) + sigma_val)


def adaptive_weights(signals: QualitySignals, omega: float) -> np.ndarray:
    return omega * np.exp(-signals.rho.sum(axis=0)) + signals.sigma


def _weighted_draw(weights: np.ndarray, count: int, rng: np.random.Generator,
                   chosen: np.ndarray) -> np.ndarray:
    """Sequential draws without replacement, each proportional to the remaining weights.

    Equal cumulative positions resolve to the lowest flat index.
    """
    w = np.where(chosen, 0.0, weights).astype(np.float64)
    for _ in range(count):
        cumulative = np.cumsum(w)
        if cumulative[-1] <= 0:
            # Remaining weights all zero: uniform over the unchosen cells
            w = np.where(chosen, 0.0, 1.0)
            cumulative = np.cumsum(w)
        u = rng.random() * cumulative[-1]
        index = int(np.searchsorted(cumulative, u, side='right'))
        if index >= w.size:
            index = int(np.flatnonzero(w)[-1])
        chosen[index] = True
        w[index] = 0.0
    return chosen


def build_mask(cfg: MaskingConfig, T: int, J: int, signals: Optional[QualitySignals] = None) -> np.ndarray:
    """T x J boolean mask (True = masked) for the configured pattern."""
    rng = np.random.default_rng(cfg.seed)
    mask = np.zeros((T, J), dtype=bool)

    if cfg.pattern == MaskPattern.A:
        per_frame = int(np.floor(cfg.ratio * J))
        for t in range(T):
            mask[t, rng.choice(J, size=per_frame, replace=False)] = True
        return mask

    target = int(np.floor(cfg.ratio * T * J))
    if cfg.pattern == MaskPattern.B:
        mask.reshape(-1)[rng.choice(T * J, size=target, replace=False)] = True
        return mask

    if signals is None:
        raise MissingSignals("pattern C needs quality signals (rho, sigma)")
    if signals.sigma.shape != (T, J):
        raise InvalidSignals(f"signals cover {signals.sigma.shape}, mask is {(T, J)}")

    chosen = np.zeros(T * J, dtype=bool)
    if cfg.force_invisible:
        chosen |= signals.invisible.reshape(-1)
        if chosen.sum() > target:
            logger.debug(f"{int(chosen.sum())} invisible cells exceed the target of {target}")
    remaining = max(0, target - int(chosen.sum()))
    weights = adaptive_weights(signals, cfg.omega).reshape(-1)
    chosen = _weighted_draw(weights, remaining, rng, chosen)
    return chosen.reshape(T, J)
