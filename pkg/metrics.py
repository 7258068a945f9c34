"""
Evaluation metrics and the report they are written into.

Positions are in meters on input; MPJPE and Accel are reported in millimeters.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from motion_data import Skeleton

logger = logging.getLogger(__name__)

MM_PER_M = 1000.0
PCP_FRACTION = 0.5
PRECISION_THRESHOLD_M = 0.2
UNIT_QUATERNION_TOLERANCE = 1e-6
POWER_FLOOR = 1e-20

UNITS = {
    'accel': 'mm/frame^2',
    'l2p': '-',
    'l2q': '-',
    'mpjpe': 'mm',
    'npss': '-',
    'pcp': '%',
    'precision': '%',
    'recall': '%',
}
POSITION_METRICS = ('accel', 'l2p', 'mpjpe', 'pcp', 'precision', 'recall')
ROTATION_METRICS = ('l2q', 'npss')


class MetricError(ValueError):
    """Base class for metric errors."""


class ShapeMismatch(MetricError):
    """Prediction and ground truth shapes differ."""


class ZeroLengthLimb(MetricError):
    """A ground-truth limb has zero length, PCP is undefined."""


class EmptySets(MetricError):
    """No estimated or no ground-truth joints to score."""


class TooShort(MetricError):
    """Sequence too short for a temporal metric."""


class NotUnitQuaternion(MetricError):
    """A rotation is not a unit quaternion."""


@dataclass(frozen=True)
class SkeletonSpec:
    """Limbs scored by PCP, left/right pairs and the mid-hip joint."""

    limbs: Tuple[Tuple[int, int], ...]
    lr_pairs: Tuple[Tuple[int, int], ...] = ()
    mid_hip: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'limbs', tuple((int(a), int(b)) for a, b in self.limbs))
        object.__setattr__(self, 'lr_pairs', tuple((int(a), int(b)) for a, b in self.lr_pairs))
        if not self.limbs:
            raise MetricError("skeleton needs at least one limb")

    @classmethod
    def from_skeleton(cls, skeleton: Skeleton) -> 'SkeletonSpec':
        return cls(tuple(skeleton.limbs), skeleton.lr_pairs, skeleton.mid_hip)

    def check(self, J: int):
        indices = [i for pair in self.limbs + self.lr_pairs for i in pair] + [self.mid_hip]
        if min(indices) < 0 or max(indices) >= J:
            raise MetricError(f"skeleton indices must lie in [0, {J}), got {min(indices)}..{max(indices)}")


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def _positions(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = _pair(pred, gt)
    if pred.ndim < 2 or pred.shape[-1] != 3:
        raise ShapeMismatch(f"positions must end in (J, 3), got {pred.shape}")
    return pred, gt


def pcp(pred, gt, skeleton: SkeletonSpec, fraction: float = PCP_FRACTION) -> float:
    """Percentage of limbs whose two endpoint errors are both below fraction * limb length."""
    pred, gt = _positions(pred, gt)
    skeleton.check(pred.shape[-2])
    a, b = (np.array(idx) for idx in zip(*skeleton.limbs))
    lengths = np.linalg.norm(gt[..., a, :] - gt[..., b, :], axis=-1)
    if np.any(lengths <= 0):
        raise ZeroLengthLimb(f"{int(np.sum(lengths <= 0))} ground-truth limb(s) have zero length")
    errors = np.linalg.norm(pred - gt, axis=-1)
    limit = fraction * lengths
    correct = (errors[..., a] < limit) & (errors[..., b] < limit)
    return float(100.0 * np.mean(correct))


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error in millimeters."""
    pred, gt = _positions(pred, gt)
    return float(MM_PER_M * np.mean(np.linalg.norm(pred - gt, axis=-1)))


def precision_recall(pred, gt, threshold: float = PRECISION_THRESHOLD_M) -> Tuple[float, float]:
    """Precision over estimated joints and recall over ground-truth joints.

    Rows correspond one to one; a NaN row in pred is a joint with no estimate
    and a NaN row in gt a joint with no ground truth. An estimate is correct
    when its error is strictly below the threshold.
    """
    if threshold <= 0:
        raise MetricError(f"threshold must be > 0, got {threshold}")
    pred, gt = _positions(pred, gt)
    pred = pred.reshape(-1, 3)
    gt = gt.reshape(-1, 3)
    estimated = np.all(np.isfinite(pred), axis=1)
    expected = np.all(np.isfinite(gt), axis=1)
    if not estimated.any() or not expected.any():
        raise EmptySets(f"{int(estimated.sum())} estimated and {int(expected.sum())} ground-truth joints")
    both = estimated & expected
    errors = np.full(len(pred), np.inf)
    errors[both] = np.linalg.norm(pred[both] - gt[both], axis=1)
    correct = int(np.sum(errors < threshold))
    unmatched = int(np.sum(estimated & ~expected))
    if unmatched:
        logger.debug(f"{unmatched} estimated joint(s) have no ground truth")
    return 100.0 * correct / int(estimated.sum()), 100.0 * correct / int(expected.sum())


def accel_error(pred, gt, fps: Optional[float] = None) -> float:
    """Mean norm of the difference of second finite differences over time (axis 0).

    Millimeters per frame squared, or per second squared when fps is given.
    """
    pred, gt = _positions(pred, gt)
    if pred.shape[0] < 3:
        raise TooShort(f"acceleration needs at least 3 frames, got {pred.shape[0]}")
    accel = np.diff(pred, n=2, axis=0) - np.diff(gt, n=2, axis=0)
    value = MM_PER_M * float(np.mean(np.linalg.norm(accel, axis=-1)))
    return value * fps ** 2 if fps else value


def _per_frame(x: np.ndarray) -> np.ndarray:
    if x.ndim == 0 or x.shape[0] == 0:
        raise TooShort("sequence has no frames")
    return x.reshape(x.shape[0], -1)


def l2p(pred, gt) -> float:
    """Mean over frames of the L2 norm of the whole-pose position difference."""
    pred, gt = _pair(pred, gt)
    diff = _per_frame(pred - gt)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def _check_unit(q: np.ndarray, name: str):
    if q.shape[-1] != 4:
        raise ShapeMismatch(f"{name} quaternions must end in 4, got {q.shape}")
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_QUATERNION_TOLERANCE):
        raise NotUnitQuaternion(f"{name} has quaternion norms up to {np.max(np.abs(norms - 1.0)):.3g} off unit")


def l2q(pred, gt) -> float:
    """Like l2p over quaternions, each joint taking the closer of q and -q."""
    pred, gt = _pair(pred, gt)
    _check_unit(pred, 'prediction')
    _check_unit(gt, 'ground truth')
    diff = np.minimum(np.linalg.norm(pred - gt, axis=-1), np.linalg.norm(pred + gt, axis=-1))
    return float(np.mean(np.linalg.norm(_per_frame(diff), axis=1)))


def power_spectrum(x: np.ndarray) -> np.ndarray:
    """Squared DFT magnitudes along time per channel, zero-frequency bin dropped."""
    return np.abs(np.fft.rfft(x, axis=0))[1:] ** 2


def npss(pred, gt) -> float:
    """Power-weighted earth mover distance between normalized spectral CDFs.

    Channels are everything after the time axis. Weights are the ground-truth
    channel powers; with no ground-truth power at all the score is 0.
    """
    pred, gt = _pair(pred, gt)
    if pred.ndim == 0 or pred.shape[0] < 2:
        raise TooShort(f"NPSS needs at least 2 frames, got shape {pred.shape}")
    spectra, cdfs = [], []
    for x in (pred, gt):
        x = _per_frame(x)
        power = power_spectrum(x)
        total = power.sum(axis=0)
        # rounding leaves ~1e-30 power in constant channels
        flat = total <= POWER_FLOOR * x.shape[0] * np.sum(x ** 2, axis=0)
        power[:, flat] = 0.0
        total[flat] = 0.0
        normalized = np.divide(power, total, out=np.zeros_like(power), where=total > 0)
        spectra.append(total)
        cdfs.append(np.cumsum(normalized, axis=0))
    emd = np.sum(np.abs(cdfs[0] - cdfs[1]), axis=0)
    weights = spectra[1]
    if weights.sum() == 0:
        return 0.0
    return float(np.sum(emd * weights) / np.sum(weights))


def relative_change(before: float, after: float) -> float:
    """|after - before| / before."""
    if before == 0:
        if after == 0:
            return 0.0
        raise MetricError("relative change from a zero baseline is undefined")
    return abs(after - before) / abs(before)


# --- reports --------------------------------------------------------------------

def unit_of(name: str) -> str:
    return UNITS.get(name.rsplit('.', 1)[-1], '-')


@dataclass
class MetricReport:
    """Named scalar results with units and run metadata."""

    values: Dict[str, float] = field(default_factory=dict)
    units: Dict[str, str] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, value: float, unit: Optional[str] = None) -> 'MetricReport':
        value = float(value)
        unit = unit or unit_of(name)
        if not np.isfinite(value):
            raise MetricError(f"metric {name} is not finite")
        if value < 0 or (unit == '%' and value > 100.0 + 1e-9):
            raise MetricError(f"metric {name} = {value} outside its range")
        self.values[name] = value
        self.units[name] = unit
        return self

    def update(self, other: 'MetricReport', prefix: str = '') -> 'MetricReport':
        for name in other.values:
            self.add(prefix + name, other.values[name], other.units[name])
        return self

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def to_text(self) -> str:
        lines = [f"# {key} {self.metadata[key]}" for key in sorted(self.metadata)]
        lines += [f"{name} {self.values[name]:.6f} {self.units[name]}" for name in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        data = {
            'metadata': self.metadata,
            'metrics': {name: {'unit': self.units[name], 'value': self.values[name]}
                        for name in self.values},
        }
        return json.dumps(data, indent=2, sort_keys=True, default=str) + "\n"

    @classmethod
    def from_json(cls, text: str) -> 'MetricReport':
        data = json.loads(text)
        report = cls(metadata=dict(data.get('metadata', {})))
        for name, entry in data.get('metrics', {}).items():
            report.add(name, entry['value'], entry['unit'])
        return report


def _unknown(names: Iterable[str], allowed: Sequence[str]) -> List[str]:
    return sorted(set(names) - set(allowed))


def evaluate_positions(pred, gt, skeleton: Optional[SkeletonSpec] = None,
                       names: Sequence[str] = POSITION_METRICS) -> MetricReport:
    """Position metrics of a T x J x 3 prediction against ground truth."""
    unknown = _unknown(names, POSITION_METRICS)
    if unknown:
        raise MetricError(f"unknown position metrics {unknown}")
    report = MetricReport()
    for name in sorted(set(names)):
        if name == 'pcp':
            if skeleton is None:
                raise MetricError("PCP needs a skeleton")
            report.add('pcp', pcp(pred, gt, skeleton))
        elif name == 'mpjpe':
            report.add('mpjpe', mpjpe(pred, gt))
        elif name == 'accel':
            report.add('accel', accel_error(pred, gt))
        elif name == 'l2p':
            report.add('l2p', l2p(pred, gt))
        elif name == 'precision':
            report.add('precision', precision_recall(pred, gt)[0])
        elif name == 'recall':
            report.add('recall', precision_recall(pred, gt)[1])
    return report


def evaluate_rotations(pred_q, gt_q, names: Sequence[str] = ROTATION_METRICS) -> MetricReport:
    """Quaternion metrics of T x J x 4 sequences."""
    unknown = _unknown(names, ROTATION_METRICS)
    if unknown:
        raise MetricError(f"unknown rotation metrics {unknown}")
    report = MetricReport()
    if 'l2q' in names:
        report.add('l2q', l2q(pred_q, gt_q))
    if 'npss' in names:
        report.add('npss', npss(pred_q, gt_q))
    return report
