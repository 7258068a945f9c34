"""
Utility functions shared across the package.
Hashing, seed derivation, timestamps, safe parsing and window helpers.
"""

import json
import time
import hashlib
import logging
from typing import Any, List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SEED_MODULUS = 2 ** 31 - 1


def get_current_timestamp() -> int:
    """Get current timestamp in seconds."""
    return int(time.time())


def format_timestamp(timestamp: int) -> str:
    """Format timestamp to human-readable string."""
    try:
        import datetime
        dt = datetime.datetime.fromtimestamp(timestamp)
        return dt.strftime('%Y-%m-%d %H:%M:%S')
    except (OverflowError, OSError, ValueError):
        return str(timestamp)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


def config_hash(data: Any) -> str:
    """md5 of the canonical JSON form of a configuration mapping."""
    return hashlib.md5(canonical_json(data).encode()).hexdigest()


def derive_seed(master_seed: int, *keys: Any) -> int:
    """Independent per-item seed from the master seed and any identifying keys."""
    data = f"{master_seed}_" + "_".join(str(k) for k in keys)
    digest = hashlib.md5(data.encode()).hexdigest()
    return int(digest[:8], 16) % SEED_MODULUS


def label_seed(label: str) -> int:
    """Stable seed for a text label."""
    return int(hashlib.md5(label.encode('utf-8')).hexdigest()[:8], 16)


def safe_int(value: Any, default: int = 0) -> int:
    """Safely convert value to integer with default."""
    try:
        return int(value)
    except (ValueError, TypeError):
        return default


def parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ('1', 'true', 'yes', 'on')


def sliding_windows(length: int, window: int, stride: int) -> List[Tuple[int, int]]:
    """[start, end) windows covering `length`; the last window is aligned to the end."""
    if window <= 0 or stride <= 0:
        raise ValueError(f"window and stride must be positive, got {window} and {stride}")
    if length <= window:
        return [(0, length)]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return [(s, s + window) for s in starts]


def crossfade_weights(length: int, window: int, stride: int) -> List[np.ndarray]:
    """Per-window blending weights with linear ramps in the overlaps.

    Adjacent pairs sum to one; callers still divide by the per-frame total
    because an end-aligned last window can overlap more than one neighbour.
    """
    windows = sliding_windows(length, window, stride)
    weights = []
    for i, (start, end) in enumerate(windows):
        w = np.ones(end - start)
        if i > 0:
            overlap = windows[i - 1][1] - start
            if overlap > 0:
                w[:overlap] = np.arange(1, overlap + 1) / (overlap + 1)
        if i + 1 < len(windows):
            overlap = end - windows[i + 1][0]
            if overlap > 0:
                w[-overlap:] = np.arange(overlap, 0, -1) / (overlap + 1)
        weights.append(w)
    return weights
