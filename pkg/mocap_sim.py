"""
Synthetic multi-view capture.

Cameras project synthetic people into V views, the detector is replaced by
Gaussian pixel noise and random occlusion, people are matched across views by
the epipolar distance of their mid-hips, joints are triangulated with the
direct linear transform and people are linked frame to frame by nearest
centroid. The output is low-quality 3D motion plus the per-joint confidence
and triangulation error used by adaptive masking.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from data_manager import FormatError, atomic_write_text, read_text
from masking import QualitySignals
from motion_data import MotionSequence

logger = logging.getLogger(__name__)

RIG_MAGIC = 'mmdm-rig'
RIG_VERSION = 'v1'

DEFAULT_RIG_VIEWS = 4
DEFAULT_RIG_RADIUS = 5.0
DEFAULT_RIG_HEIGHT = 1.6
DEFAULT_IMAGE_SIZE = (1280, 1024)
DEFAULT_FOCAL = 1000.0

SIGMA_MAX_PX = 20.0
MIN_CONFIDENCE = 1e-6
CENTER_TOLERANCE = 1e-9


class MocapError(ValueError):
    """Base class for capture simulation errors."""


class BehindCamera(MocapError):
    """A point lies on or behind the camera plane."""


class DegenerateGeometry(MocapError):
    """Camera geometry that cannot define the requested quantity."""


class InfeasibleAll(MocapError):
    """Every complete assignment uses an infinite cost entry."""


class InsufficientViews(MocapError):
    """Triangulation needs at least two visible views."""


# --- cameras -------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera, P maps homogeneous meters to homogeneous pixels."""

    P: np.ndarray
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        if P.shape != (3, 4) or not np.all(np.isfinite(P)):
            raise MocapError(f"projection matrix must be a finite 3 x 4 array, got shape {P.shape}")
        det = np.linalg.det(P[:, :3])
        if abs(det) < 1e-12 * max(1.0, np.abs(P[:, :3]).max() ** 3):
            raise DegenerateGeometry("left 3 x 3 block of the projection matrix is singular")
        # P and -P describe the same camera; keep the one with positive depth in front
        if det < 0:
            P = -P
        P.flags.writeable = False
        width, height = (int(v) for v in self.image_size)
        if width <= 0 or height <= 0:
            raise MocapError(f"image size must be positive, got {self.image_size}")
        object.__setattr__(self, 'P', P)
        object.__setattr__(self, 'image_size', (width, height))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (null space of P)."""
        return -np.linalg.solve(self.P[:, :3], self.P[:, 3])

    def homogeneous(self, points: np.ndarray) -> np.ndarray:
        return points @ self.P[:, :3].T + self.P[:, 3]


@dataclass(frozen=True)
class CameraRig:
    cameras: Tuple[CameraModel, ...]

    def __post_init__(self):
        cameras = tuple(self.cameras)
        if not cameras:
            raise MocapError("a rig needs at least one camera")
        object.__setattr__(self, 'cameras', cameras)

    @property
    def V(self) -> int:
        return len(self.cameras)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, index: int) -> CameraModel:
        return self.cameras[index]

    def __iter__(self):
        return iter(self.cameras)


def intrinsics(focal: float, image_size: Tuple[int, int]) -> np.ndarray:
    width, height = image_size
    return np.array([[focal, 0.0, width / 2.0],
                     [0.0, focal, height / 2.0],
                     [0.0, 0.0, 1.0]])


def look_at_camera(position, target, focal: float = DEFAULT_FOCAL,
                   image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE,
                   up=(0.0, 1.0, 0.0)) -> CameraModel:
    """Camera at `position` whose optical axis passes through `target`.

    Camera axes: x to the image right, y to the image bottom, z forward.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise DegenerateGeometry("camera position coincides with its target")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise DegenerateGeometry("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    extrinsics = np.hstack([R, (-R @ position)[:, None]])
    return CameraModel(intrinsics(focal, image_size) @ extrinsics, image_size)


def default_rig(views: int = DEFAULT_RIG_VIEWS, radius: float = DEFAULT_RIG_RADIUS,
                height: float = DEFAULT_RIG_HEIGHT, focal: float = DEFAULT_FOCAL,
                image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE) -> CameraRig:
    """Cameras evenly spaced on a circle around the origin, all looking at it."""
    cameras = []
    for v in range(views):
        angle = 2.0 * np.pi * v / views + np.pi / 4.0
        position = (radius * np.cos(angle), height, radius * np.sin(angle))
        cameras.append(look_at_camera(position, (0.0, 0.0, 0.0), focal, image_size))
    return CameraRig(tuple(cameras))


def project(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """Pixel coordinates of points (... x 3) by perspective division of P [x; 1]."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 3:
        raise MocapError(f"points must have 3 coordinates, got shape {points.shape}")
    h = cam.homogeneous(points)
    if np.any(h[..., 2] <= 0):
        raise BehindCamera(f"{int(np.sum(h[..., 2] <= 0))} point(s) on or behind the camera plane")
    return h[..., :2] / h[..., 2:3]


# --- rig file format -----------------------------------------------------------

def format_rig(rig: CameraRig) -> str:
    lines = [f"{RIG_MAGIC} {RIG_VERSION} {rig.V}"]
    for v, cam in enumerate(rig):
        lines.append(f"camera {v} {cam.image_size[0]} {cam.image_size[1]}")
        for row in cam.P:
            lines.append(" ".join(f"{value:.17g}" for value in row))
    return "\n".join(lines) + "\n"


def _parse_row(tokens: List[str], count: int, line: int, what: str, kind=float) -> List:
    if len(tokens) != count:
        raise FormatError(line, f"expected {count} {what}, got {len(tokens)}")
    try:
        return [kind(tok) for tok in tokens]
    except ValueError:
        raise FormatError(line, f"{what} must be numbers") from None


def parse_rig(text: str) -> CameraRig:
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines:
        raise FormatError(1, "empty file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != RIG_MAGIC or header[1] != RIG_VERSION:
        raise FormatError(1, f"expected '{RIG_MAGIC} {RIG_VERSION} <V>'")
    (V,) = _parse_row(header[2:], 1, 1, 'camera count', int)
    if V < 1:
        raise FormatError(1, f"camera count must be >= 1, got {V}")

    cameras = []
    for v in range(V):
        base = 1 + 4 * v
        if base + 3 >= len(lines):
            raise FormatError(min(base + 1, len(lines) + 1), f"unexpected end of file in camera {v}")
        block = lines[base].split()
        if len(block) != 4 or block[0] != 'camera':
            raise FormatError(base + 1, "expected 'camera <index> <width> <height>'")
        index, width, height = _parse_row(block[1:], 3, base + 1, 'camera fields', int)
        if index != v:
            raise FormatError(base + 1, f"expected camera {v}, got {index}")
        rows = [_parse_row(lines[base + 1 + r].split(), 4, base + 2 + r, 'projection values')
                for r in range(3)]
        if not np.all(np.isfinite(rows)):
            raise FormatError(base + 2, "projection values must be finite")
        try:
            cameras.append(CameraModel(np.array(rows), (width, height)))
        except MocapError as e:
            raise FormatError(base + 1, str(e)) from None

    for extra in range(1 + 4 * V, len(lines)):
        if lines[extra].strip():
            raise FormatError(extra + 1, "unexpected content after the last camera")
    return CameraRig(tuple(cameras))


def save_rig(rig: CameraRig, path: str):
    atomic_write_text(path, format_rig(rig))
    logger.debug(f"Saved rig with {rig.V} cameras to {path}")


def load_rig(path: str) -> CameraRig:
    return parse_rig(read_text(path))


# --- detections ----------------------------------------------------------------

class PersonView(NamedTuple):
    """One detected person in one view: J x 2 pixels and J confidences."""

    p: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class DetectionSet:
    """Per-view 2D detections.

    Slot n of view v at frame t holds person identity[v, t, n]; the simulator
    shuffles slots so matching has to recover the correspondence.
    Occluded joints have rho = 0 and pixel coordinates 0.
    """

    p: np.ndarray
    rho: np.ndarray
    identity: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64)
        rho = np.array(self.rho, dtype=np.float64)
        identity = np.array(self.identity, dtype=np.int64)
        if p.ndim != 5 or p.shape[-1] != 2 or rho.shape != p.shape[:-1]:
            raise MocapError(f"detections must be N x V x T x J x 2 with matching rho, "
                             f"got {p.shape} and {rho.shape}")
        N, V, T, _ = rho.shape
        if identity.shape != (V, T, N):
            raise MocapError(f"identity must be {(V, T, N)}, got {identity.shape}")
        if not np.all((rho >= 0.0) & (rho <= 1.0)):
            raise MocapError("confidences must lie in [0, 1]")
        for arr in (p, rho, identity):
            arr.flags.writeable = False
        object.__setattr__(self, 'p', p)
        object.__setattr__(self, 'rho', rho)
        object.__setattr__(self, 'identity', identity)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.rho.shape

    def person_view(self, slot: int, v: int, t: int) -> PersonView:
        return PersonView(self.p[slot, v, t], self.rho[slot, v, t])

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {'p': self.p, 'rho': self.rho, 'identity': self.identity}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'DetectionSet':
        missing = {'p', 'rho', 'identity'} - set(arrays)
        if missing:
            raise MocapError(f"detection arrays missing {sorted(missing)}")
        return cls(arrays['p'], arrays['rho'], arrays['identity'])


def simulate_detections(scene: Sequence[MotionSequence], rig: CameraRig, noise_px: float,
                        occl_prob: Union[float, Sequence[float]], seed: int,
                        noise_scale: Optional[float] = None, shuffle: bool = True) -> DetectionSet:
    """Project every person into every view, add pixel noise and occlusion.

    occl_prob is a scalar or one probability per joint. Visible joints get
    rho = exp(-|noise| / noise_scale) clipped to [1e-6, 1]; noise_scale
    defaults to noise_px (1 when noise_px is 0). Joints on or behind a camera
    plane are occluded in that view.
    """
    if not scene:
        raise MocapError("scene has no people")
    if noise_px < 0:
        raise MocapError(f"noise_px must be >= 0, got {noise_px}")
    shapes = {(m.T, m.J, m.d) for m in scene}
    if len(shapes) != 1 or next(iter(shapes))[2] != 3:
        raise MocapError(f"people must share T and J and have d = 3, got {sorted(shapes)}")
    T, J, _ = next(iter(shapes))
    N, V = len(scene), rig.V
    occl = np.broadcast_to(np.asarray(occl_prob, dtype=np.float64), (J,))
    if np.any((occl < 0) | (occl > 1)):
        raise MocapError("occlusion probabilities must lie in [0, 1]")
    scale = noise_scale if noise_scale is not None else (noise_px if noise_px > 0 else 1.0)
    if scale <= 0:
        raise MocapError(f"noise_scale must be > 0, got {scale}")

    rng = np.random.default_rng(seed)
    positions = np.stack([m.values for m in scene])

    clean = np.zeros((N, V, T, J, 2))
    in_front = np.zeros((N, V, T, J), dtype=bool)
    for v, cam in enumerate(rig):
        h = cam.homogeneous(positions)
        in_front[:, v] = h[..., 2] > 0
        depth = np.where(in_front[:, v], h[..., 2], 1.0)
        clean[:, v] = h[..., :2] / depth[..., None]

    noise = rng.normal(0.0, noise_px, size=clean.shape) if noise_px > 0 else np.zeros_like(clean)
    occluded = rng.random((N, V, T, J)) < occl[None, None, None, :]
    occluded |= ~in_front

    rho = np.clip(np.exp(-np.linalg.norm(noise, axis=-1) / scale), MIN_CONFIDENCE, 1.0)
    rho[occluded] = 0.0
    p = np.where(occluded[..., None], 0.0, clean + noise)

    identity = np.tile(np.arange(N), (V, T, 1))
    if shuffle and N > 1:
        for v in range(V):
            for t in range(T):
                identity[v, t] = rng.permutation(N)
        for v in range(V):
            for t in range(T):
                p[:, v, t] = p[identity[v, t], v, t]
                rho[:, v, t] = rho[identity[v, t], v, t]

    logger.debug(f"Simulated detections for {N} people, {V} views, {T} frames "
                 f"(noise {noise_px} px, occluded {occluded.mean():.3f})")
    return DetectionSet(p, rho, identity)


# --- epipolar matching -----------------------------------------------------------

def skew(x: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(x) @ y == cross(x, y)."""
    return np.array([[0.0, -x[2], x[1]],
                     [x[2], 0.0, -x[0]],
                     [-x[1], x[0], 0.0]])


def fundamental_matrix(cam_a: CameraModel, cam_b: CameraModel) -> np.ndarray:
    """F with x_b^T F x_a = 0 for corresponding pixels, F = [e_b]x P_b P_a^+."""
    center_a = cam_a.center
    if np.linalg.norm(center_a - cam_b.center) < CENTER_TOLERANCE:
        raise DegenerateGeometry("camera centers coincide, no epipolar geometry")
    epipole_b = cam_b.P @ np.append(center_a, 1.0)
    return skew(epipole_b) @ cam_b.P @ np.linalg.pinv(cam_a.P)


def _line_distance(line: np.ndarray, point: np.ndarray) -> float:
    norm = math.hypot(line[0], line[1])
    if norm == 0.0:
        return 0.0
    return abs(line[0] * point[0] + line[1] * point[1] + line[2]) / norm


def _symmetric_distance(F_ab: np.ndarray, F_ba: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> float:
    """Mean of the four point-to-line distances from both fundamental matrices.

    Swapping the views permutes the four terms and fsum is order independent,
    so the result is bit-for-bit symmetric.
    """
    x_a = np.append(x_a, 1.0)
    x_b = np.append(x_b, 1.0)
    return math.fsum((_line_distance(F_ab @ x_a, x_b), _line_distance(F_ab.T @ x_b, x_a),
                      _line_distance(F_ba @ x_b, x_a), _line_distance(F_ba.T @ x_a, x_b))) / 4.0


def epipolar_midhip_cost(det_a: PersonView, det_b: PersonView, cam_a: CameraModel,
                         cam_b: CameraModel, mid_hip: int = 0) -> float:
    """Symmetric epipolar distance in pixels between two mid-hip detections.

    A point 5 px off its epipolar line in both images costs 5.
    Returns inf when the mid-hip is invisible in either view.
    """
    F_ab = fundamental_matrix(cam_a, cam_b)
    F_ba = fundamental_matrix(cam_b, cam_a)
    if det_a.rho[mid_hip] == 0.0 or det_b.rho[mid_hip] == 0.0:
        return math.inf
    return _symmetric_distance(F_ab, F_ba, det_a.p[mid_hip], det_b.p[mid_hip])


# --- assignment ------------------------------------------------------------------

def _hungarian_rows(cost: np.ndarray) -> np.ndarray:
    """Potentials method for an n x m matrix with n <= m; returns the column per row."""
    n, m = cost.shape
    row_of = np.full(m + 1, -1, dtype=np.int64)   # row assigned to each column, m is a sentinel
    u = np.zeros(n)                               # row potentials
    v = np.zeros(m + 1)                           # column potentials

    for r in range(n):
        col = m
        row_of[col] = r
        min_to = np.full(m, np.inf)
        prev = np.full(m, -1, dtype=np.int64)
        in_tree = np.zeros(m + 1, dtype=bool)

        while row_of[col] != -1:
            in_tree[col] = True
            i = row_of[col]
            free = ~in_tree[:m]
            reduced = cost[i] - u[i] - v[:m]
            better = free & (reduced < min_to)
            min_to[better] = reduced[better]
            prev[better] = col
            candidates = np.where(free, min_to, np.inf)
            next_col = int(np.argmin(candidates))
            delta = candidates[next_col]

            tree = np.flatnonzero(in_tree)
            u[row_of[tree]] += delta
            v[tree] -= delta
            min_to[free] -= delta
            col = next_col

        while col != m:
            back = prev[col]
            row_of[col] = row_of[back]
            col = back

    cols = np.full(n, -1, dtype=np.int64)
    for c in range(m):
        if row_of[c] >= 0:
            cols[row_of[c]] = c
    return cols


def hungarian_match(cost: np.ndarray, allow_partial: bool = False) -> List[Tuple[int, int]]:
    """Minimum total cost assignment over min(n, m) (row, column) pairs.

    Infinite entries are replaced by a cost larger than any finite assignment,
    so an infinite pair is chosen only when no complete finite assignment exists.
    In that case InfeasibleAll is raised, or with allow_partial the infinite
    pairs are dropped from the result.
    """
    cost = np.array(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MocapError(f"cost must be a matrix, got shape {cost.shape}")
    if np.any(np.isnan(cost)) or np.any(cost == -np.inf):
        raise MocapError("cost entries must be finite or +inf")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    finite = np.isfinite(cost)
    if not finite.any():
        raise InfeasibleAll(f"all {n} x {m} costs are infinite")

    values = cost[finite]
    big = (values.max() - values.min() + 1.0) * (min(n, m) + 1) + np.abs(values).max()
    work = np.where(finite, cost, big)

    transposed = n > m
    if transposed:
        work = work.T
    cols = _hungarian_rows(work)
    pairs = [(c, r) if transposed else (r, c) for r, c in enumerate(cols)]
    pairs.sort()

    infeasible = [(r, c) for r, c in pairs if not finite[r, c]]
    if infeasible:
        if not allow_partial:
            raise InfeasibleAll(f"every complete assignment uses an infinite cost ({len(infeasible)} pair(s))")
        pairs = [pair for pair in pairs if finite[pair]]
    return pairs


# --- triangulation ---------------------------------------------------------------

def triangulate(points2d: np.ndarray, cams: Sequence[CameraModel],
                visibility: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Direct linear transform over the visible views.

    Each view contributes the rows u P3 - P1 and v P3 - P2, normalized to unit
    length. Returns the 3D point and the RMS reprojection error in pixels.
    """
    points2d = np.asarray(points2d, dtype=np.float64)
    if points2d.shape != (len(cams), 2):
        raise MocapError(f"expected {len(cams)} x 2 pixels, got {points2d.shape}")
    visibility = np.ones(len(cams), dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    views = np.flatnonzero(visibility)
    if views.size < 2:
        raise InsufficientViews(f"triangulation needs at least 2 visible views, got {views.size}")

    rows = []
    for v in views:
        P = cams[v].P
        u, w = points2d[v]
        rows.append(u * P[2] - P[0])
        rows.append(w * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        raise DegenerateGeometry("triangulated point is at infinity")
    point = X[:3] / X[3]

    residuals = []
    for v in views:
        h = cams[v].homogeneous(point)
        residuals.append(h[:2] / h[2] - points2d[v])
    sigma_raw = float(np.sqrt(np.mean(np.sum(np.square(residuals), axis=1))))
    return point, sigma_raw


def normalize_error(sigma_raw, sigma_max: float = SIGMA_MAX_PX):
    """sigma = clamp(sigma_raw / sigma_max, 0, 1)."""
    if sigma_max <= 0:
        raise MocapError(f"sigma_max must be > 0, got {sigma_max}")
    return np.clip(np.asarray(sigma_raw, dtype=np.float64) / sigma_max, 0.0, 1.0)


# --- tracking --------------------------------------------------------------------

def track_identities(frames: Sequence[Sequence[np.ndarray]]) -> List[List[int]]:
    """Greedy nearest-centroid linking.

    frames[t] lists the people found at frame t as J x 3 arrays (NaN where a
    joint is missing). Returns a track index per person per frame; frame 0
    numbers its people in order, later frames repeatedly take the closest
    (track, person) pair by centroid distance, and people left over open new
    tracks. Tracks absent from a frame keep their last centroid.
    """
    if not frames:
        raise MocapError("tracking needs at least one frame")
    last_centroid: List[np.ndarray] = []
    result = []
    for people in frames:
        centroids = [np.nanmean(person, axis=0) for person in people]
        ids = [-1] * len(people)
        pairs = []
        for track, previous in enumerate(last_centroid):
            for k, centroid in enumerate(centroids):
                if np.all(np.isfinite(centroid)):
                    pairs.append((float(np.linalg.norm(centroid - previous)), track, k))
        pairs.sort()
        used_tracks = set()
        for _, track, k in pairs:
            if track in used_tracks or ids[k] != -1:
                continue
            ids[k] = track
            used_tracks.add(track)
        for k in range(len(people)):
            if ids[k] == -1:
                ids[k] = len(last_centroid)
                last_centroid.append(centroids[k])
            else:
                last_centroid[ids[k]] = centroids[k]
        result.append(ids)
    return result


# --- full reconstruction ---------------------------------------------------------

@dataclass(frozen=True)
class Reconstruction3D:
    """Triangulated people with per-joint errors.

    d: N x T x J x 3 meters; sigma in [0, 1] (1 where a joint could not be
    triangulated); rho: N x V x T x J confidences of the detections matched to
    each track; views: number of views each joint was triangulated from.
    """

    d: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    views: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if d.ndim != 4 or d.shape[-1] != 3 or sigma.shape != d.shape[:-1]:
            raise MocapError(f"reconstruction must be N x T x J x 3 with matching sigma, "
                             f"got {d.shape} and {sigma.shape}")
        if not np.all((sigma >= 0.0) & (sigma <= 1.0)):
            raise MocapError("triangulation errors must lie in [0, 1]")
        object.__setattr__(self, 'd', d)
        object.__setattr__(self, 'sigma', sigma)
        object.__setattr__(self, 'rho', np.array(self.rho, dtype=np.float64))
        object.__setattr__(self, 'views', np.array(self.views, dtype=np.int64))

    @property
    def N(self) -> int:
        return self.d.shape[0]

    @property
    def triangulated(self) -> np.ndarray:
        return self.views >= 2

    def motion(self, n: int) -> MotionSequence:
        return MotionSequence(self.d[n])

    def signals(self, n: int) -> QualitySignals:
        return QualitySignals(self.rho[n], self.sigma[n])

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {'d': self.d, 'sigma': self.sigma, 'rho': self.rho, 'views': self.views}


def _match_frame(det: DetectionSet, t: int, fundamentals: Dict[Tuple[int, int], Tuple],
                 mid_hip: int) -> List[np.ndarray]:
    """Groups of detection slots (one per view, -1 when unmatched) for frame t.

    The view with the most visible mid-hips is the reference; every other view
    is assigned to it with the Hungarian method on mid-hip epipolar costs.
    """
    N, V = det.shape[:2]
    visible_hips = det.rho[:, :, t, mid_hip] > 0
    ref = int(np.argmax(visible_hips.sum(axis=0)))
    groups = [np.full(V, -1, dtype=np.int64) for _ in range(N)]
    for slot in range(N):
        groups[slot][ref] = slot

    for v in range(V):
        if v == ref:
            continue
        F_ab, F_ba = fundamentals[(ref, v)]
        cost = np.full((N, N), np.inf)
        for a in range(N):
            for b in range(N):
                if visible_hips[a, ref] and visible_hips[b, v]:
                    cost[a, b] = _symmetric_distance(F_ab, F_ba, det.p[a, ref, t, mid_hip], det.p[b, v, t, mid_hip])
        try:
            pairs = hungarian_match(cost, allow_partial=True)
        except InfeasibleAll:
            logger.debug(f"Frame {t}: no mid-hip visible in both view {ref} and view {v}")
            continue
        if len(pairs) < N:
            logger.debug(f"Frame {t}: view {v} matched {len(pairs)} of {N} people")
        for a, b in pairs:
            groups[a][v] = b
    return groups


def _fill_missing(d: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Interpolate missing joints over time, falling back to the frame centroid, then 0."""
    d = d.copy()
    N, T, J, _ = d.shape
    frames = np.arange(T)
    for n in range(N):
        for j in range(J):
            known = np.flatnonzero(valid[n, :, j])
            if 0 < known.size < T:
                for c in range(3):
                    d[n, :, j, c] = np.interp(frames, known, d[n, known, j, c])
        counts = valid[n].sum(axis=1)
        sums = np.sum(d[n] * valid[n][..., None], axis=1)
        centroid = sums / np.maximum(counts, 1)[:, None]
        for j in range(J):
            if not valid[n, :, j].any():
                d[n, :, j] = centroid
    return d


def reconstruct(det: DetectionSet, rig: CameraRig, mid_hip: int = 0,
                sigma_max: float = SIGMA_MAX_PX) -> Reconstruction3D:
    """Match, triangulate and track every frame of a detection set."""
    N, V, T, J = det.shape
    if V != rig.V:
        raise MocapError(f"detections have {V} views but the rig has {rig.V} cameras")
    fundamentals = {(a, b): (fundamental_matrix(rig[a], rig[b]), fundamental_matrix(rig[b], rig[a]))
                    for a in range(V) for b in range(V) if a != b}

    per_frame = []
    for t in range(T):
        people = []
        for group in _match_frame(det, t, fundamentals, mid_hip):
            points = np.full((J, 3), np.nan)
            sigma_raw = np.full(J, np.inf)
            rho = np.zeros((V, J))
            count = np.zeros(J, dtype=np.int64)
            for v in np.flatnonzero(group >= 0):
                rho[v] = det.rho[group[v], v, t]
            for j in range(J):
                visible = rho[:, j] > 0
                count[j] = int(visible.sum())
                if count[j] < 2:
                    continue
                pixels = np.zeros((V, 2))
                for v in np.flatnonzero(visible):
                    pixels[v] = det.p[group[v], v, t, j]
                points[j], sigma_raw[j] = triangulate(pixels, rig.cameras, visible)
            if np.any(count >= 2):
                people.append((points, sigma_raw, rho, count))
        per_frame.append(people)

    tracks = track_identities([[person[0] for person in people] for people in per_frame])
    n_tracks = 1 + max((max(ids) for ids in tracks if ids), default=-1)
    if n_tracks != N:
        logger.warning(f"Tracking found {n_tracks} people, detections hold {N}")

    d = np.zeros((n_tracks, T, J, 3))
    sigma = np.ones((n_tracks, T, J))
    rho = np.zeros((n_tracks, V, T, J))
    views = np.zeros((n_tracks, T, J), dtype=np.int64)
    for t, (people, ids) in enumerate(zip(per_frame, tracks)):
        for (points, sigma_raw, person_rho, count), n in zip(people, ids):
            ok = count >= 2
            d[n, t, ok] = points[ok]
            sigma[n, t, ok] = normalize_error(sigma_raw[ok], sigma_max)
            rho[n, :, t] = person_rho
            views[n, t] = count
    d = _fill_missing(d, views >= 2)

    logger.info(f"Reconstructed {n_tracks} people over {T} frames, "
                f"{float(np.mean(views >= 2)) * 100:.1f}% of joints triangulated")
    return Reconstruction3D(d, sigma, rho, views)


def simulate_quality_signals(motion: MotionSequence, rig: CameraRig, noise_px: float,
                             occl_prob: float, seed: int, sigma_max: float = SIGMA_MAX_PX,
                             mid_hip: int = 0) -> Tuple[QualitySignals, Reconstruction3D]:
    """Run one person through the capture chain and return its rho and sigma."""
    det = simulate_detections([motion], rig, noise_px, occl_prob, seed)
    recon = reconstruct(det, rig, mid_hip, sigma_max)
    if recon.N == 0:
        return QualitySignals(np.zeros((rig.V, motion.T, motion.J)), np.ones((motion.T, motion.J))), recon
    return recon.signals(0), recon
