"""
Motion containers and everything that prepares motion for the network:
centroid normalization, yaw/flip augmentation, the joint-level channel
packing used for in-betweening, synthetic motion generation and the
motion text format.

World frame is y-up with x as the lateral axis (left is +x).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from data_manager import FormatError, atomic_write_text, read_text
from utils import derive_seed

logger = logging.getLogger(__name__)

MOTION_MAGIC = 'mmdm-motion'
MOTION_VERSION = 'v1'

# Synthetic limb swing: amplitude in radians, period in frames
LIMB_AMPLITUDE = 0.35
LIMB_PERIOD = 24.0
WALK_SPEED = 0.02
FIGURE_EIGHT_RADIUS = 0.6
FIGURE_EIGHT_PERIOD = 60.0

JOINT_TOKENS = 22
TOKEN_DIM = 12
FOOT_CONTACT_THRESHOLD = 0.002


class MotionDataError(ValueError):
    """Base class for motion data errors."""


class InvalidMotion(MotionDataError):
    """Array shapes or values violate the MotionSequence invariants."""


class WrongFeatureDim(MotionDataError):
    """Operation needs 3-D joint positions."""


class InvalidPairList(MotionDataError):
    """Left/right pairs overlap or reference missing joints."""


class ChannelSizeMismatch(MotionDataError):
    """A channel of the joint-level bundle has the wrong size."""


class UnknownKind(MotionDataError):
    """Unsupported synthetic motion kind."""


class AngleOutOfRange(MotionDataError):
    """Yaw angle outside [-180, 180] degrees."""


class InvalidSplit(MotionDataError):
    """Segment lengths are not all positive."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MotionSequence:
    """T x J x d joint features with a T x J mask (True = to be generated)."""

    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise InvalidMotion(f"values must be T x J x d with every size >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidMotion("values must be finite")
        if self.mask is None:
            mask = np.zeros(values.shape[:2], dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
        if mask.shape != values.shape[:2]:
            raise InvalidMotion(f"mask shape {mask.shape} does not match {values.shape[:2]}")
        object.__setattr__(self, 'values', _readonly(values))
        object.__setattr__(self, 'mask', _readonly(mask))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def J(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray) -> 'MotionSequence':
        return MotionSequence(values, self.mask)

    def with_mask(self, mask: np.ndarray) -> 'MotionSequence':
        return MotionSequence(self.values, mask)

    def equals(self, other: 'MotionSequence') -> bool:
        """Bit-exact comparison of values and mask."""
        return (self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class SegmentSplit:
    """Preceding / transition / succeeding frame counts for in-betweening."""

    preceding: int
    transition: int
    succeeding: int

    def __post_init__(self):
        if min(self.preceding, self.transition, self.succeeding) < 1:
            raise InvalidSplit(f"all segment lengths must be >= 1, got {self}")

    @property
    def total(self) -> int:
        return self.preceding + self.transition + self.succeeding

    @property
    def transition_slice(self) -> slice:
        return slice(self.preceding, self.preceding + self.transition)

    def boundary_mask(self) -> np.ndarray:
        """Per-frame flag, True on the preceding and succeeding frames."""
        known = np.ones(self.total, dtype=bool)
        known[self.transition_slice] = False
        return known


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with rest offsets (offsets[0] is the rest root position)."""

    name: str
    parents: Tuple[int, ...]
    offsets: np.ndarray
    lr_pairs: Tuple[Tuple[int, int], ...] = ()
    mid_hip: int = 0
    feet: Tuple[int, ...] = ()

    def __post_init__(self):
        offsets = np.array(self.offsets, dtype=np.float64)
        if offsets.shape != (len(self.parents), 3):
            raise InvalidMotion(f"offsets shape {offsets.shape} does not match {len(self.parents)} joints")
        for j, p in enumerate(self.parents):
            if (j == 0 and p != -1) or (j > 0 and not 0 <= p < j):
                raise InvalidMotion(f"joint {j} has invalid parent {p}")
        object.__setattr__(self, 'offsets', _readonly(offsets))

    @property
    def J(self) -> int:
        return len(self.parents)

    @property
    def limbs(self) -> List[Tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets[1:], axis=1)


# Hip, right leg, left leg, spine to head, left arm, right arm
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M_OFFSETS = (
    (0.0, 0.9, 0.0),
    (-0.12, 0.0, 0.0), (0.0, -0.42, 0.0), (0.0, -0.42, 0.0),
    (0.12, 0.0, 0.0), (0.0, -0.42, 0.0), (0.0, -0.42, 0.0),
    (0.0, 0.22, 0.0), (0.0, 0.24, 0.0), (0.0, 0.1, 0.0), (0.0, 0.12, 0.0),
    (0.17, 0.0, 0.0), (0.0, -0.28, 0.0), (0.0, -0.25, 0.0),
    (-0.17, 0.0, 0.0), (0.0, -0.28, 0.0), (0.0, -0.25, 0.0),
)
H36M_LR_PAIRS = ((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16))

SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
SMPL_OFFSETS = (
    (0.0, 0.95, 0.0),
    (0.1, -0.08, 0.0), (-0.1, -0.08, 0.0), (0.0, 0.11, 0.0),
    (0.0, -0.38, 0.0), (0.0, -0.38, 0.0), (0.0, 0.13, 0.0),
    (0.0, -0.40, 0.0), (0.0, -0.40, 0.0), (0.0, 0.05, 0.0),
    (0.0, -0.05, 0.12), (0.0, -0.05, 0.12), (0.0, 0.21, 0.0),
    (0.07, 0.11, 0.0), (-0.07, 0.11, 0.0), (0.0, 0.09, 0.0),
    (0.11, 0.0, 0.0), (-0.11, 0.0, 0.0), (0.26, 0.0, 0.0),
    (-0.26, 0.0, 0.0), (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0),
)
SMPL_LR_PAIRS = ((1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21))
SMPL_HIPS = (1, 2)
SMPL_SHOULDERS = (16, 17)
SMPL_FEET = (7, 10, 8, 11)


def default_skeleton(J: int) -> Skeleton:
    """17-joint mocap skeleton, 22-joint body skeleton, or a generic binary tree."""
    if J == 17:
        return Skeleton('h36m-17', H36M_PARENTS, np.array(H36M_OFFSETS), H36M_LR_PAIRS)
    if J == 22:
        return Skeleton('smpl-22', SMPL_PARENTS, np.array(SMPL_OFFSETS), SMPL_LR_PAIRS, feet=SMPL_FEET)
    if J < 1:
        raise InvalidMotion(f"J must be >= 1, got {J}")
    parents = tuple([-1] + [(j - 1) // 2 for j in range(1, J)])
    offsets = np.zeros((J, 3))
    offsets[0] = (0.0, 0.9, 0.0)
    for j in range(1, J):
        angle = 2.0 * np.pi * j / J
        direction = np.array([np.cos(angle), np.sin(angle), 0.3])
        offsets[j] = 0.25 * direction / np.linalg.norm(direction)
    return Skeleton(f'tree-{J}', parents, offsets)


def normalize_centroid(m: MotionSequence) -> Tuple[MotionSequence, np.ndarray]:
    """Subtract the per-frame joint centroid; returns the centroids (T x 3) for inversion."""
    if m.d != 3:
        raise WrongFeatureDim(f"normalize_centroid needs d=3, got d={m.d}")
    centroid = m.values.mean(axis=1)
    return m.with_values(m.values - centroid[:, None, :]), centroid


def denormalize_centroid(m: MotionSequence, centroid: np.ndarray) -> MotionSequence:
    if m.d != 3:
        raise WrongFeatureDim(f"denormalize_centroid needs d=3, got d={m.d}")
    return m.with_values(m.values + np.asarray(centroid)[:, None, :])


def yaw_rotation(angle_deg: float) -> Rotation:
    """Rotation about the vertical (y) axis; +90 degrees takes +x to -z."""
    return Rotation.from_euler('y', angle_deg, degrees=True)


def augment_rotate_yaw(m: MotionSequence, angle: float) -> MotionSequence:
    if m.d != 3:
        raise WrongFeatureDim(f"augment_rotate_yaw needs d=3, got d={m.d}")
    if not -180.0 <= angle <= 180.0:
        raise AngleOutOfRange(f"yaw angle must be in [-180, 180], got {angle}")
    if angle == 0:
        return m.with_values(m.values)
    rotated = yaw_rotation(angle).apply(m.values.reshape(-1, 3)).reshape(m.values.shape)
    return m.with_values(rotated)


def validate_pairs(lr_pairs: Sequence[Tuple[int, int]], J: int):
    seen = set()
    for pair in lr_pairs:
        if len(pair) != 2:
            raise InvalidPairList(f"pair {pair} does not have two entries")
        for j in pair:
            if not 0 <= int(j) < J:
                raise InvalidPairList(f"joint index {j} out of range for J={J}")
            if j in seen:
                raise InvalidPairList(f"joint {j} appears in more than one pair")
            seen.add(j)


def mirror_order(lr_pairs: Sequence[Tuple[int, int]], J: int) -> np.ndarray:
    """Joint permutation that swaps each left/right pair."""
    validate_pairs(lr_pairs, J)
    order = np.arange(J)
    for a, b in lr_pairs:
        order[a], order[b] = b, a
    return order


def augment_flip(m: MotionSequence, lr_pairs: Sequence[Tuple[int, int]]) -> MotionSequence:
    """Mirror across the sagittal plane: negate x and swap each left/right pair."""
    if m.d != 3:
        raise WrongFeatureDim(f"augment_flip needs d=3, got d={m.d}")
    order = mirror_order(lr_pairs, m.J)
    values = m.values[:, order, :].copy()
    values[..., 0] = -values[..., 0]
    return MotionSequence(values, m.mask[:, order])


def random_augment(m: MotionSequence, rng: np.random.Generator, lr_pairs: Sequence[Tuple[int, int]],
                   flip_prob: float = 0.5) -> Tuple[MotionSequence, np.ndarray]:
    """Random yaw in [-180, 180] followed by a flip with probability flip_prob.

    Also returns the joint order of the result (identity unless flipped), so
    per-joint side data can follow the motion.
    """
    out = augment_rotate_yaw(m, float(rng.uniform(-180.0, 180.0)))
    order = np.arange(m.J)
    if rng.random() < flip_prob:
        out = augment_flip(out, lr_pairs)
        order = mirror_order(lr_pairs, m.J)
    return out, order


# --- joint-level packing ------------------------------------------------------

# Token 0 slots
ROOT_ROT_VELOCITY_SLOTS = slice(0, 6)
ROOT_SCALAR_SLOTS = slice(6, 10)
ROOT_PAD_SLOTS = slice(10, 12)
# Tokens 1..21 slots
JOINT_ROTATION_SLOTS = slice(0, 6)
JOINT_POSITION_SLOTS = slice(6, 9)
JOINT_VELOCITY_SLOTS = slice(9, 12)

PACKING_MAP = {
    'root_rot_velocity': (0, ROOT_ROT_VELOCITY_SLOTS),
    'root_scalars': (0, ROOT_SCALAR_SLOTS),
    'joint_rotations': (slice(1, JOINT_TOKENS), JOINT_ROTATION_SLOTS),
    'joint_positions': (slice(1, JOINT_TOKENS), JOINT_POSITION_SLOTS),
    'joint_velocities': (slice(1, JOINT_TOKENS), JOINT_VELOCITY_SLOTS),
}

# Per-frame scalar counts of each channel
CHANNEL_SIZES = {
    'root_scalars': (4,),
    'root_rot_velocity': (6,),
    'joint_rotations': (JOINT_TOKENS - 1, 6),
    'joint_positions': (JOINT_TOKENS - 1, 3),
    'joint_velocities': (JOINT_TOKENS - 1, 3),
    'foot_contacts': (4,),
}


@dataclass(frozen=True)
class HumanML3DChannels:
    """Per-frame body channels of a 22-joint motion.

    root_scalars holds (angular velocity about y, x velocity, z velocity, height),
    velocities expressed in the root heading frame.
    """

    root_scalars: np.ndarray
    root_rot_velocity: np.ndarray
    joint_rotations: np.ndarray
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    foot_contacts: np.ndarray

    def __post_init__(self):
        T = None
        for name, size in CHANNEL_SIZES.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.ndim < 1 or arr.shape[1:] != size:
                raise ChannelSizeMismatch(f"{name} must be T x {size}, got {arr.shape}")
            if T is None:
                T = arr.shape[0]
            elif arr.shape[0] != T:
                raise ChannelSizeMismatch(f"{name} has {arr.shape[0]} frames, expected {T}")
            object.__setattr__(self, name, _readonly(arr))
        if T < 1:
            raise ChannelSizeMismatch("channel bundle needs at least one frame")

    @property
    def T(self) -> int:
        return self.root_scalars.shape[0]

    def scalar_count(self) -> int:
        return sum(int(np.prod(getattr(self, n).shape)) for n in CHANNEL_SIZES)

    def slice_frames(self, frames: slice) -> 'HumanML3DChannels':
        return HumanML3DChannels(**{n: getattr(self, n)[frames] for n in CHANNEL_SIZES})


@dataclass(frozen=True)
class JointLevelRepr:
    """T x 22 x 12 token grid plus the T x 4 foot-contact side channel of token 0."""

    values: np.ndarray
    contacts: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        contacts = np.array(self.contacts, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != (JOINT_TOKENS, TOKEN_DIM):
            raise ChannelSizeMismatch(f"joint-level values must be T x 22 x 12, got {values.shape}")
        if contacts.shape != (values.shape[0], 4):
            raise ChannelSizeMismatch(f"contacts must be T x 4, got {contacts.shape}")
        object.__setattr__(self, 'values', _readonly(values))
        object.__setattr__(self, 'contacts', _readonly(contacts))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def to_motion(self, mask: Optional[np.ndarray] = None) -> MotionSequence:
        return MotionSequence(self.values, mask)


def pack_joint_level(channels: HumanML3DChannels) -> JointLevelRepr:
    values = np.zeros((channels.T, JOINT_TOKENS, TOKEN_DIM))
    for name, (tokens, slots) in PACKING_MAP.items():
        values[:, tokens, slots] = getattr(channels, name)
    return JointLevelRepr(values, channels.foot_contacts.copy())


def unpack_joint_level(rep: JointLevelRepr) -> HumanML3DChannels:
    parts = {name: rep.values[:, tokens, slots].copy() for name, (tokens, slots) in PACKING_MAP.items()}
    return HumanML3DChannels(foot_contacts=rep.contacts.copy(), **parts)


# --- rotations from positions -------------------------------------------------

def minimal_rotations(rest: np.ndarray, current: np.ndarray) -> Rotation:
    """Smallest rotation taking each rest direction onto the matching current direction."""
    a = rest / np.linalg.norm(rest, axis=-1, keepdims=True)
    b = current / np.linalg.norm(current, axis=-1, keepdims=True)
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis, axis=-1)
    cos = np.sum(a * b, axis=-1)
    angle = np.arctan2(sin, cos)
    unit = np.zeros_like(axis)
    regular = sin > 1e-12
    unit[regular] = axis[regular] / sin[regular, None]
    # Antiparallel: any axis orthogonal to the rest direction
    flipped = ~regular & (cos < 0)
    if np.any(flipped):
        helper = np.where(np.abs(a[flipped, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        ortho = np.cross(a[flipped], helper)
        unit[flipped] = ortho / np.linalg.norm(ortho, axis=-1, keepdims=True)
    return Rotation.from_rotvec((unit * angle[..., None]).reshape(-1, 3))


def matrix_to_rot6d(matrices: np.ndarray) -> np.ndarray:
    """First two matrix columns, concatenated."""
    return np.concatenate([matrices[..., :, 0], matrices[..., :, 1]], axis=-1)


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the two stored columns."""
    a1, a2 = r6[..., :3], r6[..., 3:6]
    b1 = a1 / np.maximum(np.linalg.norm(a1, axis=-1, keepdims=True), 1e-12)
    a2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = a2 / np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1e-12)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_quat(r6: np.ndarray) -> np.ndarray:
    """Unit quaternions (x, y, z, w) for an array of 6-D rotations."""
    shape = r6.shape[:-1]
    matrices = rot6d_to_matrix(r6.reshape(-1, 6))
    return Rotation.from_matrix(matrices).as_quat().reshape(*shape, 4)


def _heading(positions: np.ndarray) -> np.ndarray:
    """Yaw of the body's forward direction per frame, from hips and shoulders."""
    across = (positions[:, SMPL_HIPS[0]] - positions[:, SMPL_HIPS[1]]
              + positions[:, SMPL_SHOULDERS[0]] - positions[:, SMPL_SHOULDERS[1]])
    forward = np.stack([across[:, 2], np.zeros(len(across)), -across[:, 0]], axis=-1)
    return np.arctan2(forward[:, 0], forward[:, 2])


def _forward_difference(x: np.ndarray) -> np.ndarray:
    """x[t+1] - x[t], repeating the last difference (zeros for a single frame)."""
    if x.shape[0] < 2:
        return np.zeros_like(x)
    diff = x[1:] - x[:-1]
    return np.concatenate([diff, diff[-1:]], axis=0)


def _wrap(angle: np.ndarray) -> np.ndarray:
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def channels_from_positions(positions: np.ndarray, skeleton: Optional[Skeleton] = None) -> HumanML3DChannels:
    """Derive the 22-joint channel bundle from global joint positions (T x 22 x 3)."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[1:] != (JOINT_TOKENS, 3):
        raise ChannelSizeMismatch(f"positions must be T x 22 x 3, got {positions.shape}")
    skeleton = skeleton or default_skeleton(JOINT_TOKENS)
    T = positions.shape[0]
    root = positions[:, 0]

    heading = _heading(positions)
    angular_velocity = _wrap(_forward_difference(heading))
    to_local = Rotation.from_euler('y', heading).inv()

    root_velocity = to_local.apply(_forward_difference(root))
    root_scalars = np.stack([angular_velocity, root_velocity[:, 0], root_velocity[:, 2], root[:, 1]], axis=-1)
    root_rot_velocity = matrix_to_rot6d(Rotation.from_euler('y', angular_velocity).as_matrix())

    relative = positions[:, 1:] - root[:, None]
    local_positions = np.stack([to_local[t].apply(relative[t]) for t in range(T)])
    velocities = _forward_difference(positions[:, 1:])
    local_velocities = np.stack([to_local[t].apply(velocities[t]) for t in range(T)])

    parents = np.array(skeleton.parents[1:])
    bones = positions[:, 1:] - positions[:, parents]
    rest = np.broadcast_to(skeleton.offsets[1:], bones.shape)
    rotations = minimal_rotations(rest.reshape(-1, 3), bones.reshape(-1, 3))
    joint_rotations = matrix_to_rot6d(rotations.as_matrix()).reshape(T, JOINT_TOKENS - 1, 6)

    foot_speed = np.sum(_forward_difference(positions[:, list(skeleton.feet or SMPL_FEET)]) ** 2, axis=-1)
    contacts = (foot_speed < FOOT_CONTACT_THRESHOLD).astype(np.float64)

    return HumanML3DChannels(root_scalars, root_rot_velocity, joint_rotations,
                             local_positions, local_velocities, contacts)


def positions_from_channels(channels: HumanML3DChannels, start_root: np.ndarray,
                            start_heading: float) -> np.ndarray:
    """Integrate root velocities from a known start; returns global positions (T x 22 x 3)."""
    T = channels.T
    angular_velocity = channels.root_scalars[:, 0]
    heading = start_heading + np.concatenate([[0.0], np.cumsum(angular_velocity[:-1])])
    to_world = Rotation.from_euler('y', heading)

    local_velocity = np.stack([channels.root_scalars[:, 1], np.zeros(T), channels.root_scalars[:, 2]], axis=-1)
    steps = to_world.apply(local_velocity)
    root = np.zeros((T, 3))
    root[:, [0, 2]] = np.asarray(start_root, dtype=np.float64)[[0, 2]] + np.concatenate(
        [np.zeros((1, 2)), np.cumsum(steps[:-1, [0, 2]], axis=0)], axis=0)
    root[:, 1] = channels.root_scalars[:, 3]

    positions = np.zeros((T, JOINT_TOKENS, 3))
    positions[:, 0] = root
    for t in range(T):
        positions[t, 1:] = root[t] + to_world[t].apply(channels.joint_positions[t])
    return positions


def heading_of(positions: np.ndarray) -> np.ndarray:
    return _heading(np.asarray(positions, dtype=np.float64))


def joint_quaternions(channels: HumanML3DChannels) -> np.ndarray:
    """T x 21 x 4 quaternions of the per-joint 6-D rotations."""
    return rot6d_to_quat(channels.joint_rotations)


# --- synthetic motion ---------------------------------------------------------

SYNTH_KINDS = ('sinusoid-limb', 'linear-walk', 'figure-eight')


def limb_phases(seed: int, J: int) -> np.ndarray:
    """Per-bone phase offsets used by synth_motion."""
    return np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=J)


def limb_angles(T: int, phases: np.ndarray) -> np.ndarray:
    """theta_j(t) = A sin(2 pi t / P + phi_j), shape T x J."""
    t = np.arange(T, dtype=np.float64)[:, None]
    return LIMB_AMPLITUDE * np.sin(2.0 * np.pi * t / LIMB_PERIOD + phases[None, :])


def root_trajectory(kind: str, T: int, rest_root: np.ndarray, seed: int) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    root = np.tile(rest_root, (T, 1))
    if kind == 'sinusoid-limb':
        return root
    if kind == 'linear-walk':
        heading = np.random.default_rng(seed + 1).uniform(-np.pi, np.pi)
        velocity = WALK_SPEED * np.array([np.sin(heading), 0.0, np.cos(heading)])
        return root + t[:, None] * velocity[None, :]
    if kind == 'figure-eight':
        s = 2.0 * np.pi * t / FIGURE_EIGHT_PERIOD
        root[:, 0] += FIGURE_EIGHT_RADIUS * np.sin(s)
        root[:, 2] += FIGURE_EIGHT_RADIUS * np.sin(s) * np.cos(s)
        return root
    raise UnknownKind(f"unknown motion kind '{kind}', expected one of {SYNTH_KINDS}")


def forward_kinematics(skeleton: Skeleton, root: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Each bone's rest offset rotated about z by its own angle, chained from the root."""
    T = root.shape[0]
    c, s = np.cos(angles), np.sin(angles)
    off = skeleton.offsets
    rotated = np.stack([c * off[None, :, 0] - s * off[None, :, 1],
                        s * off[None, :, 0] + c * off[None, :, 1],
                        np.broadcast_to(off[None, :, 2], (T, skeleton.J))], axis=-1)
    positions = np.zeros((T, skeleton.J, 3))
    positions[:, 0] = root
    for j in range(1, skeleton.J):
        positions[:, j] = positions[:, skeleton.parents[j]] + rotated[:, j]
    return positions


def synth_motion(kind: str, T: int, J: int, seed: int,
                 skeleton: Optional[Skeleton] = None) -> MotionSequence:
    """Deterministic synthetic motion with constant bone lengths and smooth trajectories."""
    if kind not in SYNTH_KINDS:
        raise UnknownKind(f"unknown motion kind '{kind}', expected one of {SYNTH_KINDS}")
    if T < 2:
        raise InvalidMotion(f"synthetic motion needs T >= 2, got {T}")
    skeleton = skeleton or default_skeleton(J)
    if skeleton.J != J:
        raise InvalidMotion(f"skeleton has {skeleton.J} joints, expected {J}")
    angles = limb_angles(T, limb_phases(seed, J))
    root = root_trajectory(kind, T, skeleton.offsets[0], seed)
    return MotionSequence(forward_kinematics(skeleton, root, angles))


def synth_dataset(count: int, T: int, J: int, seed: int,
                  kinds: Sequence[str] = SYNTH_KINDS) -> List[MotionSequence]:
    """`count` sequences cycling through kinds, each with its own derived seed."""
    return [synth_motion(kinds[i % len(kinds)], T, J, derive_seed(seed, 'motion', i))
            for i in range(count)]


# --- motion file format -------------------------------------------------------

def format_motion(m: MotionSequence) -> str:
    lines = [f"{MOTION_MAGIC} {MOTION_VERSION} {m.T} {m.J} {m.d}"]
    for t in range(m.T):
        for j in range(m.J):
            values = " ".join(f"{v:.17g}" for v in m.values[t, j])
            lines.append(f"{t} {j} {values} {int(m.mask[t, j])}")
    return "\n".join(lines) + "\n"


def _parse_int(token: str, line: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise FormatError(line, f"{what} '{token}' is not an integer") from None


def parse_motion(text: str) -> MotionSequence:
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines:
        raise FormatError(1, "empty file")

    header = lines[0].split()
    if len(header) != 5 or header[0] != MOTION_MAGIC or header[1] != MOTION_VERSION:
        raise FormatError(1, f"expected '{MOTION_MAGIC} {MOTION_VERSION} <T> <J> <d>'")
    T, J, d = (_parse_int(tok, 1, name) for tok, name in zip(header[2:], ('T', 'J', 'd')))
    if min(T, J, d) < 1:
        raise FormatError(1, f"T, J and d must be >= 1, got {T} {J} {d}")

    values = np.zeros((T, J, d))
    mask = np.zeros((T, J), dtype=bool)
    expected_rows = T * J
    for row in range(expected_rows):
        line_no = row + 2
        if row + 1 >= len(lines):
            raise FormatError(line_no, f"unexpected end of file after {row} of {expected_rows} rows")
        tokens = lines[row + 1].split()
        if len(tokens) != d + 3:
            raise FormatError(line_no, f"expected {d + 3} fields, got {len(tokens)}")
        t, j = divmod(row, J)
        if _parse_int(tokens[0], line_no, 't') != t or _parse_int(tokens[1], line_no, 'j') != j:
            raise FormatError(line_no, f"expected frame {t} joint {j}")
        try:
            row_values = [float(tok) for tok in tokens[2:2 + d]]
        except ValueError:
            raise FormatError(line_no, "value is not a number") from None
        if not np.all(np.isfinite(row_values)):
            raise FormatError(line_no, "value is not finite")
        if tokens[-1] not in ('0', '1'):
            raise FormatError(line_no, f"mask bit must be 0 or 1, got '{tokens[-1]}'")
        values[t, j] = row_values
        mask[t, j] = tokens[-1] == '1'

    for extra in range(expected_rows + 1, len(lines)):
        if lines[extra].strip():
            raise FormatError(extra + 1, "unexpected content after the last row")
    return MotionSequence(values, mask)


def save_motion(m: MotionSequence, path: str):
    atomic_write_text(path, format_motion(m))
    logger.debug(f"Saved motion {m.T}x{m.J}x{m.d} to {path}")


def load_motion(path: str) -> MotionSequence:
    return parse_motion(read_text(path))
