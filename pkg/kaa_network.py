"""
Kinematic Attention Aggregation network.

Joint tokens (T x J x D) are summarized per frame by a star token. Each round
runs structural attention over the (1 + J) tokens of every frame, temporal
attention over the T star tokens only, and broadcast-adds the refined star
back to the joints of its frame. The star sequence after the last round is
the kinematic condition c that the cross-attention decoder attends to.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

import utils
from data_manager import read_npz, write_npz
from diffusion import (
    DiffusionSchedule, NoisedState, loss_full, loss_masked, mae_reconstruct,
    sample_noised_state, to_signal, training_target,
)
from motion_data import SegmentSplit
from tensor import ShapeMismatch, Tensor, as_tensor, concat, gelu, layer_norm, no_grad, softmax

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAR_INIT_STD = 0.02
POS_EMBED_SCALE = 256.0
STEP_EMBED_BASE = 10000.0
MASK_FILL = -1e9
AGGREGATION_ORDERS = ('structure-first', 'trajectory-first')
MODEL_KINDS = ('completion', 'inbetween')


class NetworkError(ValueError):
    """Base class for network errors."""


class OddDim(NetworkError):
    """Positional and step embeddings need an even width."""


class LayoutError(NetworkError):
    """Decoder tokens do not cover the T x J grid exactly once."""


class SplitError(NetworkError):
    """In-betweening segments do not match the segment split."""


class CheckpointError(NetworkError):
    """A checkpoint is missing entries, has another version or another shape."""


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 2
    dim: int = 32
    heads: int = 2
    head_dim: int = 16
    ffn_dim: int = 64
    in_dim: int = 3
    out_dim: int = 3
    decoder_depth: int = 1
    aggregation_order: str = 'structure-first'
    use_joint_pos: bool = True
    # Re-add positional embeddings before every round instead of once per stage
    pos_embed_per_round: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.decoder_depth < 0:
            raise NetworkError(f"depth must be >= 1 and decoder_depth >= 0, got {self.depth}, {self.decoder_depth}")
        if min(self.dim, self.heads, self.head_dim, self.ffn_dim, self.in_dim, self.out_dim) < 1:
            raise NetworkError(f"all sizes must be positive: {self}")
        if self.dim % 2:
            raise OddDim(f"feature width must be even, got {self.dim}")
        if self.aggregation_order not in AGGREGATION_ORDERS:
            raise NetworkError(f"aggregation_order must be one of {AGGREGATION_ORDERS}, "
                               f"got '{self.aggregation_order}'")

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def preset(cls, name: str, **overrides) -> 'NetworkConfig':
        """'completion' (9 x 512, decoder 3), 'inbetween' (8 x 512, 8 heads), 'tiny', 'grad-check'."""
        presets = {
            'completion': dict(depth=9, dim=512, heads=4, head_dim=32, ffn_dim=512, decoder_depth=3),
            'inbetween': dict(depth=8, dim=512, heads=8, head_dim=64, ffn_dim=1024,
                              in_dim=12, out_dim=12, decoder_depth=0),
            'tiny': dict(depth=2, dim=32, heads=2, head_dim=16, ffn_dim=64, decoder_depth=1),
            'grad-check': dict(depth=1, dim=16, heads=2, head_dim=8, ffn_dim=32, decoder_depth=1),
        }
        if name not in presets:
            raise NetworkError(f"unknown network preset '{name}', expected one of {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'NetworkConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise NetworkError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**data)


# --- instrumentation -----------------------------------------------------------

@dataclass
class AttentionRecord:
    kind: str
    batch: int
    queries: int
    keys: int
    heads: int

    @property
    def entries(self) -> int:
        """Score-matrix entries per head."""
        return self.batch * self.queries * self.keys


@dataclass
class AttentionCounter:
    records: List[AttentionRecord] = field(default_factory=list)

    def record(self, kind: str, batch: int, queries: int, keys: int, heads: int):
        self.records.append(AttentionRecord(kind, batch, queries, keys, heads))

    def entries(self, kind: Optional[str] = None) -> int:
        return sum(r.entries for r in self.records if kind is None or r.kind == kind)

    def max_tokens(self, kind: str) -> int:
        return max((max(r.queries, r.keys) for r in self.records if r.kind == kind), default=0)

    def reset(self):
        self.records.clear()


def kaa_score_entries(T: int, J: int) -> int:
    """Per-head score entries of one round: T (1 + J)^2 structural + T^2 temporal."""
    return T * (1 + J) ** 2 + T ** 2


def cascaded_score_entries(T: int, J: int) -> int:
    """Per-head score entries of a spatial-then-temporal round over all joint tokens."""
    return T * J ** 2 + J * T ** 2


# --- modules ---------------------------------------------------------------------

class Module:
    """Parameters are Tensor attributes with requires_grad; children are Module attributes or lists."""

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + '.'))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator['Module']:
        yield self
        for value in vars(self).values():
            children = value if isinstance(value, list) else [value]
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def attach_counter(self, counter: Optional[AttentionCounter]):
        for module in self.modules():
            if isinstance(module, MultiHeadAttention):
                module.counter = counter

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing[:5]}")
        for name, param in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {param.shape}")
            param.data[...] = value


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = _param(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim)), 'weight')
        self.bias = _param(np.zeros(out_dim), 'bias')

    def __call__(self, x) -> Tensor:
        return as_tensor(x) @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim), 'gain')
        self.bias = _param(np.zeros(dim), 'bias')

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, head_dim: int, rng: np.random.Generator, kind: str = ''):
        self.heads = heads
        self.head_dim = head_dim
        self.kind = kind
        self.counter: Optional[AttentionCounter] = None
        self.query = Linear(dim, heads * head_dim, rng)
        self.key = Linear(dim, heads * head_dim, rng)
        self.value = Linear(dim, heads * head_dim, rng)
        self.out = Linear(heads * head_dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return x.reshape(B, N, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x_q: Tensor, x_kv: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        """x_q (B, Nq, D), x_kv (B, Nk, D); key_mask (B, Nk) is True where a key may be attended."""
        if x_q.ndim != 3 or x_kv.ndim != 3 or x_q.shape[0] != x_kv.shape[0]:
            raise ShapeMismatch(f"attention expects (B, N, D) inputs, got {x_q.shape} and {x_kv.shape}")
        B, Nq, _ = x_q.shape
        Nk = x_kv.shape[1]
        q = self._split(self.query(x_q))
        k = self._split(self.key(x_kv))
        v = self._split(self.value(x_kv))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_dim))
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (B, Nk):
                raise ShapeMismatch(f"key mask {key_mask.shape} does not match {(B, Nk)}")
            scores = scores + np.where(key_mask, 0.0, MASK_FILL)[:, None, None, :]
        if self.counter is not None:
            self.counter.record(self.kind, B, Nq, Nk, self.heads)
        weights = softmax(scores, axis=-1)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Nq, self.heads * self.head_dim)
        return self.out(mixed)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SelfAttentionBlock(Module):
    """Pre-norm self-attention and FFN with residuals."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, kind: str):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.head_dim, rng, kind)
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim, rng)

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        n = self.norm1(x)
        x = x + self.attn(n, n, key_mask)
        return x + self.ffn(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm cross-attention (queries = token stream, keys/values = condition) and FFN."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.norm_q = LayerNorm(cfg.dim)
        self.norm_kv = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.head_dim, rng, 'cross')
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        return x + self.ffn(self.norm2(x))


# --- embeddings ------------------------------------------------------------------

def _fourier_bank(D: int) -> np.ndarray:
    if D % 2:
        raise OddDim(f"embedding width must be even, got {D}")
    return (2.0 ** np.arange(D // 4)) * np.pi / POS_EMBED_SCALE


def fourier_pos_embed(t: float, j: float, D: int) -> np.ndarray:
    """[sin(f t), cos(f t), sin(f j), cos(f j)] over f = 2^i pi / 256, i < D // 4; spare slots zero."""
    return fourier_pos_grid(np.array([t]), np.array([j]), D)[0, 0]


def fourier_pos_grid(frames: Sequence[float], joints: Sequence[float], D: int) -> np.ndarray:
    """len(frames) x len(joints) x D Fourier embeddings (star tokens use joint index -1)."""
    freqs = _fourier_bank(D)
    n = freqs.size
    t = np.asarray(frames, dtype=np.float64)[:, None] * freqs
    j = np.asarray(joints, dtype=np.float64)[:, None] * freqs
    out = np.zeros((t.shape[0], j.shape[0], D))
    out[:, :, 0:n] = np.sin(t)[:, None, :]
    out[:, :, n:2 * n] = np.cos(t)[:, None, :]
    out[:, :, 2 * n:3 * n] = np.sin(j)[None, :, :]
    out[:, :, 3 * n:4 * n] = np.cos(j)[None, :, :]
    return out


def sinusoidal_step_embed(k: int, D: int) -> np.ndarray:
    """Transformer timestep embedding: [sin(k f_i), cos(k f_i)], f_i = 10000^(-i / (D/2))."""
    if D % 2:
        raise OddDim(f"step embedding width must be even, got {D}")
    half = D // 2
    freqs = np.exp(-np.log(STEP_EMBED_BASE) * np.arange(half) / half)
    angles = float(k) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class LabelEmbeddingTable:
    """Fixed Gaussian vector per action label, seeded by the label text."""

    def __init__(self, dim: int, scale: float = 1.0):
        self.dim = dim
        self.scale = scale
        self._cache: Dict[str, np.ndarray] = {}

    def lookup(self, label: str) -> np.ndarray:
        if label not in self._cache:
            rng = np.random.default_rng(utils.label_seed(label))
            vec = self.scale * rng.standard_normal(self.dim)
            vec.flags.writeable = False
            self._cache[label] = vec
        return self._cache[label]


# --- kinematic attention aggregation ---------------------------------------------

@dataclass
class LatentState:
    h: Tensor
    h_star: Tensor
    c: Optional[Tensor] = None

    @property
    def T(self) -> int:
        return self.h.shape[0]


def structural_attention(frame_tokens: Tensor, block: SelfAttentionBlock,
                         key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Self-attention over the (1 + J) tokens of each frame; frames are independent batch rows."""
    frame_tokens = as_tensor(frame_tokens)
    if frame_tokens.ndim != 3:
        raise ShapeMismatch(f"structural attention expects T x (1 + J) x D, got {frame_tokens.shape}")
    return block(frame_tokens, key_mask)


def temporal_attention(stars: Tensor, block: SelfAttentionBlock) -> Tensor:
    """Self-attention over a single stream of star tokens (N x D)."""
    stars = as_tensor(stars)
    if stars.ndim != 2:
        raise ShapeMismatch(f"temporal attention expects N x D star tokens, got {stars.shape}")
    N, D = stars.shape
    return block(stars.reshape(1, N, D)).reshape(N, D)


def broadcast_add_stars(h: Tensor, stars: Tensor) -> Tensor:
    """Add each frame's star vector to every joint token of that frame."""
    h, stars = as_tensor(h), as_tensor(stars)
    if h.ndim != 3 or stars.shape != (h.shape[0], h.shape[2]):
        raise ShapeMismatch(f"cannot add stars {stars.shape} to joint tokens {h.shape}")
    T, _, D = h.shape
    return h + stars.reshape(T, 1, D)


class KaaRound(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.structural = SelfAttentionBlock(cfg, rng, 'structural')
        self.temporal = SelfAttentionBlock(cfg, rng, 'temporal')


def _temporal_stream(stars: Tensor, block: SelfAttentionBlock, prefix: Optional[Tensor]) -> Tensor:
    if prefix is None:
        return temporal_attention(stars, block)
    stream = concat([as_tensor(prefix).reshape(1, stars.shape[1]), stars], axis=0)
    return temporal_attention(stream, block)[1:]


def _structural_pass(h: Tensor, stars: Tensor, block: SelfAttentionBlock,
                     key_mask: Optional[np.ndarray]) -> Tuple[Tensor, Tensor]:
    T, J, D = h.shape
    tokens = concat([stars.reshape(T, 1, D), h], axis=1)
    out = structural_attention(tokens, block, key_mask)
    return out[:, 1:, :], out[:, 0, :]


def kaa_round(state: LatentState, params: KaaRound, order: str = 'structure-first',
              key_mask: Optional[np.ndarray] = None, label_token: Optional[Tensor] = None) -> LatentState:
    """One aggregation round.

    structure-first: structural attention with the star prepended per frame, temporal
    attention over the T stars, broadcast-add of the stars to the joints.
    trajectory-first runs the temporal stage before the structural one.
    A label token, when given, is prepended to the temporal stream and dropped after it.
    """
    h, stars = state.h, state.h_star
    T = h.shape[0]
    if stars.shape != (T, h.shape[2]):
        raise ShapeMismatch(f"expected one star token per frame ({T}), got {stars.shape}")
    if order == 'structure-first':
        h, stars = _structural_pass(h, stars, params.structural, key_mask)
        stars = _temporal_stream(stars, params.temporal, label_token)
    elif order == 'trajectory-first':
        stars = _temporal_stream(stars, params.temporal, label_token)
        h, stars = _structural_pass(h, stars, params.structural, key_mask)
    else:
        raise NetworkError(f"unknown aggregation order '{order}'")
    return LatentState(broadcast_add_stars(h, stars), stars)


class CascadedRound(Module):
    """Joint-level baseline: spatial attention over J per frame, then temporal over T per joint."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.spatial = SelfAttentionBlock(cfg, rng, 'spatial')
        self.temporal = SelfAttentionBlock(cfg, rng, 'temporal-joint')


def cascaded_round(h: Tensor, params: CascadedRound) -> Tensor:
    h = as_tensor(h)
    if h.ndim != 3:
        raise ShapeMismatch(f"cascaded round expects T x J x D, got {h.shape}")
    h = params.spatial(h)
    per_joint = params.temporal(h.transpose(1, 0, 2))
    return per_joint.transpose(1, 0, 2)


# --- encoder / decoder -------------------------------------------------------------

def _frame_key_mask(visible: np.ndarray) -> np.ndarray:
    """T x (1 + J) attention mask: the star is always a valid key, hidden joints never are."""
    T = visible.shape[0]
    return np.concatenate([np.ones((T, 1), dtype=bool), visible], axis=1)


class KinematicEncoder(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.in_dim, cfg.dim, rng)
        self.star = _param(rng.normal(0.0, STAR_INIT_STD, cfg.dim), 'star')
        self.rounds = [KaaRound(cfg, rng) for _ in range(cfg.depth)]

    def positions(self, T: int, J: int, t0: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        frames = np.arange(t0, t0 + T)
        joints = np.arange(J) if self.cfg.use_joint_pos else np.zeros(J)
        joint_pos = fourier_pos_grid(frames, joints, self.cfg.dim)
        star_pos = fourier_pos_grid(frames, [-1.0], self.cfg.dim)[:, 0, :]
        return joint_pos, star_pos

    def __call__(self, d, visible: np.ndarray, k: Optional[int] = None,
                 label_token: Optional[Tensor] = None) -> LatentState:
        """Encode the visible cells of d (T x J x in_dim); hidden cells enter as zeros and are never keys."""
        cfg = self.cfg
        d = as_tensor(d)
        visible = np.asarray(visible, dtype=bool)
        if d.ndim != 3 or d.shape[2] != cfg.in_dim or visible.shape != d.shape[:2]:
            raise ShapeMismatch(f"encoder expects T x J x {cfg.in_dim} input with a T x J mask, "
                                f"got {d.shape} and {visible.shape}")
        T, J, _ = d.shape
        joint_pos, star_pos = self.positions(T, J)
        step = sinusoidal_step_embed(k, cfg.dim) if k is not None else np.zeros(cfg.dim)

        h = self.proj(d * visible[:, :, None].astype(np.float64)) + (joint_pos + step)
        stars = self.star.reshape(1, cfg.dim).broadcast_to((T, cfg.dim)) + (star_pos + step)
        key_mask = _frame_key_mask(visible)

        state = LatentState(h, stars)
        for i, params in enumerate(self.rounds):
            if i > 0 and cfg.pos_embed_per_round:
                state = LatentState(state.h + joint_pos, state.h_star + star_pos)
            state = kaa_round(state, params, cfg.aggregation_order, key_mask, label_token)
            if label_token is None and state.h_star.shape[0] != T:
                raise ShapeMismatch(f"star count {state.h_star.shape[0]} != {T} frames")
        state.c = state.h_star
        return state


def kinematic_encode(encoder: KinematicEncoder, d, visible: np.ndarray,
                     k: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """(latents of the visible cells in (t, j) order, condition c of shape T x D)."""
    visible = np.asarray(visible, dtype=bool)
    state = encoder(d, visible, k)
    return state.h[np.nonzero(visible)], state.c


@dataclass(frozen=True)
class TokenLayout:
    """Decoder token order: unmasked cells first, then masked cells, each (t, j)-lexicographic."""

    T: int
    J: int
    order: np.ndarray
    n_unmasked: int

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> 'TokenLayout':
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise LayoutError(f"mask must be T x J, got {mask.shape}")
        flat = mask.reshape(-1)
        order = np.concatenate([np.flatnonzero(~flat), np.flatnonzero(flat)])
        return cls(mask.shape[0], mask.shape[1], order, int((~flat).sum()))

    @property
    def n_masked(self) -> int:
        return self.order.size - self.n_unmasked

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.order, kind='stable')

    @property
    def cells(self) -> Tuple[np.ndarray, np.ndarray]:
        """(t, j) slot of every token in layout order."""
        return np.divmod(self.order, self.J)

    def check(self, n_unmasked: int, n_masked: int):
        if sorted(self.order.tolist()) != list(range(self.T * self.J)):
            raise LayoutError("layout order is not a permutation of the T x J cells")
        if n_unmasked != self.n_unmasked or n_masked != self.n_masked:
            raise LayoutError(f"got {n_unmasked} unmasked + {n_masked} masked tokens, layout expects "
                              f"{self.n_unmasked} + {self.n_masked}")

    def reassemble(self, tokens: Tensor) -> Tensor:
        """Layout-ordered tokens (T*J x C) back to the T x J x C grid."""
        return tokens[self.inverse].reshape(self.T, self.J, tokens.shape[-1])


class MotionDecoder(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.noised_proj = Linear(cfg.in_dim, cfg.dim, rng)
        self.blocks = [CrossAttentionBlock(cfg, rng) for _ in range(cfg.decoder_depth)]
        self.head = Linear(cfg.dim, cfg.out_dim, rng)


def motion_decode(decoder: MotionDecoder, h_unmasked: Tensor, z_masked: Tensor, c: Tensor,
                  k: Optional[int], layout: TokenLayout) -> Tensor:
    """Cross-attend the token stream (unmasked latents ++ masked tokens) to c; return T x J x out_dim."""
    cfg = decoder.cfg
    h_unmasked, z_masked, c = as_tensor(h_unmasked), as_tensor(z_masked), as_tensor(c)
    layout.check(h_unmasked.shape[0], z_masked.shape[0])
    tokens = concat([h_unmasked.reshape(-1, cfg.dim), z_masked.reshape(-1, cfg.dim)], axis=0)
    t_idx, j_idx = layout.cells
    joints = np.arange(layout.J) if cfg.use_joint_pos else np.zeros(layout.J)
    entry = fourier_pos_grid(np.arange(layout.T), joints, cfg.dim)[t_idx, j_idx]
    if k is not None:
        entry = entry + sinusoidal_step_embed(k, cfg.dim)
    x = (tokens + entry).reshape(1, tokens.shape[0], cfg.dim)
    context = c.reshape(1, c.shape[0], cfg.dim)
    for block in decoder.blocks:
        x = block(x, context)
    out = decoder.head(x.reshape(tokens.shape[0], cfg.dim))
    return layout.reassemble(out)


# --- models -----------------------------------------------------------------------

class MaskedMotionDiffusion(Module):
    """Encoder over visible cells, decoder over unmasked latents ++ projected noised masked cells."""

    kind = 'completion'

    def __init__(self, cfg: NetworkConfig):
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.encoder = KinematicEncoder(cfg, rng)
        self.decoder = MotionDecoder(cfg, rng)
        self.mask_token = _param(rng.normal(0.0, STAR_INIT_STD, cfg.dim), 'mask_token')

    def predict(self, x_k: np.ndarray, k: int, cond: np.ndarray, mask: np.ndarray,
                visible: Optional[np.ndarray] = None) -> Tensor:
        """Raw model output for every cell.

        cond holds the observed motion; the encoder sees the cells flagged in
        `visible` (default: the unmasked ones). Masked cells enter the decoder
        as projections of x_k.
        """
        mask = np.asarray(mask, dtype=bool)
        cond = np.asarray(cond, dtype=np.float64)
        x_k = np.asarray(x_k, dtype=np.float64)
        if x_k.shape != cond.shape or mask.shape != cond.shape[:2]:
            raise ShapeMismatch(f"x_k {x_k.shape}, cond {cond.shape} and mask {mask.shape} disagree")
        visible = ~mask if visible is None else np.asarray(visible, dtype=bool)
        state = self.encoder(cond, visible, k)
        h_unmasked = state.h[np.nonzero(~mask)]
        z_masked = self.decoder.noised_proj(x_k[mask].reshape(-1, self.cfg.in_dim))
        return motion_decode(self.decoder, h_unmasked, z_masked, state.c, k, TokenLayout.from_mask(mask))

    def predictor(self, sched: DiffusionSchedule, mask: np.ndarray, objective: str = 'signal',
                  visible: Optional[np.ndarray] = None):
        """predict_x0(x_k, k, cond) closure for the reverse samplers."""
        def predict_x0(x_k, k, cond):
            with no_grad():
                out = self.predict(x_k, k, cond, mask, visible).data
            return to_signal(out, x_k, k, sched, objective)

        return predict_x0

    def training_loss(self, x0: np.ndarray, mask: np.ndarray, sched: DiffusionSchedule,
                      rng: np.random.Generator, objective: str = 'signal', full: bool = False,
                      cond: Optional[np.ndarray] = None) -> Tensor:
        """Masked-cell loss (completion) or all-cell loss with an observed `cond` (refinement)."""
        state: NoisedState = sample_noised_state(x0, sched, rng)
        if full:
            cond = x0 if cond is None else cond
            everything = np.ones(np.shape(x0)[:2], dtype=bool)
            pred = self.predict(state.x_k, state.k, cond, everything, visible=everything)
            return loss_full(pred, training_target(x0, state, objective))
        pred = self.predict(state.x_k, state.k, x0, mask)
        return loss_masked(pred, training_target(x0, state, objective), mask)

    def mae_forward(self, d: np.ndarray, mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Single-pass masked-autoencoder reconstruction with the shared learned mask token."""
        mask = np.asarray(mask, dtype=bool)
        layout = TokenLayout.from_mask(mask)

        def encoder(values, m):
            return kinematic_encode(self.encoder, values, ~m)

        def decoder(h_unmasked, z_masked, c, m):
            return motion_decode(self.decoder, h_unmasked, z_masked, c, None, layout)

        return mae_reconstruct(encoder, decoder, d, mask, self.mask_token)


class InbetweenEncoder(Module):
    """Encoder-only stack over the whole (preceding ++ noised transition ++ succeeding) sequence."""

    kind = 'inbetween'

    def __init__(self, cfg: NetworkConfig):
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.encoder = KinematicEncoder(cfg, rng)
        self.label_proj = Linear(cfg.dim, cfg.dim, rng)
        self.head = Linear(cfg.dim, cfg.out_dim, rng)

    def predict_full(self, x: np.ndarray, k: int, label: Optional[np.ndarray] = None) -> Tensor:
        """Prediction for every frame of x (T x J x in_dim); label is a D-vector or None."""
        x = as_tensor(x)
        T, J, _ = x.shape
        token = None
        if label is not None:
            token = self.label_proj(as_tensor(label).reshape(1, self.cfg.dim))
        state = self.encoder(x, np.ones((T, J), dtype=bool), k, label_token=token)
        return self.head(state.h)


def inbetween_encode(model: InbetweenEncoder, d_p: np.ndarray, d_q_k: np.ndarray, d_r: np.ndarray,
                     label: Optional[np.ndarray], k: int, split: SegmentSplit) -> Tensor:
    """Transition estimate (T1 x J x out_dim) from the concatenated segments and the label token."""
    lengths = (np.shape(d_p)[0], np.shape(d_q_k)[0], np.shape(d_r)[0])
    if lengths != (split.preceding, split.transition, split.succeeding):
        raise SplitError(f"segment lengths {lengths} do not match split "
                         f"{(split.preceding, split.transition, split.succeeding)}")
    shapes = {np.shape(a)[1:] for a in (d_p, d_q_k, d_r)}
    if len(shapes) != 1:
        raise SplitError(f"segments disagree on joint/feature shape: {sorted(shapes)}")
    full = model.predict_full(np.concatenate([d_p, d_q_k, d_r], axis=0), k, label)
    return full[split.transition_slice]


# --- checkpoints --------------------------------------------------------------------

Model = Union[MaskedMotionDiffusion, InbetweenEncoder]


def build_model(kind: str, cfg: NetworkConfig) -> Model:
    if kind == 'completion':
        return MaskedMotionDiffusion(cfg)
    if kind == 'inbetween':
        return InbetweenEncoder(cfg)
    raise NetworkError(f"unknown model kind '{kind}', expected one of {MODEL_KINDS}")


def save_checkpoint(path: str, model: Model, extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[Dict] = None):
    """Named parameter arrays plus the network config, model kind and format version."""
    arrays = {f"param.{name}": value for name, value in model.state_arrays().items()}
    for name, value in (extra or {}).items():
        arrays[f"extra.{name}"] = np.asarray(value)
    header = {'version': CHECKPOINT_VERSION, 'kind': model.kind, 'network': model.cfg.to_dict(),
              'meta': meta or {}}
    arrays['header'] = np.array(json.dumps(header, sort_keys=True))
    write_npz(path, arrays)
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path: str) -> Tuple[Model, Dict[str, np.ndarray], Dict]:
    """(model, extra arrays, meta); IoError when the file cannot be read."""
    arrays = read_npz(path)
    if 'header' not in arrays:
        raise CheckpointError(f"{path} has no header")
    try:
        header = json.loads(str(arrays['header']))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if header.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                              f"is not {CHECKPOINT_VERSION}")
    try:
        cfg = NetworkConfig.from_dict(header['network'])
        model = build_model(header['kind'], cfg)
    except (KeyError, NetworkError) as e:
        raise CheckpointError(f"{path}: invalid network description: {e}") from e
    params = {name[len('param.'):]: value for name, value in arrays.items() if name.startswith('param.')}
    model.load_state_arrays(params)
    extra = {name[len('extra.'):]: value for name, value in arrays.items() if name.startswith('extra.')}
    logger.info(f"Loaded {header['kind']} checkpoint from {path}")
    return model, extra, header.get('meta', {})
