"""
Noise schedules, forward diffusion, DDPM/DDIM reverse steps, restoration of
unmasked cells and the training losses.

Step indices run 1..K; step 0 is the clean signal (alpha_bar(0) = 1).
Reverse steps take a `predict_x0(x_k, k, cond)` closure, so any model
(or an oracle stub) can drive them.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Tuple, Union

import numpy as np

from tensor import ShapeMismatch, Tensor, as_tensor

logger = logging.getLogger(__name__)

BETA_START = 1e-4
BETA_END = 2e-2
BETA_MAX = 0.999
COSINE_OFFSET = 0.008
REFERENCE_STEPS = 1000
DEFAULT_TAIL = 1e-2

SCHEDULE_KINDS = ('scaled-linear', 'cosine')
OBJECTIVES = ('signal', 'noise')

ArrayOrTensor = Union[np.ndarray, Tensor]
PredictX0 = Callable[[np.ndarray, int, Any], np.ndarray]


class DiffusionError(ValueError):
    """Base class for diffusion errors."""


class UnreachableTail(DiffusionError):
    """No schedule with betas below 1 reaches the requested alpha_bar tail."""


class StepOutOfRange(DiffusionError):
    """Step index outside [0, K] (or [1, K] where a step is required)."""


class StepOrderError(DiffusionError):
    """A DDIM jump must go to a strictly smaller step."""


class EmptyMask(DiffusionError):
    """A masked loss or reconstruction was asked for with nothing masked."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """betas, alphas and cumulative alpha_bars for steps 1..K (stored at index k-1)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = 'custom'

    @classmethod
    def from_betas(cls, betas, kind: str = 'custom') -> 'DiffusionSchedule':
        betas = np.array(betas, dtype=np.float64).reshape(-1)
        if betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise DiffusionError("betas must be a nonempty list of values in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.flags.writeable = False
        return cls(betas, alphas, alpha_bars, kind)

    @property
    def K(self) -> int:
        return self.betas.size

    def _check(self, k: int, lowest: int = 0):
        if not lowest <= k <= self.K:
            raise StepOutOfRange(f"step {k} outside [{lowest}, {self.K}]")

    def alpha_bar(self, k: int) -> float:
        self._check(k)
        return 1.0 if k == 0 else float(self.alpha_bars[k - 1])

    def beta(self, k: int) -> float:
        self._check(k, 1)
        return float(self.betas[k - 1])

    def alpha(self, k: int) -> float:
        self._check(k, 1)
        return float(self.alphas[k - 1])

    def posterior_variance(self, k: int) -> float:
        """beta tilde: beta_k (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k); zero at k=1."""
        self._check(k, 1)
        return self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))


def _scaled_linear_betas(K: int, target_tail: float, beta_start: float, beta_end: float) -> np.ndarray:
    base = np.array([beta_end]) if K == 1 else np.linspace(beta_start, beta_end, K)
    multiplier = REFERENCE_STEPS / K
    while True:
        betas = np.minimum(base * multiplier, BETA_MAX)
        if np.prod(1.0 - betas) <= target_tail:
            return betas
        if np.all(betas >= BETA_MAX):
            raise UnreachableTail(
                f"K={K} cannot reach alpha_bar <= {target_tail} with betas capped at {BETA_MAX}")
        multiplier *= 2.0


def _cosine_betas(K: int) -> np.ndarray:
    steps = np.arange(K + 1, dtype=np.float64)
    f = np.cos((steps / K + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
    alpha_bars = f / f[0]
    betas = 1.0 - alpha_bars[1:] / alpha_bars[:-1]
    return np.clip(betas, 1e-8, BETA_MAX)


def make_schedule(K: int, kind: str = 'scaled-linear', target_tail: float = DEFAULT_TAIL,
                  beta_start: float = BETA_START, beta_end: float = BETA_END) -> DiffusionSchedule:
    """Generation schedule whose final alpha_bar is at most target_tail.

    scaled-linear stretches the base ramp beta_start..beta_end by 1000/K and keeps
    doubling the stretch (betas capped at 0.999) until the tail is reached.
    """
    if K < 1:
        raise DiffusionError(f"K must be >= 1, got {K}")
    if not 0.0 < target_tail < 1.0:
        raise DiffusionError(f"target_tail must be in (0, 1), got {target_tail}")
    if kind == 'scaled-linear':
        betas = _scaled_linear_betas(K, target_tail, beta_start, beta_end)
    elif kind == 'cosine':
        betas = _cosine_betas(K)
    else:
        raise DiffusionError(f"unknown schedule kind '{kind}', expected one of {SCHEDULE_KINDS}")

    schedule = DiffusionSchedule.from_betas(betas, kind)
    if schedule.alpha_bar(K) > target_tail:
        raise UnreachableTail(f"{kind} schedule with K={K} ends at alpha_bar "
                              f"{schedule.alpha_bar(K):.3g} > {target_tail}")
    logger.debug(f"{kind} schedule K={K}: alpha_bar_K={schedule.alpha_bar(K):.3e}")
    return schedule


@dataclass
class NoisedState:
    x_k: np.ndarray
    k: int
    eps: Optional[np.ndarray] = None


def _shape(a) -> Tuple[int, ...]:
    return a.shape if isinstance(a, Tensor) else np.shape(a)


def _check_same_shape(a, b, what: str):
    if _shape(a) != _shape(b):
        raise ShapeMismatch(f"{what}: shapes {_shape(a)} and {_shape(b)} differ")


def forward_diffuse(x0: np.ndarray, k: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"forward_diffuse: x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bar(k)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sample_noised_state(x0: np.ndarray, sched: DiffusionSchedule, rng: np.random.Generator,
                        k: Optional[int] = None) -> NoisedState:
    """Uniform step in [1, K] (unless given) and a fresh standard-normal eps."""
    k = int(rng.integers(1, sched.K + 1)) if k is None else k
    eps = rng.standard_normal(np.shape(x0))
    return NoisedState(forward_diffuse(x0, k, eps, sched), k, eps)


def x0_from_eps(x_k: ArrayOrTensor, k: int, eps: ArrayOrTensor, sched: DiffusionSchedule) -> ArrayOrTensor:
    if k < 1:
        raise StepOutOfRange("x0_from_eps needs k >= 1")
    ab = sched.alpha_bar(k)
    return (x_k - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def eps_from_x0(x_k: ArrayOrTensor, k: int, x0: ArrayOrTensor, sched: DiffusionSchedule) -> ArrayOrTensor:
    if k < 1:
        raise StepOutOfRange("eps_from_x0 needs k >= 1")
    ab = sched.alpha_bar(k)
    return (x_k - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


def to_signal(prediction: ArrayOrTensor, x_k: ArrayOrTensor, k: int, sched: DiffusionSchedule,
              objective: str = 'signal') -> ArrayOrTensor:
    """Model output as an x0 estimate, whichever objective the model was trained with."""
    if objective == 'signal':
        return prediction
    if objective == 'noise':
        return x0_from_eps(x_k, k, prediction, sched)
    raise DiffusionError(f"unknown objective '{objective}', expected one of {OBJECTIVES}")


def training_target(x0: np.ndarray, state: NoisedState, objective: str = 'signal') -> np.ndarray:
    if objective == 'signal':
        return x0
    if objective == 'noise':
        return state.eps
    raise DiffusionError(f"unknown objective '{objective}', expected one of {OBJECTIVES}")


def posterior_mean(x0_hat: ArrayOrTensor, x_k: ArrayOrTensor, k: int, sched: DiffusionSchedule) -> ArrayOrTensor:
    """Mean of q(x_{k-1} | x_k, x0) with x0 replaced by the model estimate."""
    sched._check(k, 1)
    ab, ab_prev = sched.alpha_bar(k), sched.alpha_bar(k - 1)
    coef_x0 = sched.beta(k) * np.sqrt(ab_prev) / (1.0 - ab)
    coef_xk = (1.0 - ab_prev) * np.sqrt(sched.alpha(k)) / (1.0 - ab)
    return coef_x0 * x0_hat + coef_xk * x_k


def posterior_step(x0_hat: np.ndarray, x_k: np.ndarray, k: int, sched: DiffusionSchedule,
                   rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None,
                   shift: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw x_{k-1} ~ N(mu + shift, beta_tilde_k); at k=1 the result is x0_hat (+ shift)."""
    if k == 1:
        out = np.array(x0_hat, dtype=np.float64)
        return out if shift is None else out + shift
    mean = posterior_mean(x0_hat, x_k, k, sched)
    if shift is not None:
        mean = mean + shift
    if noise is None:
        if rng is None:
            raise DiffusionError("posterior_step needs either rng or noise")
        noise = rng.standard_normal(np.shape(x_k))
    return mean + np.sqrt(sched.posterior_variance(k)) * noise


def reverse_step_ddpm(predict_x0: PredictX0, x_k: np.ndarray, k: int, cond: Any,
                      sched: DiffusionSchedule, rng: Optional[np.random.Generator] = None,
                      noise: Optional[np.ndarray] = None) -> np.ndarray:
    sched._check(k, 1)
    x0_hat = predict_x0(x_k, k, cond)
    _check_same_shape(x0_hat, x_k, 'reverse_step_ddpm')
    return posterior_step(x0_hat, x_k, k, sched, rng=rng, noise=noise)


def ddim_timesteps(K: int, stride: int) -> List[int]:
    """Visited steps for a DDIM pass: K, K - stride, ..., always ending at 0."""
    if stride < 1:
        raise StepOrderError(f"DDIM stride must be >= 1, got {stride}")
    steps = list(range(K, -1, -stride))
    if steps[-1] != 0:
        steps.append(0)
    return steps


def reverse_step_ddim(predict_x0: PredictX0, x_k: np.ndarray, k: int, k_next: int, cond: Any,
                      sched: DiffusionSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from step k to k_next."""
    if k_next >= k:
        raise StepOrderError(f"DDIM needs k_next < k, got {k_next} >= {k}")
    sched._check(k, 1)
    sched._check(k_next)
    x0_hat = predict_x0(x_k, k, cond)
    _check_same_shape(x0_hat, x_k, 'reverse_step_ddim')
    if k_next == 0:
        return np.array(x0_hat, dtype=np.float64)
    eps = eps_from_x0(x_k, k, x0_hat, sched)
    ab_next = sched.alpha_bar(k_next)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps


def _cell_mask(mask: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == shape:
        return mask
    if mask.shape == shape[:mask.ndim]:
        return mask.reshape(mask.shape + (1,) * (len(shape) - mask.ndim))
    raise ShapeMismatch(f"mask shape {mask.shape} does not fit values {shape}")


def restore_unmasked(x: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep x on masked cells and the original input everywhere else."""
    x, original = np.asarray(x), np.asarray(original)
    if x.shape != original.shape:
        raise ShapeMismatch(f"restore_unmasked: {x.shape} vs {original.shape}")
    return np.where(_cell_mask(mask, x.shape), x, original)


def loss_masked(pred: ArrayOrTensor, target: np.ndarray, mask: np.ndarray) -> ArrayOrTensor:
    """Mean squared error over the scalar entries of masked cells."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    _check_same_shape(pred, target, 'loss_masked')
    weights = np.broadcast_to(_cell_mask(mask, target.shape), target.shape).astype(np.float64)
    count = weights.sum()
    if count == 0:
        raise EmptyMask("loss_masked: no masked cells")
    if isinstance(pred, Tensor):
        diff = pred - target
        return (diff * diff * weights).sum() / count
    diff = np.asarray(pred) - target
    return float(np.sum(diff * diff * weights) / count)


def loss_full(pred: ArrayOrTensor, target: np.ndarray) -> ArrayOrTensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    _check_same_shape(pred, target, 'loss_full')
    if isinstance(pred, Tensor):
        diff = pred - target
        return (diff * diff).mean()
    return float(np.mean((np.asarray(pred) - target) ** 2))


def mae_reconstruct(encoder: Callable, decoder: Callable, d: np.ndarray, mask: np.ndarray,
                    z_learned: Tensor) -> Tuple[Tensor, Tensor]:
    """One-pass masked-autoencoder reconstruction (no diffusion).

    encoder(d, mask) -> (h_unmasked, c); decoder(h_unmasked, z_masked, c, mask) -> d_hat.
    z_learned is one shared mask token (D,) or one token per masked cell (n_masked, D).
    Returns d_hat and the loss over masked cells only.
    """
    d = np.asarray(d, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != d.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} does not match motion {d.shape[:2]}")
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise EmptyMask("mae_reconstruct: no masked cells to reconstruct")
    z_learned = as_tensor(z_learned)
    if z_learned.ndim == 1:
        z_masked = z_learned.reshape(1, -1).broadcast_to((n_masked, z_learned.shape[0]))
    elif z_learned.ndim == 2 and z_learned.shape[0] == n_masked:
        z_masked = z_learned
    else:
        raise ShapeMismatch(f"z_learned shape {z_learned.shape} does not match {n_masked} masked tokens")

    h_unmasked, c = encoder(d, mask)
    d_hat = decoder(h_unmasked, z_masked, c, mask)
    _check_same_shape(d_hat, d, 'mae_reconstruct')
    return d_hat, loss_masked(d_hat, d, mask)
