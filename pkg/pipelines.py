"""
Task orchestration for masked motion diffusion.
Training, completion, refinement, in-betweening, capture simulation and
evaluation, each writing its artifacts through a DataManager.
"""

import logging
from dataclasses import dataclass
from functools import reduce
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from config import ImputationConfig, TaskConfig
from data_manager import DataManager, IoError
from diffusion import (
    DiffusionSchedule, ddim_timesteps, make_schedule, posterior_step, restore_unmasked,
    reverse_step_ddim, reverse_step_ddpm, sample_noised_state, to_signal, training_target, loss_full,
)
from kaa_network import (
    CheckpointError, InbetweenEncoder, LabelEmbeddingTable, MaskedMotionDiffusion, build_model,
    load_checkpoint, save_checkpoint,
)
from masking import build_mask, MaskPattern, QualitySignals
from metrics import (
    POSITION_METRICS, ROTATION_METRICS, MetricError, MetricReport, ShapeMismatch, SkeletonSpec,
    evaluate_positions, evaluate_rotations, mpjpe, relative_change,
)
from mocap_sim import (
    CameraRig, DetectionSet, Reconstruction3D, default_rig, hungarian_match, load_rig, format_rig,
    reconstruct, simulate_detections, simulate_quality_signals,
)
from motion_data import (
    JOINT_TOKENS, MotionSequence, SegmentSplit, default_skeleton, format_motion, joint_quaternions,
    load_motion, pack_joint_level, channels_from_positions, positions_from_channels, heading_of,
    random_augment, synth_dataset, synth_motion, unpack_joint_level, JointLevelRepr,
)
from optimizer import AdamW
from tensor import NonFiniteValue, Tensor, backward, concat, no_grad
import utils

logger = logging.getLogger(__name__)

DDIM_COMPARE_STRIDES = (1, 5, 10)
# Lateral spacing of simulated people, meters
PERSON_SPACING = 1.5


class PipelineError(ValueError):
    """A task could not run with the given inputs."""


class NoCheckpoint(PipelineError):
    """No usable trained parameters for the task."""


class BadSplit(PipelineError):
    """In-betweening input does not match the configured segment split."""


class EmptyDataset(PipelineError):
    """Training was asked to run on no sequences."""


class DivergedLoss(PipelineError):
    """Training produced a non-finite loss or gradient."""


# --- reverse sampling ---------------------------------------------------------------

def sample_completion(predict_x0: Callable, observed: np.ndarray, mask: np.ndarray,
                      sched: DiffusionSchedule, rng: np.random.Generator, ddim_stride: int = 0) -> np.ndarray:
    """Generate the masked cells from Gaussian noise; unmasked cells stay the observed values."""
    observed = np.asarray(observed, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return observed.copy()
    x = restore_unmasked(rng.standard_normal(observed.shape), observed, mask)
    if ddim_stride:
        steps = ddim_timesteps(sched.K, ddim_stride)
        for k, k_next in zip(steps[:-1], steps[1:]):
            x = restore_unmasked(reverse_step_ddim(predict_x0, x, k, k_next, observed, sched), observed, mask)
    else:
        for k in range(sched.K, 0, -1):
            x = restore_unmasked(reverse_step_ddpm(predict_x0, x, k, observed, sched, rng), observed, mask)
    return x


def sample_refinement(predict_x0: Callable, observed: np.ndarray, sched: DiffusionSchedule,
                      rng: np.random.Generator, ddim_stride: int = 0) -> np.ndarray:
    """Reverse chain that starts from the observed motion instead of noise and updates every cell."""
    observed = np.asarray(observed, dtype=np.float64)
    x = observed.copy()
    if ddim_stride:
        steps = ddim_timesteps(sched.K, ddim_stride)
        for k, k_next in zip(steps[:-1], steps[1:]):
            x = reverse_step_ddim(predict_x0, x, k, k_next, observed, sched)
    else:
        for k in range(sched.K, 0, -1):
            x = reverse_step_ddpm(predict_x0, x, k, observed, sched, rng)
    return x


def apply_emphasis(values: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * scale


def remove_emphasis(values: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) / scale


def _boundary_goal(d0_hat: Tensor, target_p: np.ndarray, target_r: np.ndarray, split: SegmentSplit) -> Tensor:
    """Squared L2 distance of the predicted boundary segments to the given ones."""
    diff_p = d0_hat[:split.preceding] - target_p
    diff_r = d0_hat[split.preceding + split.transition:] - target_r
    return (diff_p * diff_p).sum() + (diff_r * diff_r).sum()


def sample_inbetween(model, d_p: np.ndarray, d_r: np.ndarray, split: SegmentSplit, sched: DiffusionSchedule,
                     rng: np.random.Generator, imputation: ImputationConfig = ImputationConfig(),
                     label: Optional[np.ndarray] = None, objective: str = 'signal') -> np.ndarray:
    """Full sequence (preceding ++ transition ++ succeeding) generated by boundary imputation.

    Every step the model sees the (emphasis-scaled) boundaries around the noisy
    transition, its boundary estimate is replaced by the given segments before
    the posterior mean, and with a positive guidance scale the mean is shifted
    against the gradient of the boundary goal. The returned boundaries are the
    inputs themselves.
    """
    d_p = np.asarray(d_p, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)
    if d_p.shape[0] != split.preceding or d_r.shape[0] != split.succeeding or d_p.shape[1:] != d_r.shape[1:]:
        raise BadSplit(f"boundary segments {d_p.shape} and {d_r.shape} do not fit split "
                       f"{(split.preceding, split.transition, split.succeeding)}")
    J, d = d_p.shape[1:]
    scale = imputation.emphasis_scale(J, d)
    m_p, m_r = apply_emphasis(d_p, scale), apply_emphasis(d_r, scale)
    transition = split.transition_slice
    s = imputation.guidance_scale

    x = rng.standard_normal((split.total, J, d))
    for k in range(sched.K, 0, -1):
        x_in = np.concatenate([m_p, x[transition], m_r], axis=0)
        shift = None
        if s > 0:
            x_t = Tensor(x_in, requires_grad=True)
            out = model.predict_full(x_t, k, label)
            d0_hat = concat([out[:split.preceding], to_signal(out[transition], x_t[transition], k, sched, objective),
                             out[split.preceding + split.transition:]], axis=0)
            grad = backward(_boundary_goal(d0_hat, m_p, m_r, split), wrt=[x_t])[x_t]
            shift = -s * grad
            d0 = d0_hat.data
        else:
            with no_grad():
                out = model.predict_full(x_in, k, label).data
            d0 = out.copy()
            d0[transition] = to_signal(out[transition], x_in[transition], k, sched, objective)
        imputed = np.concatenate([m_p, d0[transition], m_r], axis=0)
        x = posterior_step(imputed, x_in, k, sched, rng=rng, shift=shift)

    result = remove_emphasis(x, scale)
    result[:split.preceding] = d_p
    result[split.preceding + split.transition:] = d_r
    return result


def inbetween_training_loss(model: InbetweenEncoder, x0: np.ndarray, split: SegmentSplit, sched: DiffusionSchedule,
                            rng: np.random.Generator, objective: str = 'signal',
                            label: Optional[np.ndarray] = None) -> Tensor:
    """Clean boundaries around a noised transition; boundaries are always predicted as signal."""
    x0 = np.asarray(x0, dtype=np.float64)
    transition = split.transition_slice
    state = sample_noised_state(x0[transition], sched, rng)
    x_in = x0.copy()
    x_in[transition] = state.x_k
    target = x0.copy()
    target[transition] = training_target(x0[transition], state, objective)
    return loss_full(model.predict_full(x_in, state.k, label), target)


def label_vector(model, label: str) -> Optional[np.ndarray]:
    """Action label embedding sized for the model, None for an unlabeled sequence."""
    return LabelEmbeddingTable(model.cfg.dim).lookup(label) if label else None


# --- in-betweening data -------------------------------------------------------------------

@dataclass(frozen=True)
class InbetweenSample:
    positions: np.ndarray
    rep: JointLevelRepr
    label: str

    @classmethod
    def from_positions(cls, positions: np.ndarray, label: str = '') -> 'InbetweenSample':
        return cls(np.asarray(positions, dtype=np.float64), pack_joint_level(channels_from_positions(positions)), label)


def inbetween_dataset(count: int, split: SegmentSplit, seed: int, kinds: Sequence[str]) -> List[InbetweenSample]:
    samples = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        motion = synth_motion(kind, split.total, JOINT_TOKENS, utils.derive_seed(seed, 'inbetween', i))
        samples.append(InbetweenSample.from_positions(motion.values, kind))
    return samples


def _global_positions(rep: JointLevelRepr, reference: np.ndarray) -> np.ndarray:
    """Integrate a joint-level sequence from the first frame of the reference positions."""
    return positions_from_channels(unpack_joint_level(rep), reference[0, 0], float(heading_of(reference)[0]))


def interpolation_baseline(positions: np.ndarray, quats: np.ndarray,
                           split: SegmentSplit) -> Tuple[np.ndarray, np.ndarray]:
    """Linear positions and slerped joint rotations between the last preceding and first succeeding frame."""
    a, b = split.preceding - 1, split.preceding + split.transition
    alphas = np.arange(1, split.transition + 1) / (split.transition + 1)
    lerp = positions[a][None] + alphas[:, None, None] * (positions[b] - positions[a])[None]
    slerped = np.empty((split.transition,) + quats.shape[1:])
    for j in range(quats.shape[1]):
        slerp = Slerp([0.0, 1.0], Rotation.from_quat(np.stack([quats[a, j], quats[b, j]])))
        slerped[:, j] = slerp(alphas).as_quat()
    return lerp, slerped


# --- results --------------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: object
    checkpoint: str
    best_checkpoint: Optional[str]
    curve: List[Dict[str, float]]
    report: MetricReport


@dataclass
class SimulationResult:
    detections: DetectionSet
    reconstruction: Reconstruction3D
    masks: List[np.ndarray]
    report: MetricReport


class TaskManager:
    """Runs one configured task against a run directory."""

    def __init__(self, cfg: TaskConfig, data_manager: Optional[DataManager] = None):
        """Initialize the task manager."""
        self.cfg = cfg
        self.data_manager = data_manager if data_manager else DataManager(cfg.output_dir or 'runs')
        self._rig: Optional[CameraRig] = None

    # --- shared helpers ---------------------------------------------------------------

    @property
    def rig(self) -> CameraRig:
        if self._rig is None:
            sim = self.cfg.simulation
            self._rig = load_rig(sim.rig) if sim.rig else default_rig(sim.views, sim.radius, sim.height)
        return self._rig

    def _rng(self, *keys) -> np.random.Generator:
        return np.random.default_rng(utils.derive_seed(self.cfg.seed, *keys))

    def _report(self) -> MetricReport:
        return MetricReport(metadata=self.cfg.metadata())

    def load_model(self, kind: str, path: Optional[str] = None):
        """Trained model of the given kind from the configured checkpoint."""
        path = path or self.cfg.checkpoint
        if not path:
            raise NoCheckpoint(f"task '{self.cfg.task}' needs a trained checkpoint (--checkpoint)")
        try:
            model, _, _ = load_checkpoint(path)
        except (IoError, CheckpointError) as e:
            raise NoCheckpoint(f"cannot use checkpoint {path}: {e}") from e
        if model.kind != kind:
            raise NoCheckpoint(f"{path} holds a {model.kind} model, task '{self.cfg.task}' needs {kind}")
        return model

    def _position_names(self, T: int, J: int) -> List[str]:
        names = [n for n in self.cfg.metrics if n in POSITION_METRICS]
        skipped = sorted(set(self.cfg.metrics) - set(names))
        if skipped:
            logger.warning(f"Metrics {skipped} do not apply to position sequences, skipping")
        if T < 3 and 'accel' in names:
            logger.warning("Sequence too short for acceleration error, skipping")
            names.remove('accel')
        if J < 2 and 'pcp' in names:
            names.remove('pcp')
        return names

    def _evaluate(self, pred: np.ndarray, gt: np.ndarray) -> MetricReport:
        T, J = gt.shape[:2]
        skeleton = SkeletonSpec.from_skeleton(default_skeleton(J)) if J >= 2 else None
        return evaluate_positions(pred, gt, skeleton, self._position_names(T, J))

    def _windowed(self, values: np.ndarray, mask: np.ndarray, sample_window: Callable, tag: str) -> np.ndarray:
        """Run sample_window over seq_len windows (stride seq_len // 2) and cross-fade the overlaps."""
        T = values.shape[0]
        window = self.cfg.seq_len
        stride = max(1, window // 2)
        windows = utils.sliding_windows(T, window, stride)
        weights = utils.crossfade_weights(T, window, stride)
        if len(windows) == 1:
            return sample_window(values, mask, self._rng(tag, 0))
        out = np.zeros_like(values, dtype=np.float64)
        total = np.zeros(T)
        for i, ((start, end), w) in enumerate(zip(windows, weights)):
            result = sample_window(values[start:end], mask[start:end], self._rng(tag, i))
            out[start:end] += w[:, None, None] * result
            total[start:end] += w
        logger.debug(f"Blended {len(windows)} windows over {T} frames")
        return out / total[:, None, None]

    def complete_values(self, model, values: np.ndarray, mask: np.ndarray, sched: DiffusionSchedule,
                        ddim_stride: int = 0, tag: str = 'complete') -> np.ndarray:
        objective = self.cfg.objective

        def sample_window(v, m, rng):
            return sample_completion(model.predictor(sched, m, objective), v, m, sched, rng, ddim_stride)

        blended = self._windowed(np.asarray(values, dtype=np.float64), np.asarray(mask, dtype=bool),
                                 sample_window, tag)
        return restore_unmasked(blended, values, mask)

    def refine_values(self, model, values: np.ndarray, sched: DiffusionSchedule, ddim_stride: int = 0) -> np.ndarray:
        objective = self.cfg.objective

        def sample_window(v, m, rng):
            everything = np.ones(v.shape[:2], dtype=bool)
            predict = model.predictor(sched, everything, objective, visible=everything)
            return sample_refinement(predict, v, sched, rng, ddim_stride)

        values = np.asarray(values, dtype=np.float64)
        return self._windowed(values, np.ones(values.shape[:2], dtype=bool), sample_window, 'refine')

    # --- completion ------------------------------------------------------------------

    def simulated_input(self, tag: str) -> Tuple[MotionSequence, np.ndarray]:
        """A synthetic person run through the capture chain, adaptively masked; (input, ground truth)."""
        cfg = self.cfg
        gt = synth_motion(cfg.dataset.kinds[0], cfg.seq_len, cfg.dataset.joints, utils.derive_seed(cfg.seed, tag))
        signals, recon = simulate_quality_signals(
            gt, self.rig, cfg.simulation.noise_px, cfg.simulation.occl_prob, utils.derive_seed(cfg.seed, tag, 'detect'),
            cfg.simulation.sigma_max, default_skeleton(gt.J).mid_hip)
        observed = recon.d[0] if recon.N else np.zeros_like(gt.values)
        mask = build_mask(cfg.masking_for('finetune', utils.derive_seed(cfg.seed, tag, 'mask')), gt.T, gt.J, signals)
        return MotionSequence(observed, mask), gt.values

    def _completion_input(self) -> Tuple[MotionSequence, Optional[np.ndarray]]:
        cfg = self.cfg
        if cfg.input:
            motion = load_motion(cfg.input)
            gt = load_motion(cfg.gt).values if cfg.gt else None
            return motion, gt
        motion, gt = self.simulated_input('complete-input')
        self.data_manager.save_text('input.motion', format_motion(motion))
        self.data_manager.save_text('gt.motion', format_motion(MotionSequence(gt)))
        return motion, gt

    def run_completion(self, motion: Optional[MotionSequence] = None, gt: Optional[np.ndarray] = None,
                       model=None) -> Tuple[MotionSequence, MetricReport]:
        """Fill the masked cells of a motion; unmasked cells are returned bit-exactly."""
        cfg = self.cfg
        if motion is None:
            motion, gt = self._completion_input()
        if model is None:
            model = self.load_model('completion')
        sched = make_schedule(cfg.schedule_K, cfg.schedule_kind)

        if not motion.mask.any():
            logger.warning("Mask is empty, returning the input unchanged")
            completed = motion
        else:
            logger.info(f"Completing {int(motion.mask.sum())} masked cells of a {motion.T}x{motion.J} motion "
                        f"({'DDIM stride ' + str(cfg.ddim_stride) if cfg.ddim_stride else 'DDPM'}, K={sched.K})")
            values = self.complete_values(model, motion.values, motion.mask, sched, cfg.ddim_stride)
            completed = MotionSequence(values, motion.mask)

        report = self._report()
        report.add('masked_cells', float(motion.mask.sum()), 'cells')
        if gt is not None:
            gt = np.asarray(gt, dtype=np.float64)
            if gt.shape != completed.values.shape:
                raise ShapeMismatch(f"ground truth {gt.shape} does not match motion {completed.values.shape}")
            report.update(self._evaluate(completed.values, gt))
            if motion.mask.any():
                m = motion.mask
                init = self._rng('gaussian-init').standard_normal(gt.shape)
                report.add('masked.mpjpe', mpjpe(completed.values[m][None], gt[m][None]))
                report.add('init.mpjpe', mpjpe(init[m][None], gt[m][None]))

        self.data_manager.save_text('completed.motion', format_motion(completed))
        self.data_manager.save_report(report)
        return completed, report

    def compare_ddim_strides(self, model, motion: MotionSequence, gt: np.ndarray,
                             strides: Sequence[int] = DDIM_COMPARE_STRIDES) -> MetricReport:
        """MPJPE of DDIM completion at several strides; the quality ordering is logged, not enforced."""
        sched = make_schedule(self.cfg.schedule_K, self.cfg.schedule_kind)
        report = self._report()
        errors = []
        for stride in strides:
            values = self.complete_values(model, motion.values, motion.mask, sched, stride, tag='ddim')
            errors.append(mpjpe(values, gt))
            report.add(f'stride{stride}.mpjpe', errors[-1])
        if any(later < earlier for earlier, later in zip(errors, errors[1:])):
            logger.warning(f"DDIM quality ordering not monotone over strides {list(strides)}: {errors}")
        return report

    # --- refinement -------------------------------------------------------------------

    def _refinement_input(self) -> Tuple[MotionSequence, Optional[np.ndarray]]:
        cfg = self.cfg
        if cfg.input:
            return load_motion(cfg.input), (load_motion(cfg.gt).values if cfg.gt else None)
        gt = synth_motion(cfg.dataset.kinds[0], cfg.seq_len, cfg.dataset.joints,
                          utils.derive_seed(cfg.seed, 'refine-input'))
        noisy = gt.values + cfg.dataset.noise_std * self._rng('refine-noise').standard_normal(gt.values.shape)
        motion = MotionSequence(noisy)
        self.data_manager.save_text('input.motion', format_motion(motion))
        self.data_manager.save_text('gt.motion', format_motion(gt))
        return motion, gt.values

    def run_refinement(self, motion: Optional[MotionSequence] = None, gt: Optional[np.ndarray] = None,
                       model=None) -> Tuple[MotionSequence, MetricReport]:
        """Reverse chain over refine_K steps starting from the noisy input."""
        cfg = self.cfg
        if motion is None:
            motion, gt = self._refinement_input()
        if model is None:
            model = self.load_model('completion')
        sched = make_schedule(cfg.refine_K, cfg.schedule_kind)
        logger.info(f"Refining a {motion.T}x{motion.J} motion over K={sched.K}")
        refined = MotionSequence(self.refine_values(model, motion.values, sched, cfg.ddim_stride), motion.mask)

        report = self._report()
        report.add('change.mpjpe', mpjpe(refined.values, motion.values))
        if gt is not None:
            gt = np.asarray(gt, dtype=np.float64)
            before = self._evaluate(motion.values, gt)
            after = self._evaluate(refined.values, gt)
            report.update(before, 'before.').update(after, 'after.')
            for name in after.values:
                try:
                    report.add(f'delta.{name}', relative_change(before[name], after[name]), '-')
                except MetricError:
                    logger.warning(f"No relative change for {name}: zero baseline")
        self.data_manager.save_text('refined.motion', format_motion(refined))
        self.data_manager.save_report(report)
        return refined, report

    # --- in-betweening -------------------------------------------------------------------

    def _inbetween_input(self) -> InbetweenSample:
        cfg = self.cfg
        if cfg.input:
            motion = load_motion(cfg.input)
            if motion.J != JOINT_TOKENS or motion.d != 3:
                raise BadSplit(f"in-betweening input must be T x {JOINT_TOKENS} x 3 positions, got "
                               f"{motion.values.shape}")
            if motion.T != cfg.split.total:
                raise BadSplit(f"input has {motion.T} frames, split needs {cfg.split.total}")
            return InbetweenSample.from_positions(motion.values, cfg.label)
        kind = cfg.label if cfg.label in cfg.dataset.kinds else cfg.dataset.kinds[0]
        motion = synth_motion(kind, cfg.split.total, JOINT_TOKENS, utils.derive_seed(cfg.seed, 'inbetween-heldout'))
        self.data_manager.save_text('gt.motion', format_motion(motion))
        return InbetweenSample.from_positions(motion.values, cfg.label or kind)

    def run_inbetween(self, sample: Optional[InbetweenSample] = None, model=None,
                      imputation: Optional[ImputationConfig] = None) -> Tuple[MotionSequence, MetricReport]:
        """Generate the transition between two boundary segments and score it against the held-out one."""
        cfg = self.cfg
        split = cfg.split
        imputation = imputation or cfg.imputation
        if sample is None:
            sample = self._inbetween_input()
        if sample.rep.T != split.total:
            raise BadSplit(f"sample has {sample.rep.T} frames, split needs {split.total}")
        if model is None:
            model = self.load_model('inbetween')
        sched = make_schedule(cfg.schedule_K, cfg.schedule_kind)
        label = label_vector(model, sample.label)
        values = sample.rep.values
        transition = split.transition_slice
        logger.info(f"In-betweening {split.transition} frames (K={sched.K}, guidance {imputation.guidance_scale}, "
                    f"emphasis {'on' if imputation.emphasis else 'off'})")

        full = sample_inbetween(model, values[:split.preceding], values[split.preceding + split.transition:],
                                split, sched, self._rng('inbetween'), imputation, label, cfg.objective)
        generated = JointLevelRepr(full, sample.rep.contacts)

        gt_positions = _global_positions(sample.rep, sample.positions)
        gt_quats = joint_quaternions(unpack_joint_level(sample.rep))
        pred_positions = _global_positions(generated, sample.positions)
        pred_quats = joint_quaternions(unpack_joint_level(generated))
        lerp, slerped = interpolation_baseline(gt_positions, gt_quats, split)

        report = self._report()
        report.update(evaluate_positions(pred_positions[transition], gt_positions[transition], names=['l2p']),
                      'model.')
        report.update(evaluate_rotations(pred_quats[transition], gt_quats[transition], ROTATION_METRICS), 'model.')
        report.update(evaluate_positions(lerp, gt_positions[transition], names=['l2p']), 'interp.')
        report.update(evaluate_rotations(slerped, gt_quats[transition], ROTATION_METRICS), 'interp.')

        out = MotionSequence(full, np.broadcast_to(~split.boundary_mask()[:, None], full.shape[:2]))
        self.data_manager.save_text('transition.motion', format_motion(MotionSequence(full[transition])))
        self.data_manager.save_text('inbetween_positions.motion', format_motion(MotionSequence(pred_positions)))
        self.data_manager.save_report(report)
        return out, report

    # --- training ---------------------------------------------------------------------------

    def _training_data(self):
        cfg = self.cfg
        if cfg.train.model == 'inbetween':
            return (inbetween_dataset(cfg.dataset.size, cfg.split, cfg.seed, cfg.dataset.kinds),
                    inbetween_dataset(cfg.train.val_size, cfg.split, utils.derive_seed(cfg.seed, 'validation'),
                                      cfg.dataset.kinds))
        return (synth_dataset(cfg.dataset.size, cfg.seq_len, cfg.dataset.joints, cfg.seed, cfg.dataset.kinds),
                synth_dataset(cfg.train.val_size, cfg.seq_len, cfg.dataset.joints,
                              utils.derive_seed(cfg.seed, 'validation'), cfg.dataset.kinds))

    def _quality_signals(self, dataset: Sequence[MotionSequence], tag: str) -> List[QualitySignals]:
        sim = self.cfg.simulation
        signals = []
        for i, motion in enumerate(dataset):
            s, _ = simulate_quality_signals(motion, self.rig, sim.noise_px, sim.occl_prob,
                                            utils.derive_seed(self.cfg.seed, tag, i), sim.sigma_max,
                                            default_skeleton(motion.J).mid_hip)
            signals.append(s)
        logger.info(f"Simulated quality signals for {len(dataset)} {tag} sequences")
        return signals

    def _sequence_loss(self, model, item, phase: str, rng: np.random.Generator, sched: DiffusionSchedule,
                       signals: Optional[QualitySignals], mask_seed: int, augment: bool) -> Tensor:
        cfg = self.cfg
        if isinstance(model, InbetweenEncoder):
            label = label_vector(model, item.label)
            return inbetween_training_loss(model, item.rep.values, cfg.split, sched, rng, cfg.objective, label)

        motion = item
        if augment:
            motion, order = random_augment(motion, rng, default_skeleton(motion.J).lr_pairs)
            if signals is not None:
                signals = signals.reorder_joints(order)
        mask = build_mask(cfg.masking_for(phase, mask_seed), motion.T, motion.J, signals)
        if cfg.train.mode == 'mae':
            return model.mae_forward(motion.values, mask)[1]
        if phase == 'finetune' and cfg.train.finetune_loss == 'full':
            cond = motion.values + cfg.dataset.noise_std * rng.standard_normal(motion.values.shape)
            return model.training_loss(motion.values, mask, sched, rng, cfg.objective, full=True, cond=cond)
        return model.training_loss(motion.values, mask, sched, rng, cfg.objective)

    def _validation_loss(self, model, val_set, phase: str, sched: DiffusionSchedule,
                         val_signals: Optional[List[QualitySignals]]) -> float:
        rng = self._rng('validation-noise')
        with no_grad():
            losses = [self._sequence_loss(model, item, phase, rng, sched,
                                          val_signals[i] if val_signals else None,
                                          utils.derive_seed(self.cfg.seed, 'validation-mask', i), False).item()
                      for i, item in enumerate(val_set)]
        return float(np.mean(losses)) if losses else float('nan')

    def train(self, dataset: Optional[Sequence] = None, val_set: Optional[Sequence] = None) -> TrainingResult:
        """Pretrain with the pretrain mask, then fine-tune with the fine-tune mask; checkpoints and loss curve."""
        cfg = self.cfg
        if dataset is None:
            dataset, default_val = self._training_data()
            val_set = default_val if val_set is None else val_set
        val_set = list(val_set or [])
        if len(dataset) == 0:
            raise EmptyDataset("training needs at least one sequence")

        model = build_model(cfg.train.model, cfg.network)
        optimizer = AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
        sched = make_schedule(cfg.schedule_K, cfg.schedule_kind)
        completion = isinstance(model, MaskedMotionDiffusion)
        finetune_steps = cfg.train.finetune_steps if completion else 0
        total = cfg.train.steps + finetune_steps
        augment = cfg.dataset.augment and completion and cfg.train.mode == 'diffusion'
        meta = {'config_hash': cfg.config_hash(), 'objective': cfg.objective, 'schedule_K': cfg.schedule_K,
                'schedule_kind': cfg.schedule_kind}
        logger.info(f"Training a {model.kind} model on {len(dataset)} sequences: {cfg.train.steps} pretrain + "
                    f"{finetune_steps} fine-tune steps")

        signal_phases = {phase for phase in ('pretrain', 'finetune')
                         if completion and cfg.masking_for(phase, cfg.seed).pattern == MaskPattern.C}
        signals = val_signals = None
        curve: List[Dict[str, float]] = []
        best_val, best_path = float('inf'), None
        rng = self._rng('train')

        for step in range(1, total + 1):
            phase = 'pretrain' if step <= cfg.train.steps else 'finetune'
            if phase in signal_phases and signals is None:
                signals = self._quality_signals(dataset, 'train-signals')
                val_signals = self._quality_signals(val_set, 'validation-signals')
            batch = rng.choice(len(dataset), size=min(cfg.train.batch_size, len(dataset)), replace=False)

            optimizer.zero_grad()
            try:
                losses = [self._sequence_loss(model, dataset[i], phase, rng, sched,
                                              signals[i] if phase in signal_phases else None,
                                              utils.derive_seed(cfg.seed, 'mask', step, b), augment)
                          for b, i in enumerate(batch)]
                loss = reduce(lambda a, b: a + b, losses) * (1.0 / len(losses))
                backward(loss)
            except NonFiniteValue as e:
                raise DivergedLoss(f"step {step}: {e}") from e
            if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in model.parameters()):
                raise DivergedLoss(f"step {step}: non-finite gradient")
            optimizer.step()

            entry = {'step': step, 'phase': phase, 'loss': loss.item()}
            logger.debug(f"step {step} ({phase}) loss {entry['loss']:.6f}")

            if val_set and (step % cfg.train.val_every == 0 or step == total):
                entry['val_loss'] = self._validation_loss(model, val_set, phase, sched,
                                                          val_signals if phase in signal_phases else None)
                if entry['val_loss'] < best_val:
                    best_val = entry['val_loss']
                    best_path = self.data_manager.artifact_path('best.npz')
                    save_checkpoint(best_path, model, meta={**meta, 'step': step, 'val_loss': best_val})
                logger.info(f"step {step}: loss {entry['loss']:.6f}, validation {entry['val_loss']:.6f}")
            curve.append(entry)

            if step % cfg.train.checkpoint_every == 0:
                save_checkpoint(self.data_manager.artifact_path(f'checkpoint_{step:06d}.npz'), model,
                                extra=optimizer.state_arrays(), meta={**meta, 'step': step, 'phase': phase})

        final_path = self.data_manager.artifact_path('model.npz')
        save_checkpoint(final_path, model, extra=optimizer.state_arrays(), meta={**meta, 'step': total})
        self.data_manager.save_loss_curve(curve)

        report = self._report()
        report.add('steps', float(total), 'steps')
        if curve:
            report.add('loss.initial', curve[0]['loss']).add('loss.final', curve[-1]['loss'])
        if best_path:
            report.add('loss.best_validation', best_val)
        self.data_manager.save_report(report)
        return TrainingResult(model, final_path, best_path, curve, report)

    # --- capture simulation ---------------------------------------------------------------

    def simulated_scene(self) -> List[MotionSequence]:
        cfg = self.cfg
        people = []
        for n in range(cfg.simulation.people):
            kind = cfg.dataset.kinds[n % len(cfg.dataset.kinds)]
            motion = synth_motion(kind, cfg.simulation.frames, cfg.dataset.joints,
                                  utils.derive_seed(cfg.seed, 'person', n))
            offset = np.array([(n - (cfg.simulation.people - 1) / 2.0) * PERSON_SPACING, 0.0, 0.0])
            people.append(motion.with_values(motion.values + offset))
        return people

    def run_simulate(self, scene: Optional[Sequence[MotionSequence]] = None) -> SimulationResult:
        """Detect, match, triangulate, track and mask a synthetic multi-person scene."""
        cfg = self.cfg
        sim = cfg.simulation
        scene = list(scene) if scene is not None else self.simulated_scene()
        det = simulate_detections(scene, self.rig, sim.noise_px, sim.occl_prob, utils.derive_seed(cfg.seed, 'detect'))
        J = det.shape[3]
        recon = reconstruct(det, self.rig, default_skeleton(J).mid_hip, sim.sigma_max)

        masks = []
        for n in range(recon.N):
            signals = recon.signals(n)
            mask = build_mask(cfg.masking_for('finetune', utils.derive_seed(cfg.seed, 'track-mask', n)),
                              recon.d.shape[1], J, signals)
            masks.append(mask)
            self.data_manager.save_text(f'track{n}.motion', format_motion(MotionSequence(recon.d[n], mask)))

        report = self._report()
        report.add('tracks', float(recon.N), 'people')
        report.add('forced_cells', float(sum(int(recon.signals(n).invisible.sum()) for n in range(recon.N))), 'cells')
        if recon.N and scene:
            cost = np.array([[np.mean(np.linalg.norm(recon.d[n] - person.values, axis=-1)) for person in scene]
                             for n in range(recon.N)])
            pairs = hungarian_match(cost, allow_partial=True)
            if pairs:
                pred = np.concatenate([recon.d[n] for n, _ in pairs], axis=0)
                gt = np.concatenate([scene[p].values for _, p in pairs], axis=0)
                report.update(self._evaluate(pred, gt), 'reconstruction.')

        self.data_manager.save_text('rig.rig', format_rig(self.rig))
        self.data_manager.save_arrays('detections.npz', det.to_arrays())
        self.data_manager.save_arrays('reconstruction.npz', recon.to_arrays())
        self.data_manager.save_report(report)
        logger.info(f"Simulated {len(scene)} people in {self.rig.V} views: {recon.N} tracks")
        return SimulationResult(det, recon, masks, report)

    # --- evaluation ----------------------------------------------------------------------------

    def run_eval(self, pred_path: Optional[str] = None, gt_path: Optional[str] = None,
                 names: Optional[Sequence[str]] = None) -> MetricReport:
        """Metrics of a predicted motion file against a ground-truth file.

        Positions (d = 3) get position metrics, quaternions (d = 4) rotation metrics.
        """
        cfg = self.cfg
        pred = load_motion(pred_path or cfg.pred).values
        gt = load_motion(gt_path or cfg.gt).values
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        names = list(names if names is not None else cfg.metrics)
        report = self._report()
        if gt.shape[2] == 4:
            report.update(evaluate_rotations(pred, gt, [n for n in names if n in ROTATION_METRICS]))
        elif gt.shape[2] == 3:
            skeleton = SkeletonSpec.from_skeleton(default_skeleton(gt.shape[1])) if 'pcp' in names else None
            report.update(evaluate_positions(pred, gt, skeleton, [n for n in names if n in POSITION_METRICS]))
        else:
            raise ShapeMismatch(f"evaluation needs positions (d=3) or quaternions (d=4), got d={gt.shape[2]}")
        unused = sorted(set(names) - set(report.values))
        if unused:
            logger.warning(f"Metrics {unused} were not computed for d={gt.shape[2]} motions")
        self.data_manager.save_report(report)
        return report

    def finish(self, extra: Optional[Dict] = None) -> str:
        return self.data_manager.write_manifest(self.cfg.task, self.cfg.seed, self.cfg.config_hash(), extra)
