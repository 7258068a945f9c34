import json

import numpy as np
import pytest

from config import ImputationConfig, default_config
from data_manager import DataManager
from diffusion import make_schedule
from kaa_network import InbetweenEncoder, MaskedMotionDiffusion, NetworkConfig, build_model, load_checkpoint
from masking import MaskingConfig, QualitySignals, build_mask
from metrics import ShapeMismatch, accel_error, mpjpe, pcp, relative_change, SkeletonSpec
from mocap_sim import simulate_quality_signals
from motion_data import (
    MotionSequence, SegmentSplit, default_skeleton, load_motion, random_augment, save_motion, synth_motion,
)
from pipelines import (
    BadSplit, DivergedLoss, EmptyDataset, InbetweenSample, NoCheckpoint, TaskManager, apply_emphasis,
    interpolation_baseline, remove_emphasis, sample_completion, sample_inbetween, sample_refinement,
)
from tensor import as_tensor

SMALL_NET = dict(network__preset='grad-check')


class EchoModel:
    """Predicts the conditioning motion itself."""

    kind = 'completion'

    def predictor(self, sched, mask, objective='signal', visible=None):
        return lambda x_k, k, cond: np.array(cond, dtype=np.float64)


class TruthModel:
    """Predicts a fixed ground truth."""

    kind = 'completion'

    def __init__(self, gt):
        self.gt = np.array(gt, dtype=np.float64)

    def predictor(self, sched, mask, objective='signal', visible=None):
        return lambda x_k, k, cond: self.gt.copy()


class MixingModel:
    """Differentiable in-betweening stand-in that mixes every frame with the sequence mean."""

    kind = 'inbetween'

    def predict_full(self, x, k, label=None):
        x = as_tensor(x)
        return x * 0.5 + x.mean(axis=0, keepdims=True) * 0.5


def manager(tmp_path, name='run', **overrides):
    cfg = default_config(**{**SMALL_NET, **overrides})
    return TaskManager(cfg, DataManager(str(tmp_path / name)))


def single_joint_mask(T=10, J=17, joint=3):
    mask = np.zeros((T, J), dtype=bool)
    mask[:, joint] = True
    return mask


# --- completion --------------------------------------------------------------------

def test_completion_with_exact_model_recovers_ground_truth(oracle_denoiser, rng):
    gt = synth_motion('sinusoid-limb', 10, 17, seed=0).values
    mask = single_joint_mask()
    observed = np.where(mask[:, :, None], 0.0, gt)
    out = sample_completion(oracle_denoiser(gt), observed, mask, make_schedule(20), rng)
    np.testing.assert_allclose(out, gt, atol=1e-6)
    assert np.array_equal(out[~mask], observed[~mask])


def test_ddim_completion_with_exact_model(oracle_denoiser, rng):
    gt = synth_motion('figure-eight', 10, 17, seed=1).values
    mask = single_joint_mask(joint=0)
    observed = np.where(mask[:, :, None], 0.0, gt)
    out = sample_completion(oracle_denoiser(gt), observed, mask, make_schedule(50), rng, ddim_stride=10)
    np.testing.assert_allclose(out, gt, atol=1e-9)


def test_unmasked_cells_preserved_bit_exactly(grad_config):
    model = MaskedMotionDiffusion(grad_config)
    sched = make_schedule(3)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        observed = rng.normal(size=(6, 5, 3))
        mask = build_mask(MaskingConfig('B', 0.4, seed=seed), 6, 5)
        out = sample_completion(model.predictor(sched, mask), observed, mask, sched, rng)
        assert np.array_equal(out[~mask], observed[~mask])
        assert np.all(np.isfinite(out))


def test_run_completion_empty_mask_passes_through(tmp_path, caplog):
    tm = manager(tmp_path, schedule__K=5)
    gt = synth_motion('linear-walk', 10, 17, seed=2).values
    motion = MotionSequence(gt)
    completed, report = tm.run_completion(motion, gt, model=MaskedMotionDiffusion(tm.cfg.network))
    assert completed.equals(motion)
    assert report['mpjpe'] == 0.0
    assert report['pcp'] == 100.0
    assert 'Mask is empty' in caplog.text


def test_run_completion_reports_and_writes(tmp_path):
    tm = manager(tmp_path, schedule__K=10)
    gt = synth_motion('sinusoid-limb', 10, 17, seed=3).values
    mask = single_joint_mask(joint=5)
    motion = MotionSequence(np.where(mask[:, :, None], 0.0, gt), mask)
    completed, report = tm.run_completion(motion, gt, model=TruthModel(gt))
    np.testing.assert_allclose(completed.values, gt, atol=1e-6)
    assert report['masked.mpjpe'] < 1e-3
    assert report['init.mpjpe'] > 100.0
    assert report['masked_cells'] == 10.0
    assert (tmp_path / 'run' / 'completed.motion').exists()
    assert (tmp_path / 'run' / 'report.txt').exists()


def test_sliding_windows_cover_long_sequences(tmp_path):
    tm = manager(tmp_path, seq_len=4, schedule__K=3)
    rng = np.random.default_rng(0)
    observed = rng.normal(size=(11, 5, 3))
    mask = rng.random((11, 5)) < 0.3
    sched = make_schedule(3)
    out = tm.complete_values(EchoModel(), observed, mask, sched)
    assert np.array_equal(out[~mask], observed[~mask])
    np.testing.assert_allclose(out, observed, atol=1e-12)


def test_completion_is_reproducible(tmp_path):
    outputs = []
    for name in ('a', 'b'):
        tm = manager(tmp_path, name, schedule__K=4, seed=9)
        gt = synth_motion('sinusoid-limb', 10, 17, seed=4).values
        mask = single_joint_mask(joint=7)
        model = MaskedMotionDiffusion(tm.cfg.network)
        tm.run_completion(MotionSequence(gt, mask), gt, model=model)
        outputs.append(((tmp_path / name / 'completed.motion').read_bytes(),
                        (tmp_path / name / 'report.json').read_bytes()))
    assert outputs[0] == outputs[1]


def test_ddim_stride_comparison_runs(tmp_path):
    tm = manager(tmp_path, schedule__K=50)
    gt = synth_motion('figure-eight', 10, 17, seed=5).values
    mask = single_joint_mask(joint=2)
    report = tm.compare_ddim_strides(TruthModel(gt), MotionSequence(gt, mask), gt)
    assert set(report.values) == {'stride1.mpjpe', 'stride5.mpjpe', 'stride10.mpjpe'}
    assert max(report.values.values()) < 1e-6


# --- refinement ------------------------------------------------------------------------

def test_refinement_without_noise_leaves_motion_intact(tmp_path):
    tm = manager(tmp_path)
    gt = synth_motion('linear-walk', 10, 17, seed=6).values
    refined, report = tm.run_refinement(MotionSequence(gt), gt, model=EchoModel())
    assert report['change.mpjpe'] < 1e-6
    assert report['after.mpjpe'] < 1e-6
    assert report['delta.pcp'] == 0.0
    np.testing.assert_allclose(refined.values, gt, atol=1e-9)


def test_refinement_towards_truth_reports_delta(tmp_path):
    tm = manager(tmp_path)
    gt = synth_motion('sinusoid-limb', 10, 17, seed=7).values
    noisy = gt + 0.05 * np.random.default_rng(0).normal(size=gt.shape)
    _, report = tm.run_refinement(MotionSequence(noisy), gt, model=TruthModel(gt))
    assert report['after.mpjpe'] < report['before.mpjpe']
    assert report['delta.mpjpe'] == pytest.approx(1.0, abs=1e-6)
    assert report.units['delta.mpjpe'] == '-'


def test_refinement_starts_from_the_input(rng):
    x = rng.normal(size=(4, 3, 3))
    out = sample_refinement(lambda x_k, k, cond: cond.copy(), x, make_schedule(50), rng, ddim_stride=10)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_relative_change_example():
    assert relative_change(79.3, 60.2) == pytest.approx(0.2409, abs=1e-4)


# --- in-betweening ----------------------------------------------------------------------

def inbetween_segments(split, seed=0):
    sample = InbetweenSample.from_positions(synth_motion('linear-walk', split.total, 22, seed).values, 'walk')
    values = sample.rep.values
    return sample, values[:split.preceding], values[split.preceding + split.transition:]


def test_plain_imputation_keeps_boundaries_exact():
    split = SegmentSplit(3, 4, 2)
    _, d_p, d_r = inbetween_segments(split)
    out = sample_inbetween(MixingModel(), d_p, d_r, split, make_schedule(5), np.random.default_rng(0))
    assert out.shape == (split.total, 22, 12)
    assert np.array_equal(out[:3], d_p)
    assert np.array_equal(out[7:], d_r)


def test_guidance_and_emphasis_keep_boundaries_exact():
    split = SegmentSplit(2, 3, 2)
    _, d_p, d_r = inbetween_segments(split, seed=1)
    sched = make_schedule(4)
    plain = sample_inbetween(MixingModel(), d_p, d_r, split, sched, np.random.default_rng(5))
    guided = sample_inbetween(MixingModel(), d_p, d_r, split, sched, np.random.default_rng(5),
                              ImputationConfig(guidance_scale=0.1))
    emphasized = sample_inbetween(MixingModel(), d_p, d_r, split, sched, np.random.default_rng(5),
                                  ImputationConfig(emphasis=True, guidance_scale=0.1))
    for out in (plain, guided, emphasized):
        assert np.array_equal(out[:2], d_p)
        assert np.array_equal(out[5:], d_r)
        assert np.all(np.isfinite(out))
    assert not np.allclose(plain[2:5], guided[2:5])
    assert not np.allclose(guided[2:5], emphasized[2:5])


def test_boundaries_exact_over_random_cases():
    split = SegmentSplit(1, 2, 1)
    sched = make_schedule(2)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d_p, d_r = rng.normal(size=(1, 22, 12)), rng.normal(size=(1, 22, 12))
        imputation = ImputationConfig(emphasis=bool(seed % 2), guidance_scale=float(rng.uniform(0.0, 0.5)))
        out = sample_inbetween(MixingModel(), d_p, d_r, split, sched, rng, imputation)
        assert np.array_equal(out[:1], d_p)
        assert np.array_equal(out[3:], d_r)


def test_emphasis_round_trip():
    values = np.random.default_rng(3).normal(size=(5, 22, 12))
    scale = ImputationConfig(emphasis=True).emphasis_scale(22, 12)
    np.testing.assert_allclose(remove_emphasis(apply_emphasis(values, scale), scale), values, atol=1e-12)


def test_inbetween_rejects_wrong_split():
    split = SegmentSplit(3, 4, 2)
    _, d_p, d_r = inbetween_segments(split)
    with pytest.raises(BadSplit):
        sample_inbetween(MixingModel(), d_p[:2], d_r, split, make_schedule(3), np.random.default_rng(0))


def test_interpolation_baseline_is_exact_on_linear_motion():
    split = SegmentSplit(2, 3, 2)
    t = np.arange(split.total, dtype=np.float64)
    positions = t[:, None, None] * np.array([0.1, 0.0, -0.2]) + np.zeros((1, 4, 3))
    quats = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (split.total, 4, 1))
    lerp, slerped = interpolation_baseline(positions, quats, split)
    np.testing.assert_allclose(lerp, positions[2:5], atol=1e-12)
    np.testing.assert_allclose(np.abs(slerped[..., 3]), 1.0, atol=1e-12)


def test_run_inbetween_reports_model_and_baseline(tmp_path):
    tm = manager(tmp_path, schedule__K=3, split__preceding=2, split__transition=3, split__succeeding=2)
    model = InbetweenEncoder(NetworkConfig.preset('grad-check', in_dim=12, out_dim=12, decoder_depth=0))
    sample, _, _ = inbetween_segments(tm.cfg.split, seed=4)
    out, report = tm.run_inbetween(sample, model=model)
    assert np.array_equal(out.values[:2], sample.rep.values[:2])
    assert np.array_equal(out.values[5:], sample.rep.values[5:])
    for name in ('model.l2p', 'model.l2q', 'model.npss', 'interp.l2p', 'interp.l2q', 'interp.npss'):
        assert name in report
    assert out.mask[2:5].all() and not out.mask[:2].any()


def test_run_inbetween_needs_matching_frames(tmp_path):
    tm = manager(tmp_path, split__preceding=2, split__transition=3, split__succeeding=2)
    sample, _, _ = inbetween_segments(SegmentSplit(3, 3, 3))
    with pytest.raises(BadSplit):
        tm.run_inbetween(sample, model=MixingModel())


# --- training ------------------------------------------------------------------------------

TRAIN = dict(seq_len=4, dataset__joints=5, dataset__size=2, train__val_size=1, train__batch_size=2,
             optimizer__lr=1e-3, schedule__K=10)


def test_zero_iterations_checkpoint_equals_initialization(tmp_path):
    tm = manager(tmp_path, train__steps=0, train__finetune_steps=0, **TRAIN)
    result = tm.train()
    model, _, meta = load_checkpoint(result.checkpoint)
    initial = build_model('completion', tm.cfg.network).state_arrays()
    for name, value in model.state_arrays().items():
        assert np.array_equal(value, initial[name])
    assert result.curve == []
    assert meta['step'] == 0


def test_empty_dataset(tmp_path):
    with pytest.raises(EmptyDataset):
        manager(tmp_path, **TRAIN).train(dataset=[])


def test_pretrain_masks_half_of_each_frame():
    cfg = default_config()
    for seed in range(5):
        mask = build_mask(cfg.masking_for('pretrain', seed), 10, 17)
        assert np.all(mask.sum(axis=1) == 8)


def test_two_phase_training_writes_artifacts(tmp_path):
    tm = manager(tmp_path, train__steps=3, train__finetune_steps=2, train__checkpoint_every=2,
                 train__val_every=2, **TRAIN)
    result = tm.train()
    run = tmp_path / 'run'
    for name in ('model.npz', 'best.npz', 'checkpoint_000002.npz', 'checkpoint_000004.npz', 'loss_curve.json'):
        assert (run / name).exists()
    curve = json.loads((run / 'loss_curve.json').read_text())
    assert [entry['phase'] for entry in curve] == ['pretrain'] * 3 + ['finetune'] * 2
    assert all(np.isfinite(entry['loss']) for entry in curve)
    assert 'val_loss' in curve[1] and 'val_loss' in curve[-1]
    extra = load_checkpoint(str(run / 'checkpoint_000004.npz'))[1]
    assert int(extra['adamw.t']) == 4
    assert result.best_checkpoint == str(run / 'best.npz')


def test_pattern_c_pretraining_simulates_signals(tmp_path, caplog):
    tm = manager(tmp_path, masking__pretrain__pattern='C', train__steps=2, train__finetune_steps=0, **TRAIN)
    with caplog.at_level('INFO'):
        result = tm.train()
    curve = json.loads((tmp_path / 'run' / 'loss_curve.json').read_text())
    assert [entry['phase'] for entry in curve] == ['pretrain', 'pretrain']
    assert all(np.isfinite(entry['loss']) for entry in curve)
    assert np.isfinite(curve[-1]['val_loss'])
    assert 'Simulated quality signals for 2 train-signals sequences' in caplog.text
    assert result.checkpoint == str(tmp_path / 'run' / 'model.npz')


def test_flipped_motion_carries_its_quality_signals():
    skeleton = default_skeleton(17)
    left, right = skeleton.lr_pairs[0]
    motion = synth_motion('sinusoid-limb', 6, 17, 0)
    rho = np.ones((2, 6, 17))
    rho[:, :, left] = 0.0
    signals = QualitySignals(rho, np.zeros((6, 17)))

    flips = [random_augment(motion, np.random.default_rng(seed), skeleton.lr_pairs) for seed in range(20)]
    flipped = [(out, order) for out, order in flips if not np.array_equal(order, np.arange(17))]
    assert flipped and len(flipped) < len(flips)
    out, order = flipped[0]
    np.testing.assert_allclose(np.linalg.norm(out.values[:, right] - out.values[:, 0], axis=-1),
                               np.linalg.norm(motion.values[:, left] - motion.values[:, 0], axis=-1), atol=1e-9)

    moved = signals.reorder_joints(order)
    assert np.all(moved.invisible[:, right])
    assert not np.any(moved.invisible[:, left])
    mask = build_mask(MaskingConfig('C', 0.1, seed=0), 6, 17, moved)
    assert np.all(mask[:, right])


def test_training_is_deterministic(tmp_path):
    for name in ('a', 'b'):
        manager(tmp_path, name, train__steps=2, train__finetune_steps=1, **TRAIN).train()
    assert (tmp_path / 'a' / 'model.npz').read_bytes() == (tmp_path / 'b' / 'model.npz').read_bytes()
    assert (tmp_path / 'a' / 'loss_curve.json').read_text() == (tmp_path / 'b' / 'loss_curve.json').read_text()


def test_diverging_loss_is_reported(tmp_path):
    tm = manager(tmp_path, train__steps=1, train__finetune_steps=0, dataset__augment=False, **TRAIN)
    huge = [MotionSequence(np.full((4, 5, 3), 1e200))]
    with pytest.raises(DivergedLoss):
        tm.train(dataset=huge, val_set=[])


def test_mae_and_full_loss_modes_train(tmp_path):
    mae = manager(tmp_path, 'mae', train__mode='mae', train__steps=2, train__finetune_steps=0, **TRAIN).train()
    full = manager(tmp_path, 'full', train__finetune_loss='full', train__steps=1, train__finetune_steps=1,
                   **TRAIN).train()
    for result in (mae, full):
        assert all(np.isfinite(entry['loss']) for entry in result.curve)


def test_inbetween_training(tmp_path):
    tm = manager(tmp_path, train__model='inbetween', network__in_dim=12, network__out_dim=12,
                 network__decoder_depth=0, split__preceding=2, split__transition=3, split__succeeding=2,
                 train__steps=2, **TRAIN)
    result = tm.train()
    model, _, _ = load_checkpoint(result.checkpoint)
    assert isinstance(model, InbetweenEncoder)
    assert len(result.curve) == 2


def test_missing_or_wrong_checkpoint(tmp_path):
    tm = manager(tmp_path, train__steps=0, train__finetune_steps=0, **TRAIN)
    with pytest.raises(NoCheckpoint):
        tm.load_model('completion')
    with pytest.raises(NoCheckpoint):
        tm.load_model('completion', str(tmp_path / 'absent.npz'))
    path = tm.train().checkpoint
    with pytest.raises(NoCheckpoint):
        tm.load_model('inbetween', path)
    assert isinstance(tm.load_model('completion', path), MaskedMotionDiffusion)


# --- simulation -----------------------------------------------------------------------------

SIM = dict(simulation__frames=4, simulation__people=2)


def test_noise_free_simulation_reproduces_the_scene(tmp_path):
    tm = manager(tmp_path, simulation__noise_px=0.0, simulation__occl_prob=0.0, **SIM)
    result = tm.run_simulate()
    assert result.reconstruction.N == 2
    assert result.report['reconstruction.mpjpe'] < 1e-3
    assert result.report['forced_cells'] == 0.0
    assert len(result.masks) == 2
    for name in ('rig.rig', 'detections.npz', 'reconstruction.npz', 'track0.motion', 'report.json'):
        assert (tmp_path / 'run' / name).exists()


def test_simulation_is_deterministic(tmp_path):
    for name in ('a', 'b'):
        manager(tmp_path, name, seed=4, **SIM).run_simulate()
    for artifact in ('detections.npz', 'reconstruction.npz', 'track0.motion', 'report.txt'):
        assert (tmp_path / 'a' / artifact).read_bytes() == (tmp_path / 'b' / artifact).read_bytes()


def test_fully_occluded_joint_is_masked_every_frame(rig):
    motion = synth_motion('linear-walk', 6, 17, seed=1)
    probs = np.zeros(17)
    probs[4] = 1.0
    signals, _ = simulate_quality_signals(motion, rig, 0.0, probs, seed=2)
    mask = build_mask(MaskingConfig('C', 0.3, seed=3), 6, 17, signals)
    assert mask[:, 4].all()


# --- evaluation ----------------------------------------------------------------------------

def test_eval_identical_files(tmp_path):
    gt = synth_motion('figure-eight', 6, 17, seed=8)
    save_motion(gt, str(tmp_path / 'gt.motion'))
    tm = manager(tmp_path)
    report = tm.run_eval(str(tmp_path / 'gt.motion'), str(tmp_path / 'gt.motion'), ['mpjpe', 'pcp', 'accel'])
    assert report['mpjpe'] == 0.0 and report['accel'] == 0.0 and report['pcp'] == 100.0
    text = (tmp_path / 'run' / 'report.txt').read_text()
    metric_lines = [line.split()[0] for line in text.splitlines() if not line.startswith('#')]
    assert metric_lines == sorted(metric_lines)


def test_eval_matches_library_calls(tmp_path):
    gt = synth_motion('sinusoid-limb', 6, 17, seed=9)
    pred = gt.with_values(gt.values + 0.01 * np.random.default_rng(1).normal(size=gt.values.shape))
    save_motion(gt, str(tmp_path / 'gt.motion'))
    save_motion(pred, str(tmp_path / 'pred.motion'))
    report = manager(tmp_path).run_eval(str(tmp_path / 'pred.motion'), str(tmp_path / 'gt.motion'),
                                        ['mpjpe', 'pcp', 'accel'])
    loaded_pred = load_motion(str(tmp_path / 'pred.motion'))
    loaded_gt = load_motion(str(tmp_path / 'gt.motion'))
    spec = SkeletonSpec.from_skeleton(default_skeleton(17))
    assert report['mpjpe'] == mpjpe(loaded_pred.values, loaded_gt.values)
    assert report['accel'] == accel_error(loaded_pred.values, loaded_gt.values)
    assert report['pcp'] == pcp(loaded_pred.values, loaded_gt.values, spec)


def test_eval_quaternions_and_mismatch(tmp_path):
    q = np.random.default_rng(2).normal(size=(8, 3, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    save_motion(MotionSequence(q), str(tmp_path / 'q.motion'))
    report = manager(tmp_path).run_eval(str(tmp_path / 'q.motion'), str(tmp_path / 'q.motion'), ['l2q', 'npss'])
    assert report['l2q'] == pytest.approx(0.0, abs=1e-9)
    assert report['npss'] == pytest.approx(0.0, abs=1e-9)
    save_motion(MotionSequence(q[:4]), str(tmp_path / 'short.motion'))
    with pytest.raises(ShapeMismatch):
        manager(tmp_path).run_eval(str(tmp_path / 'short.motion'), str(tmp_path / 'q.motion'), ['l2q'])


def test_manifest_lists_artifacts(tmp_path):
    tm = manager(tmp_path, seed=5, **SIM)
    tm.run_simulate()
    path = tm.finish()
    with open(path) as f:
        manifest = json.load(f)
    assert manifest['task'] == tm.cfg.task
    assert manifest['seed'] == 5
    assert manifest['config_hash'] == tm.cfg.config_hash()
    assert 'detections.npz' in manifest['artifacts']


# --- desk-scale training runs --------------------------------------------------------------

TOY = dict(network__preset='tiny', seq_len=10, dataset__joints=17, dataset__size=16, train__batch_size=4,
           optimizer__lr=1e-3, schedule__K=50, train__val_size=2, train__val_every=500,
           simulation__noise_px=2.0, simulation__occl_prob=0.1)


@pytest.mark.slow
def test_toy_training_reduces_masked_loss_and_beats_noise(tmp_path):
    tm = manager(tmp_path, train__steps=1500, train__finetune_steps=500, **TOY)
    result = tm.train()
    losses = [entry['loss'] for entry in result.curve]
    assert np.mean(losses[-100:]) <= 0.1 * np.mean(losses[:20])

    ratios = []
    for i in range(4):
        gt = synth_motion(tm.cfg.dataset.kinds[i % 3], 10, 17, seed=100 + i).values
        mask = build_mask(tm.cfg.masking_for('finetune', i), 10, 17,
                          simulate_quality_signals(MotionSequence(gt), tm.rig, 2.0, 0.1, seed=i)[0])
        _, report = tm.run_completion(MotionSequence(gt, mask), gt, model=result.model)
        ratios.append(report['init.mpjpe'] / report['masked.mpjpe'])
    assert np.mean(ratios) >= 5.0


@pytest.mark.slow
def test_toy_refinement_reduces_error(tmp_path):
    tm = manager(tmp_path, train__steps=1000, train__finetune_steps=1000, train__finetune_loss='full', **TOY)
    result = tm.train()
    gt = synth_motion('linear-walk', 10, 17, seed=200).values
    noisy = gt + 0.05 * np.random.default_rng(0).normal(size=gt.shape)
    _, report = tm.run_refinement(MotionSequence(noisy), gt, model=result.model)
    assert report['after.mpjpe'] < report['before.mpjpe']
