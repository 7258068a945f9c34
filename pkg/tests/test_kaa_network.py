import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from data_manager import write_npz
from diffusion import EmptyMask
from kaa_network import (
    AttentionCounter, CascadedRound, CheckpointError, InbetweenEncoder, KaaRound, KinematicEncoder,
    LabelEmbeddingTable, LatentState, LayoutError, MaskedMotionDiffusion, NetworkConfig, NetworkError,
    OddDim, SelfAttentionBlock, SplitError, TokenLayout, broadcast_add_stars, cascaded_round,
    cascaded_score_entries, fourier_pos_embed, fourier_pos_grid, inbetween_encode, kaa_round,
    kaa_score_entries, kinematic_encode, load_checkpoint, motion_decode, save_checkpoint,
    sinusoidal_step_embed, structural_attention, temporal_attention,
)
from motion_data import SegmentSplit
from tensor import Tensor, gradient_check, no_grad


def pairwise_min_distance(vectors):
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    dist[np.diag_indices(len(vectors))] = np.inf
    return dist.min()


# --- embeddings ---------------------------------------------------------------

def test_fourier_embed_is_deterministic_and_zero_at_origin():
    assert np.array_equal(fourier_pos_embed(3, 5, 16), fourier_pos_embed(3, 5, 16))
    origin = fourier_pos_embed(0, 0, 16)
    np.testing.assert_array_equal(origin[0:4], 0.0)
    np.testing.assert_array_equal(origin[4:8], 1.0)
    np.testing.assert_array_equal(origin[8:12], 0.0)
    np.testing.assert_array_equal(origin[12:16], 1.0)


def test_fourier_grid_has_no_collisions():
    grid = fourier_pos_grid(np.arange(10), np.arange(17), 16).reshape(-1, 16)
    assert pairwise_min_distance(grid) > 1e-6


def test_fourier_spare_slots_are_zero():
    emb = fourier_pos_embed(7, 2, 18)
    np.testing.assert_array_equal(emb[16:], 0.0)


def test_embeddings_reject_odd_width():
    with pytest.raises(OddDim):
        fourier_pos_embed(0, 0, 15)
    with pytest.raises(OddDim):
        sinusoidal_step_embed(3, 7)
    with pytest.raises(OddDim):
        NetworkConfig(dim=31)


def test_step_embed_examples():
    zero = sinusoidal_step_embed(0, 32)
    assert zero.shape == (32,)
    np.testing.assert_array_equal(zero[:16], 0.0)
    np.testing.assert_array_equal(zero[16:], 1.0)
    table = np.stack([sinusoidal_step_embed(k, 32) for k in range(1001)])
    assert pairwise_min_distance(table) > 1e-6


def test_label_table_is_stable():
    table = LabelEmbeddingTable(16)
    walk = table.lookup('walk')
    assert np.array_equal(walk, LabelEmbeddingTable(16).lookup('walk'))
    assert not np.array_equal(walk, table.lookup('jump'))


# --- attention blocks -----------------------------------------------------------

def block(cfg, kind='structural', seed=0):
    return SelfAttentionBlock(cfg, np.random.default_rng(seed), kind)


def test_structural_attention_frames_are_independent(grad_config, rng):
    blk = block(grad_config)
    tokens = rng.uniform(-1, 1, (5, 4, grad_config.dim))
    perm = np.array([3, 0, 4, 1, 2])
    with no_grad():
        out = structural_attention(Tensor(tokens), blk).data
        permuted = structural_attention(Tensor(tokens[perm]), blk).data
    assert out.shape == tokens.shape
    np.testing.assert_allclose(permuted, out[perm], atol=1e-12)


def test_structural_attention_is_joint_permutation_equivariant(grad_config, rng):
    blk = block(grad_config)
    tokens = rng.uniform(-1, 1, (3, 6, grad_config.dim))
    perm = np.array([0, 4, 2, 5, 1, 3])  # star stays at index 0
    with no_grad():
        out = structural_attention(Tensor(tokens), blk).data
        permuted = structural_attention(Tensor(tokens[:, perm]), blk).data
    np.testing.assert_allclose(permuted, out[:, perm], atol=1e-12)


def test_temporal_attention_single_token(grad_config, rng):
    blk = block(grad_config, 'temporal')
    x = rng.uniform(-1, 1, (1, grad_config.dim))
    with no_grad():
        out = temporal_attention(Tensor(x), blk).data
        n = blk.norm1(Tensor(x)).data
        y = x + blk.attn.out(blk.attn.value(Tensor(n))).data
        expected = y + blk.ffn(blk.norm2(Tensor(y))).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_temporal_attention_counts_t_squared(grad_config, rng):
    blk = block(grad_config, 'temporal')
    counter = AttentionCounter()
    blk.attn.counter = counter
    with no_grad():
        temporal_attention(Tensor(rng.standard_normal((7, grad_config.dim))), blk)
    assert counter.max_tokens('temporal') == 7
    assert counter.entries('temporal') == 49


def test_broadcast_add_zero_star_is_identity(rng):
    h = Tensor(rng.standard_normal((4, 5, 8)))
    out = broadcast_add_stars(h, Tensor(np.zeros((4, 8))))
    assert np.array_equal(out.data, h.data)


def make_state(T, J, D, rng):
    return LatentState(Tensor(rng.uniform(-1, 1, (T, J, D))), Tensor(rng.uniform(-1, 1, (T, D))))


def test_kaa_round_shapes_and_counts(grad_config, rng):
    T, J = 10, 17
    params = KaaRound(grad_config, np.random.default_rng(0))
    counter = AttentionCounter()
    params.attach_counter(counter)
    with no_grad():
        out = kaa_round(make_state(T, J, grad_config.dim, rng), params)
    assert out.h.shape == (T, J, grad_config.dim)
    assert out.h_star.shape == (T, grad_config.dim)
    assert counter.entries() == kaa_score_entries(T, J) == 3340
    assert counter.max_tokens('temporal') == T


def test_cascaded_round_counts(grad_config, rng):
    T, J = 10, 17
    params = CascadedRound(grad_config, np.random.default_rng(0))
    counter = AttentionCounter()
    params.attach_counter(counter)
    with no_grad():
        out = cascaded_round(Tensor(rng.uniform(-1, 1, (T, J, grad_config.dim))), params)
    assert out.shape == (T, J, grad_config.dim)
    assert counter.entries() == cascaded_score_entries(T, J) == 4590


@pytest.mark.parametrize('T,J', [(10, 17), (60, 17), (10, 22), (60, 22)])
def test_kaa_is_cheaper_than_cascaded(T, J):
    assert kaa_score_entries(T, J) < cascaded_score_entries(T, J)


def test_aggregation_orders_differ(grad_config, rng):
    params = KaaRound(grad_config, np.random.default_rng(0))
    state = make_state(4, 5, grad_config.dim, rng)
    with no_grad():
        a = kaa_round(state, params, 'structure-first')
        b = kaa_round(state, params, 'trajectory-first')
    assert np.max(np.abs(a.h.data - b.h.data)) > 1e-6


# --- encoder / decoder ------------------------------------------------------------

def test_kinematic_encode_shapes_and_determinism(grad_config, rng):
    encoder = KinematicEncoder(grad_config, np.random.default_rng(0))
    d = rng.uniform(-1, 1, (6, 5, 3))
    visible = rng.random((6, 5)) < 0.6
    with no_grad():
        h1, c1 = kinematic_encode(encoder, d, visible, 7)
        h2, c2 = kinematic_encode(encoder, d, visible, 7)
    assert c1.shape == (6, grad_config.dim)
    assert h1.shape == (int(visible.sum()), grad_config.dim)
    assert np.array_equal(c1.data, c2.data) and np.array_equal(h1.data, h2.data)


def test_kinematic_encode_ignores_hidden_cells(grad_config, rng):
    encoder = KinematicEncoder(grad_config, np.random.default_rng(0))
    d = rng.uniform(-1, 1, (4, 5, 3))
    visible = np.ones((4, 5), dtype=bool)
    visible[2, 3] = False
    other = d.copy()
    other[2, 3] = 99.0
    with no_grad():
        _, c1 = kinematic_encode(encoder, d, visible, 3)
        _, c2 = kinematic_encode(encoder, other, visible, 3)
    assert np.array_equal(c1.data, c2.data)


def test_condition_gradient_matches_finite_differences(grad_config, rng):
    encoder = KinematicEncoder(grad_config, np.random.default_rng(1))
    x = Tensor(rng.uniform(-1, 1, (3, 4, 3)), requires_grad=True)
    visible = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 1, 1]], dtype=bool)
    head = rng.standard_normal((3, grad_config.dim))

    def fn():
        _, c = kinematic_encode(encoder, x, visible, 5)
        return (c * head).sum()

    assert gradient_check(fn, [x]) < 1e-5


def test_token_layout_order_and_inverse():
    mask = np.array([[False, True, False], [True, False, False]])
    layout = TokenLayout.from_mask(mask)
    assert layout.order.tolist() == [0, 2, 4, 5, 1, 3]
    assert layout.n_unmasked == 4 and layout.n_masked == 2
    assert np.array_equal(layout.order[layout.inverse], np.arange(6))
    with pytest.raises(LayoutError):
        layout.check(3, 2)


def test_motion_decode_shapes(grad_config, rng):
    model = MaskedMotionDiffusion(grad_config)
    T, J = 4, 5
    c = Tensor(rng.standard_normal((T, grad_config.dim)))
    layout = TokenLayout.from_mask(np.zeros((T, J), dtype=bool))
    with no_grad():
        out = motion_decode(model.decoder, Tensor(rng.standard_normal((T * J, grad_config.dim))),
                            Tensor(np.zeros((0, grad_config.dim))), c, 10, layout)
    assert out.shape == (T, J, 3)
    with pytest.raises(LayoutError):
        motion_decode(model.decoder, Tensor(rng.standard_normal((3, grad_config.dim))),
                      Tensor(np.zeros((0, grad_config.dim))), c, 10, layout)


def test_model_prediction_shape_and_finiteness(tiny_config, rng):
    model = MaskedMotionDiffusion(tiny_config)
    cond = rng.uniform(-10, 10, (10, 17, 3))
    x_k = rng.uniform(-10, 10, cond.shape)
    mask = rng.random((10, 17)) < 0.3
    with no_grad():
        out = model.predict(x_k, 500, cond, mask).data
    assert out.shape == cond.shape
    assert np.all(np.isfinite(out))


def _full_model_loss(seed):
    rng = np.random.default_rng(seed)
    model = MaskedMotionDiffusion(NetworkConfig.preset('grad-check', init_seed=seed))
    cond = rng.uniform(-1, 1, (3, 4, 3))
    x_k = rng.uniform(-1, 1, cond.shape)
    mask = np.zeros((3, 4), dtype=bool)
    mask[rng.integers(0, 3), rng.integers(0, 4)] = True
    mask[1, 2] = True
    weights = rng.standard_normal(cond.shape)

    def fn():
        return (model.predict(x_k, 9, cond, mask) * weights).sum()

    params = [p for name, p in model.named_parameters() if name != 'mask_token']
    return fn, params


@pytest.mark.parametrize('seed', range(10))
def test_full_model_gradient_check(seed):
    fn, params = _full_model_loss(seed)
    assert gradient_check(fn, params, max_entries=24, seed=seed) < 1e-5


@pytest.mark.slow
def test_full_model_gradient_check_every_entry():
    fn, params = _full_model_loss(0)
    assert gradient_check(fn, params) < 1e-5


def test_mae_forward(grad_config, rng):
    model = MaskedMotionDiffusion(grad_config)
    d = rng.uniform(-1, 1, (4, 5, 3))
    mask = np.zeros((4, 5), dtype=bool)
    with pytest.raises(EmptyMask):
        model.mae_forward(d, mask)
    mask[1, 1] = mask[3, 4] = True
    d_hat, loss = model.mae_forward(d, mask)
    assert d_hat.shape == d.shape
    assert np.isfinite(loss.item())
    assert model.mask_token in loss.backward()


# --- in-betweening ------------------------------------------------------------------

@pytest.fixture
def inbetween_model():
    return InbetweenEncoder(NetworkConfig.preset('tiny', in_dim=12, out_dim=12, depth=1, decoder_depth=0))


def test_inbetween_transition_length(inbetween_model, rng):
    split = SegmentSplit(4, 30, 4)
    segments = [rng.standard_normal((n, 22, 12)) for n in (4, 30, 4)]
    label = LabelEmbeddingTable(32).lookup('walk')
    with no_grad():
        out = inbetween_encode(inbetween_model, *segments, label, 40, split)
        without = inbetween_encode(inbetween_model, *segments, None, 40, split)
    assert out.shape == (30, 22, 12)
    assert np.max(np.abs(out.data - without.data)) > 0


def test_inbetween_split_errors(inbetween_model, rng):
    split = SegmentSplit(4, 30, 4)
    with pytest.raises(SplitError):
        inbetween_encode(inbetween_model, rng.standard_normal((3, 22, 12)), rng.standard_normal((30, 22, 12)),
                         rng.standard_normal((4, 22, 12)), None, 1, split)


def test_inbetween_full_shape_round_trip(inbetween_model, rng):
    x = rng.standard_normal((12, 22, 12))
    with no_grad():
        assert inbetween_model.predict_full(x, 3).shape == (12, 22, 12)


# --- configuration and checkpoints ---------------------------------------------------

def test_presets():
    cfg = NetworkConfig.preset('completion')
    assert (cfg.depth, cfg.dim, cfg.heads, cfg.head_dim, cfg.ffn_dim, cfg.decoder_depth) == (9, 512, 4, 32, 512, 3)
    ib = NetworkConfig.preset('inbetween')
    assert (ib.depth, ib.heads, ib.head_dim, ib.ffn_dim, ib.in_dim) == (8, 8, 64, 1024, 12)
    with pytest.raises(NetworkError):
        NetworkConfig.preset('huge')
    with pytest.raises(NetworkError):
        NetworkConfig.from_dict({'depth': 2, 'width': 4})


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(['structure-first', 'trajectory-first']), st.booleans())
def test_config_dict_round_trip(order, joint_pos):
    cfg = NetworkConfig.preset('tiny', aggregation_order=order, use_joint_pos=joint_pos)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path, grad_config, rng):
    model = MaskedMotionDiffusion(grad_config)
    for p in model.parameters():
        p.data += rng.standard_normal(p.shape) * 0.01
    path = str(tmp_path / 'model.npz')
    save_checkpoint(path, model, extra={'step': np.array(12)}, meta={'phase': 'pretrain'})
    loaded, extra, meta = load_checkpoint(path)
    assert loaded.cfg == grad_config
    assert int(extra['step']) == 12 and meta == {'phase': 'pretrain'}
    for (name, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_checkpoint_files_are_deterministic(tmp_path, grad_config):
    a, b = str(tmp_path / 'a.npz'), str(tmp_path / 'b.npz')
    save_checkpoint(a, MaskedMotionDiffusion(grad_config))
    save_checkpoint(b, MaskedMotionDiffusion(grad_config))
    assert open(a, 'rb').read() == open(b, 'rb').read()


def test_checkpoint_errors(tmp_path, grad_config):
    path = str(tmp_path / 'old.npz')
    header = {'version': 99, 'kind': 'completion', 'network': grad_config.to_dict(), 'meta': {}}
    write_npz(path, {'header': np.array(json.dumps(header))})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    header['version'] = 1
    write_npz(path, {'header': np.array(json.dumps(header))})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
