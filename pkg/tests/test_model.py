import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedtrajrec import diffcore as dc
from fedtrajrec.errors import (ConfigError, LayoutMismatchError, LengthMismatchError,
                               NegativeLambdaError, ShapeMismatchError, UnrecordedGraphError,
                               VocabularyOverflowError)
from fedtrajrec.model import (Batch, FeatureCache, LteConfig, LteModel, constraint_mask, decode_step,
                              distill_loss, embed_trajectory, load_checkpoint, local_loss,
                              parameter_count, recover, recover_many, save_checkpoint,
                              step_representation, total_loss, trajectory_log_mask)
from fedtrajrec.roadnet import GridSpec, RoadNetwork, generate_grid_network
from fedtrajrec.trajdata import (GridToken, IncompleteTrajectory, generate_synthetic_trajectories,
                                 make_pairs)


@pytest.fixture(scope="module")
def world():
    net = generate_grid_network(4, 4, 100.0, 0)
    grid = GridSpec.covering(net, 50.0)
    return net, grid


def small_cfg(net, grid, **kw):
    base = dict(hidden_dim=8, seg_embed_dim=4, grid_embed_dim=4, dropout=0.0)
    base.update(kw)
    return LteConfig.for_network(net, grid, 12, **base)


def zero_model(cfg):
    m = LteModel(cfg, 0)
    m.params.flat[:] = 0
    return m


# --------------------------------------------------------------------------
# config and layout
# --------------------------------------------------------------------------

def test_config_validation(world):
    net, grid = world
    with pytest.raises(ConfigError):
        small_cfg(net, grid, dropout=1.0)
    with pytest.raises(ConfigError):
        small_cfg(net, grid, gamma=0.0)
    with pytest.raises(ConfigError):
        small_cfg(net, grid, mu=-1.0)
    with pytest.raises(ConfigError):
        LteConfig.from_dict({**small_cfg(net, grid).to_dict(), "bogus": 1})


def test_config_round_trip(world):
    cfg = small_cfg(*world, n_blocks=2)
    assert LteConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("blocks", [1, 2, 3])
def test_parameter_count_closed_form(world, blocks):
    cfg = small_cfg(*world, n_blocks=blocks)
    assert LteModel(cfg).n_params == parameter_count(cfg)


def test_flatten_load_and_layout(world, tmp_path):
    cfg = small_cfg(*world)
    a, b = LteModel(cfg, 1), LteModel(cfg, 2)
    assert LteModel(cfg, 1).flatten().bit_equal(a.flatten())
    b.load(a.flatten())
    assert b.flatten().bit_equal(a.flatten())
    save_checkpoint(a, tmp_path / "m.ckpt")
    c = LteModel(cfg, 3)
    load_checkpoint(c, tmp_path / "m.ckpt")
    assert c.flatten().bit_equal(a.flatten())
    other = LteModel(small_cfg(*world, hidden_dim=6), 0)
    with pytest.raises(LayoutMismatchError):
        other.load(a.flatten())


# --------------------------------------------------------------------------
# embedding
# --------------------------------------------------------------------------

def test_embed_zero_weights(world):
    m = zero_model(small_cfg(*world))
    assert np.array_equal(embed_trajectory(m, [GridToken(1, 1, 0)]), np.zeros(8))


def test_embed_eval_deterministic_and_order_sensitive(world):
    m = LteModel(small_cfg(*world, dropout=0.5), 4)
    toks = [GridToken(0, 0, 0), GridToken(3, 2, 4)]
    a = embed_trajectory(m, toks)
    assert np.array_equal(a, embed_trajectory(m, toks))
    assert not np.allclose(a, embed_trajectory(m, toks[::-1]))


def test_embed_vocabulary_overflow(world):
    m = LteModel(small_cfg(*world))
    with pytest.raises(VocabularyOverflowError):
        embed_trajectory(m, [GridToken(0, 0, 99)])


# --------------------------------------------------------------------------
# constraint mask
# --------------------------------------------------------------------------

def test_constraint_mask_values():
    net = RoadNetwork([(0, 0), (100, 0), (0, 400), (100, 400)], [(0, 1), (2, 3)])
    grid = GridSpec.covering(net, 50.0)
    cfg = LteConfig.for_network(net, grid, 4, gamma=125.0, mask_radius=300.0)
    w = constraint_mask(net, (50.0, 0.0), cfg)
    assert w[0] == 1.0 and w[1] == 0.0  # second road is 400 m away
    w = constraint_mask(net, (50.0, math.sqrt(125.0)), cfg)
    assert w[0] == pytest.approx(math.exp(-1), abs=1e-9)


def test_trajectory_mask_modes(world):
    net, grid = world
    icp = IncompleteTrajectory([0, 3], [0, 5], [0.5, 0.5], 0.0, 15.0, 4)
    obs = trajectory_log_mask(net, icp, small_cfg(net, grid, mask_mode="observed"))
    assert np.all(obs[1:3] == 0.0) and np.isneginf(obs[0]).any()
    itp = trajectory_log_mask(net, icp, small_cfg(net, grid, mask_mode="interpolate"))
    assert np.isneginf(itp[1]).any()


# --------------------------------------------------------------------------
# decode step
# --------------------------------------------------------------------------

def test_decode_forced_support(world):
    net, grid = world
    m = LteModel(small_cfg(net, grid), 0)
    mask = np.zeros(net.n_edges)
    mask[7] = 0.3
    out = decode_step(m, np.zeros(8), 0, 0.5, mask)
    assert out.edge == 7 and out.probs[7] == 1.0


def test_decode_zero_model_uniform(world):
    net, grid = world
    m = zero_model(small_cfg(net, grid))
    m.params.p["ratio_b"][0] = 0.3
    out = decode_step(m, np.zeros(8), 2, 0.1, np.ones(net.n_edges))
    assert np.allclose(out.probs, 1.0 / net.n_edges)
    assert out.edge == 0 and out.ratio == pytest.approx(0.3)
    m.params.p["ratio_b"][0] = 1.7
    assert decode_step(m, np.zeros(8), 2, 0.1, np.ones(net.n_edges)).ratio == 1.0


def test_decode_shape_errors(world):
    net, grid = world
    m = LteModel(small_cfg(net, grid))
    with pytest.raises(ShapeMismatchError):
        decode_step(m, np.zeros(8), 0, 0.0, np.ones(3))
    with pytest.raises(ShapeMismatchError):
        decode_step(m, np.zeros(5), 0, 0.0, np.ones(net.n_edges))


def test_decode_fuzz(world):
    net, grid = world
    rng = np.random.default_rng(0)
    m = LteModel(small_cfg(net, grid), 1)
    m.params.flat[:] *= 8  # push activations into saturating regimes
    h = np.zeros(8)
    for _ in range(1000):
        mask = rng.random(net.n_edges) * (rng.random(net.n_edges) < 0.5)
        out = decode_step(m, h, int(rng.integers(net.n_edges)), float(rng.random()), mask)
        assert abs(out.probs.sum() - 1) < 1e-6
        assert 0.0 <= out.ratio <= 1.0
        if mask.any():
            assert np.all(out.probs[mask == 0] == 0)
        h = out.hidden


@given(st.floats(-100, 100))
def test_argmax_shift_invariance(c):
    net = generate_grid_network(3, 3, 100.0, 0)
    grid = GridSpec.covering(net, 50.0)
    m = LteModel(small_cfg(net, grid), 2)
    mask = np.ones(net.n_edges)
    base = decode_step(m, np.zeros(8), 1, 0.2, mask)
    shifted = dc.masked_softmax(base.logits + c, mask)
    assert int(np.argmax(shifted)) == base.edge


# --------------------------------------------------------------------------
# recovery
# --------------------------------------------------------------------------

def test_recover_full_trajectory_identity(world):
    net, grid = world
    t = generate_synthetic_trajectories(net, 1, 8, 15.0, 3)[0]
    icp = make_pairs([t], 1.0, 0)[0].icp
    cfg = LteConfig.for_network(net, grid, 8, hidden_dim=8, seg_embed_dim=4, grid_embed_dim=4)
    out = recover(LteModel(cfg, 0), icp, net, grid)
    assert out == t


def test_recover_grid_count(world):
    net, grid = world
    icp = IncompleteTrajectory([0, 6], [0, 3], [0.1, 0.9], 0.0, 15.0, 7)
    out = recover(LteModel(small_cfg(net, grid), 0), icp, net, grid)
    assert len(out) == 7 and out.times[-1] == 90.0


def test_recover_batches_agree(world):
    net, grid = world
    cfg = small_cfg(net, grid)
    pairs = make_pairs(generate_synthetic_trajectories(net, 9, 12, 15.0, 1), 0.3, 1)
    m = LteModel(cfg, 5)
    one = [recover(m, p.icp, net, grid) for p in pairs]
    many = recover_many(m, [p.icp for p in pairs], net, grid, batch_size=4)
    for a, b in zip(one, many):
        assert np.array_equal(a.edges, b.edges)
        assert np.allclose(a.ratios, b.ratios, atol=1e-6)


# --------------------------------------------------------------------------
# losses and gradients
# --------------------------------------------------------------------------

def test_local_loss_examples(world):
    net, grid = world
    m = LteModel(small_cfg(net, grid), 0)
    t = generate_synthetic_trajectories(net, 1, 4, 15.0, 0)[0]
    from fedtrajrec.model import DecodeStepOutput
    perfect = [DecodeStepOutput(np.eye(net.n_edges)[e], int(e), float(r), None, None)
               for e, r in zip(t.edges, t.ratios)]
    assert local_loss(perfect, t, 1.0) == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(0)
    steps = []
    for e in t.edges:
        p = rng.random(net.n_edges)
        steps.append(DecodeStepOutput(p / p.sum(), 0, float(rng.random()), None, None))
    ce = sum(-math.log(s.probs[e] + 1e-12) for s, e in zip(steps, t.edges)) / len(t)
    sq = sum((s.ratio - r) ** 2 for s, r in zip(steps, t.ratios)) / len(t)
    assert local_loss(steps, t, 0.0) == pytest.approx(ce)
    assert local_loss(steps, t, 2.5) == pytest.approx(ce + 2.5 * sq)
    with pytest.raises(LengthMismatchError):
        local_loss(steps[:-1], t, 1.0)


def test_distill_examples():
    rep = step_representation([[1.0, 0.0]], [0.4])
    assert distill_loss(rep, rep) == 0.0
    assert distill_loss(step_representation([[1.0, 0.0]], [0.4]),
                        step_representation([[0.0, 0.0]], [0.4])) == 1.0
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    ref = 0.0
    for i in range(3):
        for j in range(5):
            ref += (a[i, j] - b[i, j]) ** 2
    assert distill_loss(a, b) == pytest.approx(ref / 3)
    with pytest.raises(LengthMismatchError):
        distill_loss(a, b[:2])


def test_total_loss():
    assert total_loss(2.0, 3.0, 0.0) == 2.0
    assert total_loss(2.0, 3.0, 5.0) == 17.0
    with pytest.raises(NegativeLambdaError):
        total_loss(1.0, 1.0, -0.1)


def test_batched_loss_matches_functional(world):
    """Teacher-forced batch objective equals per-trajectory functional losses."""
    net, grid = world
    cfg = small_cfg(net, grid, dtype="float64")
    m, t = LteModel(cfg, 3), LteModel(cfg, 4)
    pairs = make_pairs(generate_synthetic_trajectories(net, 3, 6, 15.0, 2), 0.4, 0)
    cache = FeatureCache(net, grid, cfg)
    b = Batch([cache.get(p) for p in pairs], m.dtype)
    lam = 0.3
    total, _ = m.loss(b, lam=lam, teacher_out=t.teacher_outputs(b), train=False)
    rec, trec = m.forward(b), t.forward(b)
    ref = 0.0
    for i, p in enumerate(pairs):
        n = len(p.truth)
        ce = np.mean([-np.log(rec.probs[i, k, p.truth.edges[k]] + 1e-12) for k in range(n)])
        ref_l = ce + cfg.mu * np.mean((rec.ratios[i, :n] - p.truth.ratios) ** 2)
        d = distill_loss(step_representation(trec.logits[i, :n], trec.ratios[i, :n]),
                         step_representation(rec.logits[i, :n], rec.ratios[i, :n]))
        ref += ref_l + lam * d
    assert total == pytest.approx(ref / len(pairs), rel=1e-9)


def test_backward_twice_rejected(world):
    net, grid = world
    cfg = small_cfg(net, grid)
    m = LteModel(cfg, 0)
    pairs = make_pairs(generate_synthetic_trajectories(net, 2, 5, 15.0, 0), 0.5, 0)
    b = Batch([FeatureCache(net, grid, cfg).get(p) for p in pairs], m.dtype)
    rec = m.forward(b)
    g = np.zeros(rec.logits.shape)
    m.backward(rec, g, np.zeros(rec.ratios.shape))
    with pytest.raises(UnrecordedGraphError):
        m.backward(rec, g, np.zeros(rec.ratios.shape))


def test_unused_parameter_zero_gradient(world):
    net, grid = world
    cfg = small_cfg(net, grid, dtype="float64")
    m = LteModel(cfg, 0)
    pairs = make_pairs(generate_synthetic_trajectories(net, 2, 5, 15.0, 0), 0.5, 0)
    b = Batch([FeatureCache(net, grid, cfg).get(p) for p in pairs], m.dtype)
    _, g, _ = m.loss_and_grad(b, train=False)
    a, e, _ = m.layout.offsets()["emb_tid"]
    used = set(b.tokens[:, :, 2].ravel().tolist())
    rows = g[a:e].reshape(-1, cfg.grid_embed_dim)
    for tid in range(rows.shape[0]):
        if tid not in used:
            assert np.all(rows[tid] == 0)


def test_negative_lambda_rejected(world):
    net, grid = world
    cfg = small_cfg(net, grid)
    m = LteModel(cfg, 0)
    pairs = make_pairs(generate_synthetic_trajectories(net, 1, 5, 15.0, 0), 0.5, 0)
    b = Batch([FeatureCache(net, grid, cfg).get(p) for p in pairs], m.dtype)
    with pytest.raises(NegativeLambdaError):
        m.loss_and_grad(b, lam=-1.0)


def test_feature_cache_identity(world):
    net, grid = world
    cfg = small_cfg(net, grid)
    cache = FeatureCache(net, grid, cfg)
    p = make_pairs(generate_synthetic_trajectories(net, 1, 5, 15.0, 0), 0.5, 0)[0]
    assert cache.get(p) is cache.get(p)
