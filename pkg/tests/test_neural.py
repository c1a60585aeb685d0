import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from goalchoice import autograd as ag
from goalchoice.autograd import ParamStore, Tensor, backward
from goalchoice.config import ModelConfig
from goalchoice.dcm import mnl_probabilities
from goalchoice.errors import ContractError
from goalchoice.ingest import InteractionSpace
from goalchoice.neural import (
    attend, build_social_tensor, cell_index, collate, decode, decode_modes, encode, encode_tracks, forward,
    goal_scores, init_params, mean_scale, mode_sets, prepare_instance,
)
from goalchoice.train import nll_tensor

from conftest import frame_instance, max_rel_err, numeric_grads, small_instances, small_model_config


def _zero(params):
    for n, t in params.items():
        params.set(n, np.zeros(t.shape))
    return params


def test_heads_and_shapes():
    cfg = ModelConfig()
    assert cfg.n_goals == 15 and cfg.n_modes == 6 and cfg.n_heads == 21
    inst = frame_instance([(2, 15, -1.0, 3.0)])
    out = forward(collate([prepare_instance(inst, cfg)], cfg), init_params(cfg, 0), cfg)
    assert out.s.shape == (1, 15) and out.dec.mu.shape == (1, 6, 30, 2) and out.heads.shape == (1, 21, 32)


def test_encoder_zero_params():
    cfg = ModelConfig()
    enc = encode_tracks(frame_instance([(2, 15, 0.0, 3.0)]), _zero(init_params(cfg, 0)), cfg)
    assert not enc.target.any() and not enc.neighbors[0].any()


def test_identical_tracks_identical_state():
    cfg = ModelConfig()
    inst = frame_instance([(4, 12, 1.0, 3.0), (4, 12, 1.0, 3.0)])
    enc = encode_tracks(inst, init_params(cfg, 1), cfg)
    assert np.array_equal(enc.neighbors[0], enc.neighbors[1])


def test_encoding_ignores_other_agents():
    cfg = ModelConfig()
    p = init_params(cfg, 2)
    alone = encode_tracks(frame_instance(), p, cfg).target
    crowded = encode_tracks(frame_instance([(4, 12, 1.0, 3.0), (-3, 5, 0.2, 8.0)]), p, cfg).target
    # batched matmul kernels may round differently with more rows, so compare to 1e-12
    assert np.allclose(alone, crowded, atol=1e-12, rtol=0)


def test_encoder_gradient_fd():
    cfg = small_model_config()
    p = init_params(cfg, 3)
    keep = ParamStore()
    for n in ("emb.w", "emb.b", "enc.w", "enc.b"):
        keep.add(n, p[n].value)
    x = np.random.default_rng(0).normal(size=(4, 3, 5))
    mask = np.ones((4, 3, 1))
    mask[:2, 2] = 0

    def f():
        h = encode(x, mask, keep)
        return ag.sum(ag.square(h))

    backward(f())
    assert max_rel_err(keep.grads(), numeric_grads(keep, f)) <= 1e-4


def test_social_tensor_examples():
    space = InteractionSpace(40, 10, 25)
    assert build_social_tensor(frame_instance(), space).cells == {}
    t = build_social_tensor(frame_instance([(0, 20, 0.0, 0.0)]), space, 10, 10)
    # rows: 5 m bands from y = -10; columns: 5 m bands from x = -25
    assert list(t.cells) == [(math.floor(30 / 5), math.floor(25 / 5))] == [(6, 5)]
    assert cell_index((0, 20), space, 10, 10) == (6, 5)
    t = build_social_tensor(frame_instance([(0, 9, 0.0, 0.0), (0, 5, 0.0, 0.0)]), space, 10, 10)
    assert t.cells == {(3, 5): 1} and t.dropped == 1


def test_out_of_space_neighbour_placed_at_cv_entry():
    t = build_social_tensor(frame_instance([(0, 60, -math.pi / 2, 10.0)]))
    assert list(t.cells) == [(9, 5)]


def _attn_params(C=3, d=2, H=2, seed=0):
    rng = np.random.default_rng(seed)
    p = ParamStore()
    for n in ("q", "k", "v"):
        p.add(f"att.w{n}", rng.normal(size=(C, H * d)))
        p.add(f"att.b{n}", rng.normal(size=H * d))
    return p


def test_attend_single_and_duplicate():
    p = _attn_params()
    rng = np.random.default_rng(1)
    hT, hn = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    v = (hn @ p["att.wv"].value + p["att.bv"].value).reshape(2, 2)
    one = attend(Tensor(hT), Tensor(np.vstack([hT, hn])), np.array([[1]]), np.array([[True]]), p, 2)
    assert np.allclose(one.value[0], v, atol=1e-15)
    two = attend(Tensor(hT), Tensor(np.vstack([hT, hn, hn])), np.array([[1, 2]]), np.array([[True, True]]), p, 2)
    assert np.allclose(two.value, one.value, atol=1e-15)


def test_attend_empty():
    p = _attn_params()
    hT = Tensor(np.ones((2, 3)))
    assert not attend(hT, hT, np.zeros((2, 0), int), np.zeros((2, 0), bool), p, 2).value.any()
    out = attend(hT, Tensor(np.ones((3, 3))), np.array([[2], [0]]), np.array([[True], [False]]), p, 2).value
    assert out[0].any() and not out[1].any()


def test_goal_scores():
    p = ParamStore()
    p.add("score.w", np.zeros((4, 1)))
    z = np.random.default_rng(0).normal(size=(2, 5, 4))
    assert not goal_scores(z, p).value.any()
    p.set("score.w", np.random.default_rng(1).normal(size=(4, 1)))
    same = goal_scores(np.ones((1, 5, 4)), p).value
    assert np.all(same == same[0, 0])

    def f():
        return ag.sum(ag.square(goal_scores(z, p)))

    backward(f())
    assert max_rel_err(p.grads(), numeric_grads(p, f)) <= 1e-6


def test_decoder_zero_params():
    cfg = ModelConfig()
    ms = decode_modes(np.ones((6, cfg.hidden + cfg.attn_dim)), np.ones((6, 2)), _zero(init_params(cfg, 0)), cfg, 30)
    assert not ms.mu.any() and np.all(ms.sigma == 1) and not ms.rho.any()
    assert np.allclose(ms.probs, 1 / 6, atol=1e-15)


def test_decoder_count_mismatch():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    with pytest.raises(ContractError):
        decode_modes(np.ones((5, cfg.hidden + cfg.attn_dim)), np.ones((5, 2)), p, cfg, 30)
    with pytest.raises(ContractError):
        decode_modes(np.ones((6, cfg.hidden + cfg.attn_dim)), np.ones((4, 2)), p, cfg, 30)


def test_mode_set_validity_random_draws():
    cfg = small_model_config()
    rng = np.random.default_rng(5)
    ctx = rng.normal(size=(3, 2, cfg.hidden + cfg.attn_dim))
    goals = rng.normal(scale=10, size=(3, 2, 2))
    for _ in range(100):
        p = init_params(cfg, rng)
        for n, t in p.items():
            p.set(n, rng.normal(scale=3, size=t.shape))
        for ms in mode_sets(decode(Tensor(ctx), goals, p, cfg, 6)):
            assert np.all(ms.sigma > 0) and np.all(np.abs(ms.rho) < 1)
            assert abs(ms.probs.sum() - 1) <= 1e-9


def test_mean_scale_is_linear_in_time():
    cfg = ModelConfig(out_scale=10.0)
    s = mean_scale(cfg, 30)
    assert s.shape == (30, 1) and s[-1, 0] == 10.0 and np.allclose(np.diff(s[:, 0]), 10 / 30)


def test_decoder_nll_gradient_fd():
    cfg = small_model_config()
    full = init_params(cfg, 4)
    p = ParamStore()
    for n in full.names():
        if n.split(".")[0] in ("goal", "dec", "out", "prob"):
            p.add(n, full[n].value)
    rng = np.random.default_rng(2)
    ctx = rng.normal(size=(2, 2, cfg.hidden + cfg.attn_dim))
    goals = rng.normal(scale=5, size=(2, 2, 2))
    gt = rng.normal(scale=3, size=(2, 6, 2))

    def f():
        out = SimpleNamespace(dec=decode(Tensor(ctx), goals, p, cfg, 6))
        return ag.sum(nll_tensor(out, gt))

    backward(f())
    assert max_rel_err(p.grads(), numeric_grads(p, f)) <= 1e-4


def test_neighbour_permutation_invariance():
    cfg = ModelConfig()
    p = init_params(cfg, 6)
    inst = frame_instance([(4, 12, 1.0, 3.0), (-3, 5, 0.2, 8.0), (10, 30, -2.0, 5.0), (-8, 20, 0.0, 2.0)])
    perm = replace(inst, scene=replace(inst.scene, neighbors=inst.scene.neighbors[::-1]),
                   neighbor_mask=inst.neighbor_mask[::-1])
    a = forward(collate([prepare_instance(inst, cfg)], cfg), p, cfg)
    b = forward(collate([prepare_instance(perm, cfg)], cfg), p, cfg)
    assert np.array_equal(a.s.value, b.s.value)
    assert np.array_equal(a.heads.value, b.heads.value)
    for x, y in zip(mode_sets(a.dec), mode_sets(b.dec)):
        assert np.array_equal(x.mu, y.mu) and np.array_equal(x.probs, y.probs)
    ea, eb = encode_tracks(inst, p, cfg), encode_tracks(perm, p, cfg)
    n = len(inst.scene.neighbors)
    for j in range(n):
        assert np.array_equal(ea.neighbors[j], eb.neighbors[n - 1 - j])


def test_zero_projection_reduces_to_mnl():
    cfg = ModelConfig()
    p = init_params(cfg, 7)
    p.set("dcm.beta", np.array([[-2.3], [0.2], [-0.3]]))
    p.set("score.w", np.zeros(p["score.w"].shape))
    insts = small_instances(6, t_obs=10, t_f=30)
    items = [prepare_instance(i, cfg, "infer") for i in insts]
    out = forward(collate(items, cfg), p, cfg)
    for b, it in enumerate(items):
        u = it.features.matrix() @ np.array([-2.3, 0.2, -0.3])
        assert np.allclose(np.exp(out.log_pi.value[b]), mnl_probabilities(u), atol=1e-12, rtol=0)


def test_batch_equals_single():
    cfg = small_model_config()
    p = init_params(cfg, 8)
    items = [prepare_instance(i, cfg) for i in small_instances(5)]
    batched = forward(collate(items, cfg), p, cfg)
    for b, it in enumerate(items):
        single = forward(collate([it], cfg), p, cfg)
        assert np.allclose(single.s.value[0], batched.s.value[b], atol=1e-12)
        assert np.allclose(single.dec.mu.value[0], batched.dec.mu.value[b], atol=1e-12)
