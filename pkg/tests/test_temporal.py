import numpy as np
import pytest

from topoguard.attention import AttentionParams, spectral_normalize
from topoguard.camera_graph import CameraPose, build_adjacency
from topoguard.errors import InvalidInput
from topoguard.temporal import (Mlp, TemporalSnapshot, TgnConfig, aggregate, message,
                                stability_constants, tgn_step)


def graph(rng, n):
    return build_adjacency([CameraPose(f"c{i}", p) for i, p in
                            enumerate(rng.uniform(0, 30, (n, 3)))], 10.0)


def test_zero_weights_give_zero_message_and_pure_residual():
    rng = np.random.default_rng(0)
    d = 4
    cfg = TgnConfig.zeros(d)
    assert np.array_equal(message(rng.normal(size=d), rng.normal(size=d), [0.5, 0.1], cfg),
                          np.zeros(d))
    assert np.array_equal(aggregate([], np.zeros(d), cfg), np.zeros(d))
    F = rng.normal(size=(5, d))
    p = AttentionParams(np.eye(d), np.eye(d), np.zeros((d, d)), np.eye(d))
    out = tgn_step(TemporalSnapshot(F), graph(rng, 5), p, cfg)
    assert np.array_equal(out, F)


def test_identity_like_message_passes_source():
    d = 3
    W1 = np.zeros((d, 2 * d + 2))
    W1[:, :d] = np.eye(d)
    cfg = TgnConfig(Mlp(W1, np.eye(d)), Mlp(np.zeros((1, 2 * d)), np.zeros((d, 1))))
    src = np.array([0.5, 1.0, 2.0])
    assert np.allclose(message(src, -src, [1.0, 0.0], cfg), src)


def _pass_message_slot(d):
    W1 = np.zeros((2 * d, 2 * d))
    W1[:d, :d] = np.eye(d)
    W1[d:, :d] = -np.eye(d)
    W2 = np.zeros((d, 2 * d))
    W2[:, :d] = np.eye(d)
    W2[:, d:] = -np.eye(d)
    return Mlp(W1, W2)  # relu(x) - relu(-x) = x on the message slot


def test_aggregate_pass_through_and_mean():
    d = 3
    msg = Mlp(np.zeros((1, 2 * d + 2)), np.zeros((d, 1)))
    cfg = TgnConfig(msg, _pass_message_slot(d))
    m1, m2 = np.array([1.0, -2.0, 3.0]), np.array([3.0, 0.0, -1.0])
    assert np.allclose(aggregate([m1], np.ones(d), cfg), m1)
    assert np.allclose(aggregate([m1, m2], np.ones(d), cfg), (m1 + m2) / 2)


def test_single_node_prior_pass_through_doubles():
    d = 2
    W1 = np.zeros((2 * d, 2 * d))
    W1[:d, d:] = np.eye(d)
    W1[d:, d:] = -np.eye(d)
    W2 = np.hstack([np.eye(d), -np.eye(d)])
    cfg = TgnConfig(Mlp(np.zeros((1, 2 * d + 2)), np.zeros((d, 1))), Mlp(W1, W2))
    p = AttentionParams(np.eye(d), np.eye(d), np.eye(d), np.eye(d))
    F = np.array([[1.5, -0.5]])
    g = build_adjacency([CameraPose("a", [0, 0, 0])], 1.0)
    assert np.allclose(tgn_step(TemporalSnapshot(F), g, p, cfg), 2 * F)


def test_message_norm_bound():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(2, 8))
        cfg = TgnConfig.random(d, 8, rng)
        src, dst, e = rng.normal(size=d), rng.normal(size=d), rng.normal(size=2)
        L = cfg.message.lipschitz()
        m = message(src, dst, e, cfg)
        assert np.linalg.norm(m) <= L * (np.linalg.norm(src) + np.linalg.norm(dst)
                                         + np.linalg.norm(e)) + 1e-12


def test_stability_and_long_iteration():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        g = graph(rng, n)
        cfg = TgnConfig.random(d, int(rng.integers(2, 12)), rng, use_edge_descriptor=False)
        p = AttentionParams.random(d, rng)
        F = rng.normal(size=(n, d))
        out, attn = tgn_step(TemporalSnapshot(F), g, p, cfg, return_attention=True)
        C = stability_constants(g, cfg, attn).C
        ratio = np.linalg.norm(out) / np.linalg.norm(F)
        assert ratio <= C
        worst = max(worst, ratio / C)
        Y = F
        for _ in range(100):
            Y2, a = tgn_step(TemporalSnapshot(Y), g, p, cfg, return_attention=True)
            Cs = stability_constants(g, cfg, a).C
            assert np.linalg.norm(Y2) <= Cs * np.linalg.norm(Y) * (1 + 1e-12)
            assert np.all(np.isfinite(Y2))
            Y = Y2
    assert worst <= 1.0


def test_zero_input_fixed_point():
    rng = np.random.default_rng(3)
    d = 4
    cfg = TgnConfig.random(d, 6, rng, use_edge_descriptor=False)
    F = np.zeros((3, d))
    out = tgn_step(TemporalSnapshot(F), graph(rng, 3), AttentionParams.random(d, rng), cfg)
    assert np.array_equal(out, F)


def test_edge_descriptor_breaks_zero_fixed_point():
    # the affinity entry is a nonzero message input even for zero features
    rng = np.random.default_rng(3)
    cfg = TgnConfig.random(4, 6, rng, use_edge_descriptor=True)
    out = tgn_step(TemporalSnapshot(np.zeros((3, 4))), graph(rng, 3),
                   AttentionParams.random(4, rng), cfg)
    assert np.any(out != 0)


def test_shape_errors_and_window():
    rng = np.random.default_rng(4)
    cfg = TgnConfig.random(3, 4, rng)
    with pytest.raises(InvalidInput):
        tgn_step(TemporalSnapshot(np.zeros((2, 3))), graph(rng, 3),
                 AttentionParams.random(3, rng), cfg)
    with pytest.raises(InvalidInput):
        TemporalSnapshot(np.zeros((2, 3)), [0.0, 5.0]).check_window(1.0)


def test_config_round_trip():
    cfg = TgnConfig.random(3, 4, np.random.default_rng(5), bias=True)
    cfg2 = TgnConfig.from_dict(cfg.to_dict())
    x = np.random.default_rng(6).normal(size=8)
    assert np.allclose(cfg.message(x), cfg2.message(x))
