import itertools

import numpy as np
import pytest

from condsed.gradcheck import check_cdcnn, micro_config, run_checks
from condsed.layers import MissingCacheError
from condsed.model import (CDCNNHead, DCNNHead, DWSStack, ModelConfig, SEDModel, dws_vs_standard,
                           load_checkpoint, param_count, save_checkpoint, window_rows)


def small_cfg(**kw):
    base = dict(n_features=40, num_classes=4, channels=[4, 4, 4], out_channels=3, kernel=(3, 3), dilation=2)
    base.update(kw)
    return ModelConfig(**base)


def randomize(head, rng, scale=1.0):
    for _, layer in head.named_layers():
        for p in layer.params.values():
            p[...] = scale * rng.standard_normal(p.shape)


def zero_cond_oracle(head: CDCNNHead, cfg):
    """Two-channel causal DCNN sharing the CDCNN's weights."""
    oracle = DCNNHead(cfg, np.random.default_rng(0), in_channels=2, causal=True)
    oracle.conv.params["weight"][...] = head.params["weight"]
    oracle.conv.params["bias"][...] = head.params["bias"]
    oracle.cls.params["weight"][...] = head.cls.params["weight"]
    oracle.cls.params["bias"][...] = head.cls.params["bias"]
    return oracle


# --- configuration ---------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ValueError, match="divide"):
        ModelConfig(n_features=42)
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(kernel=(4, 3))
    with pytest.raises(ValueError):
        ModelConfig(dilation=0)
    cfg = ModelConfig()
    assert cfg.blocks == 3 and cfg.pool_widths == [5, 4, 2] and cfg.dropout == 0.25
    assert cfg.lrelu_beta == 1e-2 and cfg.depthwise_kernel == (5, 5) and cfg.depthwise_pad == (2, 2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --- DWS stack -----------------------------------------------------------------

def test_stack_default_config_keeps_time(rng):
    cfg = ModelConfig(channels=[8, 8, 8])
    stack = DWSStack(cfg, rng, rng)
    h = stack.forward(rng.standard_normal((1, 1024, 40)))
    # widths 40 -> 8 -> 2 -> 1
    assert h.shape == (1, 1024, 8)
    assert cfg.feature_width == 8


def test_stack_zero_input_inference(rng):
    cfg = small_cfg()
    stack = DWSStack(cfg, rng, rng)
    for _, layer in stack.named_layers():
        layer.train(False)
    assert not stack.forward(np.zeros((2, 16, 40))).any()


def test_stack_shape_law_single_block(rng):
    cfg = ModelConfig(n_features=8, channels=[5], pool_widths=[2])
    h = DWSStack(cfg, rng, rng).forward(rng.standard_normal((3, 8, 8)))
    assert h.shape == (3, 8, 5 * 4)


def test_stack_pool_divisibility():
    with pytest.raises(ValueError):
        ModelConfig(n_features=30, channels=[2, 2, 2])


# --- baseline head -----------------------------------------------------------

@pytest.mark.parametrize("kh,xi", list(itertools.product([3, 5, 7], [1, 10, 50, 100])))
def test_shape_law_both_heads(kh, xi, rng):
    cfg = ModelConfig(n_features=8, num_classes=3, channels=[2], pool_widths=[2],
                      kernel=(kh, kh), dilation=xi, out_channels=2)
    h = rng.standard_normal((1, 1024, cfg.feature_width))
    assert DCNNHead(cfg, rng).forward(h).shape == (1, 1024, 3)
    assert CDCNNHead(cfg, rng).forward(h).shape == (1, 1024, 3)


def test_dcnn_uniform_with_zero_weights(rng):
    cfg = small_cfg(activation="softmax")
    head = DCNNHead(cfg, rng)
    for _, layer in head.named_layers():
        for p in layer.params.values():
            p[...] = 0.0
    out = head.forward(rng.standard_normal((2, 20, cfg.feature_width)))
    np.testing.assert_allclose(out, 1 / 4, atol=1e-15)


def test_dcnn_receptive_field_probe(rng):
    cfg = ModelConfig(n_features=8, num_classes=2, channels=[1], pool_widths=[2],
                      kernel=(7, 7), dilation=100, out_channels=2)
    head = DCNNHead(cfg, rng)
    h = rng.standard_normal((1, 1024, cfg.feature_width))
    t = 512
    base = head.forward(h)[0, t]
    hit = []
    for r in range(1024):
        hp = h.copy()
        hp[0, r] += 1.0
        if not np.array_equal(head.forward(hp)[0, t], base):
            hit.append(r)
    assert hit == [t + 100 * k for k in range(-3, 4)]
    assert hit[-1] - hit[0] + 1 == 601


# --- conditioned head ----------------------------------------------------------

def test_window_rows_enumeration():
    # K'_h=3, xi=2; step 1 (1-based) is row 0 here
    assert window_rows(0, 3, 2) == [-4, -2, 0]
    assert window_rows(5, 3, 2) == [1, 3, 5]


def test_window_rows_match_forward_dependencies(rng):
    cfg = micro_config()
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    head.params["aff_weight"][...] = 0.0
    head.params["aff_bias"][...] = 0.0
    h = rng.standard_normal((1, 6, 6))
    base = head.forward(h)
    for t in range(6):
        hit = []
        for r in range(6):
            hp = h.copy()
            hp[0, r] += 1.0
            if not np.array_equal(head.forward(hp)[0, t], base[0, t]):
                hit.append(r)
        assert hit == [r for r in window_rows(t, 3, 2) if r >= 0]


def test_zero_conditioning_equivalence(rng):
    for _ in range(20):
        cfg = micro_config(kernel=(5, 3), dilation=3)
        head = CDCNNHead(cfg, rng)
        randomize(head, rng)
        head.params["aff_weight"][...] = 0.0
        head.params["aff_bias"][...] = 0.0
        h = rng.standard_normal((2, 15, 6))
        y = head.forward(h)
        assert not head.conditioning_channel().any()
        oracle = zero_cond_oracle(head, cfg)
        y_ref = oracle.forward(np.stack([h, np.zeros_like(h)], axis=1))
        assert np.abs(y - y_ref).max() <= 1e-12


def test_zero_conditioning_backward_matches_oracle(rng):
    cfg = micro_config()
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    head.params["aff_weight"][...] = 0.0
    head.params["aff_bias"][...] = 0.0
    h = rng.standard_normal((2, 12, 6))
    dy = rng.standard_normal((2, 12, 3))
    head.forward(h)
    dh = head.backward(dy)
    oracle = zero_cond_oracle(head, cfg)
    oracle.forward(np.stack([h, np.zeros_like(h)], axis=1))
    dx = oracle.backward(dy)
    assert np.abs(head.grads["weight"] - oracle.conv.grads["weight"]).max() <= 1e-10
    assert np.abs(head.grads["bias"] - oracle.conv.grads["bias"]).max() <= 1e-10
    assert np.abs(dh - dx[:, 0]).max() <= 1e-10


def test_conditioning_channel_holds_embedded_predictions(rng):
    cfg = micro_config()
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    y = head.forward(rng.standard_normal((2, 12, 6)))
    q = head.conditioning_channel()
    np.testing.assert_allclose(q, y @ head.params["aff_weight"].T + head.params["aff_bias"], atol=1e-12)


def test_general_equivalence_with_frozen_q(rng):
    """With Q frozen to its final value and the current-row tap of the Q kernel removed,
    a plain causal two-channel convolution reproduces the sequential loop."""
    cfg = micro_config(kernel=(3, 3), dilation=2)
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    h = rng.standard_normal((2, 12, 6))
    y = head.forward(h)
    q = head.conditioning_channel().copy()
    oracle = zero_cond_oracle(head, cfg)
    oracle.conv.params["weight"][:, 1, -1, :] = 0.0
    y_ref = oracle.forward(np.stack([h, q], axis=1))
    assert np.abs(y - y_ref).max() <= 1e-12


def test_detached_gradients_treat_q_as_constant(rng):
    cfg = micro_config(detach_conditioning=True)
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    h = rng.standard_normal((2, 12, 6))
    dy = rng.standard_normal((2, 12, 3))
    y = head.forward(h)
    q = head.conditioning_channel().copy()
    head.zero_grad()
    dh = head.backward(dy)
    oracle = zero_cond_oracle(head, cfg)
    oracle.conv.params["weight"][:, 1, -1, :] = 0.0
    oracle.forward(np.stack([h, q], axis=1))
    dx = oracle.backward(dy)
    g_ref = oracle.conv.grads["weight"]
    assert np.abs(head.grads["weight"][:, :, :-1] - g_ref[:, :, :-1]).max() <= 1e-10
    assert np.abs(head.grads["weight"][:, 0] - g_ref[:, 0]).max() <= 1e-10
    assert np.abs(head.cls.grads["weight"] - oracle.cls.grads["weight"]).max() <= 1e-10
    assert np.abs(dh - dx[:, 0]).max() <= 1e-10
    dq = dx[:, 1]
    np.testing.assert_allclose(head.grads["aff_weight"], np.einsum("ntw,ntc->wc", dq, y), atol=1e-10)
    np.testing.assert_allclose(head.grads["aff_bias"], dq.sum(axis=(0, 1)), atol=1e-10)


def test_teacher_forcing_embeds_labels(rng):
    cfg = micro_config(teacher_forcing=True)
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    labels = (rng.random((2, 12, 3)) < 0.5).astype(float)
    head.forward(rng.standard_normal((2, 12, 6)), labels)
    q = head.conditioning_channel()
    np.testing.assert_allclose(q, labels @ head.params["aff_weight"].T + head.params["aff_bias"], atol=1e-12)
    with pytest.raises(ValueError):
        head.forward(rng.standard_normal((2, 12, 6)))


def test_teacher_forcing_gradients(rng):
    (r,) = run_checks(["cdcnn"], seeds=[0])
    assert r.passed
    res = check_cdcnn_teacher(rng)
    assert res < 1e-4


def check_cdcnn_teacher(rng):
    from condsed.gradcheck import check_module, _head_params
    cfg = micro_config(teacher_forcing=True)
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    labels = (rng.random((2, 12, 3)) < 0.5).astype(float)
    r = check_module("tf", lambda x: head.forward(x, labels), head.backward,
                     rng.standard_normal((2, 12, 6)), _head_params(head), rng)
    return r.max_rel_error


def test_causality(rng):
    cfg = micro_config(kernel=(3, 3), dilation=2)
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    h = rng.standard_normal((1, 30, 6))
    base = head.forward(h)
    for _ in range(25):
        t = int(rng.integers(0, 29))
        hp = h.copy()
        hp[:, t + 1 :] = rng.standard_normal(hp[:, t + 1 :].shape) * 10
        out = head.forward(hp)
        assert np.array_equal(out[:, : t + 1], base[:, : t + 1])


def test_cdcnn_gradcheck_micro(rng):
    assert check_cdcnn(rng, T=12).max_rel_error <= 1e-4


def test_cdcnn_zero_upstream(rng):
    head = CDCNNHead(micro_config(), rng)
    randomize(head, rng)
    head.forward(rng.standard_normal((2, 12, 6)))
    head.zero_grad()
    dh = head.backward(np.zeros((2, 12, 3)))
    assert not dh.any()
    for _, layer in head.named_layers():
        for g in layer.grads.values():
            assert not g.any()


def test_cdcnn_backward_needs_forward(rng):
    head = CDCNNHead(micro_config(), rng)
    with pytest.raises(MissingCacheError):
        head.backward(np.zeros((1, 12, 3)))


def test_no_dilation_still_conditions(rng):
    cfg = micro_config(dilation=1)
    head = CDCNNHead(cfg, rng)
    randomize(head, rng)
    h = rng.standard_normal((1, 12, 6))
    y = head.forward(h)
    head.params["aff_weight"][...] = 0.0
    head.params["aff_bias"][...] = 0.0
    y0 = head.forward(h)
    assert np.array_equal(y[:, 0], y0[:, 0])
    assert np.abs(y[:, 1:] - y0[:, 1:]).max() > 1e-6


def test_determinism_same_seed():
    cfg = small_cfg()
    x = np.random.default_rng(5).standard_normal((2, 16, 40))
    runs = []
    for _ in range(2):
        model = SEDModel(cfg, seed=3)
        y = model.forward(x)
        model.backward(np.ones_like(y))
        runs.append((y, model.gradients()))
    assert np.array_equal(runs[0][0], runs[1][0])
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


# --- parameter counting and checkpoints ---------------------------------------

def test_param_count_examples():
    d = dws_vs_standard(100, 100, 5, 5)
    assert (d["standard"], d["dws"], float(d["ratio"])) == (250000, 12500, 0.05)
    assert dws_vs_standard(1, 1, 1, 1)["ratio"] == 2


def test_param_count_full_model_stable():
    cfg = ModelConfig()
    a, b = param_count(cfg), param_count(cfg)
    assert a == b
    c, f, k_o = 256, 256, 32
    assert a["head.cdcnn"] == k_o * 2 * 3 * 3 + k_o
    assert a["head.aff"] == f * 16 + f
    assert a["head.cls"] == k_o * f * 16 + 16
    # block0: depthwise 1*25, bn1 2, pointwise 256, bn2 512
    assert a["stack.block0"] == 25 + 2 + 256 + 512
    assert a["stack.block1"] == 256 * 25 + 512 + 256 * 256 + 512
    assert a["total"] == sum(v for k, v in a.items() if k.startswith(("stack.", "head.")))


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = small_cfg()
    model = SEDModel(cfg, seed=1)
    model.forward(rng.standard_normal((2, 8, 40)))
    save_checkpoint(tmp_path / "m.ckpt", model.state_dict(), cfg.to_dict(), {"epoch": 3})
    state, config, meta = load_checkpoint(tmp_path / "m.ckpt")
    other = SEDModel(ModelConfig.from_dict(config), seed=99)
    other.load_state_dict(state)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, other.state_dict()[k])
    assert meta == {"epoch": 3}
    x = rng.standard_normal((1, 8, 40))
    assert np.array_equal(model.predict(x), other.predict(x))
