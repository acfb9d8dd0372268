import numpy as np
import pytest

from crowdcount import checkpoint
from crowdcount import convlstm as M
from crowdcount import grad as G
from crowdcount.errors import ConfigError, DataError
from crowdcount.optim import AdamState, loss
from crowdcount.tensor import ShapeError
from helpers import clip_of, small_net, swap_directions
from oracles import cell_step_loops, random_cell_params


def zero_cell(cin, ch, h, w):
    p = random_cell_params(np.random.default_rng(0), cin, ch, h, w)
    return M.ConvLSTMParams(**{k: np.zeros_like(v) for k, v in p.items()})


def test_zero_weights_zero_state():
    p = zero_cell(1, 2, 4, 4)
    state, gates = M.cell_step(np.ones((1, 4, 4)), M.zero_state(2, 4, 4, np.float64), p, return_gates=True)
    for g in gates.values():
        assert np.all(g == 0.5)
    assert np.all(state.C == 0) and np.all(state.H == 0)


def test_zero_weights_with_cell_memory():
    p = zero_cell(1, 2, 3, 3)
    c = np.random.default_rng(1).normal(size=(2, 3, 3))
    state = M.cell_step(np.ones((1, 3, 3)), M.ConvLSTMState(np.zeros((2, 3, 3)), c), p)
    np.testing.assert_array_equal(state.C, 0.5 * c)
    np.testing.assert_allclose(state.H, 0.5 * np.tanh(0.5 * c), rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_cell_step_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    p = random_cell_params(rng, 1, 2, 4, 4)
    x, H, C = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    state = M.cell_step(x, M.ConvLSTMState(H, C), M.ConvLSTMParams(**p))
    Hn, Cn = cell_step_loops(x, H, C, p)
    np.testing.assert_allclose(state.H, Hn, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.C, Cn, rtol=0, atol=1e-12)


def test_state_invariant_and_gate_ranges():
    rng = np.random.default_rng(2)
    # moderate magnitudes: float64 sigmoid rounds to exactly 1.0 beyond ~37
    p = M.ConvLSTMParams(**random_cell_params(rng, 2, 3, 5, 5, scale=0.5))
    state = M.ConvLSTMState(rng.normal(size=(3, 5, 5)), 3 * rng.normal(size=(3, 5, 5)))
    new, gates = M.cell_step(3 * rng.normal(size=(2, 5, 5)), state, p, return_gates=True)
    for g in gates.values():
        assert np.all((g > 0) & (g < 1))
    np.testing.assert_array_equal(new.H, gates["o"] * np.tanh(new.C))
    assert np.all(np.abs(new.H) < 1)


def test_cell_step_shape_errors():
    p = zero_cell(1, 2, 4, 4)
    with pytest.raises(ShapeError):
        M.cell_step(np.ones((2, 4, 4)), M.zero_state(2, 4, 4), p)
    with pytest.raises(ShapeError):
        M.cell_step(np.ones((1, 5, 5)), M.zero_state(2, 5, 5), p)


def test_t1_sequence_is_one_step_per_layer():
    cfg, params = small_net()
    x = clip_of(1)[0]
    h = x
    for layer, ch in enumerate(cfg.layer_channels):
        p = M.ConvLSTMParams.from_dict(params, f"l{layer}.fwd")
        h = M.cell_step(h, M.zero_state(ch, 6, 6, np.float64), p).H
    feats, preds = M.forward_sequence([x], params, cfg)
    np.testing.assert_array_equal(feats[0], h)
    np.testing.assert_array_equal(preds[0], M.head(h, params))
    assert preds[0].shape == (1, 6, 6)


def test_nt_equivalence_and_t1_degeneracy():
    cfg, params = small_net()
    clip = clip_of(4)
    nt = M.forward_nt(clip, params, cfg)[1]
    for t in range(4):
        np.testing.assert_array_equal(nt[t], M.forward_sequence([clip[t]], params, cfg)[1][0])
    np.testing.assert_array_equal(M.forward_nt(clip[:1], params, cfg)[1][0],
                                  M.forward_sequence(clip[:1], params, cfg)[1][0])


def test_nt_permutation_equivariant():
    cfg, params = small_net()
    clip = clip_of(4)
    perm = [2, 0, 3, 1]
    a = M.forward_nt(clip, params, cfg)[1]
    b = M.forward_nt([clip[i] for i in perm], params, cfg)[1]
    for j, i in enumerate(perm):
        np.testing.assert_array_equal(b[j], a[i])


def test_cut_recurrence_equals_framewise():
    # with no state-to-state kernels, no peepholes and a shut forget gate
    # nothing flows between time steps
    cfg, params = small_net()
    for k in params:
        if ".W_h" in k or ".W_c" in k or ".W_xf" in k:
            params[k] = np.zeros_like(params[k])
        if k.endswith(".b_f"):
            params[k] = np.full_like(params[k], -1000.0)
    clip = clip_of(3)
    seq = M.forward_sequence(clip, params, cfg)[1]
    nt = M.forward_nt(clip, params, cfg)[1]
    for a, b in zip(seq, nt):
        np.testing.assert_array_equal(a, b)


def test_cell_memory_alone_carries_time():
    cfg, params = small_net()
    for k in params:
        if ".W_h" in k or ".W_c" in k:
            params[k] = np.zeros_like(params[k])
    clip = clip_of(3)
    seq = M.forward_sequence(clip, params, cfg)[1]
    nt = M.forward_nt(clip, params, cfg)[1]
    np.testing.assert_array_equal(seq[0], nt[0])
    assert np.abs(seq[2] - nt[2]).max() > 1e-6


def test_temporal_causality():
    cfg, params = small_net()
    clip = clip_of(5)
    base = M.forward_sequence(clip, params, cfg)[1]
    for t in range(4):
        pert = list(clip)
        pert[t + 1] = pert[t + 1] + 0.5
        out = M.forward_sequence(pert, params, cfg)[1]
        for s in range(t + 1):
            assert np.all(out[s] == base[s])
        assert np.abs(out[t + 1] - base[t + 1]).max() > 0


@pytest.mark.parametrize("channels", [(3,), (3, 2)])
def test_bidirectional_reversal_symmetry(channels):
    cfg, params = small_net("bidirectional", channels)
    clip = clip_of(4)
    feats = M.bidirectional_features(clip, params, cfg)
    swapped = M.bidirectional_features(clip[::-1], swap_directions(params, cfg), cfg)
    ch = channels[-1]
    for t in range(4):
        a = feats[3 - t]
        expected = np.concatenate([a[ch:], a[:ch]])
        np.testing.assert_allclose(swapped[t], expected, rtol=0, atol=1e-12)


def test_bidirectional_t1_and_zero_backward_cell():
    cfg, params = small_net("bidirectional", (3,))
    x = clip_of(1)
    feats1 = M.bidirectional_features(x, params, cfg)
    np.testing.assert_array_equal(feats1[0], M.bidirectional_features(x, params, cfg)[0])
    fwd_only = M.ConvLSTMParams.from_dict(params, "l0.fwd")
    expected = M.cell_step(x[0], M.zero_state(3, 6, 6, np.float64), fwd_only).H
    np.testing.assert_array_equal(feats1[0][:3], expected)

    for k in params:
        if k.startswith("l0.bwd."):
            params[k] = np.zeros_like(params[k])
    feats = M.bidirectional_features(clip_of(3), params, cfg)
    for f in feats:
        assert np.all(f[3:] == 0)
        assert np.abs(f[:3]).max() > 0


def test_bidirectional_sees_the_future():
    cfg, params = small_net("bidirectional")
    clip = clip_of(3)
    base = M.forward_bidirectional(clip, params, cfg)[1]
    pert = list(clip)
    pert[2] = pert[2] + 0.5
    out = M.forward_bidirectional(pert, params, cfg)[1]
    assert np.abs(out[0] - base[0]).max() > 0


def test_clip_errors():
    cfg, params = small_net()
    with pytest.raises(ShapeError):
        M.forward_sequence([], params, cfg)
    with pytest.raises(ShapeError):
        M.forward_sequence([np.zeros((1, 6, 6)), np.zeros((1, 5, 6))], params, cfg)


def test_init_params():
    cfg = M.NetworkConfig([128, 64, 64, 64], height=8, width=8)
    a, b = M.init_params(cfg, 3), M.init_params(cfg, 3)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    for k, v in a.items():
        if v.ndim == 4:
            cout, cin, kh, kw = v.shape
            assert np.abs(v).max() <= np.sqrt(6 / (cin * kh * kw + cout * kh * kw))
    assert all(np.all(a[k] == 0) for k in a if ".W_c" in k)
    assert all(np.all(a[k] == 1) for k in a if k.endswith("b_f"))
    assert all(np.all(a[k] == 0) for k in a if k.endswith(("b_i", "b_c", "b_o")))
    assert not np.array_equal(a["l0.fwd.W_xi"], M.init_params(cfg, 4)["l0.fwd.W_xi"])


def test_forget_bias_opens_gate():
    cfg = M.NetworkConfig([2], height=4, width=4)
    params = {k: (v if k.endswith("b_f") else np.zeros_like(v)) for k, v in M.init_params(cfg, 0, np.float64).items()}
    p = M.ConvLSTMParams.from_dict(params, "l0.fwd")
    _, gates = M.cell_step(np.ones((1, 4, 4)), M.zero_state(2, 4, 4, np.float64), p, return_gates=True)
    np.testing.assert_allclose(gates["f"], 1 / (1 + np.exp(-1.0)))
    assert gates["f"][0, 0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_network_config_validation():
    with pytest.raises(ConfigError):
        M.NetworkConfig([])
    with pytest.raises(ConfigError):
        M.NetworkConfig(direction="sideways")
    cfg = M.NetworkConfig([4, 3], direction="bidirectional", height=5, width=5)
    assert cfg.head_channels == 6 and cfg.layer_inputs(1) == 8
    assert M.param_shapes(cfg)["head.W"] == (1, 6, 1, 1)


def test_resize_peepholes():
    cfg, params = small_net(size=6)
    bigger = M.resize_peepholes(params, 8, 10)
    w = bigger["l0.fwd.W_ci"]
    assert w.shape == (3, 8, 10)
    np.testing.assert_array_equal(w[:, 1:7, 2:8], params["l0.fwd.W_ci"])
    assert np.all(w[:, 0] == 0) and np.all(w[:, :, :2] == 0)
    smaller = M.resize_peepholes(params, 4, 4)
    np.testing.assert_array_equal(smaller["l0.fwd.W_ci"], params["l0.fwd.W_ci"][:, 1:5, 1:5])
    np.testing.assert_array_equal(M.resize_peepholes(bigger, 6, 6)["l0.fwd.W_cf"], params["l0.fwd.W_cf"])
    assert bigger["l0.fwd.W_xi"] is params["l0.fwd.W_xi"]


def test_single_step_gradient_check():
    rng = np.random.default_rng(4)
    p = random_cell_params(rng, 1, 2, 5, 5, scale=0.4)
    x, H, C = rng.normal(size=(1, 5, 5)), rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5))
    target = rng.normal(size=(2, 5, 5))

    def f(params):
        s = M.cell_step(x, M.ConvLSTMState(H, C), M.ConvLSTMParams(**params))
        d = G.sub(s.H, target)
        return G.total(G.hadamard(d, d))

    assert G.finite_diff_check(f, p) < 1e-4


def test_sequence_loss_gradient_check():
    cfg, params = small_net(channels=(3, 2), size=6, seed=2)
    clip = clip_of(2, seed=3)
    targets = [np.random.default_rng(9).random((1, 6, 6)) for _ in range(2)]
    err = G.finite_diff_check(lambda p: loss(M.forward_sequence(clip, p, cfg)[1], targets), params, samples=16)
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path):
    cfg, params = small_net("bidirectional", (3, 2))
    adam = AdamState(lr=5e-4, step=7)
    adam.m = {k: np.full_like(v, 0.1) for k, v in params.items()}
    adam.v = {k: np.full_like(v, 0.2) for k, v in params.items()}
    path = tmp_path / "model.cfck"
    checkpoint.save(path, checkpoint.Checkpoint(cfg, params, adam, {"epoch": 3, "tag": "x"}))
    assert path.read_bytes()[:4] == b"CFCK"
    back = checkpoint.load(path)
    assert back.config == cfg
    assert back.meta == {"epoch": 3, "tag": "x"}
    assert back.adam.step == 7 and back.adam.lr == 5e-4
    for k in params:
        np.testing.assert_array_equal(back.params[k], params[k])
        np.testing.assert_array_equal(back.adam.v[k], adam.v[k])
    path.write_bytes(b"CFCK" + b"\x09\x00\x00\x00")
    with pytest.raises(DataError):
        checkpoint.load(path)


def test_output_scale_divides_head():
    cfg, params = small_net("unidirectional", (3, 2))
    scaled = M.NetworkConfig(cfg.layer_channels, cfg.kernel, cfg.direction, 1, 6, 6, output_scale=100.0)
    clip = clip_of(3)
    plain = M.forward(clip, params, cfg)
    for a, b in zip(plain, M.forward(clip, params, scaled)):
        np.testing.assert_allclose(b, a / 100.0, rtol=1e-14)
    with pytest.raises(ConfigError):
        M.NetworkConfig([2], output_scale=0.0)
