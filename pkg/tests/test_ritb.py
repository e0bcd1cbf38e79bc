import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrti_vsr import autodiff as ad
from lrti_vsr.autodiff import Tensor
from lrti_vsr.ritb import (
    AlignmentError,
    HiddenStatePair,
    RitbConfig,
    RitbWeights,
    activate_array,
    make_qkv,
    refocused_attention,
    relative_position_index,
    rgu_ffn,
    ritb_forward,
    top_mass,
    window_merge,
    window_partition,
    zero_fraction,
)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def scores_oracle(x, h1, h2, w, cfg):
    """Pre-activation scores for one window, written out with plain numpy."""
    def ln(t, g, b):
        mu = t.mean(-1, keepdims=True)
        var = ((t - mu) ** 2).mean(-1, keepdims=True)
        return (t - mu) / np.sqrt(var + 1e-5) * g + b

    xn = ln(x, w.ln1_g.data, w.ln1_b.data)
    src = np.concatenate([ln(h1, w.lnh_g.data, 0), ln(h2, w.lnh_g.data, 0), xn])
    q, k = xn @ w.w_q.data, src @ w.w_k.data
    d = cfg.head_dim
    win = cfg.window
    out = np.zeros((cfg.heads, win * win, 3 * win * win))
    for hd in range(cfg.heads):
        qs, ks = q[:, hd * d : (hd + 1) * d], k[:, hd * d : (hd + 1) * d]
        for i in range(win * win):
            for j in range(3 * win * win):
                jj = j % (win * win)
                dy = i // win - jj // win + win - 1
                dx = i % win - jj % win + win - 1
                out[hd, i, j] = qs[i] @ ks[j] / np.sqrt(d) + w.bias_table.data[hd, dy * (2 * win - 1) + dx]
    return out


# ---------------------------------------------------------------- windows


def test_partition_counts():
    assert window_partition(T(np.zeros((1, 8, 8))), 8).shape == (1, 64, 1)
    assert window_partition(T(np.zeros((1, 16, 8))), 8).shape == (2, 64, 1)


@given(st.integers(1, 3), st.integers(1, 20), st.integers(1, 20), st.sampled_from([2, 4, 8]))
def test_partition_merge_round_trip(c, h, w, win):
    x = np.random.default_rng(h * 31 + w).normal(size=(c, h, w))
    back = window_merge(window_partition(T(x), win), win, h, w).data
    np.testing.assert_array_equal(back, x)


def test_relative_index_covers_every_pair():
    idx = relative_position_index(8)
    assert idx.shape == (64, 192)
    assert idx.min() == 0 and idx.max() == 15 * 15 - 1
    np.testing.assert_array_equal(idx[:, :64], idx[:, 128:])
    assert np.all(np.diag(idx[:, :64]) == 7 * 15 + 7)


# ---------------------------------------------------------------- make_qkv


def test_zero_inputs_give_zero_qkv(rng):
    cfg = RitbConfig(dim=8, heads=2, window=4)
    w = RitbWeights.init(cfg, rng, np.float64)
    z = T(np.zeros((1, 16, 8)))
    for t in make_qkv(z, z, z, w):
        assert not np.any(t.data)


def test_qkv_rows_at_window_8(rng):
    cfg = RitbConfig(dim=8, heads=2, window=8)
    w = RitbWeights.init(cfg, rng, np.float64)
    x = T(rng.normal(size=(1, 64, 8)))
    q, k, v = make_qkv(x, x, x, w)
    assert q.shape[1] == 64 and k.shape[1] == 192 and v.shape[1] == 192


def test_identity_projections_stack_x_three_times(rng):
    cfg = RitbConfig(dim=4, heads=1, window=2)
    w = RitbWeights.zeros(cfg, np.float64)
    w.w_q.data = np.eye(4)
    w.w_k.data = np.eye(4)
    x = T(rng.normal(size=(1, 4, 4)))
    _, k, _ = make_qkv(x, x, x, w)
    np.testing.assert_array_equal(k.data[0], np.concatenate([x.data[0]] * 3))


def test_misaligned_hidden_states_raise(rng):
    cfg = RitbConfig(dim=4, heads=1, window=4)
    w = RitbWeights.init(cfg, rng, np.float64)
    x = T(rng.normal(size=(4, 8, 8)))
    with pytest.raises(AlignmentError):
        ritb_forward(x, HiddenStatePair(T(np.zeros((4, 8, 4))), T(np.zeros((4, 8, 8)))), w, cfg)


# ---------------------------------------------------------------- attention


def test_negative_scores_give_zero_output():
    q = T(np.full((1, 4, 2), -10.0))
    k = T(np.ones((1, 12, 2)))
    v = T(np.ones((1, 12, 2)))
    out = refocused_attention(q, k, v, T(np.zeros((1, 9))), heads=1, activation="refocus", window=2)
    assert np.all(out.data == 0.0)


def test_softmax_of_constant_values_is_constant(rng):
    q, k = T(rng.normal(size=(2, 4, 4))), T(rng.normal(size=(2, 12, 4)))
    v = T(np.full((2, 12, 4), 0.37))
    out = refocused_attention(q, k, v, T(rng.normal(size=(2, 9))), heads=2, activation="softmax", window=2)
    np.testing.assert_allclose(out.data, 0.37, atol=1e-14)


def test_zero_fraction_at_random_init_over_20_seeds():
    cfg = RitbConfig(dim=32, heads=4, window=8)
    fractions = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w = RitbWeights.init(cfg, rng, np.float64)
        x, h1, h2 = (T(rng.normal(size=(32, 16, 16))) for _ in range(3))
        stats = []
        ritb_forward(x, HiddenStatePair(h1, h2), w, cfg, stats)
        fractions.append(zero_fraction(activate_array(stats[0], "refocus")))
        assert zero_fraction(activate_array(stats[0], "softmax")) == 0.0
    assert 0.3 <= min(fractions) and max(fractions) <= 0.7


# ---------------------------------------------------------------- RGU


def test_rgu_zero_carrier(rng):
    w = RitbWeights.init(RitbConfig(dim=4, heads=1, window=2), rng, np.float64)
    out = rgu_ffn(T(rng.normal(size=(1, 4, 4))), T(np.zeros((1, 4, 4))), w)
    assert not np.any(out.data)


def test_rgu_negative_gate_kills_output(rng):
    w = RitbWeights.init(RitbConfig(dim=4, heads=1, window=2), rng, np.float64)
    w.w_fx.data = -np.abs(w.w_fx.data)
    out = rgu_ffn(T(np.abs(rng.normal(size=(1, 4, 4)))), T(rng.normal(size=(1, 4, 4))), w)
    assert not np.any(out.data)


def test_rgu_shape_mismatch(rng):
    w = RitbWeights.init(RitbConfig(dim=4, heads=1, window=2), rng, np.float64)
    with pytest.raises(ad.DimensionError):
        rgu_ffn(T(np.zeros((1, 4, 4))), T(np.zeros((1, 3, 4))), w)


def test_rgu_projections_pass_grad_check(rng):
    w = RitbWeights.init(RitbConfig(dim=4, heads=1, window=2), rng, np.float64)
    xa, hp = T(rng.normal(size=(2, 4, 4))), T(rng.normal(size=(2, 4, 4)))

    def f(a, b, c):
        w.w_fx, w.w_fh, w.w_g = a, b, c
        return rgu_ffn(xa, hp, w).sum()

    rep = ad.grad_check(f, [w.w_fx, w.w_fh, w.w_g])
    assert rep.max_error < 1e-4


# ---------------------------------------------------------------- full block


def test_zero_weights_are_pure_residual(rng):
    cfg = RitbConfig(dim=8, heads=2, window=4)
    x = T(rng.normal(size=(8, 8, 12)))
    pair = HiddenStatePair(T(rng.normal(size=(8, 8, 12))), T(rng.normal(size=(8, 8, 12))))
    out = ritb_forward(x, pair, RitbWeights.zeros(cfg, np.float64), cfg)
    np.testing.assert_array_equal(out.data, x.data)


@given(st.integers(1, 13), st.integers(1, 13))
def test_block_is_shape_preserving(h, w):
    cfg = RitbConfig(dim=4, heads=2, window=4)
    rng = np.random.default_rng(h * 17 + w)
    wt = RitbWeights.init(cfg, rng, np.float64)
    x = T(rng.normal(size=(4, h, w)))
    out = ritb_forward(x, HiddenStatePair(x, x), wt, cfg)
    assert out.shape == x.shape and np.all(np.isfinite(out.data))


def test_block_grad_check(rng):
    cfg = RitbConfig(dim=8, heads=2, window=4)
    w = RitbWeights.init(cfg, rng, np.float64)
    x, h1, h2 = (T(rng.normal(size=(8, 4, 8))) for _ in range(3))
    names = list(w.named())

    def f(x, h1, h2, *params):
        wt = RitbWeights(**dict(zip(names, params)))
        return (ritb_forward(x, HiddenStatePair(h1, h2), wt, cfg) * T(np.linspace(-1, 1, x.size).reshape(x.shape))).sum()

    rep = ad.grad_check(f, [x, h1, h2, *w.named().values()])
    assert rep.max_error < 1e-4


def test_zero_pair_hidden_rows_carry_zero_values(rng):
    cfg = RitbConfig(dim=8, heads=2, window=4)
    w = RitbWeights.init(cfg, rng, np.float64)
    w.bias_table.data[:] = 0.0
    x = T(rng.normal(size=(8, 4, 4)))
    zero = T(np.zeros((8, 4, 4)))
    toks = window_partition(x, 4)
    xn = ad.layer_norm(toks, w.ln1_g, w.ln1_b)
    _, _, v = make_qkv(xn, window_partition(zero, 4), window_partition(zero, 4), w)
    assert not np.any(v.data[:, :32]) and np.any(v.data[:, 32:])


def test_block_scores_match_numpy_oracle(rng):
    cfg = RitbConfig(dim=8, heads=2, window=4)
    w = RitbWeights.init(cfg, rng, np.float64)
    x, h1, h2 = (rng.normal(size=(8, 4, 4)) for _ in range(3))
    stats = []
    ritb_forward(T(x), HiddenStatePair(T(h1), T(h2)), w, cfg, stats)
    tok = lambda a: a.reshape(8, 16).T  # noqa: E731  (single window, row-major positions)
    ref = scores_oracle(tok(x), tok(h1), tok(h2), w, cfg)
    np.testing.assert_allclose(stats[0][0], ref, atol=1e-12)


# ---------------------------------------------------------------- statistics


def test_relu2_scores_nonnegative_with_exact_zero(rng):
    s = rng.normal(size=(2, 2, 16, 48))
    a = activate_array(s, "refocus")
    assert np.all(a >= 0) and np.any(a == 0)


def test_top_mass_hand_example():
    a = np.zeros((1, 1, 10, 10))
    a.reshape(-1)[:60] = 1.0
    assert top_mass(a, k=50) == pytest.approx(50 / 60)
    assert top_mass(np.zeros((1, 1, 4, 4))) == 0.0


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_relu2_top50_at_least_softmax(seed, spread):
    # holds for init-scale scores; with a wide spread the exponential tail wins
    s = np.random.default_rng(seed).normal(size=(1, 1, 64, 192)) * spread
    assert top_mass(activate_array(s, "refocus")) >= top_mass(activate_array(s, "softmax"))
