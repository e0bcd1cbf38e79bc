import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrti_vsr.autodiff import Tensor
from lrti_vsr.propagation import (
    BACKWARD,
    FORWARD,
    ConfigurationError,
    HiddenStateCache,
    PropagationModuleWeights,
    direction_of,
    grid_forward,
    patch_align,
    patch_displacements,
    propagate_direction,
    round_half_toward_zero,
    second_order_gather,
)
from lrti_vsr.ritb import RitbConfig

CFG = RitbConfig(dim=8, heads=2, window=4)


def feats(n, rng, h=8, w=8):
    return [Tensor(rng.normal(size=(8, h, w))) for _ in range(n)]


def modules(m, rng, blocks=1):
    return [PropagationModuleWeights.init(CFG, blocks, rng, np.float64) for _ in range(m)]


# ---------------------------------------------------------------- alignment


def test_round_half_toward_zero():
    x = np.array([0.5, -0.5, 1.5, -1.5, 0.6, -0.6, 2.49, 0.0])
    np.testing.assert_array_equal(round_half_toward_zero(x), [0, 0, 1, -1, 1, -1, 2, 0])


def test_zero_flow_is_identity(rng):
    h = Tensor(rng.normal(size=(3, 8, 8)))
    np.testing.assert_array_equal(patch_align(h, np.zeros((2, 8, 8)), 4).data, h.data)


def test_uniform_patch_flow_shifts_one_patch_column():
    # two patches side by side; everything moves right by one patch width
    h = np.arange(1.0, 33.0).reshape(1, 4, 8)
    flow = np.zeros((2, 4, 8))
    flow[0] = 4.0
    out = patch_align(Tensor(h), flow, 4).data
    np.testing.assert_array_equal(out[0, :, 4:], h[0, :, :4])
    np.testing.assert_array_equal(out[0, :, :4], 0.0)


def test_flow_beyond_bounds_gives_zero(rng):
    h = Tensor(rng.normal(size=(2, 8, 8)))
    flow = np.full((2, 8, 8), 100.0)
    assert not np.any(patch_align(h, flow, 4).data)


def test_patch_displacement_uses_mean_flow():
    flow = np.zeros((2, 4, 4))
    flow[0, :2, :2] = 2.0  # mean 0.5 in the top-left 4x4 patch -> rounds to 0
    flow[1] = -1.6
    d = patch_displacements(flow, 4)
    assert d.shape == (2, 1, 1) and d[0, 0, 0] == 0 and d[1, 0, 0] == -2


@given(st.integers(0, 1000), st.floats(-6, 6), st.floats(-6, 6))
def test_alignment_is_permutation_with_zeros(seed, fx, fy):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(2, 8, 12)) + 5.0  # distinct nonzero values
    flow = np.stack([np.full((8, 12), fx), np.full((8, 12), fy)]) + rng.normal(0, 0.3, size=(2, 8, 12))
    out = patch_align(Tensor(h), flow, 4).data
    for c in range(2):
        nz = out[c][out[c] != 0]
        assert np.isin(nz, h[c]).all()
        assert len(np.unique(nz)) == len(nz)
    assert np.abs(out).sum() <= np.abs(h).sum()


# ---------------------------------------------------------------- gather


def _cache(T, rng):
    cache = HiddenStateCache(1, T)
    for t in range(T):
        cache.put(0, t, rng.normal(size=(8, 4, 4)))
    return cache


def test_gather_forward_first_frames(rng):
    cache = _cache(5, rng)
    p0 = second_order_gather(cache, 0, FORWARD, 0)
    assert not np.any(p0[0].data) and not np.any(p0[1].data)
    p1 = second_order_gather(cache, 0, FORWARD, 1)
    np.testing.assert_array_equal(p1[0].data, cache.states[(0, 0)])
    assert not np.any(p1[1].data)


def test_gather_backward_reverses_indices(rng):
    T = 5
    cache = _cache(T, rng)
    pair = second_order_gather(cache, 0, BACKWARD, T - 3)
    np.testing.assert_array_equal(pair[0].data, cache.states[(0, T - 2)])
    np.testing.assert_array_equal(pair[1].data, cache.states[(0, T - 1)])


def test_module_directions_alternate():
    assert [direction_of(m) for m in range(4)] == [FORWARD, BACKWARD, FORWARD, BACKWARD]


# ---------------------------------------------------------------- propagate_direction


def test_single_frame_uses_zero_pair(rng):
    f = feats(1, rng)
    mod = modules(1, rng)[0]
    inputs = {}
    out = propagate_direction(f, mod, CFG, FORWARD, block_inputs=inputs)
    assert len(out) == 1 and out[0].shape == f[0].shape
    _, a1, a2 = inputs[(0, 0)]
    assert not np.any(a1) and not np.any(a2)


def test_zero_weights_pass_features_through(rng):
    f = feats(4, rng)
    mod = PropagationModuleWeights.zeros(CFG, 2, np.float64)
    out = propagate_direction(f, mod, CFG, BACKWARD)
    for a, b in zip(out, f):
        np.testing.assert_array_equal(a.data, b.data)


def test_missing_boundary_state_raises(rng):
    f = feats(3, rng)
    mod = modules(1, rng)[0]
    with pytest.raises(ConfigurationError, match="module 0, frame 1"):
        propagate_direction(f, mod, CFG, FORWARD, t0=2, frames=8, boundary={})


@pytest.mark.parametrize("direction", [FORWARD, BACKWARD])
def test_causality_per_direction(rng, direction):
    f = feats(5, rng)
    mod = modules(1, rng)[0]
    base = propagate_direction(f, mod, CFG, direction)
    t = 2
    later = range(t + 1, 5) if direction == FORWARD else range(0, t)
    g = [Tensor(x.data + (5.0 if i in later else 0.0)) for i, x in enumerate(f)]
    moved = propagate_direction(g, mod, CFG, direction)
    np.testing.assert_array_equal(moved[t].data, base[t].data)
    changed = next(iter(later))
    other = t - 1 if direction == FORWARD else t + 1
    assert not np.allclose(moved[changed].data, base[changed].data)
    np.testing.assert_array_equal(moved[other].data, base[other].data)


def test_forward_module_depends_on_all_earlier_frames(rng):
    f = feats(3, rng)
    mod = modules(1, rng)
    base = grid_forward(f, mod, CFG)[2].data
    for k in range(3):
        g = [Tensor(x.data + (1.0 if i == k else 0.0)) for i, x in enumerate(f)]
        assert not np.allclose(grid_forward(g, mod, CFG)[2].data, base)


def test_bidirectional_grid_sees_every_frame(rng):
    f = feats(4, rng)
    mods = modules(2, rng)
    base = grid_forward(f, mods, CFG)[0].data
    for k in range(4):
        g = [Tensor(x.data + (1.0 if i == k else 0.0)) for i, x in enumerate(f)]
        assert not np.allclose(grid_forward(g, mods, CFG)[0].data, base)


def test_cache_replay_reproduces_block_inputs(rng):
    T = 5
    f = feats(T, rng)
    mods = modules(2, rng)
    flows_fwd = rng.normal(0, 3, size=(T, 2, 8, 8))

    def flows(src, dst):
        step = 1 if dst > src else -1
        return sum((flows_fwd[t] * step for t in range(src, dst, step)), np.zeros((2, 8, 8)))

    cache = HiddenStateCache(2, T)
    recorded = {}
    grid_forward(f, mods, CFG, flows=flows, patch=4, cache=cache, block_inputs=recorded)
    assert cache.complete()
    for (m, t), (_, a1, a2) in recorded.items():
        pair = second_order_gather(cache, m, direction_of(m), t, flows=flows, patch=4, like=f[0])
        np.testing.assert_array_equal(pair[0].data, a1)
        np.testing.assert_array_equal(pair[1].data, a2)


def test_cache_entries_are_value_only(rng):
    f = [Tensor(x.data, requires_grad=True) for x in feats(3, rng)]
    cache = HiddenStateCache(1, 3)
    grid_forward(f, modules(1, rng), CFG, cache=cache)
    for t in range(3):
        state = cache.get(0, t)
        assert not state.requires_grad and state.tape_id is None
