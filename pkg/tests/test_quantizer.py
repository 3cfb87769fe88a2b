import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omniquant import autodiff as ad
from omniquant.quantizer import (EPS, LSQParams, LWCParams, PACTParams, QuantizationError, QuantSpec,
                                 clip_mode_params, compute_quant_params, dequantize, fake_quant_activations_per_token,
                                 fake_quant_weights, grid_search_clip, init_clip, integer_quantize)


def brute_grid(group, bits, candidates):
    """Reference: explicit loop over candidates, squared error, earliest wins on ties."""
    best, best_err = None, np.inf
    for c in candidates:
        q = compute_quant_params(group, bits, c, c)
        codes = np.clip(np.round(group / q.h) + q.z, 0, 2**bits - 1)
        err = float((((codes - q.z) * q.h - group) ** 2).sum())
        if err < best_err:
            best, best_err = c, err
    return best


def test_minmax_example():
    q = compute_quant_params([-1, 0, 2], 2)
    assert q.h == 1.0 and q.z == 1
    codes, _ = integer_quantize(np.array([[-1.0, 0.0, 2.0]]), QuantSpec.weights(2))
    assert codes.tolist() == [[0, 1, 3]]


def test_lwc_gamma_half_example():
    q = compute_quant_params([-2, 0, 6], 2, gamma=0.5, beta=1.0)
    assert q.h == pytest.approx(5 / 3) and q.z == 1
    out = fake_quant_weights(np.array([[-2.0, 0.0, 6.0]]), QuantSpec.weights(2),
                             (np.array([[0.5]]), np.array([[1.0]]))).data
    assert np.allclose(out, [[-5 / 3, 0.0, 10 / 3]])


def test_constant_group_uses_eps():
    assert compute_quant_params([5, 5, 5], 4).h == EPS


def test_all_zero_row_reconstructs_zero():
    out = fake_quant_weights(np.zeros((2, 8)), QuantSpec.weights(4)).data
    assert np.all(out == 0)


def test_activation_row_error_bound():
    x = np.array([[0.0, 1.0], [0.25, 0.75]])
    out = fake_quant_activations_per_token(x, 8).data
    assert np.abs(out[0] - x[0]).max() <= (1 / 255) / 2 + 1e-15


def test_activation_accepts_two_bits():
    out = fake_quant_activations_per_token(np.array([[-1.0, 0.0, 2.0]]), 2).data
    assert out.tolist() == [[-1.0, 0.0, 2.0]]


def test_activations_disabled_at_16_bits():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(fake_quant_activations_per_token(x, 16).data, x)


def test_non_finite_weights_rejected():
    with pytest.raises(QuantizationError):
        fake_quant_weights(np.array([[1.0, np.nan]]), QuantSpec.weights(4))


def test_group_size_must_divide():
    with pytest.raises(QuantizationError):
        fake_quant_weights(np.ones((2, 10)), QuantSpec.weights(4, group_size=4))


def test_bits_below_two_rejected():
    with pytest.raises(QuantizationError):
        QuantSpec.weights(1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 16), elements=st.floats(-50, 50)), st.sampled_from([2, 3, 4, 8]),
       st.sampled_from([None, 4, 8]))
def test_idempotent_and_dequant_matches(W, bits, group):
    spec = QuantSpec.weights(bits, group)
    once = fake_quant_weights(W, spec).data
    codes, qp = integer_quantize(W, spec)
    # re-quantize with the same (h, z): an explicit step/zero-point parameterization
    frozen = LSQParams(qp.h, qp.z.astype(np.float64))
    twice = fake_quant_weights(once, spec, frozen).data
    assert np.array_equal(once, twice)
    assert codes.max() <= spec.qmax
    assert np.array_equal(dequantize(codes, qp, spec), once)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 12), elements=st.floats(-5, 5)), st.sampled_from([2, 3, 4]),
       st.floats(0.3, 1.0), st.floats(0.3, 1.0))
def test_lwc_grid_bounds(W, bits, g, b):
    """With clipping strengths, reconstructions stay inside [beta*min - h/2, gamma*max + h/2]."""
    strengths = (np.full((3, 1), g), np.full((3, 1), b))
    out = fake_quant_weights(W, QuantSpec.weights(bits), strengths).data
    mx, mn = W.max(axis=1), W.min(axis=1)
    h = np.maximum((g * mx - b * mn) / (2**bits - 1), EPS)
    assert np.all(out.max(axis=1) <= np.maximum(g * mx, 0) + h + 1e-9)
    assert np.all(out.min(axis=1) >= np.minimum(b * mn, 0) - h - 1e-9)


def test_lwc_logits_saturate_to_minmax():
    W = np.random.default_rng(1).standard_normal((5, 8))
    spec = QuantSpec.weights(3)
    lwc = LWCParams.init(spec.n_groups(5, 8), 40.0)
    assert np.array_equal(integer_quantize(W, spec, lwc)[0], integer_quantize(W, spec)[0])


def test_lwc_gradient_reaches_logits():
    W = np.random.default_rng(2).standard_normal((4, 8))
    spec = QuantSpec.weights(3)
    with ad.Tape() as tape:
        gl = tape.variable(np.zeros((4, 1)))
        bl = tape.variable(np.zeros((4, 1)))
        loss = ad.mse(fake_quant_weights(W, spec, LWCParams(gl, bl)), W)
        g = tape.backward(loss)
    assert np.abs(g[gl.node].data).sum() > 0 and np.abs(g[bl.node].data).sum() > 0


def test_pact_thresholds_at_minmax_equal_minmax():
    W = np.random.default_rng(3).standard_normal((6, 16))
    spec = QuantSpec.weights(4)
    pact = init_clip("pact", W, spec)
    assert np.array_equal(integer_quantize(W, spec, pact)[0], integer_quantize(W, spec)[0])


def test_pact_half_threshold_equals_lwc_half():
    W = np.random.default_rng(4).standard_normal((6, 16))
    spec = QuantSpec.weights(4)
    mx, mn = W.max(axis=1, keepdims=True), W.min(axis=1, keepdims=True)
    pact = fake_quant_weights(W, spec, PACTParams(0.5 * mx, mn)).data
    lwc = fake_quant_weights(W, spec, (np.full((6, 1), 0.5), np.ones((6, 1)))).data
    assert np.array_equal(pact, lwc)


def test_lsq_unit_step_reproduces_codes():
    W = np.array([[-1.0, 0.0, 2.0]])
    spec = QuantSpec.weights(2)
    codes, _ = integer_quantize(W, spec, LSQParams(np.ones((1, 1)), np.ones((1, 1))))
    assert codes.tolist() == [[0, 1, 3]]
    qp = clip_mode_params("lsq", LSQParams(np.array([1.0]), np.array([1.0])), 2)
    assert qp.h.tolist() == [1.0] and qp.z.tolist() == [1]


def test_lsq_nonpositive_step_is_clamped_and_flagged():
    qp = clip_mode_params("lsq", LSQParams(np.array([0.5, -0.1]), np.array([1.0, 1.0])), 4, (2,))
    assert qp.flagged.tolist() == [False, True]
    assert qp.h[1] == EPS


def test_clip_mode_params_type_check():
    with pytest.raises(QuantizationError):
        clip_mode_params("pact", LSQParams(np.ones(1), np.ones(1)), 4)


def test_grid_search_matches_brute_force_on_outlier_fixture():
    group = np.concatenate([np.ones(64), -np.ones(63), [3.0]])
    rng = np.random.default_rng(5)
    group = group[rng.permutation(128)]
    cands = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5]
    best, _ = grid_search_clip(group[None, :], QuantSpec.weights(4))
    assert best[0, 0] == brute_grid(group, 4, cands) == 0.95


def test_grid_search_large_outlier_keeps_full_range():
    group = np.concatenate([np.ones(64), -np.ones(63), [100.0]])
    best, _ = grid_search_clip(group[None, :], QuantSpec.weights(4))
    assert best[0, 0] == 1.0


def test_grid_single_candidate_is_rtn():
    W = np.random.default_rng(6).standard_normal((8, 32))
    spec = QuantSpec.weights(3)
    g, b = grid_search_clip(W, spec, candidates=[1.0])
    assert np.array_equal(integer_quantize(W, spec, (g, b))[0], integer_quantize(W, spec)[0])


def test_grid_never_worse_than_rtn():
    W = np.random.default_rng(7).standard_normal((16, 64)) ** 3
    spec = QuantSpec.weights(3, group_size=16)
    g, b = grid_search_clip(W, spec)
    err_grid = ((fake_quant_weights(W, spec, (g, b)).data - W) ** 2).sum()
    err_rtn = ((fake_quant_weights(W, spec).data - W) ** 2).sum()
    assert err_grid <= err_rtn


def test_grid_empty_candidates():
    with pytest.raises(QuantizationError):
        grid_search_clip(np.ones((1, 4)), QuantSpec.weights(4), candidates=[])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-20, 20)), st.sampled_from([2, 3, 4, 8]),
       st.floats(0.4, 1.0), st.floats(0.4, 1.0))
def test_error_bound_against_clamped_input(W, bits, g, b):
    """|fq(w) - clamp(w, b*min, g*max)| <= h/2 + |z - z_real| * h, z_real the unrounded zero-point."""
    assume(np.all(g * W.max(axis=1) - b * W.min(axis=1) > 1e-6))  # non-empty clipping range
    gamma, beta = np.full((3, 1), g), np.full((3, 1), b)
    out = fake_quant_weights(W, QuantSpec.weights(bits), (gamma, beta)).data
    for row, o in zip(W, out):
        q = compute_quant_params(row, bits, g, b)
        lo, hi = b * row.min(), g * row.max()
        z_real = -lo / q.h
        bound = q.h / 2 + abs(q.z - z_real) * q.h
        assert np.all(np.abs(o - np.clip(row, lo, hi)) <= bound + 1e-9 * max(1.0, abs(hi), abs(lo)))
