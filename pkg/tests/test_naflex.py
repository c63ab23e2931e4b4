import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigrecipe import naflex as N
from sigrecipe.tensor import ShapeError, Tensor


def check_plan(plan, seq_len):
    gh, gw = plan.grid
    p = plan.patch_size
    assert gh * gw <= seq_len
    assert plan.dst == (gh * p, gw * p)
    assert gh >= 1 and gw >= 1


def test_conformant_image_not_resized():
    plan = N.plan_resize(256, 256, 16, 256)
    assert plan.dst == (256, 256) and plan.grid == (16, 16)


def test_worked_example_480_by_640():
    plan = N.plan_resize(480, 640, 16, 256)
    assert plan.dst == (224, 288)
    assert plan.grid == (14, 18) and 14 * 18 == 252
    assert math.sqrt(256 * 16 * 16 / (480 * 640)) == pytest.approx(0.46188, abs=1e-5)
    dh, dw = plan.distortion()
    bh, bw = plan.distortion_bound()
    assert dh <= bh and dw <= bw


@settings(max_examples=400, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 4096), st.integers(16, 1024), st.sampled_from([4, 8, 16]))
def test_plan_budget_and_multiples(H, W, S, p):
    check_plan(N.plan_resize(H, W, p, S), S)


@settings(max_examples=400, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 4096), st.integers(16, 1024), st.sampled_from([4, 8, 16]))
def test_distortion_bound_where_representable(H, W, S, p):
    # aspect ratios the budget can hold at one patch per short side
    s0 = math.sqrt(S * p * p / (H * W))
    if s0 * min(H, W) < p:
        return
    plan = N.plan_resize(H, W, p, S)
    dh, dw = plan.distortion()
    bh, bw = plan.distortion_bound()
    assert dh <= bh + 1e-12 and dw <= bw + 1e-12


def test_plan_invalid_sizes():
    with pytest.raises(ValueError):
        N.plan_resize(0, 10, 4, 16)


def test_single_patch_is_whole_image():
    img = np.random.default_rng(0).random((4, 4, 3))
    plan = N.ResizePlan((4, 4), (4, 4), (1, 1), 4, 1.0)
    seq = N.patchify(img, plan)
    assert np.array_equal(seq.patches[0], img.reshape(-1))


def test_patchify_round_trip_bitwise():
    img = np.random.default_rng(1).random((12, 20, 3)).astype(np.float32)
    plan = N.plan_resize(12, 20, 4, 15)
    assert plan.dst == (12, 20)
    seq = N.patchify(img, plan, seq_len=20)
    assert N.unpatchify(seq, 4).tobytes() == img.tobytes()


def test_patchify_padding_and_coords():
    img = np.random.default_rng(2).random((8, 12, 3))
    plan = N.plan_resize(8, 12, 4, 6)
    seq = N.patchify(img, plan, seq_len=10)
    assert seq.mask.sum() == 6 and np.all(seq.mask[6:] == 0)
    assert np.all(seq.patches[6:] == 0)
    assert [tuple(c) for c in seq.coords[:6]] == [(r, c) for r in range(2) for c in range(3)]
    assert np.all(seq.coords[6:] == -1)


def test_patchify_mismatch_raises():
    plan = N.plan_resize(8, 8, 4, 4)
    with pytest.raises(ShapeError):
        N.patchify(np.zeros((8, 12, 3)), plan)


def test_resize_posemb_identity_and_shapes():
    pe = np.random.default_rng(3).normal(size=(256, 5)).astype(np.float32)
    assert N.resize_posemb(Tensor(pe), (16, 16)).data.tobytes() == pe.tobytes()
    assert N.resize_posemb(Tensor(pe), (14, 18)).shape == (252, 5)
    const = N.resize_posemb(Tensor(np.full((64, 3), 0.7)), (5, 11)).data
    assert np.allclose(const, 0.7, atol=1e-6)


def test_resize_posemb_row_major_order():
    # a posemb that encodes its own (row, col) must resize into row-major output
    g0 = 4
    r, c = np.divmod(np.arange(g0 * g0), g0)
    pe = np.stack([r, c], 1).astype(np.float64)
    out = N.resize_posemb(Tensor(pe), (4, 8)).data.reshape(4, 8, 2)
    assert np.all(np.diff(out[..., 0], axis=0) > 0) and np.all(np.diff(out[..., 1], axis=1) >= 0)


def test_resize_posemb_non_square_rejected():
    with pytest.raises(ShapeError):
        N.resize_posemb(Tensor(np.zeros((10, 2))), (2, 2))


def test_pi_resize_identity():
    k = np.random.default_rng(4).normal(size=(4, 4, 3, 6))
    assert np.abs(N.pi_resize_patch_kernel(k, 4) - k).max() <= 1e-6


@pytest.mark.parametrize("p", [2, 4, 8])
def test_pi_resize_upsize_preserves_tokens(p):
    rng = np.random.default_rng(p)
    k = rng.normal(size=(p, p, 3, 8))
    k2 = N.pi_resize_patch_kernel(k, 2 * p)
    B = N.patch_resize_matrix(p, 2 * p)
    for _ in range(100):
        x = rng.random((p * p, 3))
        xr = B @ x                                           # resized patch, per channel
        a = np.einsum("sc,scw->w", x, k.reshape(p * p, 3, 8))
        b = np.einsum("sc,scw->w", xr, k2.reshape(4 * p * p, 3, 8))
        assert np.abs(a - b).max() <= 1e-4


def test_patch_resize_matrix_matches_image_resize():
    x = np.random.default_rng(5).random((4, 4, 1))
    B = N.patch_resize_matrix(4, 8)
    ref = N.resize_image(x, (8, 8))
    assert np.allclose(B @ x.reshape(16), ref.reshape(64))


def test_pi_resize_downsize_is_least_squares():
    rng = np.random.default_rng(6)
    k = rng.normal(size=(8, 8, 1, 1)).reshape(64)
    k2 = N.pi_resize_patch_kernel(k.reshape(8, 8, 1, 1), 4).reshape(16)
    B = N.patch_resize_matrix(8, 4)
    base = np.sum((B.T @ k2 - k) ** 2)
    for _ in range(100):
        alt = k2 + rng.normal(scale=0.1, size=16)
        assert np.sum((B.T @ alt - k) ** 2) >= base


def test_sample_seq_len_uniform():
    rng = np.random.default_rng(0)
    draws = np.array([N.sample_seq_len(rng) for _ in range(100_000)])
    for s in N.FULLSCALE_SEQ_LENS:
        assert abs(np.mean(draws == s) - 0.2) <= 0.01
    a = [N.sample_seq_len(np.random.default_rng(9)) for _ in range(3)]
    b = [N.sample_seq_len(np.random.default_rng(9)) for _ in range(3)]
    assert a == b
    assert {N.sample_seq_len(rng, (16, 64, 144)) for _ in range(200)} == {16, 64, 144}
