import struct

import numpy as np
import pytest

from conftest import make_quadratic
from ml2o.cell import (
    CheckpointError,
    OptimizerParams,
    UnrollState,
    compute_features,
    init_params,
    load_checkpoint,
    load_checkpoint_metadata,
    param_count,
    random_params,
    save_checkpoint,
    step,
)
from ml2o.numeric import RngStream
from ml2o.unroll import unroll


def test_param_count_formula_and_serialized_entries(rng, tmp_path):
    # 4 gates of (22x20 weights + 20 biases), 20 projection weights, its bias,
    # and the stored output scale.
    assert param_count(20, 2) == 4 * (22 * 20 + 20) + 20 + 1 + 1
    assert param_count(20, 2) == 1862
    params = init_params(20, 2, rng)
    assert params.n_params == 1861  # trainable payload excludes output_scale
    path = tmp_path / "c.ckpt"
    save_checkpoint(params, path)
    raw = path.read_bytes()
    # payload f64 count plus the header's output_scale must match the formula
    (meta_len,) = struct.unpack("<I", raw[24:28])
    (count,) = struct.unpack("<Q", raw[28 + meta_len : 36 + meta_len])
    assert count + 1 == param_count(20, 2)


def test_init_zero_projection_means_zero_update(rng):
    params = init_params(6, 2, rng)
    state = UnrollState.fresh(rng.gen.normal(size=4), 6)
    feats, state = compute_features(rng.gen.normal(size=4), state)
    update, nxt = step(params, feats, state)
    assert np.array_equal(update, np.zeros(4))
    assert np.array_equal(nxt.theta, state.theta)


def test_init_is_seed_deterministic():
    a = init_params(5, 2, RngStream(3).child("i"))
    b = init_params(5, 2, RngStream(3).child("i"))
    assert np.array_equal(a.to_flat(), b.to_flat())


def test_init_bias_and_range():
    params = init_params(8, 2, RngStream(1))
    h = 8
    assert np.all(params.b[h : 2 * h] == 1.0)  # forget gate
    assert np.all(params.b[:h] == 0.0) and np.all(params.b[2 * h :] == 0.0)
    s = 1.0 / np.sqrt(10)
    assert np.all(np.abs(params.w) <= s)
    assert np.all(params.w_proj == 0.0) and params.b_proj == 0.0
    assert params.output_scale == 0.01


def test_features_first_step_closed_form(rng):
    g = np.array([2.0, -3.0, 0.5])
    state = UnrollState.fresh(np.zeros(3), 4)
    feats, new_state = compute_features(g, state)
    assert np.allclose(new_state.m, 0.1 * g)
    assert np.allclose(new_state.v, 0.001 * g * g)
    expected = 0.1 * g / (np.sqrt(0.001 * g * g) + 1e-8)
    assert np.allclose(feats[:, 1], expected)
    assert np.allclose(np.abs(feats[:, 1]), 3.1623, atol=1e-3)
    assert np.array_equal(feats[:, 0], g)


def test_features_zero_gradients_stay_zero():
    state = UnrollState.fresh(np.zeros(3), 4)
    for _ in range(5):
        feats, state = compute_features(np.zeros(3), state)
        assert np.array_equal(feats, np.zeros((3, 2)))


def test_momentum_feature_scale_invariance():
    for g in (1.0, 4.0, 100.0):
        s1 = UnrollState.fresh(np.zeros(1), 4)
        f1, _ = compute_features(np.array([g]), s1)
        s2 = UnrollState.fresh(np.zeros(1), 4)
        f2, _ = compute_features(np.array([2 * g]), s2)
        assert abs(f1[0, 1] - f2[0, 1]) < 1e-6


def test_step_closed_form_gates():
    # all gate weights zero, forget bias 1, fresh state: the cell emits zero
    # hidden state, so the update is exactly output_scale * b_proj
    h = 4
    w = np.zeros((2 + h, 4 * h))
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0
    params = OptimizerParams(w=w, b=b, w_proj=np.zeros(h), b_proj=0.25, output_scale=0.01)
    state = UnrollState.fresh(np.zeros(3), h)
    feats, state = compute_features(np.array([1.0, -2.0, 3.0]), state)
    update, nxt = step(params, feats, state)
    assert np.allclose(update, 0.01 * 0.25)
    assert np.array_equal(nxt.h, np.zeros((3, h)))
    assert np.array_equal(nxt.c, np.zeros((3, h)))


def test_shared_weights_give_identical_updates_for_identical_histories(rng):
    params = random_params(5, 2, rng)
    state = UnrollState.fresh(np.zeros(4), 5)
    feats, state = compute_features(np.array([1.5, 1.5, -0.2, 1.5]), state)
    update, _ = step(params, feats, state)
    assert update[0] == update[1] == update[3]


def test_update_magnitude_bound(rng):
    params = random_params(6, 2, rng, proj_scale=2.0)
    bound = params.output_scale * (np.abs(params.w_proj).sum() + abs(params.b_proj))
    for _ in range(50):
        state = UnrollState.fresh(rng.gen.normal(size=5), 6)
        state.h = rng.gen.uniform(-1, 1, size=(5, 6))
        state.c = rng.gen.normal(size=(5, 6))
        feats, state = compute_features(rng.gen.normal(size=5) * 100, state)
        update, _ = step(params, feats, state)
        assert np.all(np.abs(update) <= bound + 1e-15)


def test_coordinate_permutation_equivariance(rng):
    d = 6
    task = make_quadratic(rng, d)
    params = random_params(5, 2, rng)
    theta0 = rng.gen.normal(size=d)
    perm = rng.gen.permutation(d)
    p = np.eye(d)[perm]
    task_p = type(task)(kind=task.kind, dim=d, a=p @ task.a @ p.T, b=p @ task.b, lam=task.lam)
    res = unroll(params, task, theta0, 5)
    res_p = unroll(params, task_p, p @ theta0, 5)
    assert np.allclose(res_p.theta_final, p @ res.theta_final, rtol=1e-12, atol=1e-12)


def test_flat_round_trip(rng):
    params = random_params(7, 2, rng)
    back = OptimizerParams.from_flat(params.to_flat(), 7, 2, params.output_scale)
    assert np.array_equal(back.to_flat(), params.to_flat())
    assert np.array_equal(back.w, params.w)


def test_checkpoint_round_trip_bit_exact(rng, tmp_path):
    params = random_params(6, 2, rng)
    path = tmp_path / "w.ckpt"
    save_checkpoint(params, path, metadata="unit-test")
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.to_flat(), params.to_flat())
    assert loaded.output_scale == params.output_scale
    assert load_checkpoint_metadata(path) == "unit-test"


def test_checkpoint_truncation_detected(rng, tmp_path):
    params = random_params(6, 2, rng)
    path = tmp_path / "w.ckpt"
    save_checkpoint(params, path)
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_version_mismatch_names_versions(rng, tmp_path):
    params = random_params(4, 2, rng)
    path = tmp_path / "w.ckpt"
    save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 9.*version 1"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_checkpoint_header_payload_mismatch(rng, tmp_path):
    params = random_params(4, 2, rng)
    path = tmp_path / "w.ckpt"
    save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 11)  # claim a different hidden size
    (tmp_path / "h.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="inconsistent"):
        load_checkpoint(tmp_path / "h.ckpt")


def test_checkpoint_corrupt_payload(rng, tmp_path):
    params = random_params(4, 2, rng)
    path = tmp_path / "w.ckpt"
    save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[60] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum|truncated|inconsistent"):
        load_checkpoint(tmp_path / "c.ckpt")
