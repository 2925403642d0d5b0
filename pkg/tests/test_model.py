import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardcycle.imaging import BayerMosaic, DimensionError, PATTERNS, mosaic
from hardcycle.model import (
    AdamState,
    BilinearDemosaicer,
    Checkpoint,
    CheckpointError,
    CnnDemosaicer,
    ModelParams,
    ModelSpec,
    OptimizerError,
    PRESETS,
    adam_step,
    backward,
    forward,
    init_params,
    l1_loss_and_grad,
    load_checkpoint,
    pack_bayer,
    param_count,
    param_shapes,
    preset,
    save_checkpoint,
    unpack_bayer,
    value_and_grad,
)
from hardcycle.model.layers import depth_to_space, space_to_depth

import oracles

TINY = ModelSpec(blocks=1, width=4, expansion=2, seed=3)


def perturbed(spec, dtype=np.float64, seed=0):
    """Init params with non-zero biases so every bias path is exercised."""
    rng = np.random.default_rng(seed)
    p = init_params(spec, dtype)
    return p.map(lambda a: a + 0.1 * rng.standard_normal(a.shape).astype(dtype))


def closed_form_count(blocks, width, expansion, k=3):
    w, e = width, width * expansion
    stem = 4 * w * k * k + w
    block = (w * e + e) + (e * k * k + e) + (e * w + w)
    head = (w + 4) * 12 * k * k + 12
    return stem + blocks * block + head


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_counts(name):
    spec = preset(name)
    assert param_count(spec) == closed_form_count(spec.blocks, spec.width, spec.expansion)


def test_preset_sizes():
    counts = {n: param_count(preset(n)) for n in PRESETS}
    assert counts == {"9.5k": 9524, "16k": 15644, "84k": 84588, "176k": 176444}


def test_count_example():
    spec = ModelSpec(blocks=3, width=16, expansion=2)
    assert param_count(spec) == closed_form_count(3, 16, 2)
    assert sum(int(np.prod(s)) for _, s in param_shapes(spec)) == param_count(spec)


def test_spec_validation():
    for bad in (dict(blocks=0), dict(width=3), dict(expansion=0), dict(kernel=2)):
        with pytest.raises(ValueError):
            ModelSpec(**bad)
    with pytest.raises(ValueError):
        preset("1m")


def test_init_deterministic_and_zero_bias():
    a, b = init_params(TINY), init_params(TINY)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
        if name.endswith(".b"):
            assert not a[name].any()
    c = init_params(ModelSpec(blocks=1, width=4, expansion=2, seed=4))
    assert not np.array_equal(a["stem.w"], c["stem.w"])


def test_params_shape_validation():
    p = init_params(TINY)
    tensors = dict(p)
    tensors["stem.w"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(Exception):
        ModelParams(TINY, tensors)


def test_pack_2x2():
    m = BayerMosaic(np.array([[1.0, 2.0], [3.0, 4.0]]), "GRBG")
    np.testing.assert_array_equal(pack_bayer(m), [[[1.0, 2.0, 3.0, 4.0]]])


def test_pack_4x4_grbg_phases():
    data = np.arange(16.0).reshape(4, 4)
    packed = pack_bayer(BayerMosaic(data, "GRBG"))
    # channel 0 = G (even row, even col), 1 = R, 2 = B, 3 = G (odd row, odd col)
    np.testing.assert_array_equal(packed[..., 0], [[0, 2], [8, 10]])
    np.testing.assert_array_equal(packed[..., 1], [[1, 3], [9, 11]])
    np.testing.assert_array_equal(packed[..., 2], [[4, 6], [12, 14]])
    np.testing.assert_array_equal(packed[..., 3], [[5, 7], [13, 15]])


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from(PATTERNS), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_pack_unpack_bijection(h, w, pattern, seed):
    data = np.random.default_rng(seed).random((2 * h, 2 * w))
    m = unpack_bayer(pack_bayer(BayerMosaic(data, pattern)), pattern)
    np.testing.assert_array_equal(m.data, data)


def test_depth_to_space_roundtrip():
    x = np.random.default_rng(0).random((2, 3, 4, 12))
    np.testing.assert_array_equal(space_to_depth(depth_to_space(x)), x)


@pytest.mark.parametrize("seed", [0, 1])
def test_forward_matches_straight_line(seed):
    spec = ModelSpec(blocks=2, width=4, expansion=2, seed=seed)
    params = perturbed(spec, seed=seed)
    x = np.random.default_rng(seed + 10).random((3, 5, 4))
    np.testing.assert_allclose(forward(params, x), oracles.network(params, spec.blocks, x),
                               rtol=1e-12, atol=1e-12)


def test_forward_zero_params():
    params = init_params(TINY).map(np.zeros_like)
    out = forward(params, np.random.default_rng(0).random((2, 4, 4, 4)))
    assert out.shape == (2, 8, 8, 3) and not out.any()


def test_head_is_linear():
    params = perturbed(TINY)
    x = np.random.default_rng(1).random((4, 4, 4))
    base = forward(params, x)
    params["head.w"] = params["head.w"] * 2
    params["head.b"] = params["head.b"] * 2
    np.testing.assert_allclose(forward(params, x), 2 * base, rtol=1e-12)


def test_forward_per_sample_independent():
    params = perturbed(TINY)
    x = np.random.default_rng(2).random((3, 4, 4, 4))
    batch = forward(params, x)
    for i in (2, 0, 1):
        np.testing.assert_allclose(forward(params, x[i]), batch[i], rtol=0, atol=1e-14)


def test_forward_rejects_bad_shape():
    with pytest.raises(DimensionError):
        forward(init_params(TINY), np.zeros((1, 4, 4, 3)))


def test_backward_matches_finite_differences():
    params = perturbed(TINY, seed=5)
    rng = np.random.default_rng(6)
    x = rng.random((1, 4, 4, 4))
    up = rng.standard_normal((1, 8, 8, 3))
    grads = backward(params, x, up)
    fd = oracles.central_differences(lambda p: float(np.sum(forward(p, x) * up)), params)
    for name in params:
        err = np.abs(grads[name] - fd[name]) / (np.abs(fd[name]) + 1e-8)
        assert err.max() < 1e-4, name


def test_backward_zero_upstream():
    params = perturbed(TINY)
    x = np.random.default_rng(0).random((2, 4, 4, 4))
    g = backward(params, x, np.zeros((2, 8, 8, 3)))
    assert all(not v.any() for v in g.values())


def test_head_bias_gradient_is_summed_upstream():
    params = perturbed(TINY)
    rng = np.random.default_rng(7)
    x = rng.random((2, 3, 4, 4))
    up = rng.standard_normal((2, 6, 8, 3))
    g = backward(params, x, up)
    expected = space_to_depth(up).sum(axis=(0, 1, 2))
    np.testing.assert_allclose(g["head.b"], expected, rtol=1e-12)


def test_backward_shape_mismatch():
    with pytest.raises(DimensionError):
        backward(init_params(TINY), np.zeros((1, 4, 4, 4)), np.zeros((1, 4, 4, 3)))


def test_l1_loss_and_grad():
    rng = np.random.default_rng(8)
    gt = rng.random((2, 4, 4, 3))
    loss, g = l1_loss_and_grad(gt, gt)
    assert loss == 0 and not g.any()
    loss, g = l1_loss_and_grad(gt + 0.25, gt)
    assert loss == pytest.approx(0.25)
    np.testing.assert_allclose(g, 1 / gt.size)
    pred = rng.random(gt.shape)
    loss, g = l1_loss_and_grad(pred, gt)
    assert loss == pytest.approx(oracles.l1(pred, gt) / gt.size, rel=1e-12)
    # spot-check one element by finite difference
    h = 1e-7
    bumped = pred.copy()
    bumped[0, 1, 2, 0] += h
    fd = (l1_loss_and_grad(bumped, gt)[0] - loss) / h
    assert fd == pytest.approx(g[0, 1, 2, 0], rel=1e-5)
    with pytest.raises(DimensionError):
        l1_loss_and_grad(pred, gt[:1])


def test_value_and_grad_consistent_with_backward():
    params = perturbed(TINY)
    rng = np.random.default_rng(9)
    x = rng.random((2, 4, 4, 4))
    gt = rng.random((2, 8, 8, 3))
    loss, grads, out = value_and_grad(params, x, lambda o: l1_loss_and_grad(o, gt))
    _, up = l1_loss_and_grad(out, gt)
    ref = backward(params, x, up)
    for name in params:
        np.testing.assert_allclose(grads[name], ref[name], rtol=1e-12, atol=1e-15)


# --- Adam ---------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    params = init_params(TINY)
    state = AdamState.zeros_like(params)
    new, st_ = adam_step(params, params.map(np.zeros_like), state, 1e-3)
    for name in params:
        np.testing.assert_array_equal(new[name], params[name])
    assert st_.t == 1


def test_adam_first_step_moves_by_lr():
    params = init_params(TINY, np.float64)
    grads = params.map(lambda a: np.full_like(a, -0.3))
    new, _ = adam_step(params, grads, AdamState.zeros_like(params), 1e-3)
    # first bias-corrected step is lr * g / (|g| + eps)
    delta = 1e-3 * 0.3 / (0.3 + 1e-8)
    for name in params:
        np.testing.assert_allclose(new[name] - params[name], delta, rtol=1e-9)


def test_adam_matches_scalar_recurrence():
    params = perturbed(TINY)
    rng = np.random.default_rng(11)
    state = AdamState.zeros_like(params)
    flat_p = np.concatenate([params[n].ravel() for n in params]).tolist()
    m = [0.0] * len(flat_p)
    v = [0.0] * len(flat_p)
    t = 0
    for _ in range(3):
        grads = params.map(lambda a: rng.standard_normal(a.shape))
        flat_g = np.concatenate([grads[n].ravel() for n in grads]).tolist()
        params, state = adam_step(params, grads, state, 1e-2)
        flat_p, m, v, t = oracles.adam(flat_p, flat_g, m, v, t, 1e-2)
    got = np.concatenate([params[n].ravel() for n in params])
    np.testing.assert_allclose(got, flat_p, rtol=1e-12, atol=1e-15)


def test_adam_is_pure_and_lr_zero_identity():
    params = perturbed(TINY)
    before = params.copy()
    grads = params.map(np.ones_like)
    state = AdamState.zeros_like(params)
    a, sa = adam_step(params, grads, state, 0.0)
    b, sb = adam_step(params, grads, state, 0.0)
    for name in params:
        np.testing.assert_array_equal(params[name], before[name])
        np.testing.assert_array_equal(a[name], before[name])
        np.testing.assert_array_equal(sa.v[name], sb.v[name])
    assert state.t == 0


def test_adam_rejects_bad_input():
    params = init_params(TINY)
    grads = params.map(np.zeros_like)
    grads["stem.b"][0] = np.nan
    with pytest.raises(OptimizerError):
        adam_step(params, grads, AdamState.zeros_like(params), 1e-3)
    with pytest.raises(ValueError):
        adam_step(params, params.map(np.zeros_like), AdamState.zeros_like(params), -1.0)


# --- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    ckpt = Checkpoint.fresh(TINY, epoch=2, phase="general", seed=3)
    params, adam = ckpt.params, ckpt.adam
    grads = params.map(lambda a: np.random.default_rng(0).standard_normal(a.shape))
    params, adam = adam_step(params, grads, adam, 1e-3)
    ckpt = Checkpoint(TINY, params, adam, ckpt.meta)
    path = save_checkpoint(ckpt, tmp_path / "c.json")
    back = load_checkpoint(path, TINY)
    for name in params:
        np.testing.assert_array_equal(back.params[name], params[name])
        np.testing.assert_array_equal(back.adam.m[name], adam.m[name])
        np.testing.assert_array_equal(back.adam.v[name], adam.v[name])
    assert back.adam.t == 1 and back.meta == ckpt.meta
    assert (tmp_path / "c.bin").stat().st_size == 3 * 4 * param_count(TINY)


def test_checkpoint_golden_values(tmp_path):
    path = save_checkpoint(Checkpoint.fresh(TINY), tmp_path / "g.json")
    manifest = json.loads(path.read_text())
    assert sum(e["count"] for e in manifest["tensors"] if e["group"] == "params") == param_count(TINY)
    # the first stored values are the first He-scaled normals drawn from the spec seed
    first = np.frombuffer((tmp_path / "g.bin").read_bytes()[:12], "<f4")
    expected = (np.random.default_rng(TINY.seed).standard_normal(3) * np.sqrt(2 / 36)).astype(np.float32)
    np.testing.assert_array_equal(first, expected)


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(Checkpoint.fresh(TINY), tmp_path / "c.json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, ModelSpec(blocks=2, width=4, expansion=2))
    (tmp_path / "c.bin").write_bytes(b"\x00" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    (tmp_path / "d.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.json")


# --- predictors ------------------------------------------------------------------

def test_predictors_shapes():
    img = np.random.default_rng(0).random((2, 8, 6, 3))
    m = mosaic(img).data
    out = CnnDemosaicer(init_params(TINY), batch=1).predict(m, "GRBG")
    assert out.shape == img.shape and out.dtype == np.float64
    assert BilinearDemosaicer().predict(m[0], "GRBG").shape == (8, 6, 3)
