import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkflow.errors import ConfigError, DivergenceError, ShapeError
from chunkflow.flow import (
    InversionCache, LatentCodec, TimestepSampler, TrainRecipe, apply_target_inversion, cfm_loss,
    euler_integrate, interpolate, invert_target, load_checkpoint, net_hash, pretrain_noise_to_data,
    rollout, sample_continuation, sample_conventional, sample_t, save_checkpoint, shift_time, train,
    train_conventional_baseline,
)
from chunkflow.metrics import seam_metrics
from chunkflow.numerics import VectorFieldNet, forward, make_rng


def const_net(c, time_width=2):
    """Zero weights with bias ``c``: the field is the constant ``c``."""
    c = np.asarray(c, dtype=np.float64)
    d = c.size
    net = VectorFieldNet.zeros([d + time_width, 3, d], time_width)
    ps = net.params
    ps[-1] = c.copy()
    return net.with_params(ps)


# interpolation and loss

def test_interpolate_examples(rng):
    x0, x1 = rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    assert interpolate(0.0, 2.0, 0.25) == 0.5
    with pytest.raises(ShapeError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)


def test_interpolate_per_row_times(rng):
    x0, x1 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    t = np.array([0.0, 0.5, 1.0])
    out = interpolate(x0, x1, t)
    np.testing.assert_array_equal(out[0], x0[0])
    np.testing.assert_array_equal(out[2], x1[2])


def test_cfm_loss_zero_for_exact_field():
    x0, x1 = np.array([0.5, -1.0]), np.array([1.5, 2.0])
    loss, grads = cfm_loss(const_net(x1 - x0), x0, x1, 0.3)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads)


def test_cfm_loss_unit_target():
    loss, _ = cfm_loss(const_net(np.zeros(3)), np.zeros(3), np.array([0.0, 1.0, 0.0]), 0.6)
    assert loss == 1.0


def test_cfm_loss_gradient_finite_differences(rng):
    net = VectorFieldNet.init(5, (7,), 4, rng)
    x0, x1, t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), rng.uniform(size=3)
    _, grads = cfm_loss(net, x0, x1, t)
    h = 1e-6
    for k, p in enumerate(net.params):
        for j in range(0, p.size, max(1, p.size // 6)):
            ps = [q.copy() for q in net.params]
            ps[k].flat[j] += h
            up = cfm_loss(net.with_params(ps), x0, x1, t)[0]
            ps[k].flat[j] -= 2 * h
            dn = cfm_loss(net.with_params(ps), x0, x1, t)[0]
            fd = (up - dn) / (2 * h)
            assert abs(grads[k].flat[j] - fd) <= 1e-4 * max(abs(fd), abs(grads[k].flat[j]), 1e-6)


# timesteps

def test_logit_normal_median_half():
    s = TimestepSampler("logit_normal", 0.0, 1.0).sample(make_rng(0, "t"), 20001)
    assert abs(np.median(s) - 0.5) < 0.01


def test_shift_examples():
    assert shift_time(0.3, 1.0) == 0.3
    assert shift_time(0.5, 3.0) == pytest.approx(0.75)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["uniform", "logit_normal"]), st.floats(1.0, 10.0), st.integers(0, 2 ** 31))
def test_samples_strictly_inside_unit_interval(kind, shift, seed):
    t = TimestepSampler(kind, 0.0, 2.0, shift).sample(make_rng(seed), 64)
    assert np.all((t > 0) & (t < 1))


def test_sample_t_scalar_and_errors():
    assert 0 < sample_t(TimestepSampler(), make_rng(0)) < 1
    with pytest.raises(ConfigError):
        TimestepSampler("logit_normal", 0.0, 0.0)
    with pytest.raises(ConfigError):
        TimestepSampler("beta")


# codec and target inversion

def test_codec_identity():
    x = np.arange(4.0)
    mu, sig = LatentCodec().encode(x)
    np.testing.assert_array_equal(LatentCodec().decode(mu), x)
    assert np.all(sig == 0.3)


def test_apply_target_inversion_examples():
    mu0 = np.array([[1.0, 2.0]] * 5)
    xh = np.ones((5, 2))
    np.testing.assert_array_equal(apply_target_inversion(mu0, 0.3, xh, 0.0, make_rng(0)), mu0)
    np.testing.assert_array_equal(apply_target_inversion(mu0, 0.0, xh, 1.0, make_rng(0)), mu0)
    e = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(apply_target_inversion(np.zeros(3), 0.3, e, 1.0, make_rng(0)), 0.3 * e)
    with pytest.raises(ConfigError):
        apply_target_inversion(mu0, 0.3, xh, 1.5, make_rng(0))


def test_apply_target_inversion_rate():
    mu0 = np.zeros((20000, 1))
    out = apply_target_inversion(mu0, 1.0, np.ones((20000, 1)), 0.7, make_rng(1))
    assert abs(out.mean() - 0.7) < 0.02


# integration and inversion

def test_sampling_zero_and_constant_fields(rng):
    x0 = rng.standard_normal(3)
    zero = VectorFieldNet.zeros([5, 4, 3], 2)
    c = np.array([0.25, -1.0, 2.0])
    for nfe in (1, 2, 5, 40):
        np.testing.assert_array_equal(sample_continuation(zero, x0, nfe), x0)
        np.testing.assert_allclose(sample_continuation(const_net(c), x0, nfe), x0 + c, atol=1e-12)


def test_trajectory_record(rng):
    x0 = rng.standard_normal((2, 3))
    end, states, grid = euler_integrate(const_net(np.ones(3)), x0, 4, record=True)
    assert len(states) == len(grid) == 5
    np.testing.assert_array_equal(states[0], x0)
    np.testing.assert_array_equal(states[-1], end)


def test_divergence_reports_step():
    with pytest.raises(DivergenceError, match="step 1 of 10"):
        euler_integrate(None, np.array([1e200]), 10, field_fn=lambda s, t: s * 1e200)


def test_invert_constant_field():
    a = np.array([0.5, -2.0])
    x1 = np.array([1.0, 1.0])
    for order in (1, 2):
        for steps in (1, 7, 50):
            np.testing.assert_allclose(invert_target(const_net(a), x1, steps, order), x1 - a, atol=1e-12)


def test_invert_exponential_field_order2_better():
    exact = 1.0
    errs = [abs(float(invert_target(None, np.array([math.e]), 50, o, field_fn=lambda s, t: s)[0]) - exact)
            for o in (1, 2)]
    assert errs[1] < errs[0]
    assert errs[1] < 1e-4


def test_invert_argument_checks():
    net = const_net(np.zeros(1))
    for kwargs in ({"steps": 0}, {"order": 3}, {"r": 0.0}, {"r": 1.5}):
        with pytest.raises(ConfigError):
            invert_target(net, np.zeros(1), **{"steps": 5, "order": 2, "r": 0.5, **kwargs})


def test_roundtrip_small_trained_model():
    from chunkflow.experiments import small_pretrained
    net, data = small_pretrained(0, steps=1500)
    x1 = data[:50]
    back = euler_integrate(net, invert_target(net, x1, 50, 2), 50)
    rel = np.linalg.norm(back - x1, axis=1) / np.linalg.norm(x1, axis=1)
    assert rel.max() <= 1e-2


def test_rollout_examples(rng):
    net = VectorFieldNet.init(4, (6,), 2, rng)
    x0 = rng.standard_normal(4)
    np.testing.assert_array_equal(rollout(net, x0, 1, 5)[0], sample_continuation(net, x0, 5))
    zero = VectorFieldNet.zeros([6, 4], 2)
    for chunk in rollout(zero, x0, 3, 2):
        np.testing.assert_array_equal(chunk, x0)
    with pytest.raises(ConfigError):
        rollout(net, x0, 0, 5)


def test_rollout_divergence_names_chunk():
    net = const_net(np.array([1e308]))
    with pytest.raises(DivergenceError, match="chunk 2"):
        rollout(net, np.array([1e308 * 0.5]), 3, 1)


# checkpoints and the inversion cache

def test_checkpoint_roundtrip(tmp_path, small_net):
    save_checkpoint(small_net, tmp_path / "c", step=7, recipe_hash="abc")
    net, meta = load_checkpoint(tmp_path / "c.fc2s")
    np.testing.assert_array_equal(net.flat(), small_net.flat())
    assert meta["step"] == "7" and meta["net_hash"] == net_hash(small_net)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.fc2s")


def test_inversion_cache_disk(tmp_path, small_net, rng):
    x1 = rng.standard_normal((3, 6))
    ids = [(0, 0), (0, 1), (1, 0)]
    first = InversionCache(tmp_path).invert_all(small_net, x1, ids, 10)
    again = InversionCache(tmp_path).invert_all(small_net, x1 * 0, ids, 10)  # served from disk
    np.testing.assert_array_equal(first, again)
    np.testing.assert_array_equal(first, invert_target(small_net, x1, 10))


# training

def _net(ds, seed=0):
    return VectorFieldNet.init(ds.dim, (16,), 4, make_rng(seed, "t"))


def test_recipe_invariants():
    with pytest.raises(ConfigError, match="requires coupling=inherent"):
        TrainRecipe(algorithm="alg1_oc_ti", coupling="independent").validate()
    with pytest.raises(ConfigError):
        TrainRecipe(algorithm="alg2_plain", coupling="inherent").validate()
    with pytest.raises(ConfigError):
        TrainRecipe(rho=1.2).validate()
    TrainRecipe(algorithm="alg2_plain", coupling="independent").validate()


def test_one_step_zero_lr_unchanged(tiny_dataset):
    net = _net(tiny_dataset)
    r = TrainRecipe(algorithm="alg3_oc_only", steps=1, lr=0.0)
    res = train(r, tiny_dataset, net)
    np.testing.assert_array_equal(res.net.flat(), net.flat())
    assert len(res.losses) == 1 and math.isfinite(res.losses[0])


def test_rho_zero_matches_alg3_bitwise(tiny_dataset):
    net = _net(tiny_dataset)
    a = train(TrainRecipe(algorithm="alg1_oc_ti", rho=0.0, steps=20, batch_size=8), tiny_dataset, net.copy())
    b = train(TrainRecipe(algorithm="alg3_oc_only", steps=20, batch_size=8), tiny_dataset, net.copy())
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.net.flat(), b.net.flat())


def test_alg1_needs_pretrained_and_flags_scratch(tiny_dataset):
    net = _net(tiny_dataset)
    with pytest.raises(ConfigError):
        train(TrainRecipe(steps=1), tiny_dataset, net)
    res = train(TrainRecipe(steps=2, init="from_scratch", batch_size=4, inversion_steps=3), tiny_dataset,
                net, pretrained=_net(tiny_dataset, 1))
    assert res.flags == ["alg1_from_scratch"]


def test_training_deterministic(tiny_dataset):
    runs = [train(TrainRecipe(steps=15, batch_size=4, inversion_steps=4), tiny_dataset, _net(tiny_dataset),
                  pretrained=_net(tiny_dataset, 1)) for _ in range(2)]
    assert runs[0].losses == runs[1].losses


def test_checkpoint_interval(tiny_dataset):
    seen = []
    r = TrainRecipe(algorithm="alg3_oc_only", steps=10, batch_size=4, checkpoint_every=4)
    train(r, tiny_dataset, _net(tiny_dataset), checkpoint_fn=lambda net, step: seen.append(step))
    assert seen == [4, 8]


def test_pretrain_zero_steps_is_init(tiny_dataset):
    net = _net(tiny_dataset)
    res = pretrain_noise_to_data(tiny_dataset, steps=0, net=net)
    np.testing.assert_array_equal(res.net.flat(), net.flat())


def test_pretrain_point_mass():
    target = np.array([1.5, -0.5, 2.0])
    data = np.tile(target, (64, 1))
    probe = make_rng(9).standard_normal((16, 3))
    errs = []
    for steps in (50, 400):
        net = pretrain_noise_to_data(data, (32,), 4, steps, seed=0,
                                     recipe=TrainRecipe(steps=steps, lr=1e-2, lr_schedule="constant")).net
        one = euler_integrate(net, probe, 1)
        assert np.all(np.linalg.norm(one - target, axis=1) < np.linalg.norm(probe - target, axis=1))
        errs.append(np.mean(np.sum((one - target) ** 2, 1)))
    assert errs[1] < errs[0]


def test_pretrain_loss_decreases(tiny_dataset):
    res = pretrain_noise_to_data(tiny_dataset, (32,), 4, 220, seed=0)
    ma = np.convolve(res.losses, np.ones(20) / 20, mode="valid")
    assert ma[200] < ma[0]


def test_baseline_widths_and_smoke(tiny_dataset):
    d = tiny_dataset.dim
    res = train_conventional_baseline(tiny_dataset, (16,), 4, steps=30, seed=0)
    assert res.net.widths[0] == 2 * d + 4 and res.net.out_dim == 2 * d
    assert _net(tiny_dataset).widths[0] == d + 4
    out = sample_conventional(res.net, tiny_dataset.x0[:3], 40, make_rng(0))
    assert np.all(np.isfinite(out))
    L, H, W = tiny_dataset.chunk_shape
    jump, accel = seam_metrics(tiny_dataset.x0[0], out[0], (H, W))
    assert math.isfinite(jump) and math.isfinite(accel)


def test_baseline_zero_conditioning_ignores_input_half(tiny_dataset):
    # with x0 forced to zero, the conditioning half of the state carries no signal
    res = train_conventional_baseline(tiny_dataset, (8,), 4, steps=5, seed=0)
    d = tiny_dataset.dim
    z = make_rng(1).standard_normal((2, d))
    full = np.concatenate([np.zeros((2, d)), z], axis=1)
    one = sample_conventional(res.net, np.zeros((2, d)), 1, make_rng(0), noise=z)
    np.testing.assert_allclose(one, z + forward(res.net, full, 0.0)[:, d:], atol=1e-12)


def test_baseline_rejects_wrong_width(tiny_dataset):
    with pytest.raises(ShapeError):
        train_conventional_baseline(tiny_dataset, steps=1, net=_net(tiny_dataset))
