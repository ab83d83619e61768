from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import central_difference, gradient_check
from quicksrnet import tensor as T
from quicksrnet.data import synthetic_dataset
from quicksrnet.errors import ConfigError, DimensionError, DivergenceError, LoadError, StateError
from quicksrnet.model import ModelConfig, build, forward
from quicksrnet.train import (
    DESK_LR,
    AdamState,
    TrainConfig,
    adam_step,
    adam_update,
    apply_dihedral,
    augment,
    backward,
    forward_with_cache,
    l1_loss,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    train_loop,
    write_curve,
)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(4, 48, seed=5)


def tiny_cfg(**kw):
    return TrainConfig(**{"iterations": 6, "batch_size": 2, "patch_size": 8, "lr_initial": 1e-3, **kw})


def same_weights(a, b):
    return all(
        np.array_equal(x.kernel.weight, y.kernel.weight) and np.array_equal(x.kernel.bias, y.kernel.bias)
        for x, y in zip(a.convs(), b.convs())
    )


# -- loss -----------------------------------------------------------------------


def test_l1_identical_is_zero():
    x = np.random.default_rng(0).random((1, 3, 4, 4), dtype=np.float32)
    loss, g = l1_loss(x, x)
    assert loss == 0.0 and not g.any()


def test_l1_known_value():
    pred = np.zeros((1, 1, 1, 4), np.float32)
    target = np.array([1, -1, 2, 0], np.float32).reshape(1, 1, 1, 4)
    loss, g = l1_loss(pred, target)
    assert loss == 1.0
    assert g.ravel().tolist() == [-0.25, 0.25, -0.25, 0.0]


def test_l1_gradient_matches_finite_differences(rng):
    pred = rng.random((1, 3, 5, 5))
    target = rng.random((1, 3, 5, 5))
    _, g = l1_loss(pred, target)
    for index in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 2, 4, 4)]:
        num = central_difference(lambda: l1_loss(pred, target)[0], pred, index)
        assert num == pytest.approx(g[index], abs=1e-4)


def test_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        l1_loss(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 4, 4)))


# -- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_every_parameter_gradient_matches_finite_differences(seed):
    errors = gradient_check(seed)
    assert max(errors.values()) < 1e-3, errors


@pytest.mark.parametrize(
    "kw",
    [
        dict(scale=3),
        dict(scale=2, anchor_residual=True),
        dict(scale=Fraction(3, 2), head="naive1p5x"),
        dict(scale=Fraction(3, 2), head="proposed1p5x"),
    ],
)
def test_gradients_for_other_heads(rng, kw):
    model = build(ModelConfig(f=4, m=1, std=0.1, seed=3, **kw)).astype(np.float64)
    for conv in model.convs():
        conv.kernel.bias += 0.013  # keep pre-activations off the kinks
    x = rng.uniform(0.1, 0.9, (1, 3, 4, 4))
    out = forward(model, x)
    target = rng.random(out.shape)
    pred, cache = forward_with_cache(model, x)
    _, g = l1_loss(pred, target)
    grads = backward(model, x, g, cache=cache, input_grad=True)

    def loss():
        return l1_loss(forward(model, x), target)[0]

    for conv in model.convs():
        gw, gb = grads[conv.name]
        for index in [(0,) * 4, tuple(s - 1 for s in conv.kernel.weight.shape)]:
            assert central_difference(loss, conv.kernel.weight, index) == pytest.approx(gw[index], rel=1e-4, abs=1e-9)
        assert central_difference(loss, conv.kernel.bias, (0,)) == pytest.approx(gb[0], rel=1e-4, abs=1e-9)
    for index in [(0, 0, 0, 0), (0, 2, 3, 1)]:
        assert central_difference(loss, x, index) == pytest.approx(grads.input[index], rel=1e-4, abs=1e-9)


def test_backward_needs_cache_or_image():
    model = build(ModelConfig(f=4, m=1))
    with pytest.raises(StateError):
        backward(model, None, np.zeros((1, 3, 8, 8), np.float32))


# -- Adam -------------------------------------------------------------------------


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p, m, v = adam_update(np.zeros(3), g, np.zeros(3), np.zeros(3), t=1, lr=0.01)
    # bias correction makes the first step lr * g / (|g| + eps)
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(m, 0.1 * g)
    np.testing.assert_allclose(v, 0.001 * g * g)


def test_adam_converges_on_quadratic_bowl():
    target = np.array([3.0, -1.5, 0.25])
    x, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t in range(1, 101):
        x, m, v = adam_update(x, 2 * (x - target), m, v, t, lr=0.3, beta1=0.5)
    assert np.abs(x - target).max() < 1e-3


def test_adam_step_updates_state_in_place(rng):
    model = build(ModelConfig(f=4, m=1, std=0.1))
    state = AdamState.zeros_like(model)
    x = rng.random((1, 3, 6, 6), dtype=np.float32)
    pred, cache = forward_with_cache(model, x)
    _, g = l1_loss(pred, rng.random(pred.shape, dtype=np.float32))
    before = model.copy()
    adam_step(model, backward(model, x, g, cache=cache), state, 1e-3)
    assert state.step == 1
    assert not same_weights(before, model)
    assert all(a.dtype == np.float32 for a, _ in state.m.values())


def test_adam_state_shape_mismatch(rng):
    model = build(ModelConfig(f=4, m=1))
    state = AdamState.zeros_like(build(ModelConfig(f=6, m=1)))
    x = rng.random((1, 3, 4, 4), dtype=np.float32)
    pred, cache = forward_with_cache(model, x)
    with pytest.raises(StateError):
        adam_step(model, backward(model, x, np.ones_like(pred), cache=cache), state, 1e-3)


# -- schedule ---------------------------------------------------------------------


def test_full_schedule_constants():
    cfg = TrainConfig.full_scale()
    assert (cfg.iterations, cfg.batch_size, cfg.lr_initial) == (1_000_000, 32, 5e-4)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
    assert cfg.lr_at(199_999) == 5e-4 and cfg.lr_at(200_000) == 2.5e-4 and cfg.lr_at(999_999) == 5e-4 / 16


def test_desk_scale_shrinks_decay_proportionally():
    cfg = TrainConfig.desk_scale(5000)
    assert cfg.lr_decay_every == 1000
    assert [cfg.lr_at(s) for s in (0, 999, 1000, 4999)] == [DESK_LR, DESK_LR, DESK_LR / 2, DESK_LR / 16]


@pytest.mark.parametrize("kw", [dict(iterations=-1), dict(batch_size=0), dict(lr_initial=0.0), dict(beta1=1.0)])
def test_bad_train_configs(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- augmentation -------------------------------------------------------------------


def test_identity_draw_is_plain_bicubic(rng):
    hr = rng.random((3, 16, 16), dtype=np.float32)
    lr, out_hr = augment(hr, rng, 2, patch_size=None, transform=0)
    assert np.array_equal(out_hr, hr)
    assert np.array_equal(lr, np.clip(T.bicubic_resize(hr[None], Fraction(1, 2))[0], 0, 1))


def brightest_quadrant(img):
    h, w = img.shape[-2] // 2, img.shape[-1] // 2
    return int(np.argmax([img[0, i * h : (i + 1) * h, j * w : (j + 1) * w].sum() for i in (0, 1) for j in (0, 1)]))


@pytest.mark.parametrize("k", range(8))
def test_augmentation_keeps_lr_hr_correspondence(rng, k):
    hr = np.zeros((3, 16, 16), np.float32)
    hr[:, :4, :4] = 1.0  # mark one corner
    lr, out_hr = augment(hr, rng, 2, patch_size=None, transform=k)
    assert np.array_equal(out_hr, apply_dihedral(hr, k))
    # the bright LR corner must sit over the bright HR corner
    assert brightest_quadrant(T.nearest_upscale(lr[None], 2)[0]) == brightest_quadrant(out_hr)
    np.testing.assert_allclose(lr, np.clip(T.bicubic_resize(out_hr[None], 0.5)[0], 0, 1), atol=1e-6)


def test_dihedral_elements_are_distinct():
    img = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    seen = {apply_dihedral(img, k).tobytes() for k in range(8)}
    assert len(seen) == 8


def test_dihedral_draws_are_uniform():
    hr = np.arange(16, dtype=np.float32).reshape(1, 4, 4).repeat(3, axis=0) / 16
    lookup = {apply_dihedral(hr, k).tobytes(): k for k in range(8)}
    counts = np.zeros(8)
    rng = np.random.default_rng(99)
    draws = 10_000
    for _ in range(draws):
        k = int(rng.integers(0, 8))
        counts[lookup[apply_dihedral(hr, k).tobytes()]] += 1
    # sanity on the sampler used by augment
    counts2 = np.zeros(8)
    rng = np.random.default_rng(7)
    for _ in range(2000):
        _, out = augment(hr, rng, 2, patch_size=None)
        counts2[lookup[out.tobytes()]] += 1
    for c, n in ((counts, draws), (counts2, 2000)):
        expected = n / 8
        chi2 = float(((c - expected) ** 2 / expected).sum())
        assert chi2 < 24.32  # 7 dof, p = 0.001


def test_crop_errors(rng):
    with pytest.raises(DimensionError):
        augment(np.zeros((3, 10, 10), np.float32), rng, 2, patch_size=8)
    with pytest.raises(DimensionError):
        augment(np.zeros((3, 9, 10), np.float32), rng, 2, patch_size=None)
    with pytest.raises(DimensionError):
        augment(np.zeros((3, 30, 30), np.float32), rng, Fraction(3, 2), patch_size=5)


def test_batches_do_not_depend_on_batch_size(tiny_data):
    big = sample_batch(tiny_data, tiny_cfg(batch_size=4), 2, step=1)
    for b in range(4):
        one = sample_batch(tiny_data, tiny_cfg(batch_size=1), 2, step=4 + b)
        assert np.array_equal(big[0][b], one[0][0]) and np.array_equal(big[1][b], one[1][0])


# -- loop ------------------------------------------------------------------------------


def test_zero_iterations_returns_unchanged_copy(tiny_data):
    model = build(ModelConfig(f=4, m=1, std=0.01))
    res = train_loop(model, tiny_data, tiny_cfg(iterations=0))
    assert res.curve == [] and same_weights(res.model, model)
    assert res.model is not model


def test_training_leaves_input_untouched(tiny_data):
    model = build(ModelConfig(f=4, m=1, std=0.01))
    snapshot = model.copy()
    res = train_loop(model, tiny_data, tiny_cfg())
    assert same_weights(model, snapshot)
    assert not same_weights(res.model, snapshot)
    assert [c[0] for c in res.curve] == list(range(6))


def test_training_is_deterministic(tiny_data):
    model = build(ModelConfig(f=4, m=1, std=0.01))
    a = train_loop(model, tiny_data, tiny_cfg(seed=3))
    b = train_loop(model, tiny_data, tiny_cfg(seed=3))
    c = train_loop(model, tiny_data, tiny_cfg(seed=4))
    assert a.curve == b.curve and same_weights(a.model, b.model)
    assert a.curve != c.curve


def test_lr_follows_step_decay(tiny_data):
    res = train_loop(build(ModelConfig(f=4, m=1)), tiny_data, tiny_cfg(lr_decay_every=2))
    assert [c[1] for c in res.curve] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]


def test_empty_dataset():
    with pytest.raises(ConfigError):
        train_loop(build(ModelConfig(f=4, m=1)), [], tiny_cfg())


def test_nan_loss_aborts(tiny_data):
    model = build(ModelConfig(f=4, m=1))
    model.convs()[0].kernel.bias[:] = np.nan
    with pytest.raises(DivergenceError, match="step 0"):
        train_loop(model, tiny_data, tiny_cfg())


def test_fixed_batch_loss_is_non_increasing_at_small_lr(tiny_data):
    violations, total = 0, 0
    for seed in range(4):
        model = build(ModelConfig(f=8, m=1, std=0.002, seed=seed))
        cfg = tiny_cfg(batch_size=4, patch_size=12, seed=seed)
        x, y = sample_batch(tiny_data, cfg, 2, step=0)
        state = AdamState.zeros_like(model)
        prev = None
        for _ in range(50):
            pred, cache = forward_with_cache(model, x)
            loss, g = l1_loss(pred, y)
            if prev is not None:
                total += 1
                violations += loss > prev
            prev = loss
            adam_step(model, backward(model, x, g, cache=cache), state, 1e-4)
    assert violations <= 0.05 * total


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_resume_matches_uninterrupted_run(tmp_path, tiny_data):
    model = build(ModelConfig(f=4, m=1, std=0.01))
    full = train_loop(model, tiny_data, tiny_cfg(iterations=6))
    half = train_loop(model, tiny_data, tiny_cfg(iterations=3))
    save_checkpoint(half.model, half.state, tmp_path / "ck")
    m2, s2 = load_checkpoint(tmp_path / "ck")
    assert s2.step == 3
    rest = train_loop(m2, tiny_data, tiny_cfg(iterations=6), state=s2)
    assert same_weights(rest.model, full.model)
    assert half.curve + rest.curve == full.curve


def test_checkpoint_without_optimizer_state(tmp_path):
    from quicksrnet import export

    model = build(ModelConfig(f=4, m=1))
    export.save(model, tmp_path / "plain")
    _, state = load_checkpoint(tmp_path / "plain")
    assert state.step == 0


def test_corrupt_optimizer_state(tmp_path, tiny_data):
    res = train_loop(build(ModelConfig(f=4, m=1)), tiny_data, tiny_cfg(iterations=1))
    save_checkpoint(res.model, res.state, tmp_path / "ck")
    opt = tmp_path / "ck.qsr.adam.bin"
    data = opt.read_bytes()
    opt.write_bytes(data[:-8])
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "ck")
    opt.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "ck")


def test_curve_csv(tmp_path):
    write_curve([(0, 5e-4, 0.25), (1, 5e-4, 0.125)], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == "step,lr,loss\n0,0.0005,0.25\n1,0.0005,0.125\n"


@given(st.integers(0, 7), st.integers(0, 7))
def test_dihedral_group_closure(a, b):
    img = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    composed = apply_dihedral(apply_dihedral(img, a), b)
    assert any(np.array_equal(composed, apply_dihedral(img, k)) for k in range(8))
