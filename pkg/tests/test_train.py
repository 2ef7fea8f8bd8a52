import numpy as np
import pytest

from csrnet import model, train
from csrnet.errors import DivergenceError
from csrnet.gtgen import Fixed, generate_density_map
from csrnet.model import Conv, MaxPool2x2, NetworkConfig, ParamStore
from csrnet.synth import SyntheticSceneSpec, generate_synthetic_scene
from csrnet.tensor import ConvWeights
from oracles import central_diff, rel_err

TINY = NetworkConfig("tiny", (Conv(3, 4), MaxPool2x2(), Conv(3, 4, 2), Conv(1, 1, 1, relu=False)))


def tiny_dataset(n=3, seed=0):
    out = []
    for i in range(n):
        img, pts = generate_synthetic_scene(SyntheticSceneSpec(16, 16, (1, 3), (1.5, 2.0), seed + i))
        out.append(train.make_sample(img, generate_density_map(16, 16, pts, Fixed(2.0)), 2))
    return out


# --- loss ------------------------------------------------------------------------

def test_loss_zero_at_target():
    t = np.random.default_rng(0).random((4, 5))
    loss, grad = train.euclidean_loss(t[None, None], [t])
    assert loss == 0 and not grad.any()


def test_loss_hand_case():
    t = np.zeros((3, 3))
    pred = np.zeros((1, 1, 3, 3))
    pred[0, 0, 0, 0], pred[0, 0, 2, 1] = 2.0, -1.0
    loss, _ = train.euclidean_loss(pred, [t])
    assert loss == pytest.approx(2.5)


def test_loss_batch_normalisation():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((3, 1, 2, 4))
    targets = list(rng.standard_normal((3, 2, 4)))
    loss, grad = train.euclidean_loss(pred, targets)
    diff = pred[:, 0] - np.stack(targets)
    assert loss == pytest.approx((diff ** 2).sum() / 6)
    np.testing.assert_allclose(grad[:, 0], diff / 3)


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(2)
    pred = rng.standard_normal((2, 1, 3, 4))
    targets = list(rng.standard_normal((2, 3, 4)))
    _, grad = train.euclidean_loss(pred, targets)
    for idx in np.ndindex(pred.shape):
        num = central_diff(lambda: train.euclidean_loss(pred, targets)[0], pred, idx)
        assert rel_err(grad[idx], num) < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        train.euclidean_loss(np.zeros((1, 1, 3, 3)), [np.zeros((3, 4))])
    with pytest.raises(ValueError):
        train.euclidean_loss(np.zeros((2, 1, 3, 3)), [np.zeros((3, 3))])


# --- augmentation ------------------------------------------------------------------

def test_nine_patches_count_and_size():
    img = np.random.default_rng(3).random((1, 3, 64, 64))
    patches = train.augment_nine_patches(img, np.zeros((0, 2)), seed=0)
    assert len(patches) == 18
    assert all(p.image.shape == (1, 3, 32, 32) for p in patches)
    assert sum(p.mirrored for p in patches) == 9


def test_quarters_tile_image():
    img = np.random.default_rng(4).random((1, 3, 40, 56))
    p = train.augment_nine_patches(img, np.zeros((0, 2)), seed=1)
    top = np.concatenate([p[0].image, p[1].image], axis=-1)
    bottom = np.concatenate([p[2].image, p[3].image], axis=-1)
    np.testing.assert_array_equal(np.concatenate([top, bottom], axis=-2), img)


def test_same_seed_same_offsets():
    assert train.patch_origins(64, 48, 7) == train.patch_origins(64, 48, 7)
    assert train.patch_origins(64, 48, 7)[4:] != train.patch_origins(64, 48, 8)[4:]
    for y0, x0 in train.patch_origins(64, 48, 7):
        assert 0 <= y0 <= 32 and 0 <= x0 <= 24


def test_points_follow_patches():
    img = np.zeros((1, 3, 64, 64))
    pts = np.array([[5.0, 6.0], [40.5, 10.0], [33.0, 50.0]])
    p = train.augment_nine_patches(img, pts, seed=0)
    np.testing.assert_array_equal(p[0].points, [[5.0, 6.0]])
    np.testing.assert_array_equal(p[1].points, [[8.5, 10.0]])
    np.testing.assert_array_equal(p[3].points, [[1.0, 18.0]])
    assert len(p[2].points) == 0
    # mirrored quarter 1: x -> (32 - 1) - x
    np.testing.assert_array_equal(p[10].points, [[22.5, 10.0]])


def test_centre_head():
    # the geometric centre of a 64x64 grid with pixel centres at integers is (31.5, 31.5)
    img = np.zeros((1, 3, 64, 64))
    pts = np.array([[31.5, 31.5]])
    density = generate_density_map(64, 64, pts, Fixed(2.0))
    quarters = train.augment_nine_patches(img, pts, seed=0, density=density)[:4]
    # the point itself lands in exactly one quarter (half-open ownership)
    assert [len(q.points) for q in quarters] == [1, 0, 0, 0]
    # its mass sits in the touching corner of every quarter, split evenly
    corners = [quarters[0].density[-8:, -8:], quarters[1].density[-8:, :8],
               quarters[2].density[:8, -8:], quarters[3].density[:8, :8]]
    np.testing.assert_allclose([c.sum() for c in corners], 0.25, atol=1e-9)


def test_mirror_is_involution():
    img = np.random.default_rng(5).random((1, 3, 20, 30))
    pts = np.random.default_rng(6).uniform(0, 20, size=(7, 2))
    dens = np.random.default_rng(7).random((20, 30))
    p = train.crop_patch(img, pts, 0, 0, 20, 30, dens)
    back = train.mirror_patch(train.mirror_patch(p))
    np.testing.assert_array_equal(back.image, p.image)
    np.testing.assert_array_equal(back.points, p.points)
    np.testing.assert_array_equal(back.density, p.density)


def test_augment_rejects_tiny_image():
    with pytest.raises(ValueError):
        train.augment_nine_patches(np.zeros((1, 3, 1, 8)), np.zeros((0, 2)), 0)


def test_samples_from_scene_preserve_density_crop():
    img, pts = generate_synthetic_scene(SyntheticSceneSpec(64, 64, (6, 6), (2, 3), 11))
    density = generate_density_map(64, 64, pts, Fixed(3.0))
    samples = train.samples_from_scene(img, pts, density, seed=0, factor=8)
    assert len(samples) == 18
    assert all(s.image.shape == (1, 3, 32, 32) and s.target.shape == (4, 4) for s in samples)
    quarter_mass = sum(s.target.sum() for s in samples[:4])
    assert quarter_mass == pytest.approx(density.sum(), abs=1e-9)


# --- SGD ----------------------------------------------------------------------------------

def scalar_store(v):
    return ParamStore([ConvWeights(np.array([[[[v]]]], dtype=np.float64), np.zeros(1))])


def test_sgd_zero_grad_and_zero_lr():
    params = model.init_weights(TINY, 0)
    zero = ParamStore([ConvWeights(np.zeros_like(w.kernel), np.zeros_like(w.bias)) for w in params.layers])
    same = train.sgd_step(params, zero, 0.1)
    ones = ParamStore([ConvWeights(np.ones_like(w.kernel), np.ones_like(w.bias)) for w in params.layers])
    same2 = train.sgd_step(params, ones, 0.0)
    for a, b, c in zip(params.layers, same.layers, same2.layers):
        np.testing.assert_array_equal(a.kernel, b.kernel)
        np.testing.assert_array_equal(a.kernel, c.kernel)


def test_sgd_quadratic_sequence():
    # f(theta) = theta^2 / 2  =>  theta_t = theta_0 * (1 - lr)^t
    lr, theta0 = 0.1, 3.0
    params = scalar_store(theta0)
    for t in range(1, 51):
        theta = params.layers[0].kernel[0, 0, 0, 0]
        params = train.sgd_step(params, scalar_store(theta), lr)
        assert abs(params.layers[0].kernel[0, 0, 0, 0] - theta0 * (1 - lr) ** t) < 1e-12


def test_sgd_non_finite():
    with pytest.raises(DivergenceError):
        train.sgd_step(scalar_store(1.0), scalar_store(np.nan), 0.1)


def test_one_step_decreases_sample_loss():
    sample = tiny_dataset(1)[0]
    params = model.init_weights(TINY, 1, std=0.3)
    out, tape = model.forward(TINY, params, sample.image, keep_intermediates=True)
    before, grad = train.euclidean_loss(out, [sample.target])
    updated = train.sgd_step(params, model.backward(tape, grad), 1e-2)
    after, _ = train.euclidean_loss(model.forward(TINY, updated, sample.image)[0], [sample.target])
    assert after < before


# --- loop -------------------------------------------------------------------------------

def test_zero_epochs():
    params = model.init_weights(TINY, 0)
    result = train.train_loop(TINY, train.TrainConfig(epochs=0, seed=0), tiny_dataset(), params)
    assert result.losses == []
    for a, b in zip(params.layers, result.params.layers):
        np.testing.assert_array_equal(a.kernel, b.kernel)


def test_loop_deterministic():
    tc = train.TrainConfig(epochs=3, learning_rate=1e-2, seed=5)
    data = tiny_dataset(4)
    a = train.train_loop(TINY, tc, data)
    b = train.train_loop(TINY, tc, data)
    assert a.losses == b.losses and len(a.losses) == 3
    for wa, wb in zip(a.params.layers, b.params.layers):
        assert wa.kernel.tobytes() == wb.kernel.tobytes()


def test_loop_batches():
    tc = train.TrainConfig(epochs=2, learning_rate=1e-2, batch_size=2, seed=5)
    result = train.train_loop(TINY, tc, tiny_dataset(3))
    assert len(result.losses) == 2 and all(np.isfinite(result.losses))


def test_loop_checkpoints(tmp_path):
    tc = train.TrainConfig(epochs=4, learning_rate=1e-2, seed=1, checkpoint_every=2)
    params, losses = train.train_loop(TINY, tc, tiny_dataset(), checkpoint_prefix=tmp_path / "run")
    lines = (tmp_path / "run.log").read_text().splitlines()
    assert [line.split("\t")[0] for line in lines] == ["1", "2", "3", "4"]
    assert [float(line.split("\t")[1]) for line in lines] == losses
    assert sorted(p.name for p in tmp_path.glob("*.csrw")) == ["run.epoch0002.csrw", "run.epoch0004.csrw"]
    final = model.load_weights(tmp_path / "run.epoch0004.csrw", TINY)
    assert final.layers[0].kernel.tobytes() == params.layers[0].kernel.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_loop_divergence_reports_epoch():
    tc = train.TrainConfig(epochs=50, learning_rate=1e6, seed=0)
    with pytest.raises(DivergenceError, match="epoch"):
        train.train_loop(TINY, tc, tiny_dataset(), model.init_weights(TINY, 0, std=0.5))


def test_train_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(epochs=1, learning_rate=0)
    with pytest.raises(ValueError):
        train.TrainConfig(epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        train.train_loop(TINY, train.TrainConfig(epochs=1), [])
