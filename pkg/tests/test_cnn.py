import math

import numpy as np
import pytest

from defencing import cnn
from defencing.cnn import (
    CnnArch,
    CnnModel,
    TrainConfig,
    forward,
    forward_batch,
    gradient_check,
    init_model,
    load_model,
    loss,
    loss_and_gradients,
    model_with_vector,
    parameters_to_vector,
    save_model,
    train,
)
from defencing.image import Patch
from defencing.synth import TexelDataset, augment, build_texel_dataset, random_scene


def random_patch(seed=0):
    return Patch(np.random.default_rng(seed).random((1, 32, 32)))


def zero_model(arch=CnnArch()):
    return model_with_vector(init_model(0, arch), np.zeros(arch.parameter_count))


@pytest.fixture(scope="module")
def tiny_dataset():
    """Small but learnable texel dataset, shared by the training tests."""
    scenes = []
    for s in range(2):
        _, fenced, layer = random_scene(128, 128, seed=70 + s)
        scenes.append((fenced, layer))
    return augment(build_texel_dataset(scenes, n_pos=10, n_neg=10, seed=1))


class TestInit:
    def test_deterministic(self):
        a, b = init_model(4), init_model(4)
        assert np.array_equal(parameters_to_vector(a), parameters_to_vector(b))
        assert not np.array_equal(parameters_to_vector(a), parameters_to_vector(init_model(5)))

    def test_parameter_count(self):
        model = init_model(0)
        assert model.arch.parameter_count == 2570  # 156 + 1812 + 602
        assert parameters_to_vector(model).size == 2570

    def test_biases_zero(self):
        model = init_model(9)
        assert np.all(model.b1 == 0) and np.all(model.b2 == 0) and np.all(model.c == 0)

    def test_kernel_range_matches_fanin_fanout(self):
        model = init_model(3)
        bound1 = math.sqrt(6 / (25 + 6 * 25))
        assert np.abs(model.k1).max() <= bound1
        bound2 = math.sqrt(6 / (6 * 25 + 12 * 25))
        assert np.abs(model.k2).max() <= bound2

    def test_invalid_arch(self):
        with pytest.raises(ValueError):
            CnnArch(input_side=33)


def naive_forward(model, patch2d):
    """Scalar loop-nest re-implementation of the forward pass."""

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    arch = model.arch
    k = arch.kernel
    c1 = arch.conv1_out
    a1 = [[[0.0] * c1 for _ in range(c1)] for _ in range(arch.conv1_maps)]
    for m in range(arch.conv1_maps):
        for i in range(c1):
            for j in range(c1):
                z = model.b1[m]
                for u in range(k):
                    for v in range(k):
                        z += model.k1[m, 0, u, v] * patch2d[i + u][j + v]
                a1[m][i][j] = sig(z)
    p1s = c1 // arch.pool
    p1 = [[[0.0] * p1s for _ in range(p1s)] for _ in range(arch.conv1_maps)]
    for m in range(arch.conv1_maps):
        for i in range(p1s):
            for j in range(p1s):
                p1[m][i][j] = (
                    a1[m][2 * i][2 * j] + a1[m][2 * i][2 * j + 1]
                    + a1[m][2 * i + 1][2 * j] + a1[m][2 * i + 1][2 * j + 1]
                ) / 4.0
    c2 = arch.conv2_out
    a2 = [[[0.0] * c2 for _ in range(c2)] for _ in range(arch.conv2_maps)]
    for o in range(arch.conv2_maps):
        for i in range(c2):
            for j in range(c2):
                z = model.b2[o]
                for m in range(arch.conv1_maps):
                    for u in range(k):
                        for v in range(k):
                            z += model.k2[o, m, u, v] * p1[m][i + u][j + v]
                a2[o][i][j] = sig(z)
    p2s = c2 // arch.pool
    flat = []
    for o in range(arch.conv2_maps):
        for i in range(p2s):
            for j in range(p2s):
                flat.append(
                    (
                        a2[o][2 * i][2 * j] + a2[o][2 * i][2 * j + 1]
                        + a2[o][2 * i + 1][2 * j] + a2[o][2 * i + 1][2 * j + 1]
                    ) / 4.0
                )
    out = []
    for q in range(arch.outputs):
        z = model.c[q]
        for n, f in enumerate(flat):
            z += model.w[q, n] * f
        out.append(sig(z))
    return out


class TestForward:
    def test_zero_weights_give_half(self):
        scores = forward(zero_model(), random_patch(1))
        assert scores == (0.5, 0.5)

    def test_outputs_in_open_unit_interval(self):
        model = init_model(2)
        for seed in range(5):
            sj, sn = forward(model, random_patch(seed))
            assert 0.0 < sj < 1.0 and 0.0 < sn < 1.0

    def test_wrong_shape_rejected(self):
        model = init_model(0)
        with pytest.raises(ValueError):
            forward(model, Patch(np.zeros((1, 16, 16))))
        with pytest.raises(ValueError):
            forward(model, Patch(np.zeros((3, 32, 32))))

    def test_matches_naive_loop_nest(self):
        model = init_model(11)
        patch = random_patch(13)
        expected = naive_forward(model, patch.planes[0].tolist())
        got = forward(model, patch)
        assert abs(got[0] - expected[0]) < 1e-10
        assert abs(got[1] - expected[1]) < 1e-10

    def test_batch_matches_single(self):
        # BLAS blocking differs with batch size, so agreement is to rounding only
        model = init_model(3)
        patches = [random_patch(s) for s in range(4)]
        batch = forward_batch(model, np.stack([p.planes[0] for p in patches]))
        for i, p in enumerate(patches):
            single = forward(model, p)
            assert single[0] == pytest.approx(batch[i, 0], rel=1e-12)
            assert single[1] == pytest.approx(batch[i, 1], rel=1e-12)


class TestGradients:
    def test_gradient_check_passes(self):
        model = init_model(7)
        err = gradient_check(model, (random_patch(5), 1), epsilon=1e-4)
        assert err < 1e-3

    def test_gradient_check_zero_model(self):
        err = gradient_check(zero_model(), (random_patch(2), 0), epsilon=1e-4)
        assert err < 1e-3

    def test_epsilon_bounds(self):
        model = init_model(0)
        with pytest.raises(ValueError):
            gradient_check(model, (random_patch(0), 1), epsilon=1e-2)

    def test_corrupted_conv2_gradient_detected(self):
        # mutation test: doubling the conv2 kernel gradient must blow the check
        model = init_model(7)
        patch, label = random_patch(5), 1
        x = patch.planes
        t = np.array([[1.0, 0.0]])
        _, grads = loss_and_gradients(model, x, t)
        grads["k2"] = grads["k2"] * 2.0
        analytic = np.concatenate([grads[n].ravel() for n in ("k1", "b1", "k2", "b2", "w", "c")])

        vec = parameters_to_vector(model)
        eps = 1e-4
        rng = np.random.default_rng(0)
        # check within the conv2 kernel block only
        k2_lo = model.k1.size + model.b1.size
        idx = rng.choice(model.k2.size, size=50, replace=False) + k2_lo
        worst = 0.0
        for i in idx:
            bumped = vec.copy()
            bumped[i] += eps
            lp = loss(model_with_vector(model, bumped), x, t)
            bumped[i] = vec[i] - eps
            lm = loss(model_with_vector(model, bumped), x, t)
            numeric = (lp - lm) / (2 * eps)
            worst = max(worst, abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8))
        assert worst > 0.1

    def test_vector_roundtrip(self):
        model = init_model(1)
        vec = parameters_to_vector(model)
        back = model_with_vector(model, vec)
        assert np.array_equal(parameters_to_vector(back), vec)
        with pytest.raises(ValueError):
            model_with_vector(model, vec[:-1])


class TestTrain:
    def test_loss_decreases(self, tiny_dataset):
        model = init_model(0)
        _, report = train(model, tiny_dataset, TrainConfig(epochs=50, batch_size=50, seed=0))
        assert report.final_mse < report.per_epoch_mse[0]
        assert len(report.per_epoch_mse) == 50

    def test_zero_learning_rate_is_inert(self, tiny_dataset):
        model = init_model(3)
        trained, report = train(model, tiny_dataset, TrainConfig(epochs=3, learning_rate=0.0, seed=0))
        assert np.array_equal(parameters_to_vector(trained), parameters_to_vector(model))
        # flat curve; reshuffled batch partitions only reorder the summation
        assert report.per_epoch_mse[1] == pytest.approx(report.per_epoch_mse[0], rel=1e-12)
        assert report.per_epoch_mse[2] == pytest.approx(report.per_epoch_mse[0], rel=1e-12)

    def test_reproducible(self, tiny_dataset):
        a, _ = train(init_model(1), tiny_dataset, TrainConfig(epochs=3, seed=5))
        b, _ = train(init_model(1), tiny_dataset, TrainConfig(epochs=3, seed=5))
        assert np.array_equal(parameters_to_vector(a), parameters_to_vector(b))

    def test_empty_dataset_errors(self):
        with pytest.raises(ValueError, match="empty"):
            train(init_model(0), TexelDataset([]), TrainConfig(epochs=1))

    def test_divergence_guard_on_escalating_loss(self, tiny_dataset, monkeypatch):
        # Real sigmoid+MSE dynamics keep the per-sample loss in [0, 1] and
        # saturate toward correct labels, so the 10x guard is exercised with
        # scripted batch losses instead.
        small = TexelDataset(tiny_dataset.samples[:10])
        model = init_model(0)
        zero_grads = {n: np.zeros_like(getattr(model, n)) for n in ("k1", "b1", "k2", "b2", "w", "c")}
        losses = iter([0.01, 0.5])
        monkeypatch.setattr(cnn, "loss_and_gradients", lambda m, x, t: (next(losses), zero_grads))
        with pytest.raises(RuntimeError, match="diverged.*10x"):
            train(model, small, TrainConfig(epochs=2, seed=0))

    def test_divergence_guard_on_nonfinite_loss(self, tiny_dataset, monkeypatch):
        small = TexelDataset(tiny_dataset.samples[:10])
        model = init_model(0)
        zero_grads = {n: np.zeros_like(getattr(model, n)) for n in ("k1", "b1", "k2", "b2", "w", "c")}
        monkeypatch.setattr(cnn, "loss_and_gradients", lambda m, x, t: (float("nan"), zero_grads))
        with pytest.raises(RuntimeError, match="non-finite"):
            train(model, small, TrainConfig(epochs=1, seed=0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)


class TestSerialization:
    def test_roundtrip_bit_identical_forward(self, tmp_path):
        model = init_model(21)
        path = tmp_path / "model.txt"
        save_model(model, path)
        back = load_model(path)
        assert np.array_equal(parameters_to_vector(back), parameters_to_vector(model))
        for seed in range(100):
            patch = random_patch(seed)
            assert forward(model, patch) == forward(back, patch)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("DEFENCE-CNN v2\narch input=32 conv1=6 conv2=12 kernel=5 pool=2 outputs=2\n")
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_truncated_weights(self, tmp_path):
        model = init_model(0)
        path = tmp_path / "model.txt"
        save_model(model, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-10]) + "\n")
        with pytest.raises(ValueError, match="expected 2570 weights"):
            load_model(path)

    def test_malformed_weight(self, tmp_path):
        model = init_model(0)
        path = tmp_path / "model.txt"
        save_model(model, path)
        text = path.read_text().splitlines()
        text[5] = "not-a-number"
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(ValueError, match="non-numeric"):
            load_model(path)

    def test_nondefault_arch_roundtrip(self, tmp_path):
        arch = CnnArch(conv1_maps=4, conv2_maps=8)
        model = init_model(2, arch)
        path = tmp_path / "m.txt"
        save_model(model, path)
        back = load_model(path)
        assert back.arch == arch
