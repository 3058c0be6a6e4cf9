import numpy as np
import pytest

from pivotalign.numerics import Rng, unit_rows
from pivotalign.projector import (
    CheckpointError,
    HeadGradients,
    backward,
    forward,
    init_head,
    load_head,
    save_head,
    trainable_params,
)


def small_head(seed=0, dims=(16, 32, 8)):
    return init_head(*dims, Rng(seed))


def scalar_probe(head, x, probe):
    """phi(theta) = sum(forward(x) * probe); running-stat updates don't affect it."""
    y, _ = forward(head, x)
    return float(np.sum(y * probe))


def fd_check(head, x, probe, step=1e-3, per_tensor_samples=25, seed=0):
    """Central finite differences against the analytic backward pass.

    Returns the max relative error over sampled coordinates of every
    trainable tensor.
    """
    y, cache = forward(head, x)
    grads, _ = backward(head, cache, probe)
    rs = np.random.RandomState(seed)
    worst = 0.0
    for name, arr in trainable_params(head).items():
        analytic = getattr(grads, name).ravel()
        flat = arr.ravel()
        count = min(per_tensor_samples, flat.size)
        for i in rs.choice(flat.size, size=count, replace=False):
            orig = flat[i]
            flat[i] = orig + step
            lp = scalar_probe(head, x, probe)
            flat[i] = orig - step
            lm = scalar_probe(head, x, probe)
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            rel = abs(analytic[i] - fd) / max(1e-8, abs(analytic[i]) + abs(fd))
            worst = max(worst, rel)
    return worst


class TestInit:
    @pytest.mark.parametrize(
        "dims,expected",
        [((512, 1024, 512), 1_052_160), ((768, 1536, 512), 1_971_200)],
    )
    def test_param_count(self, dims, expected):
        head = init_head(*dims, Rng(0))
        assert head.n_params == expected
        total = sum(v.size for v in trainable_params(head).values())
        assert total == expected

    def test_deterministic(self):
        a = init_head(8, 16, 4, Rng(3))
        b = init_head(8, 16, 4, Rng(3))
        for name in trainable_params(a):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_init_ranges_and_defaults(self):
        head = small_head()
        assert np.all(np.abs(head.W1) <= 1.0 / np.sqrt(16))
        assert np.all(np.abs(head.W2) <= 1.0 / np.sqrt(32))
        assert np.all(head.b1 == 0) and np.all(head.b2 == 0)
        assert np.all(head.bn_gamma == 1) and np.all(head.bn_beta == 0)
        assert np.all(head.bn_running_mean == 0) and np.all(head.bn_running_var == 1)
        assert head.mode == "training"

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            init_head(0, 4, 4, Rng(0))


class TestForward:
    def test_outputs_unit_norm(self):
        head = small_head()
        y, _ = forward(head, np.random.RandomState(0).normal(size=(6, 16)))
        assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-6)

    def test_bn_batch_statistics(self):
        # gamma=1, beta=0 at init, so cached xhat is the pre-ReLU activation.
        head = small_head()
        _, cache = forward(head, np.random.RandomState(1).normal(size=(32, 16)))
        assert np.allclose(cache.xhat.mean(axis=0), 0.0, atol=1e-5)
        assert np.allclose(cache.xhat.var(axis=0), 1.0, atol=1e-3)

    def test_training_needs_two_rows(self):
        with pytest.raises(ValueError, match=">= 2"):
            forward(small_head(), np.ones((1, 16)))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            forward(small_head(), np.ones((4, 7)))

    def test_constructed_identity_path(self):
        # W1 embeds the input, W2 extracts it; BN at running stats (0, 1)
        # is a pure rescale that normalization cancels.
        head = init_head(4, 6, 4, Rng(0))
        head.W1 = np.zeros((6, 4), dtype=np.float32)
        head.W1[:4, :4] = np.eye(4)
        head.W2 = np.zeros((4, 6), dtype=np.float32)
        head.W2[:4, :4] = np.eye(4)
        head.mode = "inference"
        x = np.array([[0.5, -2.0, 1.0, -0.25], [2.0, 1.0, -1.0, 3.0]])
        y, _ = forward(head, x)
        want = unit_rows(np.maximum(x, 0.0))
        assert np.allclose(y, want, atol=1e-6)

    def test_running_stats_update_only_in_training(self):
        head = small_head()
        x = np.random.RandomState(2).normal(size=(8, 16))
        before = head.bn_running_mean.copy()
        forward(head, x)
        assert not np.array_equal(head.bn_running_mean, before)
        head.mode = "inference"
        frozen = head.bn_running_mean.copy()
        forward(head, x)
        assert np.array_equal(head.bn_running_mean, frozen)

    def test_inference_is_pure(self):
        head = small_head()
        head.mode = "inference"
        x = np.random.RandomState(3).normal(size=(5, 16))
        y1, _ = forward(head, x)
        y2, _ = forward(head, x)
        assert np.array_equal(y1, y2)


class TestBackward:
    def test_finite_differences(self):
        rs = np.random.RandomState(7)
        head = small_head(seed=5)
        x = rs.normal(size=(6, 16))
        probe = rs.normal(size=(6, 8))
        assert fd_check(head, x, probe) < 1e-4

    def test_zero_upstream_zero_grads(self):
        head = small_head()
        x = np.random.RandomState(0).normal(size=(4, 16))
        y, cache = forward(head, x)
        grads, dx = backward(head, cache, np.zeros_like(y))
        for name in trainable_params(head):
            assert np.all(getattr(grads, name) == 0.0)
        assert np.all(dx == 0.0)

    def test_duplicated_rows_double_linear_grads(self):
        head = small_head(seed=9)
        rs = np.random.RandomState(4)
        x = rs.normal(size=(4, 16))
        probe = rs.normal(size=(4, 8))
        _, cache1 = forward(head, x)
        g1, _ = backward(head, cache1, probe)
        _, cache2 = forward(head, np.vstack([x, x]))
        g2, _ = backward(head, cache2, np.vstack([probe, probe]))
        # duplicating the batch duplicates every addend in the linear-layer sums
        for name in ("W1", "b1", "W2", "b2"):
            a = getattr(g2, name)
            b = 2.0 * getattr(g1, name)
            assert np.allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_inference_cache_rejected(self):
        head = small_head()
        head.mode = "inference"
        y, cache = forward(head, np.ones((3, 16)))
        with pytest.raises(ValueError, match="training-mode"):
            backward(head, cache, np.zeros_like(y))

    def test_gradients_accumulate(self):
        g = HeadGradients(*[np.ones((2, 2))] * 2, *[np.ones((2, 2))] * 4)
        summed = g.add(g)
        assert np.all(summed.W1 == 2.0)


class TestCheckpoint:
    def test_roundtrip_field_identical(self, tmp_path):
        head = small_head(seed=11)
        forward(head, np.random.RandomState(0).normal(size=(8, 16)))  # move running stats
        head.mode = "inference"
        path = tmp_path / "h.upc"
        save_head(head, path)
        back = load_head(path)
        assert back.mode == "inference"
        assert (back.in_dim, back.hidden_dim, back.out_dim) == (16, 32, 8)
        for name in ("W1", "b1", "bn_gamma", "bn_beta", "bn_running_mean",
                     "bn_running_var", "W2", "b2"):
            assert np.array_equal(getattr(back, name), getattr(head, name)), name

    def test_save_load_save_bytes_stable(self, tmp_path):
        head = small_head(seed=2)
        p1, p2 = tmp_path / "a.upc", tmp_path / "b.upc"
        save_head(head, p1)
        save_head(load_head(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "x.upc"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="not a UPC1 file"):
            load_head(path)

    def test_shape_mismatch_names_dims(self, tmp_path):
        path = tmp_path / "c.upc"
        save_head(init_head(512, 1024, 512, Rng(0)), path)
        with pytest.raises(CheckpointError, match=r"expected \(768, 1536, 512\).*\(512, 1024, 512\)"):
            load_head(path, expect_dims=(768, 1536, 512))

    def test_truncated_blob(self, tmp_path):
        path = tmp_path / "t.upc"
        save_head(small_head(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="corrupt checkpoint"):
            load_head(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.upc"
        save_head(small_head(), path)
        raw = bytearray(path.read_bytes())
        body = raw[8:].replace(b'"version": 1', b'"version": 9', 1)
        path.write_bytes(raw[:8] + body)
        with pytest.raises(CheckpointError, match="unsupported version"):
            load_head(path)
