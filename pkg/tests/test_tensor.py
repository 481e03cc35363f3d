import numpy as np
import pytest

from qtk import FormatError, ShapeError, Tensor, load_qtn, save_qtn, tensor
from qtk.tensor import add, avgpool2d, conv2d, flatten, matmul, mean, relu, std, tmax, tmin


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for of in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ic, i * stride + u, j * stride + v] * w[of, ic, u, v]
                    out[b, of, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = tensor([[1.0, 0.0], [0.0, 1.0]])
        b = tensor([[3.0, 4.0], [5.0, 6.0]])
        assert matmul(a, b).tolist() == [[3.0, 4.0], [5.0, 6.0]]

    def test_hand_computed(self):
        assert matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - naive_matmul(a, b))) <= 1e-12

    def test_randomized_shapes_match_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            got = matmul(Tensor(a), Tensor(b)).data
            assert np.max(np.abs(got - naive_matmul(a, b))) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(tensor([[1.0, 2.0]]), tensor([[1.0, 2.0]]))


class TestConv2d:
    def test_one_by_one_kernel_scales(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 1, 3, 3)))
        w = tensor(np.full((1, 1, 1, 1), 2.0))
        got = conv2d(x, w, stride=1, pad=0)
        assert np.array_equal(got.data, 2.0 * x.data)

    def test_all_ones_sums(self):
        x = tensor(np.ones((1, 1, 3, 3)))
        w = tensor(np.ones((1, 1, 3, 3)))
        assert conv2d(x, w).data.reshape(-1).tolist() == [9.0]

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(3)
        for stride, pad in ((1, 0), (1, 1), (2, 1), (2, 0)):
            x = rng.normal(size=(2, 3, 6, 6))
            w = rng.normal(size=(4, 3, 3, 3))
            if (6 + 2 * pad - 3) % stride:
                continue
            got = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
            assert np.max(np.abs(got - naive_conv2d(x, w, stride, pad))) <= 1e-12

    def test_non_integral_output_rejected(self):
        x = tensor(np.ones((1, 1, 5, 5)))
        w = tensor(np.ones((1, 1, 2, 2)))
        with pytest.raises(ShapeError):
            conv2d(x, w, stride=2, pad=0)

    def test_kernel_does_not_fit(self):
        with pytest.raises(ShapeError):
            conv2d(tensor(np.ones((1, 1, 2, 2))), tensor(np.ones((1, 1, 3, 3))))


class TestElementwiseAndReductions:
    def test_relu(self):
        assert relu(tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]

    def test_relu_idempotent(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(50,)))
        once = relu(x)
        assert relu(once) == once

    def test_mean_and_std(self):
        assert mean(tensor([1.0, 2.0, 3.0])) == 2.0
        assert std(tensor([5.0, 5.0, 5.0])) == 0.0
        assert tmin(tensor([3.0, -1.0])) == -1.0
        assert tmax(tensor([3.0, -1.0])) == 3.0

    def test_add_shape_strict(self):
        with pytest.raises(ShapeError):
            add(tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))

    def test_avgpool(self):
        x = tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        got = avgpool2d(x, 2)
        assert got.data.reshape(-1).tolist() == [2.5, 4.5, 10.5, 12.5]

    def test_avgpool_must_tile(self):
        with pytest.raises(ShapeError):
            avgpool2d(tensor(np.ones((1, 1, 5, 5))), 2)

    def test_flatten(self):
        x = tensor(np.arange(12.0).reshape(2, 3, 2))
        assert flatten(x).shape == (2, 6)


class TestTensorType:
    def test_rejects_non_finite(self):
        with pytest.raises(FormatError):
            tensor([1.0, float("nan")])
        with pytest.raises(FormatError):
            tensor([float("inf")])

    def test_immutable(self):
        x = tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0

    def test_deterministic_reevaluation(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(16, 16)))
        b = Tensor(rng.normal(size=(16, 16)))
        first = matmul(a, b).data
        second = matmul(a, b).data
        assert np.array_equal(first, second)


class TestQtnFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64))
        path = tmp_path / "t.qtn"
        save_qtn(path, x)
        back = load_qtn(path)
        assert back.shape == (3, 4, 5)
        assert np.array_equal(back.data, x.data)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.qtn"
        save_qtn(path, tensor([[1.0, 2.0], [3.0, 4.0]]))
        blob = path.read_bytes()
        assert blob[:4] == b"QTNS"
        assert blob[4] == 1  # version
        assert blob[5] == 2  # rank
        assert int.from_bytes(blob[6:10], "little") == 2
        assert int.from_bytes(blob[10:14], "little") == 2
        assert len(blob) == 14 + 4 * 4

    def test_f32_narrowing_on_save(self, tmp_path):
        path = tmp_path / "t.qtn"
        save_qtn(path, tensor([0.1]))
        assert load_qtn(path).data[0] == np.float64(np.float32(0.1))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.qtn"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(FormatError):
            load_qtn(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.qtn"
        save_qtn(path, tensor([1.0, 2.0, 3.0]))
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            load_qtn(path)

    def test_non_finite_payload_rejected(self, tmp_path):
        import struct

        path = tmp_path / "t.qtn"
        payload = struct.pack("<f", float("nan"))
        path.write_bytes(b"QTNS" + bytes([1, 1]) + struct.pack("<I", 1) + payload)
        with pytest.raises(FormatError):
            load_qtn(path)
