import numpy as np
import pytest

from qtk import (
    QtkError,
    QuantParams,
    Tensor,
    clipping_of,
    lp_error,
    params_from_clipping,
    quantize,
)


def scalar_quantize(v: float, q: QuantParams) -> float:
    """Exhaustive scalar oracle: the clamp/round formula applied one value
    at a time with Python floats."""
    k = np.rint(v / q.delta)
    lo = -(2 ** (q.bits - 1)) if q.signed else 0
    hi = 2 ** (q.bits - 1) if q.signed else 2**q.bits - 1
    return float(min(max(k, lo), hi) * q.delta)


def random_params(rng) -> QuantParams:
    return QuantParams(
        delta=float(rng.uniform(0.01, 2.0)),
        bits=int(rng.integers(2, 9)),
        signed=bool(rng.integers(0, 2)),
    )


class TestQuantize:
    def test_zero_fixed_point(self):
        for bits in (2, 5, 8):
            for signed in (True, False):
                q = QuantParams(delta=0.37, bits=bits, signed=signed)
                assert quantize(Tensor([0.0]), q).tolist() == [0.0]

    def test_signed_two_bit_example(self):
        q = QuantParams(delta=1.0, bits=2, signed=True)
        got = quantize(Tensor([-5.0, -0.4, 0.6, 5.0]), q)
        assert got.tolist() == [-2.0, 0.0, 1.0, 2.0]

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            q = random_params(rng)
            v = float(rng.normal() * 3)
            assert quantize(Tensor([v]), q).tolist()[0] == scalar_quantize(v, q)

    def test_round_half_to_even(self):
        q = QuantParams(delta=1.0, bits=8, signed=True)
        assert quantize(Tensor([0.5, 1.5, 2.5, -0.5, -1.5]), q).tolist() == [
            0.0, 2.0, 2.0, -0.0, -2.0,
        ]

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            q = random_params(rng)
            x = Tensor(rng.normal(size=37) * 4)
            once = quantize(x, q)
            assert quantize(once, q) == once


class TestClipping:
    def test_signed_clipping_value(self):
        assert clipping_of(QuantParams(delta=0.5, bits=4, signed=True)) == 4.0

    def test_unsigned_from_clipping(self):
        q = params_from_clipping(3.0, bits=2, signed=False)
        assert q.delta == 1.0

    def test_round_trip(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            q = random_params(rng)
            back = params_from_clipping(clipping_of(q), q.bits, q.signed)
            assert abs(back.delta - q.delta) <= 1e-15 * q.delta
            assert (back.bits, back.signed) == (q.bits, q.signed)

    def test_non_positive_clipping_rejected(self):
        with pytest.raises(QtkError):
            params_from_clipping(0.0, 4, True)
        with pytest.raises(QtkError):
            params_from_clipping(-1.0, 4, True)


class TestLpError:
    def test_zero_on_grid(self):
        q = QuantParams(delta=0.25, bits=4, signed=True)
        x = Tensor(np.arange(-8, 9) * 0.25)
        assert lp_error(x, q, 2.0) == 0.0

    def test_single_element(self):
        q = QuantParams(delta=1.0, bits=8, signed=True)
        assert lp_error(Tensor([0.4]), q, 2.0) == pytest.approx(0.4, abs=1e-15)

    def test_direct_sum_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            q = random_params(rng)
            x = rng.normal(size=64) * 2
            got = lp_error(Tensor(x), q, 2.0)
            resid = quantize(Tensor(x), q).data - x
            assert abs(got**2 - np.sum(resid**2)) <= 1e-12

    def test_invalid_p(self):
        q = QuantParams(delta=1.0, bits=4, signed=True)
        with pytest.raises(QtkError):
            lp_error(Tensor([1.0]), q, 0.0)
        with pytest.raises(QtkError):
            lp_error(Tensor([1.0]), q, -1.0)


class TestGridProperties:
    """Randomized property checks; the acceptance suite re-runs these at
    full volume (1000 cases each)."""

    def test_clamp_bounds_exact(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            q = random_params(rng)
            x = Tensor(rng.normal(size=51) * rng.uniform(0.5, 20))
            out = quantize(x, q).data
            c = clipping_of(q)
            if q.signed:
                assert np.all(out >= -c) and np.all(out <= c)
            else:
                assert np.all(out >= 0.0) and np.all(out <= c)

    def test_monotone_in_input(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            q = random_params(rng)
            x = np.sort(rng.normal(size=101) * 5)
            out = quantize(Tensor(x), q).data
            assert np.all(np.diff(out) >= 0.0)

    def test_grid_membership_exact(self):
        rng = np.random.default_rng(16)
        for _ in range(100):
            q = random_params(rng)
            out = quantize(Tensor(rng.normal(size=33) * 3), q).data
            k = np.rint(out / q.delta)
            assert np.array_equal(k * q.delta, out)

    def test_refining_grid_never_hurts_in_range(self):
        # Halving the step while doubling the level count keeps the clipping
        # value fixed and embeds the old grid in the new one, so the L2 error
        # of in-range data cannot increase.
        rng = np.random.default_rng(17)
        for _ in range(50):
            bits = int(rng.integers(2, 8))
            delta = float(rng.uniform(0.05, 1.0))
            coarse = QuantParams(delta=delta, bits=bits, signed=True)
            fine = QuantParams(delta=delta / 2, bits=bits + 1, signed=True)
            assert clipping_of(fine) == clipping_of(coarse)
            c = clipping_of(coarse)
            x = Tensor(rng.uniform(-c, c, size=97))
            assert lp_error(x, fine, 2.0) <= lp_error(x, coarse, 2.0) + 1e-12


class TestParamValidation:
    def test_bits_range(self):
        with pytest.raises(QtkError):
            QuantParams(delta=1.0, bits=1, signed=True)
        with pytest.raises(QtkError):
            QuantParams(delta=1.0, bits=9, signed=True)

    def test_delta_positive(self):
        with pytest.raises(QtkError):
            QuantParams(delta=0.0, bits=4, signed=True)
        with pytest.raises(QtkError):
            QuantParams(delta=-0.1, bits=4, signed=True)
