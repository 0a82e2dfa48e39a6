import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from mpacodec.entropy import (HEADER_SIZE, SIGMA_FLOOR, TOTAL, CdfTable, Container, DecodeError,
                              FormatError, build_gaussian_cdf, build_logistic_cdf, quantize_pmf,
                              range_decode, range_encode, read_container, write_container)


def _uniform256():
    freq = quantize_pmf(np.append(np.full(256, 1 / 256), 0.0))
    return CdfTable(0, tuple(np.concatenate([[0], np.cumsum(freq)]).tolist()))


class TestTables:
    def test_unit_gaussian_zero_bin(self):
        t = build_gaussian_cdf(0.0, 1.0)
        f0 = t.frequencies()[0 - t.smin] / TOTAL
        assert f0 == pytest.approx(special.ndtr(0.5) - special.ndtr(-0.5), abs=1e-4)
        assert f0 == pytest.approx(0.3829, abs=1e-4)

    def test_floor_sigma_is_symmetric_with_peak_at_zero(self):
        t = build_gaussian_cdf(0.0, SIGMA_FLOOR)
        f = t.frequencies()[:-1]
        assert t.smin == -t.smax
        assert np.argmax(f) + t.smin == 0
        np.testing.assert_array_equal(f, f[::-1])

    @given(st.floats(-50, 50), st.floats(SIGMA_FLOOR, 40))
    @settings(max_examples=60, deadline=None)
    def test_gaussian_invariants(self, mu, sigma):
        t = build_gaussian_cdf(mu, sigma)
        cdf = np.asarray(t.cdf)
        assert cdf[0] == 0 and cdf[-1] == TOTAL
        assert (np.diff(cdf) >= 1).all()
        assert t.smin <= np.floor(mu) <= t.smax

    def test_deterministic(self):
        assert build_gaussian_cdf(0.37, 2.2) == build_gaussian_cdf(0.37, 2.2)

    def test_logistic_totals(self):
        t = build_logistic_cdf(1.3, 0.8)
        assert t.cdf[-1] == TOTAL and (t.frequencies() >= 1).all()

    def test_below_floor(self):
        with pytest.raises(ValueError):
            build_gaussian_cdf(0.0, 0.05)


def _random_case(seed, n):
    rng = np.random.default_rng(seed)
    mu = rng.normal(0, 5, n)
    sigma = rng.uniform(SIGMA_FLOOR, 8, n)
    tables = [build_gaussian_cdf(m, s) for m, s in zip(mu, sigma)]
    sym = np.round(mu + sigma * rng.standard_cauchy(n) * 0.5).astype(int)
    return sym.tolist(), tables


class TestRangeCoder:
    def test_empty(self):
        data = range_encode([], [])
        assert len(data) == 5
        assert range_decode(data, []) == []

    def test_random_roundtrip(self):
        sym, tables = _random_case(0, 10_000)
        data = range_encode(sym, tables)
        assert range_decode(data, tables) == sym
        assert range_encode(sym, tables) == data

    def test_escapes_far_outside_table(self):
        t = build_gaussian_cdf(0.0, 1.0)
        sym = [0, 10**6, -(10**6), t.smax + 1, t.smin - 1, 3]
        assert range_decode(range_encode(sym, [t] * 6), [t] * 6) == sym

    def test_uniform_256_is_eight_bits(self):
        t = _uniform256()
        sym = np.random.default_rng(1).integers(0, 256, 10_000).tolist()
        data = range_encode(sym, [t] * len(sym))
        assert abs(len(data) - 10_000) <= 100
        assert range_decode(data, [t] * len(sym)) == sym

    @given(st.lists(st.integers(-40, 40), max_size=60), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_property(self, sym, seed):
        rng = np.random.default_rng(seed)
        tables = [build_gaussian_cdf(rng.normal(0, 3), rng.uniform(SIGMA_FLOOR, 4)) for _ in sym]
        assert range_decode(range_encode(sym, tables), tables) == sym

    def test_corruption_is_reported(self):
        sym, tables = _random_case(2, 500)
        data = bytearray(range_encode(sym, tables))
        failures = 0
        for i in range(0, len(data), max(1, len(data) // 20)):
            bad = bytearray(data)
            bad[i] ^= 0xA5
            try:
                out = range_decode(bytes(bad), tables)
            except DecodeError as e:
                failures += 1
                assert "byte" in str(e) or "position" in str(e) or "symbol" in str(e)
            else:
                assert out != sym
        truncated = bytes(data[: len(data) // 2])
        with pytest.raises(DecodeError):
            range_decode(truncated, tables)


class TestContainer:
    def test_header_size(self):
        data = write_container(Container(2.0, 5, 7, b"", b""))
        assert HEADER_SIZE == 23 == len(data)

    def test_fixed_point_quality(self):
        data = write_container(Container(4.5, 64, 48, b"ab", b"cde"))
        assert int.from_bytes(data[5:7], "little") == 1152
        c = read_container(data)
        assert c == Container(4.5, 64, 48, b"ab", b"cde")
        assert len(data) == 23 + 5

    @pytest.mark.parametrize("cut", [0, 3, 10, 22, 24, 27])
    def test_truncated(self, cut):
        data = write_container(Container(1.0, 16, 16, b"abcd", b"xyz"))
        with pytest.raises(FormatError):
            read_container(data[:cut])

    def test_bad_magic_and_version(self):
        data = bytearray(write_container(Container(1.0, 16, 16, b"", b"")))
        with pytest.raises(FormatError, match="magic"):
            read_container(b"JPEG" + bytes(data[4:]))
        data[4] = 9
        with pytest.raises(FormatError, match="version"):
            read_container(bytes(data))

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            read_container(write_container(Container(1.0, 16, 16, b"", b"")) + b"\0")

    @given(st.integers(0, 2047), st.integers(1, 2**32 - 1), st.integers(1, 2**32 - 1),
           st.binary(max_size=40), st.binary(max_size=40))
    def test_roundtrip_property(self, qfix, w, h, zb, yb):
        c = Container(qfix / 256, w, h, zb, yb)
        assert read_container(write_container(c)) == c
