import pytest
from hypothesis import given
from hypothesis import strategies as st

from st3.schedule import SparsitySchedule, lrr_cycle_sparsity, sparsity_at


def test_cubic_endpoints():
    s = SparsitySchedule("cubic", 0.8, 10, 30)
    assert sparsity_at(s, 0) == 0.0
    assert sparsity_at(s, 10) == 0.0
    assert sparsity_at(s, 30) == 0.8
    assert sparsity_at(s, 1000) == 0.8


def test_cubic_midpoint():
    s = SparsitySchedule("cubic", 0.8, 10, 30)
    assert sparsity_at(s, 20) == pytest.approx(0.8 * (1 - 0.5 ** 3))
    assert sparsity_at(s, 20) == pytest.approx(0.7)


def test_constant():
    s = SparsitySchedule("constant", 0.6, 0, 1)
    assert all(sparsity_at(s, t) == 0.6 for t in (0, 5, 500))


def test_lrr_cycles():
    s = SparsitySchedule("lrr_cycle", 0.0, prune_fraction=0.2)
    got = [sparsity_at(s, 0, cycle=c) for c in (1, 2, 3)]
    assert got == pytest.approx([0.2, 0.36, 0.488])
    assert lrr_cycle_sparsity(0, 0.2) == 0.0


@given(st.floats(0, 0.99), st.integers(0, 50), st.integers(1, 100), st.integers(0, 200), st.integers(0, 200))
def test_cubic_non_decreasing_and_bounded(s_final, start, span, t1, t2):
    s = SparsitySchedule("cubic", s_final, start, start + span)
    a, b = sorted((t1, t2))
    assert 0.0 <= sparsity_at(s, a) <= sparsity_at(s, b) <= s_final + 1e-15


@given(st.floats(0.01, 0.99), st.integers(1, 20))
def test_lrr_non_decreasing(p, c):
    assert lrr_cycle_sparsity(c, p) >= lrr_cycle_sparsity(c - 1, p)


def test_validation():
    with pytest.raises(ValueError):
        SparsitySchedule("cubic", 0.5, 10, 10)
    with pytest.raises(ValueError):
        SparsitySchedule("cubic", 1.0, 0, 10)
    with pytest.raises(ValueError):
        SparsitySchedule("linear")
    with pytest.raises(ValueError):
        sparsity_at(SparsitySchedule(), -1)
