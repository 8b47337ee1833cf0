import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coreaging.baselines import (
    CoreWorkLedger,
    least_aged_select_core,
    linux_select_core,
    load_weights_csv,
)
from coreaging.policy import ManagedCore


def cores(n, assigned=()):
    return [ManagedCore(core_id=i, assigned_task=(i if i in assigned else None)) for i in range(n)]


# -- linux -------------------------------------------------------------------


def test_linux_single_free_core_is_forced():
    rng = np.random.default_rng(0)
    cs = cores(4, assigned={0, 1, 3})
    assert all(linux_select_core(cs, None, rng) == 2 for _ in range(100))


def test_linux_all_busy_returns_none():
    assert linux_select_core(cores(3, assigned={0, 1, 2}), None, np.random.default_rng(0)) is None


def test_linux_uniform_frequencies():
    rng = np.random.default_rng(1234)
    cs = cores(4)
    counts = Counter(linux_select_core(cs, None, rng) for _ in range(100_000))
    for cid in range(4):
        assert counts[cid] / 100_000 == pytest.approx(0.25, abs=0.01)


def test_linux_weighted_frequencies():
    rng = np.random.default_rng(99)
    cs = cores(2)
    counts = Counter(linux_select_core(cs, [0.7, 0.3], rng) for _ in range(100_000))
    assert counts[0] / 100_000 == pytest.approx(0.7, abs=0.01)
    assert counts[1] / 100_000 == pytest.approx(0.3, abs=0.01)


def test_linux_weights_renormalized_over_free_cores():
    rng = np.random.default_rng(5)
    cs = cores(3, assigned={0})
    counts = Counter(linux_select_core(cs, [0.5, 0.25, 0.25], rng) for _ in range(20_000))
    assert 0 not in counts
    assert counts[1] / 20_000 == pytest.approx(0.5, abs=0.02)


def test_linux_is_seed_deterministic():
    cs = cores(8)
    a = [linux_select_core(cs, None, np.random.default_rng(3)) for _ in range(5)]
    b = [linux_select_core(cs, None, np.random.default_rng(3)) for _ in range(5)]
    assert a == b


# -- least aged --------------------------------------------------------------


def test_least_aged_argmin():
    led = CoreWorkLedger(3)
    for cid, busy in enumerate([10.0, 3.0, 7.0]):
        led.add(cid, busy)
    assert least_aged_select_core(cores(3), led) == 1


def test_least_aged_tie_lowest_id():
    led = CoreWorkLedger(5)
    for cid in (0, 1, 3):
        led.add(cid, 9.0)
    led.add(4, 5.0)
    led.add(2, 5.0)
    cs = [c for c in cores(5) if c.core_id in (4, 2)]
    assert least_aged_select_core(cs, led) == 2


def test_least_aged_fresh_ledger_picks_core_zero():
    assert least_aged_select_core(cores(6), CoreWorkLedger(6)) == 0


def test_least_aged_all_busy():
    assert least_aged_select_core(cores(2, assigned={0, 1}), CoreWorkLedger(2)) is None


@given(n=st.integers(1, 16), rounds=st.integers(1, 5))
def test_least_aged_round_robins_serial_tasks(n, rounds):
    led = CoreWorkLedger(n)
    cs = cores(n)
    picks = []
    for _ in range(n * rounds):
        cid = least_aged_select_core(cs, led)
        picks.append(cid)
        led.add(cid, 0.5)
    assert picks == list(range(n)) * rounds


def test_ledger_rejects_negative():
    with pytest.raises(ValueError):
        CoreWorkLedger(1).add(0, -1.0)


# -- weights file ------------------------------------------------------------


def test_weights_csv_roundtrip():
    w = load_weights_csv(io.StringIO("core_id,probability\n0,0.7\n1,0.3\n"), 3)
    assert w == [0.7, 0.3, 0.0]


@pytest.mark.parametrize(
    "text",
    [
        "core,prob\n0,1.0\n",
        "core_id,probability\n0,0.5\n",
        "core_id,probability\n5,1.0\n",
        "core_id,probability\n0,-0.1\n1,1.1\n",
        "core_id,probability\n0,x\n",
    ],
)
def test_weights_csv_errors(text):
    with pytest.raises(ValueError):
        load_weights_csv(io.StringIO(text), 3)
