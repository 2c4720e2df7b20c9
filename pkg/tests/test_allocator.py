import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from senet.allocator import BudgetAllocation, InfeasibleBudget, allocate, uniform_allocation, validate

ETA = [0.5, 0.3, 0.2]


def test_full_budget_saturates_everything():
    caps = [7, 13, 5]
    assert allocate(sum(caps), ETA, caps).counts == caps


def test_proportional_split():
    assert allocate(100, ETA, [1000] * 3).counts == [50, 30, 20]


def test_saturated_layer_renormalizes_survivors():
    assert allocate(100, ETA, [10, 1000, 1000]).counts == [10, 54, 36]


def test_zero_budget():
    assert allocate(0, ETA, [10, 10, 10]).counts == [0, 0, 0]


def test_minimum_grant_then_removal_from_least_sensitive():
    # floors are all 0, each layer gets 1, the overshoot comes back off the smallest eta
    a = allocate(2, ETA, [10, 10, 10])
    assert a.counts == [1, 1, 0] and a.r_remove == 1


def test_removal_tie_breaks_on_higher_index():
    assert allocate(1, [0.5, 0.25, 0.25], [5, 5, 5]).counts == [1, 0, 0]
    assert allocate(2, [0.5, 0.25, 0.25], [5, 5, 5]).counts == [1, 1, 0]


def test_infeasible_budget():
    with pytest.raises(InfeasibleBudget, match="exceeds total ReLU capacity 30"):
        allocate(31, ETA, [10, 10, 10])


@pytest.mark.parametrize("eta", [[0.5, 0.5, 0.5], [1.2, -0.1, -0.1], [0.5, 0.5], [np.nan, 0.5, 0.5]])
def test_malformed_eta(eta):
    with pytest.raises(ValueError):
        allocate(10, eta, [10, 10, 10])


def test_validate_ok_and_violations():
    a = allocate(100, ETA, [1000] * 3)
    assert validate(a).ok and str(validate(a)) == "ok"
    a.counts[0] += 1
    assert "sum 101 ≠ budget 100" in validate(a).violations
    b = BudgetAllocation(100, [60, 40], [50, 1000], ["conv1_relu", "conv2_relu"])
    rep = validate(b)
    assert not rep and any("conv1_relu" in v and "capacity" in v for v in rep.violations)


def test_validate_against_shapes():
    a = allocate(10, [0.5, 0.5], [32, 16], ["a", "b"])
    assert validate(a, [("a", 2, 2, 8), ("b", 1, 1, 16)]).ok
    assert not validate(a, [("a", 2, 2, 8), ("b", 1, 1, 8)]).ok
    assert not validate(a, [("b", 2, 2, 8), ("a", 1, 1, 16)]).ok


def test_json_round_trip(tmp_path):
    a = allocate(100, ETA, [10, 1000, 1000], ["x", "y", "z"])
    p = tmp_path / "a.json"
    a.save(p)
    b = BudgetAllocation.load(p)
    assert b.counts == a.counts and b.names == a.names
    b.save(tmp_path / "b.json")
    assert (tmp_path / "b.json").read_bytes() == p.read_bytes()


def test_uniform_allocation_hits_budget():
    u = uniform_allocation(1001, [1000, 3000, 7])
    assert sum(u.counts) == 1001 and all(c <= k for c, k in zip(u.counts, u.capacities))


def test_randomized_contracts():
    rng = np.random.default_rng(0)
    for i in range(300):
        inst = O.random_instance(rng, unsaturated=bool(i % 2))
        assert O.allocation_violations(*inst) == [], inst


@st.composite
def instances(draw):
    L = draw(st.integers(1, 20))
    raw = draw(st.lists(st.floats(0.01, 1.0), min_size=L, max_size=L))
    eta = (np.array(raw) / sum(raw)).tolist()
    caps = draw(st.lists(st.integers(0, 500), min_size=L, max_size=L))
    budget = draw(st.integers(0, sum(caps)))
    return budget, eta, caps


@settings(max_examples=300, deadline=None)
@given(instances())
def test_hypothesis_contracts(inst):
    assert O.allocation_violations(*inst) == []
