import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from clhpo.memory import ReplayBuffer, ema_update
from clhpo.neural import MLP, ShapeError, init_mlp


def _fill(buf, n, task_id=0, start=0):
    for i in range(start, start + n):
        buf.insert(np.array([float(i)]), i % 2, task_id, example_id=i)


def _one_param(value):
    return MLP([np.array([[float(value)]])], [np.array([float(value)])])


def test_under_capacity_keeps_everything():
    buf = ReplayBuffer(3, 1, 2, seed=0)
    _fill(buf, 3)
    assert sorted(e.example_id for e in buf.entries()) == [0, 1, 2]
    assert buf.seen_count == 3


def test_capacity_one_deterministic_survivor():
    survivors = []
    for _ in range(2):
        buf = ReplayBuffer(1, 1, 2, seed=42)
        _fill(buf, 100)
        survivors.append(buf.entry(0).example_id)
    assert survivors[0] == survivors[1]


def test_reservoir_retention_uniform():
    """Capacity 50 over 500 items: each item kept with probability 0.1."""
    n_seeds, capacity, n_items = 10_000, 50, 500
    counts = np.zeros(n_items)
    x = np.zeros(1)
    for seed in range(n_seeds):
        buf = ReplayBuffer(capacity, 1, 1, seed=seed)
        for i in range(n_items):
            buf.insert(x, 0, 0, example_id=i)
        counts[buf.example_ids[:capacity]] += 1
    expected = n_seeds * capacity / n_items
    sigma = np.sqrt(n_seeds * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) < 5 * sigma)
    assert stats.chisquare(counts).pvalue > 0.001


def test_logits_round_trip_bit_exact(rng):
    buf = ReplayBuffer(4, 2, 3, seed=0)
    logits = rng.normal(size=(4, 3))
    for i in range(4):
        buf.insert(np.zeros(2), 0, 0, example_id=i, logits=logits[i])
    for i, e in enumerate(buf.entries()):
        assert e.stored_logits.tobytes() == logits[i].tobytes()


def test_logit_shape_checked():
    buf = ReplayBuffer(2, 2, 3, seed=0)
    with pytest.raises(ShapeError):
        buf.insert(np.zeros(2), 0, 0, logits=np.zeros(2))
    with pytest.raises(ShapeError):
        buf.insert(np.zeros(3), 0, 0)


def test_sample_all_when_k_equals_size(rng):
    buf = ReplayBuffer(5, 1, 2, seed=0)
    _fill(buf, 5)
    got = sorted(e.example_id for e in buf.sample(5, rng))
    assert got == [0, 1, 2, 3, 4]


def test_sample_clamps(rng):
    buf = ReplayBuffer(10, 1, 2, seed=0)
    _fill(buf, 4)
    assert len(buf.sample(10, rng)) == 4


def test_sample_empty_buffer(rng):
    assert ReplayBuffer(3, 1, 2).sample(2, rng) == []


def test_sample_rejects_k_zero(rng):
    with pytest.raises(ValueError):
        ReplayBuffer(3, 1, 2).sample(0, rng)


def test_held_out_never_sampled(rng):
    buf = ReplayBuffer(5, 1, 2, seed=0)
    _fill(buf, 5)
    held = {int(u) for u in buf.uids[2:5]}
    buf.held_out |= held
    drawn = [buf.sample(1, rng)[0].insertion_index for _ in range(1000)]
    assert not set(drawn) & held
    assert set(drawn) == {int(buf.uids[0]), int(buf.uids[1])}


def test_holdout_proportional_counts(rng):
    buf = ReplayBuffer(30, 1, 2, seed=0)
    _fill(buf, 10, task_id=1)
    _fill(buf, 20, task_id=2, start=10)
    held = buf.holdout_proportional(0.1, rng)
    slots = buf.slots_of(held)
    assert sorted(buf.task_ids[slots].tolist()) == [1, 2, 2]


def test_holdout_ceiling_single_entry(rng):
    buf = ReplayBuffer(5, 1, 2, seed=0)
    _fill(buf, 1)
    assert buf.holdout_proportional(0.5, rng) == {0}
    assert len(buf.eligible_slots()) == 0


def test_release_restores_eligibility(rng):
    buf = ReplayBuffer(20, 1, 2, seed=0)
    _fill(buf, 20)
    buf.holdout_proportional(0.3, rng)
    assert len(buf.eligible_slots()) == 14
    buf.release_holdout()
    assert buf.eligible_slots().tolist() == list(range(20))


def test_holdout_empty_buffer(rng):
    assert ReplayBuffer(5, 1, 2).holdout_proportional(0.2, rng) == set()


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
def test_holdout_fraction_range(fraction, rng):
    with pytest.raises(ValueError):
        ReplayBuffer(5, 1, 2).holdout_proportional(fraction, rng)


def test_replaced_entry_loses_hold():
    buf = ReplayBuffer(2, 1, 2, seed=0)
    _fill(buf, 2)
    buf.held_out = {0, 1}
    _fill(buf, 50, start=2)
    live = {int(u) for u in buf.uids[:buf.size]}
    assert buf.held_out <= live


@settings(max_examples=200, deadline=None)
@given(capacity=st.integers(1, 20), n=st.integers(0, 200), seed=st.integers(0, 2**32 - 1))
def test_capacity_never_exceeded(capacity, n, seed):
    buf = ReplayBuffer(capacity, 1, 2, seed=seed)
    for i in range(n):
        buf.insert(np.zeros(1), 0, 0, example_id=i)
        assert len(buf) <= capacity
        assert buf.seen_count >= len(buf)
    assert len(buf) == min(capacity, n)
    ids = buf.example_ids[:buf.size].tolist()
    assert len(set(ids)) == len(ids)


def test_ema_fixed_point():
    s = _one_param(3.0)
    ema_update(s, _one_param(3.0), 0.9)
    assert s == _one_param(3.0)


def test_ema_half():
    s = _one_param(0.0)
    ema_update(s, _one_param(2.0), 0.5)
    assert s.weights[0][0, 0] == 1.0 and s.biases[0][0] == 1.0


def test_ema_geometric_convergence():
    decay, s, online = 0.9, _one_param(0.0), _one_param(1.0)
    gap = 1.0
    for k in range(1, 30):
        ema_update(s, online, decay)
        new_gap = abs(1.0 - s.weights[0][0, 0])
        assert new_gap == pytest.approx(decay * gap, rel=1e-12)
        assert new_gap == pytest.approx(decay ** k, rel=1e-12)
        gap = new_gap


def test_ema_checks():
    with pytest.raises(ShapeError):
        ema_update(init_mlp([2, 3], 0), init_mlp([2, 4], 0), 0.9)
    for d in (0.0, 1.0):
        with pytest.raises(ValueError):
            ema_update(_one_param(0), _one_param(1), d)


def test_csv_dump(tmp_path):
    buf = ReplayBuffer(3, 2, 2, seed=0)
    buf.insert(np.array([1.0, 2.0]), 1, 0, example_id=7, logits=np.array([0.5, -0.5]))
    buf.insert(np.array([3.0, 4.0]), 0, 0, example_id=8)
    buf.held_out = {1}
    buf.to_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "entry_id,task_id,example_id,label,held_out,x0,x1,logit0,logit1"
    assert lines[1] == "0,0,7,1,0,1.0,2.0,0.5,-0.5"
    assert lines[2] == "1,0,8,0,1,3.0,4.0,,"
