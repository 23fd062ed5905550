import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pageguard import (
    BufferDesc,
    DuplicateOpError,
    GuardedOp,
    ManualCompletion,
    OpInFlightError,
    OpState,
    PageRange,
    RegionRegistry,
    RegistryFull,
    UnknownOpError,
)

from conftest import PS

# The registry never touches the memory it indexes, so plain numbers work as
# addresses here.
BASE = 0x7000_0000_0000


def op_on(start, length, buf=None):
    rng = PageRange(start, length)
    return GuardedOp(ManualCompletion(), rng, buf or BufferDesc(start, length))


def finish(op):
    op.handle.complete()
    return op


def test_buffer_desc_rejects_overflow_and_negative():
    with pytest.raises(ValueError):
        BufferDesc(-1, 4)
    with pytest.raises(ValueError):
        BufferDesc(1 << 64, 1)
    with pytest.raises(ValueError):
        BufferDesc((1 << 64) - 4, 8)
    assert BufferDesc(0x1000, 8).end == 0x1008


def test_page_range_validate():
    PageRange(PS, PS).validate(PS)
    for bad in (PageRange(PS + 1, PS), PageRange(PS, 0), PageRange(PS, PS + 8)):
        with pytest.raises(ValueError):
            bad.validate(PS)


def test_register_then_lookup_inside_and_outside():
    r = RegionRegistry(capacity=8)
    op = op_on(BASE + PS, PS)
    r.register(op)
    assert r.lookup(BASE + PS + PS // 2) is op
    assert r.lookup(0) is None
    assert r.lookup(BASE) is None
    assert r.lookup(BASE + 2 * PS) is None


def test_shared_page_refcount_is_two():
    r = RegionRegistry(capacity=8)
    a = op_on(BASE, 2 * PS)
    b = op_on(BASE + PS, 2 * PS)
    r.register(a)
    r.register(b)
    assert r.refcount(BASE) == 1
    assert r.refcount(BASE + PS) == 2
    assert r.refcount(BASE + 2 * PS) == 1
    assert r.pages() == [BASE, BASE + PS, BASE + 2 * PS]


def test_lookup_prefers_in_flight_op_on_shared_page():
    r = RegionRegistry(capacity=8)
    a = op_on(BASE, PS)
    b = op_on(BASE, PS)
    r.register(a)
    r.register(b)
    finish(a)
    assert r.lookup(BASE + 8) is b
    finish(b)
    # both complete but unreleased: nothing left to wait for
    assert r.lookup(BASE + 8) is None
    assert r.refcount(BASE) == 2


def test_release_sole_owner_returns_all_pages():
    r = RegionRegistry(capacity=8)
    op = op_on(BASE, 3 * PS)
    r.register(op)
    finish(op)
    assert r.release(op.id) == {BASE, BASE + PS, BASE + 2 * PS}
    assert op.state is OpState.RELEASED
    assert r.pages() == []
    assert len(r) == 0


def test_release_shared_page_keeps_it():
    r = RegionRegistry(capacity=8)
    a = op_on(BASE, 2 * PS)
    b = op_on(BASE + PS, PS)
    r.register(a)
    r.register(b)
    assert r.release(finish(a).id) == {BASE}
    assert r.refcount(BASE + PS) == 1
    assert r.release(finish(b).id) == {BASE + PS}


def test_release_in_flight_is_rejected():
    r = RegionRegistry(capacity=8)
    op = op_on(BASE, PS)
    r.register(op)
    with pytest.raises(OpInFlightError):
        r.release(op.id)
    assert r.refcount(BASE) == 1
    assert op.state is OpState.IN_FLIGHT


def test_unknown_and_duplicate_ids():
    r = RegionRegistry(capacity=8)
    op = op_on(BASE, PS)
    r.register(op)
    with pytest.raises(DuplicateOpError):
        r.register(op)
    with pytest.raises(UnknownOpError):
        r.release(12345678)


def test_register_rejects_bad_ops():
    r = RegionRegistry(capacity=8)
    with pytest.raises(ValueError):
        r.register(op_on(BASE + 1, PS))
    with pytest.raises(ValueError):
        r.register(op_on(BASE, PS, BufferDesc(BASE + PS - 4, 8)))
    with pytest.raises(ValueError):
        r.register(finish(op_on(BASE, PS)))


def test_capacity_exhaustion_raises_registry_full():
    r = RegionRegistry(capacity=4)
    ops = [op_on(BASE + i * PS, PS) for i in range(5)]
    for op in ops[:4]:
        r.register(op)
    with pytest.raises(RegistryFull):
        r.register(ops[4])
    assert ops[4].id not in r
    r.release(finish(ops[0]).id)
    r.register(ops[4])


def test_page_index_exhaustion_raises_registry_full():
    r = RegionRegistry(capacity=64, page_slots=16)
    with pytest.raises(RegistryFull):
        r.register(op_on(BASE, 64 * PS))
    assert r.pages() == []


def test_state_transitions():
    r = RegionRegistry(capacity=4)
    op = op_on(BASE, PS)
    assert op.state is OpState.IN_FLIGHT and not op.completed
    r.register(op)
    finish(op)
    assert op.state is OpState.COMPLETE and op.completed
    r.release(op.id)
    assert op.state is OpState.RELEASED and op.completed


class Oracle:
    """Brute-force interval scan over the live ops."""

    def __init__(self):
        self.live = {}

    def count(self, page):
        return sum(1 for s, n in self.live.values() if s <= page < s + n)

    def owners(self, addr):
        return [i for i, (s, n) in self.live.items() if s <= addr < s + n]


def check_sequence(steps, window=24):
    """Apply (register|release) steps to a registry and to the oracle; compare."""
    r = RegionRegistry(capacity=64, page_slots=256)
    oracle = Oracle()
    ops = {}
    for step in steps:
        if step[0] == "reg":
            _, first, npages = step
            op = op_on(BASE + first * PS, npages * PS)
            r.register(op)
            ops[op.id] = op
            oracle.live[op.id] = (op.range.start, op.range.len)
        elif oracle.live:
            op_id = sorted(oracle.live)[step[1] % len(oracle.live)]
            before = {p: oracle.count(p) for p in range(BASE, BASE + window * PS, PS)}
            del oracle.live[op_id]
            expect = {p for p, c in before.items() if c and not oracle.count(p)}
            assert r.release(finish(ops.pop(op_id)).id) == expect
        for p in range(BASE, BASE + window * PS, PS):
            assert r.refcount(p) == oracle.count(p)
            found = r.lookup(p + 5)
            owners = oracle.owners(p + 5)
            assert (found is None) == (not owners)
            if found is not None:
                assert found.id in owners
        assert r.pages() == sorted(p for p in range(BASE, BASE + window * PS, PS) if oracle.count(p))
    # drain: every page must come back exactly once
    for op in list(ops.values()):
        r.release(finish(op).id)
    assert r.pages() == []


step_st = st.one_of(
    st.tuples(st.just("reg"), st.integers(0, 19), st.integers(1, 4)),
    st.tuples(st.just("rel"), st.integers(0, 63)),
)


@settings(max_examples=300, deadline=None)
@given(st.lists(step_st, max_size=24))
def test_refcounts_match_interval_oracle(steps):
    check_sequence(steps)


def random_steps(rnd, n):
    out = []
    for _ in range(n):
        if rnd.random() < 0.6:
            out.append(("reg", rnd.randrange(20), rnd.randrange(1, 5)))
        else:
            out.append(("rel", rnd.randrange(64)))
    return out


def test_refcounts_match_oracle_long_sequences():
    rnd = random.Random(1)
    for _ in range(20):
        check_sequence(random_steps(rnd, 60))


def test_tombstone_reuse_after_churn():
    # repeated insert/delete on one small table must not exhaust it
    r = RegionRegistry(capacity=8, page_slots=16)
    for i in range(2000):
        op = op_on(BASE + (i % 97) * PS, 2 * PS)
        r.register(op)
        assert r.refcount(op.range.start) == 1
        r.release(finish(op).id)
    assert r.pages() == []
