import pytest

from reconfsm.core import WellFormednessError
from reconfsm.nrsm import sequencer_oracle
from reconfsm.paxos import paxos_factory

from conftest import Bus, cmd

BACKENDS = {"sequencer": sequencer_oracle, "paxos": paxos_factory()}


@pytest.fixture(params=sorted(BACKENDS))
def factory(request):
    return BACKENDS[request.param]


def test_second_join_rejected(factory, c3):
    m = factory(c3, "n2", "n1", lambda: 0.0)
    m.join()
    with pytest.raises(WellFormednessError):
        m.join()


def test_non_member_cannot_host_instance(factory, c3):
    with pytest.raises(WellFormednessError):
        factory(c3, "n9", "n1", lambda: 0.0)


def test_propose_before_join_rejected(factory, c3):
    m = factory(c3, "n2", "n1", lambda: 0.0)
    with pytest.raises(WellFormednessError):
        m.propose(cmd(1))


def test_proposal_learned_everywhere(factory, c3):
    bus = Bus(c3, factory)
    bus.propose("n2", cmd(1))
    bus.run_fifo()
    assert all(bus.learned[n] == [cmd(1)] for n in c3.members)


def test_poll_empty_and_never_redelivers(factory, c3):
    bus = Bus(c3, factory)
    assert bus.machines["n1"].poll() == []
    bus.propose("n1", cmd(1))
    bus.run_fifo()
    assert bus.machines["n1"].poll() == []
    assert bus.learned["n1"] == [cmd(1)]


def test_concurrent_proposals_same_order(factory, c3, rng):
    bus = Bus(c3, factory)
    bus.propose("n2", cmd(1))
    bus.propose("n3", cmd(2))
    bus.propose("n1", cmd(3))
    bus.run_random(rng)
    orders = {tuple(bus.learned[n]) for n in c3.members}
    assert len(orders) == 1
    assert sorted(e.id for e in orders.pop()) == ["c1", "c2", "c3"]


def test_duplicate_proposal_learned_once(factory, c3):
    bus = Bus(c3, factory)
    bus.propose("n2", cmd(1))
    bus.run_fifo()
    bus.propose("n2", cmd(1))
    bus.propose("n3", cmd(1))
    bus.run_fifo()
    assert all(bus.learned[n] == [cmd(1)] for n in c3.members)


def test_learn_slots_are_consecutive(factory, c3):
    bus = Bus(c3, factory)
    for i in range(5):
        bus.propose("n1", cmd(i))
    bus.run_fifo()
    assert [e.slot for e in bus.events["n3"]] == list(range(5))
    assert [e.value.id for e in bus.events["n3"]] == [f"c{i}" for i in range(5)]
