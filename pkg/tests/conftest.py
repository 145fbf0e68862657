import random

import pytest

from reconfsm.core import Command, Configuration


class Bus:
    """In-memory message bus for a set of back-end instances of one configuration.

    ``in_flight`` holds ``(src, dst, msg)`` triples; delivery order is up to
    the test (FIFO, random, or an explicit schedule). Crashed nodes neither
    send nor receive.
    """

    def __init__(self, config, factory, now=0.0):
        self.config = config
        self.now = now
        self.machines = {m: factory(config, m, config.members[0], lambda: self.now) for m in config.members}
        self.in_flight = []
        self.crashed = set()
        self.learned = {m: [] for m in config.members}
        self.events = {m: [] for m in config.members}
        self.sent = {}
        for m in self.machines.values():
            m.join()
        self.collect()

    def collect(self):
        for node, m in self.machines.items():
            if m.outbox:
                out, m.outbox = m.outbox, []
                if node in self.crashed:
                    continue
                for dst, msg in out:
                    name = type(msg).__name__
                    if dst != node:
                        self.sent[name] = self.sent.get(name, 0) + 1
                    self.in_flight.append((node, dst, msg))
            for ev in m.poll():
                self.events[node].append(ev)
                self.learned[node].append(ev.value)

    def deliver(self, i):
        src, dst, msg = self.in_flight.pop(i)
        if dst not in self.crashed:
            self.machines[dst].on_message(src, msg)
        self.collect()

    def propose(self, node, value):
        self.machines[node].propose(value)
        self.collect()

    def tick(self, now):
        self.now = now
        for node, m in self.machines.items():
            if node not in self.crashed:
                m.tick(now)
        self.collect()

    def run_fifo(self, limit=100000):
        steps = 0
        while self.in_flight and steps < limit:
            self.deliver(0)
            steps += 1
        return steps

    def run_random(self, rng, limit=100000):
        steps = 0
        while self.in_flight and steps < limit:
            self.deliver(rng.randrange(len(self.in_flight)))
            steps += 1
        return steps


@pytest.fixture
def c3():
    return Configuration("C0", ("n1", "n2", "n3"))


def cmd(i):
    return Command(f"c{i}", f"v{i}".encode())


@pytest.fixture
def rng():
    return random.Random(1234)


# acceptance verdicts, printed in the terminal summary
ACCEPTANCE = {}


def acceptance_line(criterion, ok, detail, key=None):
    ACCEPTANCE[str(key or criterion)] = f"criterion {key or criterion}: {'PASS' if ok else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split("[")[0]), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
