import pytest
from hypothesis import given, strategies as st

from reconfsm import codec
from reconfsm.core import Command, Configuration
from reconfsm.nrsm import SeqForward, SeqOrder
from reconfsm.paxos import Accept, Accepted, Ballot, Decided, Forward, Nack, Prepare, Promise
from reconfsm.rrsm import JoinMsg, StateMsg
from reconfsm.runtime import wire

ids = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789.:-", min_size=1, max_size=8)
commands = st.builds(Command, ids, st.binary(max_size=16))
configs = st.builds(Configuration, ids, st.lists(ids, min_size=1, max_size=5, unique=True).map(tuple))
entries = st.one_of(commands, configs)


@given(entries)
def test_entry_roundtrip(e):
    assert codec.decode_entry(codec.encode_entry(e)) == e


@given(st.lists(st.one_of(entries, st.none()), max_size=6))
def test_sequence_roundtrip(es):
    assert codec.decode_seq(codec.encode_seq(es)) == es


def test_entry_encoding_is_canonical():
    assert codec.encode_entry(Command("a", b"hi")) == b'["c","a","aGk="]'
    assert codec.encode_entry(Configuration("C1", ("n2", "n1"))) == b'["f","C1",["n2","n1"]]'


B = Ballot(3, "n2")
C = Command("x", b"1")
F = Configuration("C9", ("n1", "n2"))
BACKEND = [
    Forward("C0", C),
    Prepare("C0", B, 4),
    Promise("C0", B, ((4, Ballot(0, "n1"), C), (5, B, None)), ((2, F), (3, None)), 4),
    Accept("C0", B, ((0, C), (1, None), (2, F))),
    Accepted("C0", B, (0, 1, 2)),
    Decided("C0", ((0, C), (1, None))),
    Nack("C0", B),
    SeqForward("C0", F),
    SeqOrder("C0", 7, C),
]


@pytest.mark.parametrize("msg", BACKEND, ids=lambda m: type(m).__name__)
def test_backend_message_roundtrip(msg):
    assert wire.roundtrip(msg) == msg


def test_join_roundtrip():
    msg = JoinMsg(Configuration("C0", ("n1", "n2", "n3")), Configuration("C1", ("n2", "n4")))
    assert wire.roundtrip(msg) == msg


def test_state_decode_skips_prefix():
    trunk = [Command(f"c{i}") for i in range(5)] + [F]
    lines = [codec.encode_entry(e) for e in trunk]
    body = codec.encode_state(len(trunk), ["n2", "n1"], lines)
    for skip in range(0, 9):
        msg = codec.decode_state(body, skip)
        base = min(skip, len(trunk))
        assert msg.length == 6 and msg.base == base and msg.view == ("n1", "n2")
        assert list(msg.entries) == trunk[base:]


def test_empty_state_roundtrip():
    msg = wire.roundtrip(StateMsg(0, (), ("n1",)))
    assert msg.length == 0 and list(msg.entries) == [] and msg.view == ("n1",)


def test_frame_header_for_ten_byte_body():
    frame = wire.encode_frame(wire.TAG_STATE, b"0123456789")
    assert frame[:5] == bytes([0x00, 0x00, 0x00, 0x0B, 0x01])
    assert frame[5:] == b"0123456789"


def test_empty_body_frame_is_tag_only():
    frame = wire.encode_frame(wire.TAG_ADMIN, b"")
    assert frame == bytes([0, 0, 0, 1, 5])
    assert wire.FrameDecoder().feed(frame) == [(5, b"")]


def test_tags_match_message_classes():
    assert (wire.TAG_JOIN, wire.TAG_STATE, wire.TAG_BACKEND) == (0, 1, 2)
    assert (wire.TAG_CLIENT_REQUEST, wire.TAG_CLIENT_REPLY, wire.TAG_ADMIN) == (3, 4, 5)
    assert wire.encode_message(JoinMsg(F, F))[0] == 0
    assert wire.encode_message(StateMsg(0, (), ()))[0] == 1
    assert wire.encode_message(BACKEND[0])[0] == 2


def test_bad_frame_length_rejected():
    with pytest.raises(wire.FrameError):
        wire.FrameDecoder().feed(bytes([0, 0, 0, 0, 1]))


@given(st.lists(st.tuples(st.integers(0, 5), st.binary(max_size=40)), max_size=10), st.data())
def test_decoder_handles_any_chunking(frames, data):
    stream = b"".join(wire.encode_frame(t, b) for t, b in frames)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(stream)), max_size=6)))
    dec = wire.FrameDecoder()
    out = []
    prev = 0
    for cut in cuts + [len(stream)]:
        out.extend(dec.feed(stream[prev:cut]))
        prev = cut
    assert out == frames
