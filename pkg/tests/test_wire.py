import os
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclaveflow.wire import (
    MAX_PAYLOAD,
    BindAddressInUse,
    ConnectTimeout,
    Endpoint,
    FairQueue,
    Flags,
    Frame,
    MalformedHeader,
    NoPeers,
    PayloadTooLarge,
    PullSocket,
    PushSocket,
    RecvTimeout,
    SocketClosed,
    Truncated,
    UnknownFlagBits,
    UpstreamClosed,
    bind_pull,
    connect_push,
    decode_frame,
    decode_frame_from,
    encode_frame,
)
from oracles import fair_queue_order, frame_bytes, round_robin


def free_ep():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return Endpoint("127.0.0.1", s.getsockname()[1])


class Recorder:
    """Stand-in transport that decodes what it is sent."""

    def __init__(self, fail_after=None):
        self.frames = []
        self.fail_after = fail_after

    def sendall(self, data):
        if self.fail_after is not None and len(self.frames) >= self.fail_after:
            raise BrokenPipeError("gone")
        self.frames.append(decode_frame(data))


# --- framing ----------------------------------------------------------------

def test_empty_frame_is_seventeen_bytes():
    data = encode_frame(Frame(0, 0))
    assert data == bytes([0, 0, 0, 13] + [0] * 13)
    assert len(data) == 17


def test_eos_flag_byte():
    data = encode_frame(Frame.end_of_stream(1, 2))
    assert data[16] == 0x01
    assert data == frame_bytes(1, 2, 0x01, b"")


def test_encrypted_round_trip_1k():
    payload = os.urandom(1024)
    f = Frame(7, 42, Flags.ENCRYPTED, payload)
    assert decode_frame(encode_frame(f)) == f


def test_decode_errors():
    with pytest.raises(Truncated):
        decode_frame(b"\x00\x00\x00")
    with pytest.raises(MalformedHeader):
        decode_frame((5).to_bytes(4, "big") + bytes(20))
    with pytest.raises(Truncated):
        decode_frame(encode_frame(Frame(0, 0, payload=b"abc"))[:-1])
    with pytest.raises(UnknownFlagBits):
        decode_frame(frame_bytes(0, 0, 0x04, b""))


def test_decode_consumes_exactly_one_frame():
    a, b = Frame(1, 1, payload=b"x"), Frame(2, 9, payload=b"yz")
    buf = encode_frame(a) + encode_frame(b)
    f, end = decode_frame_from(buf)
    assert f == a and end == 18
    assert decode_frame_from(buf, end) == (b, len(buf))


def test_payload_too_large():
    class Huge(bytes):
        def __len__(self):
            return MAX_PAYLOAD + 1

    with pytest.raises(PayloadTooLarge):
        encode_frame(Frame(0, 0, payload=Huge(b"x")))


def test_eos_frames_have_no_payload():
    with pytest.raises(ValueError):
        Frame(0, 0, Flags.END_OF_STREAM, b"x")


frames = st.builds(
    Frame,
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**64 - 1),
    st.sampled_from([Flags(0), Flags.ENCRYPTED]),
    st.binary(max_size=2048),
) | st.builds(Frame.end_of_stream, st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1))


@settings(max_examples=300)
@given(frames)
def test_round_trip_property(f):
    data = encode_frame(f)
    assert data == frame_bytes(f.stream_id, f.seq_no, int(f.flags), f.payload)
    assert decode_frame(data) == f


def test_endpoint_parsing():
    ep = Endpoint.parse("tcp://router_mapper_filter:5557")
    assert (ep.host, ep.port) == ("router_mapper_filter", 5557)
    assert Endpoint.parse("tcp://*:5555").bind_host == "0.0.0.0"
    assert str(ep) == "tcp://router_mapper_filter:5557"
    for bad in ("tcp://host:0", "udp://h:1", "nohost", "tcp://h:x"):
        with pytest.raises(ValueError):
            Endpoint.parse(bad)


# --- push: round robin --------------------------------------------------------

def test_round_robin_six_frames_three_peers():
    push = PushSocket()
    peers = [Recorder() for _ in range(3)]
    for p in peers:
        push.attach(p)
    for i in range(1, 7):
        push.send(Frame(0, i, payload=b"d"))
    assert [[f.seq_no for f in p.frames] for p in peers] == [[1, 4], [2, 5], [3, 6]]
    assert push.rr_counter == 6


def test_round_robin_matches_oracle():
    push = PushSocket()
    peers = [Recorder() for _ in range(3)]
    for p in peers:
        push.attach(p)
    for i in range(6000):
        push.send(Frame(0, i, payload=b"."))
    expected = round_robin(6000, 3)
    for k, p in enumerate(peers):
        assert len(p.frames) == 2000
        assert [f.seq_no for f in p.frames] == [i for i, who in enumerate(expected) if who == k]


def test_eos_is_broadcast():
    push = PushSocket()
    peers = [Recorder() for _ in range(3)]
    for p in peers:
        push.attach(p)
    push.send(Frame.end_of_stream(4, 10))
    assert all(p.frames == [Frame.end_of_stream(4, 10)] for p in peers)
    assert push.rr_counter == 0


def test_no_peers():
    with pytest.raises(NoPeers):
        PushSocket().send(Frame(0, 0, payload=b"x"))


def test_failed_peer_is_dropped_and_frame_redelivered():
    push = PushSocket()
    a, b = Recorder(fail_after=1), Recorder()
    push.attach(a)
    push.attach(b)
    for i in range(5):
        push.send(Frame(0, i, payload=b"x"))
    assert [f.seq_no for f in a.frames] == [0]
    assert [f.seq_no for f in b.frames] == [1, 2, 3, 4]
    assert push.peer_count == 1


def test_new_peer_joins_rotation():
    push = PushSocket()
    peers = [Recorder(), Recorder()]
    for p in peers:
        push.attach(p)
    for i in range(10):
        push.send(Frame(0, i, payload=b"x"))
    late = Recorder()
    push.attach(late)
    for i in range(10, 19):
        push.send(Frame(0, i, payload=b"x"))
    assert len(late.frames) == 3
    assert sum(len(p.frames) for p in peers + [late]) == 19


# --- pull: fair queuing ---------------------------------------------------------

def test_fair_queue_rotation_example():
    fq = FairQueue()
    a, b = fq.add_lane(), fq.add_lane()
    a.extend(["a1", "a2"])
    b.append("b1")
    got = [fq.pop()[1] for _ in range(3)]
    assert got == ["a1", "b1", "a2"] == fair_queue_order([["a1", "a2"], ["b1"]])
    assert fq.pop() is None


def test_fair_queue_fifo_single_lane():
    fq = FairQueue()
    fq.add_lane().extend(["x1", "x2", "x3"])
    assert [fq.pop()[1] for _ in range(3)] == ["x1", "x2", "x3"]


def test_fair_queue_remove_empty_lane_keeps_others():
    fq = FairQueue()
    a, b, c = fq.add_lane(), fq.add_lane(), fq.add_lane()
    c.append("c1")
    fq.remove_lane(b)
    assert fq.lanes[0] is a and fq.lanes[1] is c
    assert fq.pop() == (c, "c1")


@settings(max_examples=200)
@given(st.lists(st.lists(st.integers(), max_size=6), min_size=1, max_size=5),
       st.integers(-1, 4))
def test_fair_queue_matches_oracle(queues, cursor):
    cursor = min(cursor, len(queues) - 1)
    fq = FairQueue()
    for q in queues:
        fq.add_lane().extend(q)
    fq.cursor = cursor
    got = []
    while (item := fq.pop()) is not None:
        got.append(item[1])
    assert got == fair_queue_order(queues, cursor)


def test_saturated_fair_queue_balance():
    fq = FairQueue()
    lanes = [fq.add_lane() for _ in range(2)]
    served = {0: 0, 1: 0}
    for _ in range(1000):
        for i, lane in enumerate(lanes):
            while len(lane) < 3:
                lane.append(i)
        served[fq.pop()[1]] += 1
        assert abs(served[0] - served[1]) <= 1


# --- real sockets -------------------------------------------------------------

def test_bind_twice_fails():
    ep = free_ep()
    pull = bind_pull(ep)
    try:
        with pytest.raises(BindAddressInUse):
            bind_pull(ep)
    finally:
        pull.close()


def test_connect_retries_until_peer_binds():
    ep = free_ep()
    holder = {}

    def late_bind():
        time.sleep(2.0)
        holder["pull"] = bind_pull(ep)

    t = threading.Thread(target=late_bind)
    t.start()
    push = connect_push([ep], timeout=10)
    t.join()
    push.send(Frame(0, 0, payload=b"hello"))
    assert holder["pull"].recv(timeout=5).payload == b"hello"
    push.close()
    holder["pull"].close()


def test_connect_timeout():
    with pytest.raises(ConnectTimeout):
        connect_push([free_ep()], timeout=0.3)


def test_tcp_fifo_and_close_marker():
    ep = free_ep()
    pull = bind_pull(ep)
    push = connect_push([ep])
    for i in range(200):
        push.send(Frame(3, i, payload=i.to_bytes(2, "big")))
    push.send(Frame.end_of_stream(3, 200))
    push.close()
    seqs = []
    while True:
        item = pull.recv_event(timeout=5)
        if isinstance(item, UpstreamClosed):
            assert item.had_eos and item.frames == 201
            break
        seqs.append(item.seq_no)
    assert seqs == list(range(201))
    assert pull.open_connections == 0
    pull.close()
    with pytest.raises(SocketClosed):
        pull.recv(timeout=0.1)


def test_saturated_upstreams_balanced_over_tcp():
    ep = free_ep()
    pull = bind_pull(ep, hwm=8)
    pushes = [connect_push([ep]) for _ in range(2)]
    stop = threading.Event()

    def feed(k, push):
        i = 0
        while not stop.is_set():
            try:
                push.send(Frame(k, i, payload=b"p" * 32))
            except Exception:
                return
            i += 1

    threads = [threading.Thread(target=feed, args=(k, p), daemon=True)
               for k, p in enumerate(pushes)]
    for t in threads:
        t.start()
    # Wait until both lanes are saturated before counting.
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and not all(len(l) >= 4 for l in pull.fq.lanes):
        time.sleep(0.01)
    counts = [0, 0]
    contended = repeats = 0
    last = None
    for _ in range(1000):
        both = all(len(l) > 0 for l in pull.fq.lanes)
        sid = pull.recv(timeout=5).stream_id
        counts[sid] += 1
        if both and last is not None:
            contended += 1
            repeats += sid == last
        last = sid
    stop.set()
    pull.close()
    for p in pushes:
        p.close()
    # While both lanes hold frames, the queue must alternate between them.
    assert contended >= 100, (contended, counts)
    assert repeats == 0, (repeats, counts)
    assert abs(counts[0] - counts[1]) <= 1000 - contended + 1


def test_recv_timeout():
    pull = PullSocket()
    with pytest.raises(RecvTimeout):
        pull.recv(timeout=0.05)


def test_leave_drains_then_sees_close():
    ep = free_ep()
    from enclaveflow.wire import bind_push, connect_pull
    push = bind_push(ep)
    pull = connect_pull([ep])
    assert push.wait_for_peers(1, timeout=5)
    for i in range(5):
        push.send(Frame(0, i, payload=b"x"))
    pull.leave()
    got = []
    while True:
        item = pull.recv_event(timeout=5)
        if isinstance(item, UpstreamClosed):
            assert not item.had_eos
            break
        got.append(item.seq_no)
    assert got == list(range(5))
    deadline = time.monotonic() + 5
    while push.peer_count and time.monotonic() < deadline:
        time.sleep(0.01)
    assert push.peer_count == 0
    push.close()
    pull.close()
