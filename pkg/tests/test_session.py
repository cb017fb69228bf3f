import socket
import struct

import numpy as np
import pytest

from dualqkd.channel import Ideal, Role, prepare_train
from dualqkd.errors import ProtocolViolation
from dualqkd.handshake import InsufficientReserve
from dualqkd.kem import get_provider
from dualqkd.session import wire
from dualqkd.session.config import (
    ConfigError, ExperimentConfig, SessionConfig, load_experiment_config, load_session_config,
)
from dualqkd.session.endpoint import BASELINE_EDGES, EDGES, Endpoint, State
from dualqkd.session.runner import execute_session, run_session, session_rngs
from dualqkd.session.transport import (
    FramedSocket, Middlebox, Relay, TransportError, connect, run_in_process,
)
from dualqkd.session.wire import MsgType

QUANTUM_KINDS = {"PULSE", "QAUTH_READY", "QAUTH_ACK", "QAUTH_REVEAL", "QAUTH_VERDICT"}


def small_config(**overrides):
    base = {"n_signal": 400, "auth.sequence_len": 32}
    base.update(overrides)
    return SessionConfig().with_overrides(**base)


# -- wire ---------------------------------------------------------------------

def test_frame_layout():
    f = wire.encode_frame(MsgType.BASES, b"abc")
    assert f == struct.pack(">I", 4) + bytes([0x30]) + b"abc"
    assert wire.decode_frame(f) == (MsgType.BASES, b"abc")


def test_type_tags_unique():
    tags = [int(t) for t in MsgType]
    assert len(tags) == len(set(tags))


def test_frame_limit_rejected():
    bad = struct.pack(">I", wire.MAX_FRAME + 1) + b"\x01"
    with pytest.raises(wire.FrameError):
        wire.FrameReader().feed(bad)
    with pytest.raises(wire.FrameError):
        wire.decode_frame(bad)
    with pytest.raises(wire.FrameError):
        wire.encode_frame(MsgType.BASES, bytes(wire.MAX_FRAME))


def test_frame_errors():
    with pytest.raises(wire.FrameError):
        wire.decode_frame(b"\x00\x00")
    with pytest.raises(wire.FrameError):
        wire.decode_frame(struct.pack(">I", 1) + b"\x7e")
    with pytest.raises(wire.FrameError):
        wire.decode_frame(struct.pack(">I", 5) + b"\x01")


def test_frame_reader_handles_fragmentation():
    frames = [wire.encode_frame(MsgType.BASES, bytes([i]) * i) for i in range(1, 20)]
    stream = b"".join(frames)
    reader, got = wire.FrameReader(), []
    for i in range(0, len(stream), 7):
        got.extend(reader.feed(stream[i:i + 7]))
    assert got == frames


def test_mac_seal_unseal():
    key = b"k" * 32
    body = wire.seal(key, 3, MsgType.BASES, b"payload")
    assert len(body) == 8 + len(b"payload") + wire.MAC_BYTES
    assert wire.unseal(key, 3, MsgType.BASES, body) == b"payload"
    with pytest.raises(wire.MacError):
        wire.unseal(key, 4, MsgType.BASES, body)
    with pytest.raises(wire.MacError):
        wire.unseal(key, 3, MsgType.SACRIFICE, body)
    tampered = bytearray(body)
    tampered[9] ^= 1
    with pytest.raises(wire.MacError):
        wire.unseal(key, 3, MsgType.BASES, bytes(tampered))


def test_pulse_frames_constant_size_across_roles():
    sizes, bodies = set(), []
    for role in (Role.DECOY, Role.AUTH, Role.SIGNAL):
        rng = np.random.default_rng(0)
        train = prepare_train(rng.integers(0, 2, 64), rng.integers(0, 2, 64), 0, Ideal(), rng, role=role)
        body = wire.encode_pulses(train, "auth")
        sizes.add(len(wire.encode_frame(MsgType.PULSE, body)))
        bodies.append(body)
    assert len(sizes) == 1
    assert bodies[0] == bodies[1] == bodies[2]


def test_pulse_roundtrip():
    rng = np.random.default_rng(1)
    train = prepare_train(rng.integers(0, 2, 50), rng.integers(0, 2, 50), 0, Ideal(), rng)
    phase, out = wire.decode_pulses(wire.encode_pulses(train, "signal"), Ideal())
    assert phase == "signal"
    assert np.array_equal(out.basis, train.basis) and np.array_equal(out.bit, train.bit)


def test_bit_packing_roundtrip():
    bits = np.random.default_rng(2).integers(0, 2, 77).astype(np.uint8)
    out, end = wire.unpack_bits(wire.pack_bits(bits))
    assert np.array_equal(out, bits) and end == 4 + 10


# -- transport ------------------------------------------------------------------

def test_socket_echo_thousand_messages():
    from dualqkd.channel import ChannelParams

    relay = Relay(Middlebox(ChannelParams(), np.random.default_rng(0)), timeout=20)
    relay.start()
    a, b = connect(relay.addresses["A"]), connect(relay.addresses["B"])
    sent = [wire.encode_frame(MsgType.BASES, struct.pack(">I", i) + bytes(i % 50)) for i in range(1000)]
    for f in sent:
        a.send_frame(f)
    got = [b.recv_frame() for _ in range(1000)]
    for f in got:
        b.send_frame(f)
    back = [a.recv_frame() for _ in range(1000)]
    a.close()
    b.close()
    relay.join()
    assert got == sent and back == sent and not relay.errors
    assert len(relay.transcript) == 2000


def test_relay_rejects_oversized_prefix():
    from dualqkd.channel import ChannelParams

    relay = Relay(Middlebox(ChannelParams(), np.random.default_rng(0)), timeout=5)
    relay.start()
    a, b = connect(relay.addresses["A"]), connect(relay.addresses["B"])
    a.sock.sendall(struct.pack(">I", wire.MAX_FRAME + 1) + b"\x30")
    relay.join()
    assert any(isinstance(e, wire.FrameError) for e in relay.errors)
    assert b.recv_frame() is None
    a.close()
    b.close()


def test_framed_socket_over_socketpair():
    s1, s2 = socket.socketpair()
    x, y = FramedSocket(s1), FramedSocket(s2)
    x.send_frame(wire.encode_frame(MsgType.ABORT, b"KeyExhausted"))
    assert wire.decode_frame(y.recv_frame()) == (MsgType.ABORT, b"KeyExhausted")
    x.close()
    assert y.recv_frame() is None
    y.close()


# -- full sessions ----------------------------------------------------------

@pytest.mark.parametrize("protocol", ["proposed", "sarg04"])
def test_session_established_on_both_transports(protocol):
    cfg = small_config(protocol=protocol, n_signal=2000,
                       **{"channel.flip_prob": 0.01, "auth.sequence_len": 256})
    runs = {t: execute_session(cfg, 7, t) for t in ("inproc", "socket")}
    for run in runs.values():
        m = run.metrics
        assert m.outcome == "Established" and m.keys_match and m.final_key_len > 0
    assert [e[2] for e in runs["inproc"].transcript.entries] == \
        [e[2] for e in runs["socket"].transcript.entries]
    assert runs["inproc"].metrics.deterministic_view() == runs["socket"].metrics.deterministic_view()


def test_state_histories_follow_edges():
    for protocol, edges in (("proposed", EDGES), ("sarg04", BASELINE_EDGES)):
        run = execute_session(small_config(protocol=protocol, n_signal=2000), 1)
        for ep in (run.alice, run.bob):
            states = [s for s, _ in ep.history]
            assert all(e in edges for e in zip(states, states[1:]))
            assert states[-1] == State.ESTABLISHED


def test_proposed_visits_every_phase_in_order():
    run = execute_session(small_config(n_signal=2000), 2)
    states = [s for s, _ in run.alice.history]
    assert states == [State.IDLE, State.CLASSICAL_AUTH, State.QAUTH_A2B, State.QAUTH_B2A,
                      State.SIGNAL_EXCHANGE, State.SIFTING, State.QBER_GATE, State.RECONCILE,
                      State.AMPLIFY, State.ESTABLISHED]


def test_phase_times_partition_total():
    m = run_session(small_config(n_signal=2000), 3)
    assert m.auth_time > 0 and m.qkd_time > 0
    assert m.auth_time + m.qkd_time == pytest.approx(m.total_time)


def test_determinism_modulo_wall_clock():
    cfg = small_config(n_signal=2000, **{"channel.flip_prob": 0.02})
    assert run_session(cfg, 11).deterministic_view() == run_session(cfg, 11).deterministic_view()
    assert run_session(cfg, 11).deterministic_view() != run_session(cfg, 12).deterministic_view()


def test_noiseless_session_established():
    m = run_session(SessionConfig(), 0)
    assert m.outcome == "Established" and m.keys_match
    assert m.auth_qber_a2b == 0 and m.auth_qber_b2a == 0


def test_mitm_tamper_aborts_before_quantum_phase():
    cfg = small_config(**{"adversary.strategy": "classical_mitm", "adversary.mode": "tamper_ct"})
    run = execute_session(cfg, 0)
    assert run.metrics.outcome == "Aborted" and run.metrics.abort_reason == "ClassicalAuth"
    assert not QUANTUM_KINDS & set(run.transcript.kinds())


def test_mitm_impersonate_aborts():
    cfg = small_config(**{"adversary.strategy": "classical_mitm", "adversary.mode": "impersonate"})
    m = run_session(cfg, 0)
    assert m.abort_reason == "ClassicalAuth"


def test_intercept_on_auth_phase_aborts_session():
    cfg = small_config(**{"auth.sequence_len": 256, "adversary.strategy": "intercept_resend",
                          "adversary.phases": ["auth"]})
    m = run_session(cfg, 0)
    assert m.outcome == "Aborted" and m.abort_reason in ("AuthQber", "DecoyAnomaly")
    assert m.final_key_len == 0


def test_passive_adversary_leaves_transcript_identical():
    cfg = small_config(n_signal=1000)
    plain = execute_session(cfg, 4)
    tapped = execute_session(cfg.with_overrides(**{"adversary.strategy": "passive"}), 4)
    assert [e[2] for e in plain.transcript.entries] == [e[2] for e in tapped.transcript.entries]
    assert tapped.adversary.capture_log


def test_high_noise_aborts_at_signal_gate():
    cfg = small_config(protocol="sarg04", n_signal=4000, **{"channel.flip_prob": 0.2})
    assert run_session(cfg, 0).abort_reason == "SignalQber"


def test_reserve_mode_skips_kem():
    reserve = np.random.default_rng(0).integers(0, 2, 256)
    run = execute_session(small_config(n_signal=2000), 5, reserve=reserve)
    assert run.metrics.outcome == "Established"
    assert "KEM_CT" not in run.transcript.kinds()
    assert run.alice.kem_calls == 0 and run.bob.kem_calls == 0
    with pytest.raises(InsufficientReserve):
        execute_session(small_config(), 5, reserve=reserve[:100])


def test_chained_rounds_fill_pool():
    from dualqkd.qkd.pool import KeyPool

    pools = (KeyPool(), KeyPool())
    cfg = small_config(n_signal=4000)
    execute_session(cfg, 1, pools=pools)
    execute_session(cfg, 2, pools=pools)
    assert pools[0].available == pools[1].available > 0
    assert np.array_equal(pools[0].draw(64)[1], pools[1].draw(64)[1])


def test_unknown_transport():
    with pytest.raises(ValueError):
        execute_session(small_config(), 0, "carrier-pigeon")


def test_harness_failure_is_transport_error():
    cfg = small_config()
    a, b = make_endpoints(cfg, 0)
    with pytest.raises(TransportError):
        run_in_process(a, b, Middlebox(cfg.channel.params(), np.random.default_rng(0)), max_frames=3)
    assert a.abort_reason is None and b.abort_reason is None


# -- protocol violations and state-machine fuzz ------------------------------

def make_endpoints(cfg, seed):
    rngs = session_rngs(seed)
    kem = get_provider(cfg.kem)
    ka, kb = kem.keygen(rngs["kem"]), kem.keygen(rngs["kem"])
    return (Endpoint("A", cfg, ka, kb.public, kem, rngs["alice"]),
            Endpoint("B", cfg, kb, ka.public, kem, rngs["bob"]))


def test_signal_message_before_auth_rejected():
    a, b = make_endpoints(small_config(), 0)
    a.start()
    for kind in (MsgType.BASES, MsgType.PULSE, MsgType.SACRIFICE, MsgType.QAUTH_REVEAL):
        with pytest.raises(ProtocolViolation):
            b.receive(wire.encode_frame(kind, b"\x00" * 8))
    assert b.state == State.IDLE and len(b.history) == 1


def test_message_after_terminal_state_rejected():
    cfg = small_config(n_signal=2000)
    a, b = make_endpoints(cfg, 1)
    run_in_process(a, b, Middlebox(cfg.channel.params(), np.random.default_rng(0)))
    assert a.state == State.ESTABLISHED
    with pytest.raises(ProtocolViolation):
        a.receive(wire.encode_frame(MsgType.HELLO, b""))


def test_only_initiator_starts():
    a, b = make_endpoints(small_config(), 0)
    with pytest.raises(ProtocolViolation):
        b.start()
    a.start()
    with pytest.raises(ProtocolViolation):
        a.start()


def _check_edges(ep):
    states = [s for s, _ in ep.history]
    return all(e in ep.edges for e in zip(states, states[1:]))


def _deliver(world, i, keep):
    """Deliver pending frame ``i``; with ``keep`` the frame stays queued (duplication)."""
    a, b, pending = world
    direction, frame = pending[i]
    if not keep:
        pending = pending[:i] + pending[i + 1:]
    receiver = b if direction == "A2B" else a
    back = "B2A" if direction == "A2B" else "A2B"
    if receiver.done:
        return a, b, pending
    before = (receiver.state, len(receiver.history))
    try:
        out = receiver.receive(frame)
    except ProtocolViolation:
        assert (receiver.state, len(receiver.history)) == before
        return a, b, pending
    return a, b, pending + [(back, f) for f in out]


def _replay(cfg, actions):
    # endpoints hold locks and generators, so rebuild each trace from scratch
    a, b = make_endpoints(cfg, 0)
    world = (a, b, [("A2B", f) for f in a.start()])
    for i, keep in actions:
        world = _deliver(world, i, keep)
    return world


def _explore(cfg, actions, depth, counter):
    a, b, pending = _replay(cfg, actions)
    assert _check_edges(a) and _check_edges(b)
    counter[0] += 1
    if depth == 0:
        return
    for i in range(len(pending)):
        for keep in (False, True):
            _explore(cfg, actions + [(i, keep)], depth - 1, counter)


@pytest.mark.parametrize("protocol", ["proposed", "sarg04"])
def test_exhaustive_reorder_duplicate_depth_eight(protocol):
    cfg = SessionConfig().with_overrides(protocol=protocol, n_signal=64, **{"auth.sequence_len": 16})
    counter = [0]
    _explore(cfg, [], 8, counter)
    assert counter[0] > 1000


@pytest.mark.parametrize("protocol", ["proposed", "sarg04"])
def test_randomized_transport_fuzz(protocol):
    cfg = SessionConfig().with_overrides(protocol=protocol, n_signal=256, **{"auth.sequence_len": 32})
    outcomes = set()
    for seed in range(150):
        rng = np.random.default_rng(seed)
        a, b = make_endpoints(cfg, seed)
        world = (a, b, [("A2B", f) for f in a.start()])
        for _ in range(200):
            pending = world[2]
            if not pending:
                break
            i = int(rng.integers(len(pending)))
            world = _deliver(world, i, keep=bool(rng.random() < 0.15))
            assert _check_edges(world[0]) and _check_edges(world[1])
        outcomes.add((world[0].state, world[1].state))
    assert any(State.ABORTED in o for o in outcomes)


# -- config -----------------------------------------------------------------

def test_empty_seed_list_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "fig2_qber_vs_keysize", "seeds": []})


@pytest.mark.parametrize("bad", [
    {"protocol": "e91"}, {"kem": "rsa"}, {"n_signal": -1}, {"schema_version": 9},
    {"colour": "blue"}, {"channel": {"flip": 0.1}}, {"channel": {"flip_prob": 2.0}},
    {"auth": {"auth_fraction": 1.0}}, {"adversary": {"strategy": "jam"}},
    {"channel": {"pulse_model": "laser"}},
])
def test_session_config_validation(bad):
    with pytest.raises(ConfigError):
        SessionConfig.from_dict(bad)


def test_yaml_config_files(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("schema_version: 1\nprotocol: sarg04\nchannel:\n  flip_prob: 0.02\n")
    cfg = load_session_config(p)
    assert cfg.protocol == "sarg04" and cfg.channel.flip_prob == 0.02
    e = tmp_path / "e.yaml"
    e.write_text("experiment: table4_efficiency\nseeds: [1, 2]\nsession:\n  n_signal: 500\n")
    exp = load_experiment_config(e)
    assert exp.seeds == [1, 2] and exp.session.n_signal == 500


def test_config_digest_stable_and_sensitive():
    a = SessionConfig()
    assert a.digest() == SessionConfig().digest()
    assert a.digest() != a.with_overrides(**{"channel.flip_prob": 0.01}).digest()
