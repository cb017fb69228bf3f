import hashlib

import numpy as np
import pytest

import fips203_ref as ref
from dualqkd.handshake import (
    AbortClassicalAuth, InsufficientReserve, KeystreamExhausted, check_tag, confirm_key,
    derive_keystream, handshake, next_round_keystream, transcript_hash,
)
from dualqkd.kem import MlKem768, ToyKem, get_provider

PROVIDERS = [ToyKem(), MlKem768()]
IDS = ["toy", "ml-kem-768"]

# SHA-256 of the ML-KEM-768 encapsulation key for seed d = 00..1f, z = 20..3f,
# computed with the pure-Python reference and frozen.
FROZEN_EK_SHA256 = "0b7934c83125c788995e2ba6bd761e33046b3e40571be53e023309a29f398cc9"


@pytest.mark.parametrize("kem", PROVIDERS, ids=IDS)
def test_kem_roundtrips(kem):
    rng = np.random.default_rng(0)
    trials = 1000 if kem.name == "toy" else 200
    for _ in range(trials):
        kp = kem.keygen(rng)
        ct, ss = kem.encapsulate(kp.public, rng)
        assert kem.decapsulate(ct, kp.secret) == ss
        assert len(ss) == 32


@pytest.mark.parametrize("kem", PROVIDERS, ids=IDS)
def test_kem_implicit_rejection(kem):
    rng = np.random.default_rng(1)
    kp = kem.keygen(rng)
    ct, ss = kem.encapsulate(kp.public, rng)
    bad = bytes([ct[0] ^ 1]) + ct[1:]
    out = kem.decapsulate(bad, kp.secret)
    assert len(out) == 32 and out != ss
    assert len(kem.decapsulate(ct[:-1], kp.secret)) == 32


def test_mlkem_keygen_matches_reference():
    d, z = bytes(range(32)), bytes(range(32, 64))
    ek, _ = ref.keygen_internal(d, z)
    kp_pub = MlKem768()._mlkem.MLKEM768PrivateKey.from_seed_bytes(d + z).public_key().public_bytes_raw()
    assert kp_pub == ek


def test_mlkem_reference_frozen_digest():
    ek, dk = ref.keygen_internal(bytes(range(32)), bytes(range(32, 64)))
    assert (len(ek), len(dk)) == (1184, 2400)
    assert hashlib.sha256(ek).hexdigest() == FROZEN_EK_SHA256


@pytest.mark.parametrize("seed", range(3))
def test_mlkem_decapsulates_reference_ciphertexts(seed):
    rng = np.random.default_rng(seed)
    kem = MlKem768()
    kp = kem.keygen(rng)
    _, dk = ref.keygen_internal(kp.secret[:32], kp.secret[32:])
    m = rng.bytes(32)
    key, ct = ref.encaps_internal(kp.public, m)
    assert kem.decapsulate(ct, kp.secret) == key
    bad = ct[:-1] + bytes([ct[-1] ^ 0x10])
    assert kem.decapsulate(bad, kp.secret) == ref.decaps_internal(dk, bad)


def test_mlkem_provider_ciphertexts_decapsulate_in_reference():
    rng = np.random.default_rng(7)
    kem = MlKem768()
    kp = kem.keygen(rng)
    _, dk = ref.keygen_internal(kp.secret[:32], kp.secret[32:])
    ct, ss = kem.encapsulate(kp.public, rng)
    assert ref.decaps_internal(dk, ct) == ss


@pytest.mark.parametrize("kem", PROVIDERS, ids=IDS)
def test_honest_handshake(kem):
    rng = np.random.default_rng(2)
    a, b = kem.keygen(rng), kem.keygen(rng)
    res = handshake(a, b, kem, rng)
    assert res.ss_a == res.ss_b and len(res.session_id) == 16
    assert [k for _, k, _ in res.messages] == ["HELLO", "HELLO", "KEM_CT", "KEM_CT", "CONFIRM", "CONFIRM"]


@pytest.mark.parametrize("kem", PROVIDERS, ids=IDS)
def test_ciphertext_bit_flip_aborts(kem):
    rng = np.random.default_rng(3)
    a, b = kem.keygen(rng), kem.keygen(rng)

    def flip(direction, kind, body):
        if kind == "KEM_CT" and direction == "A2B":
            return bytes([body[0] ^ 0x01]) + body[1:]
        return body

    with pytest.raises(AbortClassicalAuth):
        handshake(a, b, kem, rng, relay=flip)


def test_every_single_bit_tamper_aborts():
    kem = ToyKem()
    rng = np.random.default_rng(4)
    a, b = kem.keygen(rng), kem.keygen(rng)
    for target in ("KEM_CT", "CONFIRM"):
        for direction in ("A2B", "B2A"):
            length = 32
            for bit in range(8 * length):
                def relay(d, kind, body, bit=bit, direction=direction, target=target):
                    if kind == target and d == direction:
                        out = bytearray(body)
                        out[bit // 8] ^= 0x80 >> (bit % 8)
                        return bytes(out)
                    return body

                with pytest.raises(AbortClassicalAuth):
                    handshake(a, b, kem, np.random.default_rng(bit), relay=relay)


def test_wrong_peer_key_in_hello_aborts():
    kem = ToyKem()
    rng = np.random.default_rng(5)
    a, b, mallory = kem.keygen(rng), kem.keygen(rng), kem.keygen(rng)

    def swap(direction, kind, body):
        if kind == "HELLO" and direction == "A2B":
            from dualqkd.handshake import hello_body
            return hello_body(mallory.public, body[32:])
        return body

    with pytest.raises(AbortClassicalAuth):
        handshake(a, b, kem, rng, relay=swap)


def test_confirm_tags():
    ss, th = b"s" * 32, transcript_hash(b"a", b"b")
    ta, tb = confirm_key(ss, th)
    assert ta != tb
    assert confirm_key(ss, th) == (ta, tb)
    ta2, _ = confirm_key(ss, transcript_hash(b"a", b"c"))
    assert ta2 != ta
    # reflecting Alice's own tag back as Bob's is rejected
    with pytest.raises(AbortClassicalAuth):
        check_tag(tb, ta)


def test_keystream_deterministic_and_direction_separated():
    ss, sid = b"k" * 32, b"i" * 16
    a1 = derive_keystream(ss, sid, "A2B", 1024).bits
    a2 = derive_keystream(ss, sid, "A2B", 1024).bits
    b = derive_keystream(ss, sid, "B2A", 1024).bits
    assert np.array_equal(a1, a2)
    assert (a1 != b).mean() >= 0.4


def test_keystream_monobit():
    bits = derive_keystream(b"m" * 32, b"s" * 16, "A2B", 10**6).bits
    assert abs(bits.mean() - 0.5) < 0.005


def test_keystream_length_extensible():
    long = derive_keystream(b"x" * 32, b"y" * 16, "A2B", 5000).bits
    short = derive_keystream(b"x" * 32, b"y" * 16, "A2B", 1234).bits
    assert np.array_equal(long[:1234], short)


def test_keystream_cursor_and_exhaustion():
    ks = derive_keystream(b"x" * 32, b"y" * 16, "A2B", 10)
    bits, idx = ks.take(4)
    assert idx.tolist() == [0, 1, 2, 3] and ks.cursor == 4
    ks.take_list(6)
    assert ks.read_log == list(range(10))
    with pytest.raises(KeystreamExhausted):
        ks.take(1)


def test_keystream_minimum_length():
    with pytest.raises(ValueError):
        derive_keystream(b"x", b"y", "A2B", 1)


def test_next_round_keystream():
    reserve = np.random.default_rng(0).integers(0, 2, 256)
    ks1 = next_round_keystream(reserve, b"a" * 16, 512)
    ks2 = next_round_keystream(reserve, b"b" * 16, 512)
    assert len(ks1) == 512 and not np.array_equal(ks1.bits, ks2.bits)
    with pytest.raises(InsufficientReserve):
        next_round_keystream(reserve[:64], b"a" * 16, 512)


def test_get_provider():
    assert get_provider("toy").name == "toy"
    with pytest.raises(ValueError):
        get_provider("rsa")
