import itertools
import random
import struct

import pytest

from abedash import abekit
from abedash.abekit import (
    CorruptCiphertext, Drbg, EmptyAttributeSet, EncryptedBlob, Gate, InvalidPolicy,
    Leaf, MalformedBlob, PolicyUnsatisfied, decrypt, encrypt, header_size, keygen,
    policy_from_text, policy_to_text, reconstruct_secret, satisfies, setup,
    split_secret,
)
from policy_enum import all_subsets, enumerate_policies

SEED = b"\x01" * 32


@pytest.fixture(scope="module")
def authority():
    mk, pp = setup(SEED)
    return mk, pp


# --- setup -------------------------------------------------------------------

def test_setup_deterministic():
    assert setup(SEED) == setup(SEED)
    other, _ = setup(b"\x02" * 32)
    assert other.master_secret != setup(SEED)[0].master_secret


def test_public_params_carry_no_secret(authority):
    mk, pp = authority
    raw = pp.to_bytes()
    assert mk.master_secret not in raw
    assert mk.attribute_seed not in raw
    assert abekit.PublicParams.from_bytes(raw) == pp


def test_setup_rejects_short_seed():
    with pytest.raises(ValueError):
        setup(b"short")


# --- keygen ------------------------------------------------------------------

def test_keygen_single_attribute(authority):
    mk, _ = authority
    sk = keygen(mk, "alice", {"subscriber"})
    assert set(sk.attribute_keys) == {"subscriber"}


def test_keygen_user_independent(authority):
    mk, _ = authority
    a = keygen(mk, "alice", {"a", "b"})
    b = keygen(mk, "bob", {"a", "c"})
    assert a.attribute_keys["a"] == b.attribute_keys["a"]


def test_keygen_empty_attrs(authority):
    mk, _ = authority
    with pytest.raises(EmptyAttributeSet):
        keygen(mk, "alice", set())


def test_private_key_round_trip(authority):
    mk, _ = authority
    sk = keygen(mk, "alice", {"a", "b", "c"})
    assert abekit.PrivateKey.from_bytes(sk.to_bytes()) == sk


# --- satisfies ---------------------------------------------------------------

def test_satisfies_leaf():
    assert satisfies(Leaf("subscriber"), {"subscriber"})
    assert not satisfies(Leaf("subscriber"), {"guest"})


def test_satisfies_and_gate():
    policy = Gate(2, (Leaf("a"), Leaf("b")))
    assert not satisfies(policy, {"a"})
    assert satisfies(policy, {"a", "b"})


def test_satisfies_threshold_brute_force():
    # oracle: count leaf memberships over all 8 subsets of {a, b, c}
    policy = Gate(2, (Leaf("a"), Leaf("b"), Leaf("c")))
    for subset in all_subsets(["a", "b", "c"]):
        expected = sum(x in subset for x in "abc") >= 2
        assert satisfies(policy, subset) == expected
    assert satisfies(policy, {"a", "c"})


# --- policy text form --------------------------------------------------------

@pytest.mark.parametrize("text", [
    "subscriber",
    "and(a,b)",
    "or(a,b,c)",
    "thresh(2,a,b,c)",
    "and(a,or(b,thresh(2,c,d,e)))",
])
def test_policy_text_round_trip(text):
    assert policy_to_text(policy_from_text(text)) == text


@pytest.mark.parametrize("bad", ["", "and(a", "thresh(a,b)", "and()", "a b", "or(a,)"])
def test_policy_text_rejects_garbage(bad):
    with pytest.raises(InvalidPolicy):
        policy_from_text(bad)


def test_invalid_threshold():
    with pytest.raises(InvalidPolicy):
        abekit.validate_policy(Gate(3, (Leaf("a"), Leaf("b"))))


# --- Shamir layer ------------------------------------------------------------

def test_split_reconstruct_all_quorums():
    drbg = Drbg(99)
    secret = 123456789
    for n in (2, 3, 5):
        for k in range(1, n + 1):
            shares = split_secret(secret, k, n, drbg)
            for quorum in itertools.combinations(enumerate(shares, start=1), k):
                assert reconstruct_secret(list(quorum)) == secret


def test_insufficient_quorum_garbage():
    drbg = Drbg(5)
    shares = split_secret(42, 3, 4, drbg)
    assert reconstruct_secret([(1, shares[0]), (2, shares[1])]) != 42


# --- encrypt / decrypt -------------------------------------------------------

def test_round_trip_single_attribute(authority):
    mk, pp = authority
    blob = encrypt(pp, mk, Leaf("subscriber"), b"secret frame", rng_seed=1)
    sk = keygen(mk, "alice", {"subscriber"})
    assert decrypt(sk, blob) == b"secret frame"
    guest = keygen(mk, "eve", {"guest"})
    with pytest.raises(PolicyUnsatisfied):
        decrypt(guest, blob)


def test_probabilistic_encryption(authority):
    mk, pp = authority
    a = encrypt(pp, mk, Leaf("s"), b"payload", rng_seed=1)
    b = encrypt(pp, mk, Leaf("s"), b"payload", rng_seed=2)
    assert a.to_bytes() != b.to_bytes()
    sk = keygen(mk, "u", {"s"})
    assert decrypt(sk, a) == decrypt(sk, b) == b"payload"


def test_flipped_ciphertext_byte(authority):
    mk, pp = authority
    blob = encrypt(pp, mk, Leaf("s"), b"payload", rng_seed=3)
    raw = bytearray(blob.to_bytes())
    raw[-1] ^= 0x01
    sk = keygen(mk, "u", {"s"})
    with pytest.raises(CorruptCiphertext):
        decrypt(sk, EncryptedBlob.from_bytes(bytes(raw)))


def test_foreign_master_key_fails(authority):
    mk, pp = authority
    blob = encrypt(pp, mk, Leaf("s"), b"payload", rng_seed=3)
    other_mk, _ = setup(b"\x09" * 32)
    with pytest.raises(CorruptCiphertext):
        decrypt(keygen(other_mk, "u", {"s"}), blob)


@pytest.mark.parametrize("length", [1, 16, 4096, 10**6])
def test_round_trip_lengths(authority, length):
    mk, pp = authority
    plaintext = bytes((i * 31) & 0xFF for i in range(length))
    blob = encrypt(pp, mk, Leaf("s"), plaintext, rng_seed=length)
    assert len(blob.to_bytes()) == length + header_size(Leaf("s")) + abekit.TAG_LEN
    assert decrypt(keygen(mk, "u", {"s"}), blob) == plaintext


def test_empty_plaintext_rejected(authority):
    mk, pp = authority
    with pytest.raises(ValueError):
        encrypt(pp, mk, Leaf("s"), b"", rng_seed=0)


# --- wire layout -------------------------------------------------------------

def test_blob_wire_layout_field_by_field(authority):
    mk, pp = authority
    blob = encrypt(pp, mk, Leaf("a"), b"hello", rng_seed=7)
    raw = blob.to_bytes()
    assert raw[:4] == abekit.BLOB_MAGIC
    assert raw[4] == abekit.BLOB_VERSION
    (policy_len,) = struct.unpack_from("<H", raw, 5)
    assert policy_len == 1 and raw[7:8] == b"a"
    nonce = raw[8:20]
    assert nonce == blob.nonce and len(nonce) == 12
    (share_count,) = struct.unpack_from("<H", raw, 20)
    assert share_count == 1
    record = raw[22:22 + 64]
    assert len(record) == 64
    leaf_ord, share_index = struct.unpack_from("<HH", record, 12)
    assert (leaf_ord, share_index) == (0, 0)
    (ct_len,) = struct.unpack_from("<I", raw, 86)
    assert ct_len == 5 + abekit.TAG_LEN
    assert len(raw) == 90 + ct_len
    assert header_size(Leaf("a")) == 90  # fixed 25 + policy 1 + one 64-byte share
    assert EncryptedBlob.from_bytes(raw) == blob


def test_header_size_is_fixed_plus_64_per_leaf():
    base = abekit._FIXED_OVERHEAD
    assert header_size(Leaf("subscriber")) == base + len("subscriber") + 64
    two = Gate(1, (Leaf("a"), Leaf("b")))
    assert header_size(two) == base + len("or(a,b)") + 2 * 64


def test_malformed_blob_variants(authority):
    mk, pp = authority
    raw = encrypt(pp, mk, Leaf("s"), b"x", rng_seed=1).to_bytes()
    with pytest.raises(MalformedBlob):
        EncryptedBlob.from_bytes(b"nope" + raw[4:])
    with pytest.raises(MalformedBlob):
        EncryptedBlob.from_bytes(raw[:-3])
    with pytest.raises(MalformedBlob):
        EncryptedBlob.from_bytes(raw + b"\x00")


# --- gate properties ---------------------------------------------------------

ATTRS = ["a", "b", "c", "d"]


def test_decrypt_iff_satisfies_depth_two_exhaustive(authority):
    mk, pp = authority
    keys = {s: keygen(mk, "u", s) for s in all_subsets(ATTRS) if s}
    for i, policy in enumerate(enumerate_policies(ATTRS, max_depth=2, max_leaves=3)):
        blob = encrypt(pp, mk, policy, b"gate", rng_seed=i)
        for subset in all_subsets(ATTRS):
            expected = satisfies(policy, subset)
            if not subset:
                assert not expected
                continue
            if expected:
                assert decrypt(keys[subset], blob) == b"gate"
            else:
                with pytest.raises(PolicyUnsatisfied):
                    decrypt(keys[subset], blob)


def test_decrypt_iff_satisfies_depth_three_sampled(authority):
    mk, pp = authority
    rng = random.Random(12)
    trees = list(enumerate_policies(["a", "b", "c", "d", "e"], max_depth=3, max_leaves=5))
    keys = {s: keygen(mk, "u", s) for s in all_subsets(["a", "b", "c", "d", "e"]) if s}
    for i in rng.sample(range(len(trees)), 300):
        policy = trees[i]
        blob = encrypt(pp, mk, policy, b"gate", rng_seed=i)
        for subset in all_subsets(["a", "b", "c", "d", "e"]):
            if not subset:
                continue
            if satisfies(policy, subset):
                assert decrypt(keys[subset], blob) == b"gate"
            else:
                with pytest.raises(PolicyUnsatisfied):
                    decrypt(keys[subset], blob)


def test_monotonicity_property():
    rng = random.Random(3)
    trees = list(enumerate_policies(ATTRS, max_depth=3, max_leaves=4))
    for _ in range(2000):
        policy = trees[rng.randrange(len(trees))]
        subset = {a for a in ATTRS if rng.random() < 0.5}
        if satisfies(policy, subset):
            superset = subset | {rng.choice(ATTRS)}
            assert satisfies(policy, superset)


def test_size_overhead_is_pure_function_of_policy(authority):
    mk, pp = authority
    rng = random.Random(4)
    for policy in [Leaf("x"), Gate(2, (Leaf("a"), Leaf("b"), Leaf("c")))]:
        expected = None
        for trial in range(10):
            plaintext = rng.randbytes(rng.randint(1, 5000))
            blob = encrypt(pp, mk, policy, plaintext, rng_seed=trial)
            delta = len(blob.to_bytes()) - len(plaintext)
            if expected is None:
                expected = delta
            assert delta == expected == header_size(policy) + abekit.TAG_LEN
