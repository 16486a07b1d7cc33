"""Policy-gated key encapsulation with attribute-based access control.

A trusted authority derives per-attribute wrap keys from a master secret and
issues them to users.  Encryption seals the payload under a fresh content
key with AES-256-GCM, then splits that key down the access tree: every
threshold gate performs Shamir sharing over a 256-bit prime field (any k of
its n child shares reconstruct), and every leaf wraps its share under the
named attribute's key.  Decryption succeeds exactly when the caller's
attribute set satisfies the tree.

This is deliberately not pairing-based CP-ABE: attribute keys are
user-independent, so colluding users can pool keys.  What it preserves is
the externally observable contract -- policy-gated decryption, deterministic
ciphertext expansion, and per-frame encrypt/decrypt cost.

Blob wire layout (little-endian lengths):
    magic(4) | version(1) | policy_len(2) | policy | nonce(12) |
    share_count(2) | share records (64 bytes each) | ct_len(4) | ciphertext
with each share record:
    attr_fingerprint(12) | leaf_ordinal(2) | share_index(2) | wrapped(48)
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Iterable, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

BLOB_MAGIC = b"\xabEB1"  # first byte has the H.264 forbidden bit set, so a
                         # blob can never be mistaken for a valid NAL header
BLOB_VERSION = 1
NONCE_LEN = 12
TAG_LEN = 16
SHARE_RECORD_LEN = 64
_WRAPPED_LEN = 32 + TAG_LEN          # 32-byte field element + GCM tag
_FIXED_OVERHEAD = 4 + 1 + 2 + NONCE_LEN + 2 + 4

# Largest 256-bit prime; shares and the content secret live in GF(p).
PRIME = 2**256 - 189

MASTER_MAGIC = b"ABMK"
PUBLIC_MAGIC = b"ABPP"
PRIVATE_MAGIC = b"ABSK"


class AbeError(Exception):
    pass


class EmptyAttributeSet(AbeError):
    pass


class InvalidPolicy(AbeError):
    pass


class PolicyUnsatisfied(AbeError):
    pass


class CorruptCiphertext(AbeError):
    pass


class MalformedBlob(AbeError):
    pass


class MalformedKeyFile(AbeError):
    pass


# ---------------------------------------------------------------------------
# deterministic randomness

class Drbg:
    """SHA-256 counter stream; all randomness flows from explicit seeds."""

    def __init__(self, seed: Union[int, bytes, str]):
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "little", signed=False) if seed >= 0 else str(seed).encode()
        elif isinstance(seed, str):
            seed = seed.encode()
        self._key = hashlib.sha256(b"abedash-drbg:" + seed).digest()
        self._counter = 0

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += hashlib.sha256(self._key + self._counter.to_bytes(8, "little")).digest()
            self._counter += 1
        return bytes(out[:n])

    def field_element(self) -> int:
        # rejection sampling keeps the draw uniform in [0, PRIME)
        while True:
            v = int.from_bytes(self.bytes(32), "big")
            if v < PRIME:
                return v

    def child(self, label: str) -> "Drbg":
        return Drbg(self._key + label.encode())


# ---------------------------------------------------------------------------
# access policies

@dataclass(frozen=True)
class Leaf:
    attribute: str


@dataclass(frozen=True)
class Gate:
    threshold: int
    children: tuple["PolicyNode", ...]


PolicyNode = Union[Leaf, Gate]
AccessPolicy = PolicyNode

_ATTR_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.:-")


def validate_policy(policy: PolicyNode) -> None:
    if isinstance(policy, Leaf):
        if not policy.attribute or set(policy.attribute) - _ATTR_OK:
            raise InvalidPolicy(f"bad attribute name {policy.attribute!r}")
        return
    if isinstance(policy, Gate):
        n = len(policy.children)
        if n < 1 or not 1 <= policy.threshold <= n:
            raise InvalidPolicy(f"threshold {policy.threshold} of {n} children")
        for child in policy.children:
            validate_policy(child)
        return
    raise InvalidPolicy(f"not a policy node: {policy!r}")


def satisfies(policy: PolicyNode, attrs: Iterable[str]) -> bool:
    """True iff the attribute set opens the access tree."""
    attrs = set(attrs)

    def walk(node: PolicyNode) -> bool:
        if isinstance(node, Leaf):
            return node.attribute in attrs
        return sum(walk(c) for c in node.children) >= node.threshold

    return walk(policy)


def policy_to_text(policy: PolicyNode) -> str:
    """Canonical text form: attr | and(...) | or(...) | thresh(k,...)."""
    if isinstance(policy, Leaf):
        return policy.attribute
    parts = ",".join(policy_to_text(c) for c in policy.children)
    if policy.threshold == len(policy.children) and len(policy.children) > 1:
        return f"and({parts})"
    if policy.threshold == 1 and len(policy.children) > 1:
        return f"or({parts})"
    return f"thresh({policy.threshold},{parts})"


def policy_from_text(text: str) -> PolicyNode:
    text = text.strip()
    pos = 0

    def error(msg: str) -> InvalidPolicy:
        return InvalidPolicy(f"{msg} at position {pos}: {text!r}")

    def parse_node() -> PolicyNode:
        nonlocal pos
        start = pos
        while pos < len(text) and text[pos] in _ATTR_OK:
            pos += 1
        word = text[start:pos]
        if not word:
            raise error("expected attribute or gate")
        if pos < len(text) and text[pos] == "(":
            pos += 1
            children = [parse_node()]
            while pos < len(text) and text[pos] == ",":
                pos += 1
                children.append(parse_node())
            if pos >= len(text) or text[pos] != ")":
                raise error("expected ')'")
            pos += 1
            if word == "and":
                return Gate(len(children), tuple(children))
            if word == "or":
                return Gate(1, tuple(children))
            if word == "thresh":
                if not isinstance(children[0], Leaf) or not children[0].attribute.isdigit():
                    raise error("thresh needs a leading integer")
                k = int(children[0].attribute)
                return Gate(k, tuple(children[1:]))
            raise error(f"unknown gate {word!r}")
        return Leaf(word)

    node = parse_node()
    if pos != len(text):
        raise error("trailing input")
    validate_policy(node)
    return node


def policy_leaves(policy: PolicyNode) -> list[Leaf]:
    """Leaves in preorder; the ordinal in this list keys the share records."""
    out: list[Leaf] = []

    def walk(node: PolicyNode) -> None:
        if isinstance(node, Leaf):
            out.append(node)
        else:
            for child in node.children:
                walk(child)

    walk(policy)
    return out


# ---------------------------------------------------------------------------
# keys

@dataclass(frozen=True)
class MasterKey:
    master_secret: bytes
    attribute_seed: bytes

    def attribute_key(self, attribute: str) -> bytes:
        return hmac.new(self.attribute_seed, b"attr-key:" + attribute.encode(),
                        hashlib.sha256).digest()


@dataclass(frozen=True)
class PublicParams:
    system_id: bytes
    version: int = 1

    def to_bytes(self) -> bytes:
        return PUBLIC_MAGIC + bytes([1]) + self.system_id + struct.pack("<I", self.version)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicParams":
        if len(data) != 25 or data[:4] != PUBLIC_MAGIC or data[4] != 1:
            raise MalformedKeyFile("not a public-params file")
        return cls(data[5:21], struct.unpack("<I", data[21:25])[0])


@dataclass(frozen=True)
class PrivateKey:
    user_id: str
    attribute_keys: dict[str, bytes]

    @property
    def attributes(self) -> set[str]:
        return set(self.attribute_keys)

    def attribute_key(self, attribute: str) -> bytes:
        return self.attribute_keys[attribute]

    def to_bytes(self) -> bytes:
        uid = self.user_id.encode()
        out = bytearray(PRIVATE_MAGIC + bytes([1]))
        out += struct.pack("<H", len(uid)) + uid
        out += struct.pack("<H", len(self.attribute_keys))
        for name in sorted(self.attribute_keys):
            raw = name.encode()
            out += struct.pack("<H", len(raw)) + raw + self.attribute_keys[name]
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PrivateKey":
        try:
            if data[:4] != PRIVATE_MAGIC or data[4] != 1:
                raise MalformedKeyFile("not a private-key file")
            pos = 5
            (uid_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            user_id = data[pos:pos + uid_len].decode()
            pos += uid_len
            (count,) = struct.unpack_from("<H", data, pos)
            pos += 2
            keys = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + name_len].decode()
                pos += name_len
                keys[name] = data[pos:pos + 32]
                if len(keys[name]) != 32:
                    raise MalformedKeyFile("truncated attribute key")
                pos += 32
            return cls(user_id, keys)
        except (struct.error, UnicodeDecodeError, IndexError) as exc:
            raise MalformedKeyFile(str(exc)) from exc


def master_key_to_bytes(mk: MasterKey) -> bytes:
    return MASTER_MAGIC + bytes([1]) + mk.master_secret + mk.attribute_seed


def master_key_from_bytes(data: bytes) -> MasterKey:
    if len(data) != 69 or data[:4] != MASTER_MAGIC or data[4] != 1:
        raise MalformedKeyFile("not a master-key file")
    return MasterKey(data[5:37], data[37:69])


def setup(seed: bytes) -> tuple[MasterKey, PublicParams]:
    """Authority setup; deterministic in the 32-byte seed."""
    if len(seed) != 32:
        raise ValueError("setup seed must be 32 bytes")
    master_secret = hashlib.sha256(b"master:" + seed).digest()
    attribute_seed = hashlib.sha256(b"attrs:" + seed).digest()
    system_id = hashlib.sha256(b"system:" + seed).digest()[:16]
    return MasterKey(master_secret, attribute_seed), PublicParams(system_id)


def keygen(mk: MasterKey, user_id: str, attrs: Iterable[str]) -> PrivateKey:
    attrs = set(attrs)
    if not attrs:
        raise EmptyAttributeSet("attribute set must be non-empty")
    return PrivateKey(user_id, {a: mk.attribute_key(a) for a in sorted(attrs)})


# ---------------------------------------------------------------------------
# Shamir sharing over GF(PRIME)

def _poly_eval(coeffs: list[int], x: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % PRIME
    return acc


def split_secret(secret: int, threshold: int, n_shares: int, drbg: Drbg) -> list[int]:
    """Shares at x = 1..n_shares; any ``threshold`` of them reconstruct."""
    coeffs = [secret % PRIME] + [drbg.field_element() for _ in range(threshold - 1)]
    return [_poly_eval(coeffs, x) for x in range(1, n_shares + 1)]


def reconstruct_secret(points: list[tuple[int, int]]) -> int:
    """Lagrange interpolation at x = 0."""
    acc = 0
    for i, (x_i, y_i) in enumerate(points):
        num = 1
        den = 1
        for j, (x_j, _) in enumerate(points):
            if i == j:
                continue
            num = num * (-x_j) % PRIME
            den = den * (x_i - x_j) % PRIME
        acc = (acc + y_i * num * pow(den, PRIME - 2, PRIME)) % PRIME
    return acc


# ---------------------------------------------------------------------------
# blob format

@dataclass(frozen=True)
class EncryptedBlob:
    policy: PolicyNode
    nonce: bytes
    wrapped_shares: tuple[tuple[str, int, int, bytes], ...]  # (attr, leaf_ord, share_index, wrapped)
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        policy_raw = policy_to_text(self.policy).encode()
        out = bytearray(BLOB_MAGIC)
        out.append(BLOB_VERSION)
        out += struct.pack("<H", len(policy_raw)) + policy_raw
        out += self.nonce
        out += struct.pack("<H", len(self.wrapped_shares))
        for attr, leaf_ord, share_index, wrapped in self.wrapped_shares:
            out += _attr_fingerprint(attr)
            out += struct.pack("<HH", leaf_ord, share_index)
            out += wrapped
        out += struct.pack("<I", len(self.ciphertext))
        out += self.ciphertext
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedBlob":
        try:
            if data[:4] != BLOB_MAGIC:
                raise MalformedBlob("bad magic")
            if data[4] != BLOB_VERSION:
                raise MalformedBlob(f"unknown version {data[4]}")
            pos = 5
            (policy_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            policy = policy_from_text(data[pos:pos + policy_len].decode())
            pos += policy_len
            nonce = data[pos:pos + NONCE_LEN]
            pos += NONCE_LEN
            (share_count,) = struct.unpack_from("<H", data, pos)
            pos += 2
            leaves = policy_leaves(policy)
            shares = []
            for _ in range(share_count):
                record = data[pos:pos + SHARE_RECORD_LEN]
                if len(record) != SHARE_RECORD_LEN:
                    raise MalformedBlob("truncated share record")
                leaf_ord, share_index = struct.unpack_from("<HH", record, 12)
                if leaf_ord >= len(leaves):
                    raise MalformedBlob("share record for unknown leaf")
                attr = leaves[leaf_ord].attribute
                if record[:12] != _attr_fingerprint(attr):
                    raise MalformedBlob("attribute fingerprint mismatch")
                shares.append((attr, leaf_ord, share_index, record[16:]))
                pos += SHARE_RECORD_LEN
            (ct_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ciphertext = data[pos:pos + ct_len]
            if len(ciphertext) != ct_len or pos + ct_len != len(data):
                raise MalformedBlob("ciphertext length mismatch")
            return cls(policy, nonce, tuple(shares), ciphertext)
        except MalformedBlob:
            raise
        except (struct.error, UnicodeDecodeError, InvalidPolicy, IndexError) as exc:
            raise MalformedBlob(str(exc)) from exc


def _attr_fingerprint(attribute: str) -> bytes:
    return hashlib.sha256(b"attr-fp:" + attribute.encode()).digest()[:12]


def _leaf_nonce(blob_nonce: bytes, leaf_ordinal: int) -> bytes:
    return hashlib.sha256(b"share-nonce:" + blob_nonce +
                          struct.pack("<H", leaf_ordinal)).digest()[:NONCE_LEN]


def header_size(policy: PolicyNode) -> int:
    """Blob bytes in excess of the ciphertext: a pure function of the policy."""
    policy_raw = policy_to_text(policy).encode()
    return _FIXED_OVERHEAD + len(policy_raw) + SHARE_RECORD_LEN * len(policy_leaves(policy))


def blob_overhead(policy: PolicyNode) -> int:
    """Total size increase over the plaintext: header plus the GCM tag."""
    return header_size(policy) + TAG_LEN


def is_blob(data: bytes) -> bool:
    return data[:4] == BLOB_MAGIC


def encrypt(pp: PublicParams, key_source, policy: PolicyNode, plaintext: bytes,
            rng_seed: Union[int, bytes, str]) -> EncryptedBlob:
    """Seal ``plaintext`` so that only attribute sets satisfying ``policy``
    can recover it.

    ``key_source`` must expose ``attribute_key(name) -> bytes`` (a MasterKey
    does); it is the encryptor's access to attribute-key derivation.
    """
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    validate_policy(policy)
    drbg = Drbg(rng_seed)
    nonce = drbg.bytes(NONCE_LEN)
    content_secret = drbg.field_element()
    content_key = content_secret.to_bytes(32, "big")

    records: list[tuple[str, int, int, bytes]] = []
    leaf_counter = [0]
    gate_counter = [0]

    def descend(node: PolicyNode, secret: int, share_index: int) -> None:
        if isinstance(node, Leaf):
            leaf_ord = leaf_counter[0]
            leaf_counter[0] += 1
            wrap_key = key_source.attribute_key(node.attribute)
            wrapped = AESGCM(wrap_key).encrypt(_leaf_nonce(nonce, leaf_ord),
                                               secret.to_bytes(32, "big"), None)
            records.append((node.attribute, leaf_ord, share_index, wrapped))
            return
        gate_counter[0] += 1
        shares = split_secret(secret, node.threshold, len(node.children),
                              drbg.child(f"gate-{gate_counter[0]}"))
        for i, child in enumerate(node.children):
            descend(child, shares[i], i + 1)

    descend(policy, content_secret, 0)
    policy_raw = policy_to_text(policy).encode()
    ciphertext = AESGCM(content_key).encrypt(nonce, plaintext, policy_raw)
    return EncryptedBlob(policy, nonce, tuple(records), ciphertext)


def decrypt(sk: PrivateKey, blob: EncryptedBlob) -> bytes:
    """Recover the plaintext; mirrors the satisfiability recursion.

    Raises PolicyUnsatisfied when the key's attributes do not open the
    policy, CorruptCiphertext on any authentication failure.
    """
    if not satisfies(blob.policy, sk.attributes):
        raise PolicyUnsatisfied(
            f"attributes {sorted(sk.attributes)} do not satisfy "
            f"{policy_to_text(blob.policy)!r}"
        )
    by_ordinal = {leaf_ord: wrapped
                  for _attr, leaf_ord, _idx, wrapped in blob.wrapped_shares}
    leaf_counter = [0]

    def ascend(node: PolicyNode) -> int | None:
        if isinstance(node, Leaf):
            leaf_ord = leaf_counter[0]
            leaf_counter[0] += 1
            if node.attribute not in sk.attribute_keys:
                return None
            if leaf_ord not in by_ordinal:
                raise MalformedBlob(f"missing share for leaf {leaf_ord}")
            try:
                raw = AESGCM(sk.attribute_keys[node.attribute]).decrypt(
                    _leaf_nonce(blob.nonce, leaf_ord), by_ordinal[leaf_ord], None)
            except InvalidTag as exc:
                raise CorruptCiphertext("share unwrap failed") from exc
            return int.from_bytes(raw, "big")
        points = []
        for i, child in enumerate(node.children):
            value = ascend(child)  # always recurse: leaf ordinals must advance
            if value is not None:
                points.append((i + 1, value))
        if len(points) < node.threshold:
            return None
        points = points[:node.threshold]
        if node.threshold == 1:
            return points[0][1]
        return reconstruct_secret(points)

    content_secret = ascend(blob.policy)
    if content_secret is None:  # unreachable once satisfies() passed
        raise PolicyUnsatisfied("share reconstruction fell short")
    content_key = content_secret.to_bytes(32, "big")
    policy_raw = policy_to_text(blob.policy).encode()
    try:
        return AESGCM(content_key).decrypt(blob.nonce, blob.ciphertext, policy_raw)
    except InvalidTag as exc:
        raise CorruptCiphertext("payload authentication failed") from exc
