"""Selective encryption of tiled DASH segments.

Four strategies decide which frame types get encrypted per tile role: two
viewport-aware (major tile gets heavier encryption than the minor tiles) and
two uniform.  Encryption replaces each covered VCL NAL payload with a
policy-bound blob and fixes up only the NAL length prefixes; the container
metadata stays stale on purpose, so the segment is unplayable until the
original payloads are restored.  Encrypted files carry a filename suffix
naming their level so caches key the two forms separately.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Union

from . import abekit, bitstream
from .abekit import AccessPolicy, PrivateKey, PublicParams
from .bitstream import FrameType, MediaSegment


class SelencError(Exception):
    pass


class UnknownSuffix(SelencError):
    pass


class NoMatchingFrames(UserWarning):
    """Warning: the requested level covers no frame in this segment."""


class EncryptionLevel(Enum):
    """Which frame types are encrypted; ordered by coverage."""

    NONE = ()
    ALL_I = (FrameType.I,)
    ALL_IP = (FrameType.I, FrameType.P)
    FULL = (FrameType.I, FrameType.P, FrameType.B)

    @property
    def covered(self) -> frozenset:
        return frozenset(self.value)

    def covers(self, ftype: FrameType) -> bool:
        return ftype in self.covered

    def __lt__(self, other: "EncryptionLevel") -> bool:
        return self.covered < other.covered

    def __le__(self, other: "EncryptionLevel") -> bool:
        return self.covered <= other.covered


class SchemeId(Enum):
    FULL = "full"
    ALL_IP = "alliP"
    MAJOR_ALL_P = "majorP"
    MAJOR_ALL_I = "majorI"

    @property
    def viewport_aware(self) -> bool:
        return self in (SchemeId.MAJOR_ALL_P, SchemeId.MAJOR_ALL_I)


class TileRole(Enum):
    MAJOR = "major"
    MINOR = "minor"
    NON_VIEWPORT = "non_viewport"


_LEVEL_TABLE = {
    (SchemeId.MAJOR_ALL_P, TileRole.MAJOR): EncryptionLevel.ALL_IP,
    (SchemeId.MAJOR_ALL_P, TileRole.MINOR): EncryptionLevel.ALL_I,
    (SchemeId.MAJOR_ALL_I, TileRole.MAJOR): EncryptionLevel.ALL_I,
    (SchemeId.MAJOR_ALL_I, TileRole.MINOR): EncryptionLevel.NONE,
    (SchemeId.FULL, TileRole.MAJOR): EncryptionLevel.FULL,
    (SchemeId.FULL, TileRole.MINOR): EncryptionLevel.FULL,
    (SchemeId.ALL_IP, TileRole.MAJOR): EncryptionLevel.ALL_IP,
    (SchemeId.ALL_IP, TileRole.MINOR): EncryptionLevel.ALL_IP,
}


def level_for(scheme: SchemeId, role: TileRole) -> EncryptionLevel:
    """Encryption level of a tile under a scheme; non-viewport tiles are never
    encrypted."""
    if role is TileRole.NON_VIEWPORT:
        return EncryptionLevel.NONE
    return _LEVEL_TABLE[(scheme, role)]


# filename suffix convention: the encryption level rides on the tile URL, so
# the same tile at two levels never shares a cache key.
_SUFFIXES = {
    EncryptionLevel.NONE: "",
    EncryptionLevel.ALL_I: "_allI",
    EncryptionLevel.ALL_IP: "_allI+P",
    EncryptionLevel.FULL: "_full",
}
_SUFFIX_TOKENS = {"allI": EncryptionLevel.ALL_I,
                  "allI+P": EncryptionLevel.ALL_IP,
                  "full": EncryptionLevel.FULL}


def suffix_for(level: EncryptionLevel) -> str:
    return _SUFFIXES[level]


def parse_suffix(name: str) -> EncryptionLevel:
    """Encryption level named by a suffix or filename.

    Accepts a bare suffix ("", "_allI", ...) or a filename whose stem ends in
    one; matching strips a trailing ".m4s"/".mp4" first and looks at the last
    underscore-delimited token.  An "all"-prefixed token that is not a known
    level is rejected rather than silently treated as plain.
    """
    stem = name
    for ext in (".m4s", ".mp4"):
        if stem.endswith(ext):
            stem = stem[:-len(ext)]
            break
    if stem == "":
        return EncryptionLevel.NONE
    token = stem.rsplit("_", 1)[-1] if "_" in stem else stem
    if token in _SUFFIX_TOKENS:
        return _SUFFIX_TOKENS[token]
    if token.startswith("all"):
        raise UnknownSuffix(f"unknown encryption suffix {token!r} in {name!r}")
    return EncryptionLevel.NONE


def strip_suffix(name: str) -> str:
    """URL stem without the encryption suffix (extension kept)."""
    level = parse_suffix(name)
    sfx = _SUFFIXES[level]
    if not sfx:
        return name
    for ext in (".m4s", ".mp4"):
        if name.endswith(ext):
            stem = name[:-len(ext)]
            return stem[:-len(sfx)] + ext
    return name[:-len(sfx)]


@dataclass(frozen=True)
class EncryptedSegment:
    bytes: bytes
    level: EncryptionLevel
    frame_map: tuple[tuple[int, FrameType, bool], ...]  # (sample index, class, encrypted)


def encrypt_segment(seg_bytes: bytes, level: EncryptionLevel, policy: AccessPolicy,
                    pp: PublicParams, key_source, rng_seed) -> EncryptedSegment:
    """Encrypt every VCL NAL of every frame covered by ``level``.

    Each frame payload becomes one policy-bound blob under a fresh content
    key; length prefixes are updated via the sample rewriter, everything else
    in the container is left stale.  Level NONE returns the input unchanged.
    """
    if level is EncryptionLevel.NONE:
        seg = bitstream.parse_segment(seg_bytes)
        frame_map = tuple((s.index, bitstream.classify_sample(s), False)
                          for s in seg.samples)
        return EncryptedSegment(seg_bytes, level, frame_map)

    seg = bitstream.parse_segment(seg_bytes)
    seed_root = _seed_bytes(rng_seed)
    frame_map = []
    encrypted_any = False
    for sample in seg.samples:
        ftype = bitstream.classify_sample(sample)
        hit = level.covers(ftype)
        frame_map.append((sample.index, ftype, hit))
        if not hit:
            continue
        encrypted_any = True
        new_payloads = []
        for j, nal in enumerate(sample.nals):
            if not nal.is_vcl:
                new_payloads.append(nal.payload)
                continue
            frame_seed = hashlib.sha256(
                seed_root + sample.index.to_bytes(4, "little") + j.to_bytes(2, "little")
            ).digest()
            blob = abekit.encrypt(pp, key_source, policy, nal.payload, frame_seed)
            new_payloads.append(blob.to_bytes())
        seg = bitstream.rewrite_sample(seg, sample.index, new_payloads)
    if not encrypted_any:
        warnings.warn(f"level {level.name} covers no frames in this segment",
                      NoMatchingFrames, stacklevel=2)
    return EncryptedSegment(seg.to_bytes(), level, tuple(frame_map))


def decrypt_segment(enc: Union[EncryptedSegment, bytes], sk: PrivateKey) -> bytes:
    """Restore the original segment bytes, bit-exact.

    Encrypted frames are self-identifying (blob magic cannot collide with a
    valid NAL header), so the walk needs no trustworthy container metadata:
    the stale trun/mdat fields are exactly what this undoes.
    """
    data = enc.bytes if isinstance(enc, EncryptedSegment) else enc
    payload_off, payload = bitstream.split_head_and_media(data)
    out = [data[:payload_off]]
    for _, nal_payload in bitstream.iter_length_prefixed(payload):
        if abekit.is_blob(nal_payload):
            blob = abekit.EncryptedBlob.from_bytes(nal_payload)
            original = abekit.decrypt(sk, blob)
            out.append(len(original).to_bytes(4, "big"))
            out.append(original)
        else:
            out.append(len(nal_payload).to_bytes(4, "big"))
            out.append(nal_payload)
    return b"".join(out)


def size_overhead(original: bytes, enc: EncryptedSegment) -> float:
    """Relative growth of the segment: (encrypted - original) / original."""
    return (len(enc.bytes) - len(original)) / len(original)


@dataclass(frozen=True)
class SegStats:
    """Frame census of a segment: counts and VCL payload bytes per class."""

    frame_counts: Mapping[FrameType, int]
    frame_bytes: Mapping[FrameType, int]

    def count(self, ftype: FrameType) -> int:
        return self.frame_counts.get(ftype, 0)

    def bytes_of(self, ftype: FrameType) -> int:
        return self.frame_bytes.get(ftype, 0)


def seg_stats(seg_or_bytes: Union[MediaSegment, bytes]) -> SegStats:
    seg = (seg_or_bytes if isinstance(seg_or_bytes, MediaSegment)
           else bitstream.parse_segment(seg_or_bytes))
    counts: dict[FrameType, int] = {}
    nbytes: dict[FrameType, int] = {}
    for sample in seg.samples:
        ftype = bitstream.classify_sample(sample)
        counts[ftype] = counts.get(ftype, 0) + 1
        vcl = sum(len(n.payload) for n in sample.nals if n.is_vcl)
        nbytes[ftype] = nbytes.get(ftype, 0) + vcl
    return SegStats(counts, nbytes)


def crypto_work(direction: str, level: EncryptionLevel, stats: SegStats, cost) -> float:
    """Abstract CPU work to encrypt or decrypt a segment at ``level``.

    ``cost`` provides ``abe_per_frame`` and ``abe_per_byte`` coefficients;
    encryption and decryption use the same coefficients.
    """
    if direction not in ("encrypt", "decrypt"):
        raise ValueError(f"direction must be encrypt or decrypt, got {direction!r}")
    work = 0.0
    for ftype in level.covered:
        work += stats.count(ftype) * cost.abe_per_frame
        work += stats.bytes_of(ftype) * cost.abe_per_byte
    return work


def _seed_bytes(rng_seed) -> bytes:
    if isinstance(rng_seed, bytes):
        return rng_seed
    if isinstance(rng_seed, int):
        return rng_seed.to_bytes(16, "little", signed=True)
    return str(rng_seed).encode()
