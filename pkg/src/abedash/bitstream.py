"""Fragmented-MP4 segment parsing and H.264 NAL unit handling.

Supports the DASH media-segment subset of ISO-BMFF: ``styp``/``ftyp``,
``moof`` (with a single ``traf`` carrying ``tfhd``/``trun``) and a trailing
``mdat``.  Parsing is lossless: every byte outside the media payload is kept
verbatim so a segment can be re-serialized bit-exactly, and sample payloads
can be swapped without touching container metadata (the stale ``trun`` sizes
are deliberate -- see ``rewrite_sample``).

NAL units use 4-byte big-endian length prefixes (AVCC framing, standard for
fMP4).  Annex-B start-code streams are rejected rather than converted.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, Sequence


class BitstreamError(Exception):
    """Base error for segment/NAL parsing failures."""


class TruncatedBox(BitstreamError):
    """A box length field exceeds the remaining bytes."""


class MissingBox(BitstreamError):
    """A required top-level box (moof or mdat) is absent."""


class UnsupportedLayout(BitstreamError):
    """Segment layout outside the single-track single-traf subset."""


class BadLengthPrefix(BitstreamError):
    """A NAL length prefix overruns its sample boundary."""


class ZeroLengthNal(BitstreamError):
    pass


class OutOfBits(BitstreamError):
    """Bit cursor exhausted mid-codeword."""


class MalformedSliceHeader(BitstreamError):
    pass


class IndexOutOfRange(BitstreamError):
    pass


class FrameType(Enum):
    I = "I"
    P = "P"
    B = "B"
    NON_VCL = "NonVCL"


# nal_unit_type values carrying coded slices (the only ones classified).
NAL_SLICE_NON_IDR = 1
NAL_SLICE_IDR = 5
NAL_SPS = 7
NAL_PPS = 8

_VCL_TYPES = frozenset({NAL_SLICE_NON_IDR, NAL_SLICE_IDR})


@dataclass(frozen=True)
class NalUnit:
    """One NAL unit: the header byte plus RBSP payload, without length prefix."""

    payload: bytes

    @property
    def nal_type(self) -> int:
        return self.payload[0] & 0x1F

    @property
    def ref_idc(self) -> int:
        return (self.payload[0] >> 5) & 0x03

    @property
    def forbidden_zero_bit(self) -> int:
        return (self.payload[0] >> 7) & 0x01

    @property
    def is_vcl(self) -> bool:
        return self.forbidden_zero_bit == 0 and self.nal_type in _VCL_TYPES


@dataclass(frozen=True)
class SampleRef:
    """One sample (frame) of the track run; offset is relative to the mdat payload."""

    index: int
    offset: int
    size: int
    nals: tuple[NalUnit, ...]


@dataclass(frozen=True)
class BoxRecord:
    fourcc: str
    offset: int
    length: int


@dataclass(frozen=True)
class MediaSegment:
    """A parsed .m4s segment.

    ``head`` holds every byte up to and including the mdat box header,
    verbatim; ``samples`` partition the mdat payload.  Serializing an
    unmodified segment reproduces the input exactly.
    """

    boxes: tuple[BoxRecord, ...]
    head: bytes
    samples: tuple[SampleRef, ...]

    def to_bytes(self) -> bytes:
        parts = [self.head]
        for sample in self.samples:
            for nal in sample.nals:
                parts.append(struct.pack(">I", len(nal.payload)))
                parts.append(nal.payload)
        return b"".join(parts)

    @property
    def media_payload(self) -> bytes:
        return self.to_bytes()[len(self.head):]


class BitReader:
    """MSB-first bit cursor over a byte sequence."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos  # bit offset

    def read_bit(self) -> int:
        byte_i, bit_i = divmod(self.pos, 8)
        if byte_i >= len(self.data):
            raise OutOfBits("bit cursor past end of data")
        self.pos += 1
        return (self.data[byte_i] >> (7 - bit_i)) & 1

    def read_bits(self, n: int) -> int:
        value = 0
        for _ in range(n):
            value = (value << 1) | self.read_bit()
        return value


def decode_ue(bits: BitReader) -> int:
    """Decode one unsigned Exp-Golomb codeword and advance the cursor."""
    leading_zeros = 0
    while bits.read_bit() == 0:
        leading_zeros += 1
        if leading_zeros > 32:
            raise OutOfBits("Exp-Golomb prefix longer than 32 bits")
    return (1 << leading_zeros) - 1 + bits.read_bits(leading_zeros)


def extract_nals(sample_bytes: bytes) -> list[NalUnit]:
    """Split a length-prefixed sample into NAL units.

    Concatenating (4-byte prefix + payload) over the result reproduces the
    input bytes exactly.
    """
    nals = []
    pos = 0
    end = len(sample_bytes)
    while pos < end:
        if pos + 4 > end:
            raise BadLengthPrefix(f"dangling {end - pos} byte(s) after last NAL")
        (length,) = struct.unpack_from(">I", sample_bytes, pos)
        pos += 4
        if length == 0:
            raise ZeroLengthNal(f"zero-length NAL at offset {pos - 4}")
        if pos + length > end:
            raise BadLengthPrefix(
                f"NAL length {length} overruns sample boundary at offset {pos - 4}"
            )
        nals.append(NalUnit(bytes(sample_bytes[pos:pos + length])))
        pos += length
    return nals


def classify_frame(nal: NalUnit) -> FrameType:
    """Classify a NAL unit as an I/P/B frame or non-VCL.

    IDR slices (type 5) are I frames.  Non-IDR slices (type 1) are classified
    from the slice header: first_mb_in_slice then slice_type, both ue(v);
    slice_type mod 5 of 0/1/2 means P/B/I.  SP/SI slices are outside the
    supported encode profile and raise.
    """
    if nal.forbidden_zero_bit != 0:
        return FrameType.NON_VCL
    nal_type = nal.nal_type
    if nal_type == NAL_SLICE_IDR:
        return FrameType.I
    if nal_type != NAL_SLICE_NON_IDR:
        return FrameType.NON_VCL
    bits = BitReader(nal.payload, pos=8)  # skip the NAL header byte
    try:
        decode_ue(bits)  # first_mb_in_slice
        slice_type = decode_ue(bits)
    except OutOfBits as exc:
        raise MalformedSliceHeader(str(exc)) from exc
    mod = slice_type % 5
    if mod == 0:
        return FrameType.P
    if mod == 1:
        return FrameType.B
    if mod == 2:
        return FrameType.I
    raise MalformedSliceHeader(f"unsupported slice_type {slice_type}")


def classify_sample(sample: SampleRef) -> FrameType:
    """Frame class of a sample: that of its first VCL NAL, else NON_VCL."""
    for nal in sample.nals:
        if nal.is_vcl:
            return classify_frame(nal)
    return FrameType.NON_VCL


# ---------------------------------------------------------------------------
# box-level parsing


def _iter_boxes(data: bytes, start: int, end: int) -> Iterator[tuple[str, int, int, int]]:
    """Yield (fourcc, box_offset, header_len, box_end) for boxes in [start, end)."""
    pos = start
    while pos < end:
        if pos + 8 > end:
            raise TruncatedBox(f"{end - pos} stray byte(s) at offset {pos}")
        size, fourcc_raw = struct.unpack_from(">I4s", data, pos)
        header_len = 8
        if size == 1:
            if pos + 16 > end:
                raise TruncatedBox(f"truncated 64-bit box header at offset {pos}")
            (size,) = struct.unpack_from(">Q", data, pos + 8)
            header_len = 16
        elif size == 0:
            size = end - pos
        try:
            fourcc = fourcc_raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise UnsupportedLayout(f"non-ASCII box type at offset {pos}") from exc
        if size < header_len:
            raise TruncatedBox(f"box '{fourcc}' at {pos} declares size {size} < header")
        if pos + size > end:
            raise TruncatedBox(
                f"box '{fourcc}' at {pos} declares size {size}, only {end - pos} bytes left"
            )
        yield fourcc, pos, header_len, pos + size
        pos += size


# tfhd flag bits
_TFHD_BASE_DATA_OFFSET = 0x000001
_TFHD_SAMPLE_DESC_INDEX = 0x000002
_TFHD_DEFAULT_DURATION = 0x000008
_TFHD_DEFAULT_SIZE = 0x000010
_TFHD_DEFAULT_FLAGS = 0x000020
_TFHD_DEFAULT_BASE_IS_MOOF = 0x020000

# trun flag bits
_TRUN_DATA_OFFSET = 0x000001
_TRUN_FIRST_SAMPLE_FLAGS = 0x000004
_TRUN_SAMPLE_DURATION = 0x000100
_TRUN_SAMPLE_SIZE = 0x000200
_TRUN_SAMPLE_FLAGS = 0x000400
_TRUN_SAMPLE_CTS = 0x000800


def _parse_tfhd(data: bytes, offset: int, header_len: int, end: int) -> dict:
    _, flags3 = data[offset + header_len], data[offset + header_len + 1:offset + header_len + 4]
    flags = int.from_bytes(flags3, "big")
    pos = offset + header_len + 4
    (track_id,) = struct.unpack_from(">I", data, pos)
    pos += 4
    out = {"flags": flags, "track_id": track_id, "base_data_offset": None,
           "default_sample_size": None}
    if flags & _TFHD_BASE_DATA_OFFSET:
        (out["base_data_offset"],) = struct.unpack_from(">Q", data, pos)
        pos += 8
    if flags & _TFHD_SAMPLE_DESC_INDEX:
        pos += 4
    if flags & _TFHD_DEFAULT_DURATION:
        pos += 4
    if flags & _TFHD_DEFAULT_SIZE:
        (out["default_sample_size"],) = struct.unpack_from(">I", data, pos)
        pos += 4
    return out


def _parse_trun(data: bytes, offset: int, header_len: int, end: int,
                default_size: int | None) -> dict:
    version = data[offset + header_len]
    flags = int.from_bytes(data[offset + header_len + 1:offset + header_len + 4], "big")
    pos = offset + header_len + 4
    (sample_count,) = struct.unpack_from(">I", data, pos)
    pos += 4
    data_offset = None
    if flags & _TRUN_DATA_OFFSET:
        (data_offset,) = struct.unpack_from(">i", data, pos)
        pos += 4
    if flags & _TRUN_FIRST_SAMPLE_FLAGS:
        pos += 4
    sizes = []
    for _ in range(sample_count):
        if flags & _TRUN_SAMPLE_DURATION:
            pos += 4
        if flags & _TRUN_SAMPLE_SIZE:
            (size,) = struct.unpack_from(">I", data, pos)
            pos += 4
        elif default_size is not None:
            size = default_size
        else:
            raise UnsupportedLayout("trun without sample sizes and no tfhd default")
        if flags & _TRUN_SAMPLE_FLAGS:
            pos += 4
        if flags & _TRUN_SAMPLE_CTS:
            pos += 4
        sizes.append(size)
    if pos > end:
        raise TruncatedBox("trun entries overrun the box")
    return {"version": version, "flags": flags, "sample_count": sample_count,
            "data_offset": data_offset, "sizes": sizes}


def parse_segment(data: bytes) -> MediaSegment:
    """Parse a complete .m4s byte sequence into a MediaSegment.

    Requires exactly one moof with one traf/trun, and a single mdat that is
    the final top-level box and is fully covered by the track run.
    """
    if len(data) >= 4 and data[:4] in (b"\x00\x00\x00\x01", b"\x00\x00\x01\x67"):
        raise UnsupportedLayout("Annex-B start-code stream, expected fMP4")
    boxes = []
    moof_span = None
    mdat_span = None
    for fourcc, off, hlen, box_end in _iter_boxes(data, 0, len(data)):
        boxes.append(BoxRecord(fourcc, off, box_end - off))
        if fourcc == "moof":
            if moof_span is not None:
                raise UnsupportedLayout("more than one moof")
            moof_span = (off, hlen, box_end)
        elif fourcc == "mdat":
            if mdat_span is not None:
                raise UnsupportedLayout("more than one mdat")
            mdat_span = (off, hlen, box_end)
    if moof_span is None:
        raise MissingBox("no moof box")
    if mdat_span is None:
        raise MissingBox("no mdat box")
    mdat_off, mdat_hlen, mdat_end = mdat_span
    if mdat_end != len(data):
        raise UnsupportedLayout("mdat is not the final top-level box")

    moof_off, moof_hlen, moof_end = moof_span
    tfhd = None
    trun = None
    traf_count = 0
    for fourcc, off, hlen, box_end in _iter_boxes(data, moof_off + moof_hlen, moof_end):
        if fourcc != "traf":
            continue
        traf_count += 1
        if traf_count > 1:
            raise UnsupportedLayout("more than one traf")
        for inner, ioff, ihlen, iend in _iter_boxes(data, off + hlen, box_end):
            if inner == "tfhd":
                tfhd = _parse_tfhd(data, ioff, ihlen, iend)
            elif inner == "trun":
                if trun is not None:
                    raise UnsupportedLayout("more than one trun")
                trun = _parse_trun(data, ioff, ihlen, iend,
                                   (tfhd or {}).get("default_sample_size"))
    if traf_count == 0 or tfhd is None or trun is None:
        raise MissingBox("moof lacks traf/tfhd/trun")

    payload_off = mdat_off + mdat_hlen
    if tfhd["base_data_offset"] is not None and tfhd["base_data_offset"] != moof_off:
        raise UnsupportedLayout("external base data offset")
    if trun["data_offset"] is not None:
        base = moof_off if (tfhd["flags"] & _TFHD_DEFAULT_BASE_IS_MOOF or
                            tfhd["base_data_offset"] is None) else tfhd["base_data_offset"]
        if base + trun["data_offset"] != payload_off:
            raise UnsupportedLayout("track run data offset does not land in this mdat")

    payload_len = mdat_end - payload_off
    if sum(trun["sizes"]) != payload_len:
        raise UnsupportedLayout(
            f"track run covers {sum(trun['sizes'])} bytes, mdat payload has {payload_len}"
        )

    samples = []
    cursor = 0
    for i, size in enumerate(trun["sizes"]):
        raw = data[payload_off + cursor:payload_off + cursor + size]
        samples.append(SampleRef(i, cursor, size, tuple(extract_nals(raw))))
        cursor += size
    return MediaSegment(tuple(boxes), bytes(data[:payload_off]), tuple(samples))


def rewrite_sample(seg: MediaSegment, sample_index: int,
                   new_nals: Sequence[bytes]) -> MediaSegment:
    """Replace the NAL payloads of one sample, leaving container metadata stale.

    The per-NAL length prefixes follow the new payload lengths and the mdat
    region grows or shrinks, but trun sample sizes, tfhd defaults and box
    size fields in ``head`` keep their original values.  On payload-size
    change the segment therefore no longer parses as consistent -- the
    intended lock-out effect until the original payloads are restored.
    """
    if not 0 <= sample_index < len(seg.samples):
        raise IndexOutOfRange(f"sample {sample_index} of {len(seg.samples)}")
    old = seg.samples[sample_index]
    if len(new_nals) != len(old.nals):
        raise IndexOutOfRange(
            f"expected {len(old.nals)} NAL payload(s), got {len(new_nals)}"
        )
    for payload in new_nals:
        if len(payload) == 0:
            raise ZeroLengthNal("replacement NAL payload is empty")
    samples = list(seg.samples)
    samples[sample_index] = replace(
        old,
        nals=tuple(NalUnit(bytes(p)) for p in new_nals),
        size=sum(4 + len(p) for p in new_nals),
    )
    # Recompute sample offsets for the actual (post-rewrite) framing.
    rebuilt = []
    cursor = 0
    for s in samples:
        rebuilt.append(replace(s, offset=cursor))
        cursor += s.size
    return replace(seg, samples=tuple(rebuilt))


def split_head_and_media(data: bytes) -> tuple[int, bytes]:
    """Locate the mdat payload without trusting its (possibly stale) size field.

    Walks the top-level boxes; at the first mdat, everything from the end of
    the mdat header to EOF is taken as media payload.  Used on encrypted
    segments whose mdat size/trun entries no longer match the actual bytes.
    """
    pos = 0
    end = len(data)
    while pos < end:
        if pos + 8 > end:
            raise TruncatedBox(f"{end - pos} stray byte(s) at offset {pos}")
        size, fourcc_raw = struct.unpack_from(">I4s", data, pos)
        header_len = 8
        if size == 1:
            (size,) = struct.unpack_from(">Q", data, pos + 8)
            header_len = 16
        elif size == 0:
            size = end - pos
        if fourcc_raw == b"mdat":
            payload_off = pos + header_len
            return payload_off, data[payload_off:]
        if pos + size > end or size < header_len:
            raise TruncatedBox(f"bad box at offset {pos}")
        pos += size
    raise MissingBox("no mdat box")


def iter_length_prefixed(payload: bytes) -> Iterator[tuple[int, bytes]]:
    """Yield (offset, nal_payload) over a length-prefixed media region."""
    pos = 0
    end = len(payload)
    while pos < end:
        if pos + 4 > end:
            raise BadLengthPrefix(f"dangling {end - pos} byte(s) at offset {pos}")
        (length,) = struct.unpack_from(">I", payload, pos)
        if length == 0:
            raise ZeroLengthNal(f"zero-length NAL at offset {pos}")
        if pos + 4 + length > end:
            raise BadLengthPrefix(f"NAL length {length} overruns region at offset {pos}")
        yield pos, payload[pos + 4:pos + 4 + length]
        pos += 4 + length


def trun_sample_sizes(data: bytes) -> list[int]:
    """Read the trun sample-size entries of a segment's moof, nothing else.

    Works on encrypted segments too, since the moof bytes are never touched.
    """
    for fourcc, off, hlen, box_end in _iter_boxes(data, 0, len(data)):
        if fourcc != "moof":
            continue
        for f2, o2, h2, e2 in _iter_boxes(data, off + hlen, box_end):
            if f2 != "traf":
                continue
            tfhd = None
            for f3, o3, h3, e3 in _iter_boxes(data, o2 + h2, e2):
                if f3 == "tfhd":
                    tfhd = _parse_tfhd(data, o3, h3, e3)
                elif f3 == "trun":
                    trun = _parse_trun(data, o3, h3, e3,
                                       (tfhd or {}).get("default_sample_size"))
                    return trun["sizes"]
    raise MissingBox("no moof/trun found")


# ---------------------------------------------------------------------------
# synthetic segment generator


def _box(fourcc: bytes, body: bytes) -> bytes:
    return struct.pack(">I4s", 8 + len(body), fourcc) + body


def _full_box(fourcc: bytes, version: int, flags: int, body: bytes) -> bytes:
    return _box(fourcc, struct.pack(">B", version) + flags.to_bytes(3, "big") + body)


def _encode_ue(value: int) -> str:
    s = bin(value + 1)[2:]
    return "0" * (len(s) - 1) + s


def _bits_to_bytes(bits: str) -> bytes:
    bits = bits + "1"  # rbsp stop bit
    bits = bits + "0" * (-len(bits) % 8)
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


# (nal header byte, slice_type) per frame class; slice_type values use the
# "all slices of this picture share the type" 5..9 range, as encoders emit.
_FRAME_HEADERS = {
    FrameType.I: (0x65, 7),   # IDR, ref_idc 3
    FrameType.P: (0x41, 5),   # non-IDR, ref_idc 2
    FrameType.B: (0x01, 6),   # non-IDR, ref_idc 0
}


def make_frame_nal(ftype: FrameType, payload_len: int, rng: random.Random) -> bytes:
    """Build one VCL NAL of roughly ``payload_len`` bytes for a frame class."""
    header_byte, slice_type = _FRAME_HEADERS[ftype]
    head = bytes([header_byte]) + _bits_to_bytes(_encode_ue(0) + _encode_ue(slice_type))
    filler = rng.randbytes(max(0, payload_len - len(head)))
    return head + filler


def synth_frame_types(n_frames: int, gop_len: int, pattern: str) -> list[FrameType]:
    """Frame classes for a synthetic stream: I at each GOP start, then the
    repeating P/B pattern."""
    if gop_len < 1:
        raise ValueError("gop_len must be >= 1")
    if not pattern or set(pattern) - {"P", "B"}:
        raise ValueError("pattern must be a non-empty string of P and B")
    types = []
    for i in range(n_frames):
        j = i % gop_len
        if j == 0:
            types.append(FrameType.I)
        else:
            types.append(FrameType.P if pattern[(j - 1) % len(pattern)] == "P" else FrameType.B)
    return types


def synth_segment(fps: int = 30, duration_s: float = 2.0, gop_len: int = 60,
                  pattern: str = "P", size_seed: int = 0,
                  frame_sizes: Sequence[int] | None = None,
                  include_param_sets: bool = False) -> bytes:
    """Emit a minimal valid .m4s segment (one video track, one sample per frame).

    Deterministic in its arguments; ``parse_segment`` round-trips the result.
    Default frame payload sizes are pseudo-random with I frames roughly 10x
    the size of P/B frames.
    """
    n_frames = round(fps * duration_s)
    types = synth_frame_types(n_frames, gop_len, pattern)
    rng = random.Random(size_seed)
    if frame_sizes is not None:
        if len(frame_sizes) != n_frames:
            raise ValueError(f"frame_sizes must have {n_frames} entries")
        sizes = list(frame_sizes)
    else:
        sizes = [rng.randint(2000, 4000) if t is FrameType.I else rng.randint(150, 500)
                 for t in types]

    sample_chunks = []
    for i, (ftype, size) in enumerate(zip(types, sizes)):
        nals = []
        if i == 0 and include_param_sets:
            nals.append(bytes([0x67]) + rng.randbytes(8))  # SPS
            nals.append(bytes([0x68]) + rng.randbytes(3))  # PPS
        nals.append(make_frame_nal(ftype, size, rng))
        sample_chunks.append(b"".join(struct.pack(">I", len(n)) + n for n in nals))
    sample_sizes = [len(c) for c in sample_chunks]
    mdat_payload = b"".join(sample_chunks)

    styp = _box(b"styp", b"msdh" + struct.pack(">I", 0) + b"msdh" + b"msix")
    mfhd = _full_box(b"mfhd", 0, 0, struct.pack(">I", 1))
    tfhd = _full_box(b"tfhd", 0, _TFHD_DEFAULT_BASE_IS_MOOF, struct.pack(">I", 1))
    tfdt = _full_box(b"tfdt", 1, 0, struct.pack(">Q", 0))

    def build_trun(data_offset: int) -> bytes:
        body = struct.pack(">Ii", len(sample_sizes), data_offset)
        body += b"".join(struct.pack(">I", s) for s in sample_sizes)
        return _full_box(b"trun", 0, _TRUN_DATA_OFFSET | _TRUN_SAMPLE_SIZE, body)

    # data_offset is relative to the moof start; its value does not change
    # the moof length, so one sizing pass suffices.
    moof_len = len(_box(b"moof", mfhd + _box(b"traf", tfhd + tfdt + build_trun(0))))
    trun = build_trun(moof_len + 8)
    moof = _box(b"moof", mfhd + _box(b"traf", tfhd + tfdt + trun))
    mdat = _box(b"mdat", mdat_payload)
    return styp + moof + mdat


def parse_synth_config(text: str) -> dict:
    """Parse the plain-text key=value config accepted by the synth command."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in ("fps", "gop_len", "size_seed"):
            out[key] = int(value)
        elif key == "duration_s":
            out[key] = float(value)
        elif key == "pattern":
            out[key] = value
        elif key == "include_param_sets":
            out[key] = value.lower() in ("1", "true", "yes")
        elif key == "frame_sizes":
            out[key] = [int(v) for v in value.split(",")]
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return out
