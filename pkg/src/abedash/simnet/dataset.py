"""Synthetic tiled-video dataset: sizes, head traces, tile selections.

The simulator never moves media bytes; object sizes come from a closed-form
model (tile bitrate x duration, plus one blob overhead per encrypted frame)
or from a size-manifest CSV written by the packaging step.  Five catalog
videos are one tiled dataset plus four aliases -- distinct URLs, identical
sizes -- mirroring symlinked copies on an origin.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import abekit
from ..bitstream import FrameType
from ..selenc import EncryptionLevel, SegStats
from ..viewport import HeadSample, Quality, TileGrid, TileSelection, per_segment_selection, tile_url
from .config import ConfigError, Mode

TABLE1_QUALITIES = (
    Quality(1, 500_000, "480x240"),
    Quality(2, 1_000_000, "640x320"),
    Quality(3, 2_000_000, "960x480"),
    Quality(4, 3_000_000, "1280x640"),
)


@dataclass(frozen=True)
class DatasetSpec:
    qualities: tuple[Quality, ...] = TABLE1_QUALITIES
    fps: int = 30
    gop_frames: int = 60
    video_duration_s: float = 293.0
    i_frame_weight: float = 10.0  # I-frame bytes relative to a P frame
    policy_text: str = "subscriber"
    n_videos: int = 5
    n_traces: int = 40
    trace_seed: int = 7700
    grid: TileGrid = TileGrid(3, 3)

    @property
    def blob_overhead(self) -> int:
        return abekit.blob_overhead(abekit.policy_from_text(self.policy_text))

    def n_segments(self, segment_duration_s: float) -> int:
        return math.ceil(self.video_duration_s / segment_duration_s - 1e-9)

    def video_id(self, index: int) -> str:
        return f"v{index}"


@dataclass(frozen=True)
class ObjectInfo:
    nbytes: int          # on-the-wire object size at its encryption level
    plain_bytes: int     # size before encryption
    enc_frames: int
    enc_bytes: int       # plaintext bytes covered by encryption
    level: EncryptionLevel


class SizeModel:
    """Closed-form per-object sizes and frame censuses for one dataset."""

    def __init__(self, spec: DatasetSpec, segment_duration_s: float):
        self.spec = spec
        self.d = segment_duration_s
        self.frames = round(spec.fps * segment_duration_s)
        self.n_i = max(1, round(self.frames / spec.gop_frames))
        self.n_p = self.frames - self.n_i
        weight_total = self.n_i * spec.i_frame_weight + self.n_p

        blob_overhead = spec.blob_overhead
        self._per_quality: dict[int, tuple[int, int, int]] = {}
        self._info: dict[tuple[int, EncryptionLevel], ObjectInfo] = {}
        for q in spec.qualities:
            total = int(q.tile_bitrate_bps * segment_duration_s / 8)
            i_bytes = int(total * self.n_i * spec.i_frame_weight / weight_total)
            p_bytes = total - i_bytes
            self._per_quality[q.index] = (total, i_bytes, p_bytes)
            for level in EncryptionLevel:
                enc_frames = 0
                enc_bytes = 0
                if level.covers(FrameType.I):
                    enc_frames += self.n_i
                    enc_bytes += i_bytes
                if level.covers(FrameType.P):
                    enc_frames += self.n_p
                    enc_bytes += p_bytes
                # default frame pattern has no B frames: FULL matches ALL_IP
                self._info[(q.index, level)] = ObjectInfo(
                    total + enc_frames * blob_overhead, total,
                    enc_frames, enc_bytes, level)

    def tile_bytes(self, quality_index: int) -> int:
        return self._per_quality[quality_index][0]

    def seg_stats(self, quality_index: int) -> SegStats:
        _total, i_bytes, p_bytes = self._per_quality[quality_index]
        return SegStats({FrameType.I: self.n_i, FrameType.P: self.n_p},
                        {FrameType.I: i_bytes, FrameType.P: p_bytes})

    def object_info(self, quality_index: int, level: EncryptionLevel) -> ObjectInfo:
        return self._info[(quality_index, level)]


# ---------------------------------------------------------------------------
# synthetic head traces

def make_trace(trace_id: int, duration_s: float, seed: int = 7700,
               dt: float = 0.25) -> list[HeadSample]:
    """Synthetic viewer: a shared content-focus path (everyone watches the
    same action) plus a personal mean-reverting offset.  Deterministic in
    (trace_id, seed)."""
    rng = np.random.default_rng(np.random.PCG64(seed * 1000 + trace_id))
    n = int(duration_s / dt) + 1
    t = np.arange(n) * dt
    focus_yaw = 35.0 * np.sin(2 * np.pi * t / 45.0 + 0.7) \
        + 60.0 * np.sin(2 * np.pi * t / 190.0)
    focus_pitch = 10.0 * np.sin(2 * np.pi * t / 70.0)
    off_yaw = rng.uniform(-30.0, 30.0)
    off_pitch = rng.uniform(-12.0, 12.0)
    yaw_steps = rng.normal(0.0, 2.0, size=n)
    pitch_steps = rng.normal(0.0, 1.0, size=n)
    samples = []
    for i in range(n):
        yaw = (focus_yaw[i] + off_yaw + 180.0) % 360.0 - 180.0
        pitch = float(np.clip(focus_pitch[i] + off_pitch, -60.0, 60.0))
        samples.append(HeadSample(round(i * dt, 6), yaw, pitch))
        off_yaw = float(np.clip(off_yaw * 0.995 + yaw_steps[i], -60.0, 60.0))
        off_pitch = float(np.clip(off_pitch * 0.99 + pitch_steps[i], -25.0, 25.0))
    return samples


@lru_cache(maxsize=8)
def dataset_selections(spec: DatasetSpec, segment_duration_s: float) -> tuple[tuple[TileSelection, ...], ...]:
    """Per-trace tile selections, computed once per (dataset, duration)."""
    out = []
    for t in range(spec.n_traces):
        trace = make_trace(t, spec.video_duration_s, spec.trace_seed)
        sels = per_segment_selection(trace, segment_duration_s, spec.grid,
                                     video_duration_s=spec.video_duration_s)
        out.append(tuple(sels))
    return tuple(out)


def levels_for_mode(mode: Mode, selection: TileSelection) -> dict[int, EncryptionLevel]:
    """Per-tile encryption level of one viewport under a delivery mode."""
    if mode is Mode.HTTPS:
        return {t: EncryptionLevel.NONE for t in selection.tiles}
    if mode is Mode.ABE_ALL_IP:
        return {t: EncryptionLevel.ALL_IP for t in selection.tiles}
    levels = {selection.major: EncryptionLevel.ALL_IP}
    for t in selection.minors:
        levels[t] = EncryptionLevel.ALL_I
    return levels


def segment_urls(video_id: str, selection: TileSelection, quality_index: int,
                 mode: Mode) -> list[tuple[str, int, EncryptionLevel]]:
    """(url, tile, level) for the four viewport tiles of one segment."""
    levels = levels_for_mode(mode, selection)
    return [(tile_url(video_id, t, selection.segment_index, quality_index, levels[t]),
             t, levels[t])
            for t in selection.tiles]


# ---------------------------------------------------------------------------
# manifest files (written by the packaging step, readable by the simulator)

MANIFEST_HEADER = ["url", "video", "tile", "segment", "quality", "level",
                   "plain_bytes", "bytes", "enc_frames", "enc_bytes"]


def manifest_rows_to_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, MANIFEST_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return out.getvalue()


def parse_manifest(text: str) -> dict[str, ObjectInfo]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != MANIFEST_HEADER:
        raise ConfigError(f"bad manifest header: {reader.fieldnames}")
    table = {}
    for row in reader:
        table[row["url"]] = ObjectInfo(
            int(row["bytes"]), int(row["plain_bytes"]), int(row["enc_frames"]),
            int(row["enc_bytes"]), EncryptionLevel[row["level"]])
    return table


class ManifestSizes:
    """Size source backed by a packaging manifest instead of the closed form."""

    def __init__(self, table: dict[str, ObjectInfo]):
        self.table = table

    def lookup(self, url: str) -> ObjectInfo:
        try:
            return self.table[url]
        except KeyError:
            raise ConfigError(f"segment {url!r} missing from the size manifest")
