"""Viewport geometry on the equirectangular tile grid, tile selection, and
the extended MPD manifest.

The viewport is an axis-aligned rectangle in equirectangular coordinates
(the same cropping the tiled encodes use): the horizontal interval wraps
modulo 360 degrees, the vertical one clamps to the poles and the area is
renormalized, so coverage fractions always sum to one.  Tile ids are 1-based
row-major with row 0 at the top (pitch +90).
"""

from __future__ import annotations

import csv
import io
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

from .selenc import EncryptionLevel, SchemeId, TileRole, level_for, parse_suffix, suffix_for


class ViewportError(Exception):
    pass


class OutOfRange(ViewportError):
    pass


class EmptyCoverage(ViewportError):
    pass


class EmptyWindow(ViewportError):
    pass


class SchemaError(ViewportError):
    pass


class BadRow(ViewportError):
    pass


class NonMonotoneTime(ViewportError):
    pass


class HeadSample(NamedTuple):
    t: float
    yaw: float    # degrees in [-180, 180)
    pitch: float  # degrees in [-90, 90]


@dataclass(frozen=True)
class TileGrid:
    rows: int = 3
    cols: int = 3

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    def tile_id(self, row: int, col: int) -> int:
        return row * self.cols + col + 1

    def row_col(self, tile_id: int) -> tuple[int, int]:
        return divmod(tile_id - 1, self.cols)

    @property
    def tile_width(self) -> float:
        return 360.0 / self.cols

    @property
    def tile_height(self) -> float:
        return 180.0 / self.rows


Coverage = dict[int, float]


def _interval_overlap(lo1: float, hi1: float, lo2: float, hi2: float) -> float:
    return max(0.0, min(hi1, hi2) - max(lo1, lo2))


def tile_coverage(yaw: float, pitch: float, grid: TileGrid = TileGrid(),
                  fov_h: float = 120.0, fov_v: float = 60.0) -> Coverage:
    """Fraction of the viewport rectangle covered by each tile.

    Returns only nonzero entries; fractions sum to 1.  Default field of view
    is one tile of the 3x3 grid (120 x 60 degrees).
    """
    if not -180.0 <= yaw < 180.0:
        raise OutOfRange(f"yaw {yaw} outside [-180, 180)")
    if not -90.0 <= pitch <= 90.0:
        raise OutOfRange(f"pitch {pitch} outside [-90, 90]")
    if fov_h <= 0 or fov_v <= 0:
        raise OutOfRange("field of view must be positive")

    v_lo = max(-90.0, pitch - fov_v / 2.0)
    v_hi = min(90.0, pitch + fov_v / 2.0)
    height = v_hi - v_lo

    # Horizontal interval as up to two linear pieces in [-180, 180).
    if fov_h >= 360.0:
        h_pieces = [(-180.0, 180.0)]
        width = 360.0
    else:
        lo = yaw - fov_h / 2.0
        hi = yaw + fov_h / 2.0
        width = fov_h
        h_pieces = []
        if lo < -180.0:
            h_pieces.append((lo + 360.0, 180.0))
            lo = -180.0
        if hi > 180.0:
            h_pieces.append((-180.0, hi - 360.0))
            hi = 180.0
        h_pieces.append((lo, hi))

    cov: Coverage = {}
    area = width * height
    for row in range(grid.rows):
        r_hi = 90.0 - row * grid.tile_height
        r_lo = r_hi - grid.tile_height
        dv = _interval_overlap(v_lo, v_hi, r_lo, r_hi)
        if dv <= 0.0:
            continue
        for col in range(grid.cols):
            c_lo = -180.0 + col * grid.tile_width
            c_hi = c_lo + grid.tile_width
            dh = sum(_interval_overlap(lo, hi, c_lo, c_hi) for lo, hi in h_pieces)
            if dh <= 0.0:
                continue
            cov[grid.tile_id(row, col)] = (dh * dv) / area
    return cov


def average_coverages(coverages: Sequence[Coverage]) -> Coverage:
    """Arithmetic mean of coverage maps (missing tiles count as zero)."""
    if not coverages:
        raise EmptyCoverage("nothing to average")
    out: Coverage = {}
    for cov in coverages:
        for tile, frac in cov.items():
            out[tile] = out.get(tile, 0.0) + frac
    n = len(coverages)
    return {tile: total / n for tile, total in sorted(out.items())}


@dataclass(frozen=True)
class TileSelection:
    segment_index: int
    major: int
    minors: tuple[int, int, int]
    levels: dict[int, EncryptionLevel]

    @property
    def tiles(self) -> tuple[int, int, int, int]:
        return (self.major,) + self.minors

    def role_of(self, tile_id: int) -> TileRole:
        if tile_id == self.major:
            return TileRole.MAJOR
        if tile_id in self.minors:
            return TileRole.MINOR
        return TileRole.NON_VIEWPORT


def _neighbor_tiles(grid: TileGrid, tile_id: int) -> list[int]:
    """8-neighborhood of a tile (columns wrap, rows clamp), ascending ids."""
    row, col = grid.row_col(tile_id)
    out = set()
    for dr in (-1, 0, 1):
        r = row + dr
        if not 0 <= r < grid.rows:
            continue
        for dc in (-1, 0, 1):
            c = (col + dc) % grid.cols
            cand = grid.tile_id(r, c)
            if cand != tile_id:
                out.add(cand)
    return sorted(out)


def select_tiles(cov: Coverage, grid: TileGrid = TileGrid(),
                 segment_index: int = 0) -> TileSelection:
    """Pick the major tile (largest coverage) and three minors.

    Ties break toward the lowest tile id.  When fewer than four tiles have
    nonzero coverage, the selection is padded with the major tile's grid
    neighbors in ascending id order, then any remaining tiles.
    """
    nonzero = sorted(((frac, tile) for tile, frac in cov.items() if frac > 0.0),
                     key=lambda it: (-it[0], it[1]))
    if not nonzero:
        raise EmptyCoverage("coverage has no nonzero entry")
    if grid.n_tiles < 4:
        raise ViewportError(f"grid {grid.rows}x{grid.cols} has fewer than 4 tiles")
    chosen = [tile for _frac, tile in nonzero[:4]]
    if len(chosen) < 4:
        for cand in _neighbor_tiles(grid, chosen[0]):
            if len(chosen) == 4:
                break
            if cand not in chosen:
                chosen.append(cand)
        for cand in range(1, grid.n_tiles + 1):  # tiny-fov fallback
            if len(chosen) == 4:
                break
            if cand not in chosen:
                chosen.append(cand)
    return TileSelection(segment_index, chosen[0], tuple(chosen[1:4]), {})


def apply_scheme(selection: TileSelection, scheme: SchemeId | None) -> TileSelection:
    """Fill the per-tile encryption levels implied by a scheme."""
    levels = {}
    for tile in selection.tiles:
        if scheme is None:
            levels[tile] = EncryptionLevel.NONE
        else:
            levels[tile] = level_for(scheme, selection.role_of(tile))
    return replace(selection, levels=levels)


def segment_count(video_duration_s: float, segment_duration_s: float) -> int:
    return math.ceil(video_duration_s / segment_duration_s - 1e-9)


def per_segment_coverage(trace: Sequence[HeadSample], segment_duration_s: float,
                         grid: TileGrid = TileGrid(), fov_h: float = 120.0,
                         fov_v: float = 60.0,
                         video_duration_s: float | None = None) -> list[Coverage]:
    """Average viewport coverage per segment window."""
    if not trace:
        raise EmptyWindow("empty head trace")
    duration = video_duration_s if video_duration_s is not None else trace[-1].t
    n_segments = segment_count(duration, segment_duration_s)
    windows: list[list[Coverage]] = [[] for _ in range(n_segments)]
    for sample in trace:
        k = int(sample.t / segment_duration_s)
        if 0 <= k < n_segments:
            windows[k].append(tile_coverage(sample.yaw, sample.pitch, grid, fov_h, fov_v))
    out = []
    for k, members in enumerate(windows):
        if not members:
            raise EmptyWindow(f"no head samples in segment window {k}")
        out.append(average_coverages(members))
    return out


def per_segment_selection(trace: Sequence[HeadSample], segment_duration_s: float,
                          grid: TileGrid = TileGrid(), fov_h: float = 120.0,
                          fov_v: float = 60.0,
                          video_duration_s: float | None = None) -> list[TileSelection]:
    """One TileSelection per segment window of a single user's trace."""
    covs = per_segment_coverage(trace, segment_duration_s, grid, fov_h, fov_v,
                                video_duration_s)
    return [select_tiles(cov, grid, segment_index=k) for k, cov in enumerate(covs)]


def per_segment_selection_multi(traces: Sequence[Sequence[HeadSample]],
                                segment_duration_s: float,
                                grid: TileGrid = TileGrid(), fov_h: float = 120.0,
                                fov_v: float = 60.0,
                                video_duration_s: float | None = None) -> list[TileSelection]:
    """Selections from coverage averaged across users before picking tiles."""
    per_user = [per_segment_coverage(t, segment_duration_s, grid, fov_h, fov_v,
                                     video_duration_s) for t in traces]
    n_segments = min(len(u) for u in per_user)
    out = []
    for k in range(n_segments):
        cov = average_coverages([u[k] for u in per_user])
        out.append(select_tiles(cov, grid, segment_index=k))
    return out


# ---------------------------------------------------------------------------
# head traces

def parse_headtrace(text: str) -> list[HeadSample]:
    """Parse a "t,yaw,pitch" CSV (header required) into sorted samples."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise BadRow("empty head-trace file")
    if [h.strip().lower() for h in header] != ["t", "yaw", "pitch"]:
        raise BadRow(f"expected header t,yaw,pitch, got {header!r}")
    samples = []
    last_t = None
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != 3:
            raise BadRow(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            t, yaw, pitch = (float(v) for v in row)
        except ValueError as exc:
            raise BadRow(f"line {lineno}: {exc}") from exc
        if not -180.0 <= yaw < 180.0:
            raise BadRow(f"line {lineno}: yaw {yaw} outside [-180, 180)")
        if not -90.0 <= pitch <= 90.0:
            raise BadRow(f"line {lineno}: pitch {pitch} outside [-90, 90]")
        if last_t is not None and t <= last_t:
            raise NonMonotoneTime(f"line {lineno}: t {t} not after {last_t}")
        last_t = t
        samples.append(HeadSample(t, yaw, pitch))
    return samples


def headtrace_text(samples: Iterable[HeadSample]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["t", "yaw", "pitch"])
    for s in samples:
        writer.writerow([repr(s.t), repr(s.yaw), repr(s.pitch)])
    return out.getvalue()


def selections_to_csv(selections: Sequence[TileSelection]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["segment", "major", "minor1", "minor2", "minor3"])
    for sel in selections:
        writer.writerow([sel.segment_index, sel.major, *sel.minors])
    return out.getvalue()


def selections_from_csv(text: str) -> list[TileSelection]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["segment", "major",
                                                         "minor1", "minor2", "minor3"]:
        raise SchemaError(f"bad selections header: {header!r}")
    out = []
    for row in reader:
        if not row:
            continue
        seg, major, m1, m2, m3 = (int(v) for v in row)
        out.append(TileSelection(seg, major, (m1, m2, m3), {}))
    return out


# ---------------------------------------------------------------------------
# MPD manifest

@dataclass(frozen=True)
class Quality:
    index: int             # 1-based stream number
    tile_bitrate_bps: int  # per-tile bitrate
    resolution: str        # per-tile, e.g. "1280x640"


@dataclass(frozen=True)
class SegmentEntry:
    index: int
    urls: tuple[str, str, str, str]  # major tile first, then the three minors


@dataclass(frozen=True)
class AdaptationSet:
    quality: Quality
    bitrate_bps: int  # sum of the four tile bitrates
    segments: tuple[SegmentEntry, ...]


@dataclass(frozen=True)
class MpdModel:
    video_id: str
    segment_duration_s: float
    adaptation_sets: tuple[AdaptationSet, ...]


def tile_url(video_id: str, tile: int, segment: int, quality_index: int,
             level: EncryptionLevel) -> str:
    return f"{video_id}_tile{tile}_seg{segment}_q{quality_index}{suffix_for(level)}.m4s"


def build_mpd(video_id: str, selections: Sequence[TileSelection],
              qualities: Sequence[Quality], scheme: SchemeId | None,
              segment_duration_s: float) -> MpdModel:
    """Manifest with one adaptation set per quality; each segment entry lists
    the four viewport tiles, suffixed by their encryption level under
    ``scheme`` (scheme None means a plain, unencrypted dataset)."""
    if not qualities:
        raise SchemaError("qualities must be non-empty")
    sets = []
    for q in qualities:
        entries = []
        for sel in selections:
            sel = apply_scheme(sel, scheme)
            urls = tuple(tile_url(video_id, t, sel.segment_index, q.index, sel.levels[t])
                         for t in sel.tiles)
            entries.append(SegmentEntry(sel.segment_index, urls))
        sets.append(AdaptationSet(q, 4 * q.tile_bitrate_bps, tuple(entries)))
    return MpdModel(video_id, segment_duration_s, tuple(sets))


def render_mpd(model: MpdModel) -> str:
    root = ET.Element("MPD", videoId=model.video_id,
                      segmentDurationS=repr(model.segment_duration_s))
    period = ET.SubElement(root, "Period")
    for aset in model.adaptation_sets:
        a = ET.SubElement(period, "AdaptationSet",
                          bitrateBps=str(aset.bitrate_bps))
        ET.SubElement(a, "Representation",
                      qualityIndex=str(aset.quality.index),
                      tileBitrateBps=str(aset.quality.tile_bitrate_bps),
                      resolution=aset.quality.resolution)
        slist = ET.SubElement(a, "SegmentList")
        for entry in aset.segments:
            e = ET.SubElement(slist, "SegmentEntry", index=str(entry.index))
            for url in entry.urls:
                ET.SubElement(e, "TileURL").text = url
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def parse_mpd(text: str) -> MpdModel:
    """Inverse of render_mpd; enforces the manifest invariants."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise SchemaError(f"not well-formed: {exc}") from exc
    if root.tag != "MPD":
        raise SchemaError(f"root element is {root.tag!r}, expected MPD")
    try:
        video_id = root.attrib["videoId"]
        segment_duration_s = float(root.attrib["segmentDurationS"])
        period = root.find("Period")
        if period is None:
            raise SchemaError("missing Period")
        sets = []
        for a in period.findall("AdaptationSet"):
            rep = a.find("Representation")
            if rep is None:
                raise SchemaError("AdaptationSet without Representation")
            quality = Quality(int(rep.attrib["qualityIndex"]),
                              int(rep.attrib["tileBitrateBps"]),
                              rep.attrib["resolution"])
            bitrate = int(a.attrib["bitrateBps"])
            if bitrate != 4 * quality.tile_bitrate_bps:
                raise SchemaError(
                    f"adaptation-set bitrate {bitrate} is not the sum of its "
                    f"four tile bitrates (4 x {quality.tile_bitrate_bps})")
            entries = []
            slist = a.find("SegmentList")
            if slist is None:
                raise SchemaError("AdaptationSet without SegmentList")
            for e in slist.findall("SegmentEntry"):
                urls = tuple(u.text or "" for u in e.findall("TileURL"))
                if len(urls) != 4:
                    raise SchemaError(f"segment entry with {len(urls)} tile URLs")
                for url in urls:
                    parse_suffix(url)  # raises UnknownSuffix on bad suffixes
                entries.append(SegmentEntry(int(e.attrib["index"]), urls))
            sets.append(AdaptationSet(quality, bitrate, tuple(entries)))
        return MpdModel(video_id, segment_duration_s, tuple(sets))
    except SchemaError:
        raise
    except Exception as exc:  # UnknownSuffix, KeyError, ValueError
        raise SchemaError(str(exc)) from exc
