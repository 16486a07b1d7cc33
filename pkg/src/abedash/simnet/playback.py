"""Client-side playback buffer and the rate-adaptation rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence


@dataclass
class ClientPlayback:
    """Buffer/playhead state driven by segment-ready notifications.

    Playback starts once ``startup_segments`` segments are ready (startup
    delay, counted separately from rebuffering); afterwards the playhead
    consumes one second of buffered content per simulated second and stall
    time accrues whenever the buffer runs dry mid-video.
    """

    n_segments: int
    segment_duration_s: float
    startup_segments: int = 2
    t: float = 0.0
    ready: int = 0
    started: bool = False
    play_start: Optional[float] = None
    playhead_s: float = 0.0
    stall_s: float = 0.0

    @property
    def video_duration_s(self) -> float:
        return self.n_segments * self.segment_duration_s

    @property
    def buffer_s(self) -> float:
        return self.ready * self.segment_duration_s - self.playhead_s

    @property
    def finished(self) -> bool:
        return self.playhead_s >= self.video_duration_s - 1e-9

    @property
    def rebuffer_ratio(self) -> float:
        return self.stall_s / self.video_duration_s


def playback_step(state: ClientPlayback, dt: float) -> float:
    """Advance playback by ``dt`` seconds; returns stall seconds accrued."""
    if dt < 0:
        raise ValueError("dt must be > 0")
    state.t += dt
    if not state.started or state.finished:
        return 0.0
    content_end = state.ready * state.segment_duration_s
    advance = min(dt, max(0.0, content_end - state.playhead_s))
    state.playhead_s += advance
    stall = 0.0 if state.finished else dt - advance
    state.stall_s += stall
    return stall


def advance_to(state: ClientPlayback, now: float) -> float:
    return playback_step(state, max(0.0, now - state.t))


def segment_ready(state: ClientPlayback, now: float) -> None:
    """Mark the next segment playable at ``now``."""
    advance_to(state, now)
    state.ready += 1
    if not state.started and state.ready >= min(state.startup_segments,
                                                state.n_segments):
        state.started = True
        state.play_start = now


def abr_select(throughput_bps: float, segment_duration_s: float,
               segment_bytes_by_quality: Sequence[int],
               decrypt_s_by_quality: Sequence[float]) -> int:
    """Highest quality whose estimated download plus decrypt time fits in one
    segment duration; index 0 when nothing fits or there is no estimate yet.

    ``segment_bytes_by_quality`` are the total bytes of all four tiles at
    each quality (ascending bitrate), including encryption overhead.
    """
    if throughput_bps <= 0:
        return 0
    for i in range(len(segment_bytes_by_quality) - 1, -1, -1):
        t = segment_bytes_by_quality[i] * 8.0 / throughput_bps + decrypt_s_by_quality[i]
        if t <= segment_duration_s + 1e-12:
            return i
    return 0


def harmonic_mean_throughput(samples: Sequence[float]) -> float:
    """Harmonic mean of the most recent per-segment throughput samples."""
    usable = [s for s in samples if s > 0]
    if not usable:
        return 0.0
    return len(usable) / sum(1.0 / s for s in usable)
