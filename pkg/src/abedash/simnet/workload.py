"""Arrival schedules and Zipf video popularity."""

from __future__ import annotations

import numpy as np


def sample_arrivals(rng: np.random.Generator, client_count: int,
                    mean_interarrival_s: float) -> list[float]:
    """Session start times with exponential gaps of the given mean."""
    if mean_interarrival_s <= 0:
        raise ValueError("mean inter-arrival time must be > 0")
    gaps = rng.exponential(mean_interarrival_s, size=client_count)
    return list(np.cumsum(gaps))


def zipf_pmf(catalog_size: int = 5, s: float = 1.5) -> np.ndarray:
    """P(rank k) = k^-s / sum_j j^-s for k = 1..N (returned 0-indexed)."""
    ranks = np.arange(1, catalog_size + 1, dtype=np.float64)
    weights = ranks ** (-s)
    return weights / weights.sum()


def sample_video(rng: np.random.Generator, catalog_size: int = 5,
                 s: float = 1.5) -> int:
    """Zipf-popularity draw; returns the 0-based video index (0 = rank 1)."""
    if s <= 0:
        raise ValueError("zipf exponent must be > 0")
    cdf = np.cumsum(zipf_pmf(catalog_size, s))
    return int(np.searchsorted(cdf, rng.random(), side="right"))
