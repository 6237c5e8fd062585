"""Saccade slicing, time-collapsed frames and population PSTH."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .aer import NMNIST_SIZE, EventStream, IndexEntry, Polarity, read_events

SACCADE_MS = 105
N_SACCADES = 3


class EmptyPatternSet(ValueError):
    pass


@dataclass(eq=False)
class Pattern:
    """Binned spike trains of one saccade.

    Spikes are stored as two parallel arrays sorted by (pixel, time); pixel
    index is ``y * width + x``. Several events of one pixel may share a bin.
    """

    pixel: np.ndarray
    time: np.ndarray
    duration: int = SACCADE_MS
    label: int | None = None
    width: int = NMNIST_SIZE
    height: int = NMNIST_SIZE

    def __post_init__(self):
        pixel = np.asarray(self.pixel, dtype=np.int64)
        time = np.asarray(self.time, dtype=np.int64)
        if pixel.shape != time.shape:
            raise ValueError("pixel and time arrays differ in shape")
        if len(time) and (time.min() < 0 or time.max() >= self.duration):
            raise ValueError(f"spike time outside [0, {self.duration})")
        if len(pixel) and (pixel.min() < 0 or pixel.max() >= self.n_pixels):
            raise ValueError("pixel index out of range")
        order = np.lexsort((time, pixel))
        self.pixel = pixel[order]
        self.time = time[order]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def n_spikes(self) -> int:
        return len(self.time)

    def spike_trains(self) -> dict[int, list[int]]:
        """Per-pixel ascending spike-time lists (silent pixels omitted)."""
        trains: dict[int, list[int]] = {}
        for p, t in zip(self.pixel.tolist(), self.time.tolist()):
            trains.setdefault(p, []).append(t)
        return trains

    def counts(self) -> np.ndarray:
        return np.bincount(self.pixel, minlength=self.n_pixels)

    def raster(self) -> np.ndarray:
        """(duration, n_pixels) matrix of event counts per ms bin."""
        r = np.zeros((self.duration, self.n_pixels), dtype=np.float64)
        np.add.at(r, (self.time, self.pixel), 1.0)
        return r

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pattern):
            return NotImplemented
        return (
            self.duration == other.duration
            and self.label == other.label
            and (self.width, self.height) == (other.width, other.height)
            and np.array_equal(self.pixel, other.pixel)
            and np.array_equal(self.time, other.time)
        )


def slice_saccade(stream: EventStream, saccade: int, polarity, label: int | None = None) -> Pattern:
    """Keep events of one polarity inside one 105 ms saccade window, binned to ms."""
    if saccade not in (1, 2, 3):
        raise ValueError(f"saccade must be 1, 2 or 3, got {saccade}")
    pol = Polarity.parse(polarity)
    start_us = (saccade - 1) * SACCADE_MS * 1000
    stop_us = start_us + SACCADE_MS * 1000
    ts = stream.timestamp
    keep = (stream.polarity == int(pol)) & (ts >= start_us) & (ts < stop_us)
    t_ms = (ts[keep] - start_us) // 1000
    pixel = stream.y[keep] * stream.width + stream.x[keep]
    return Pattern(pixel, t_ms, SACCADE_MS, label, stream.width, stream.height)


def load_patterns(
    entries: Sequence[IndexEntry],
    saccade: int = 1,
    polarity="ON",
    limit: int | None = None,
) -> list[Pattern]:
    if limit is not None:
        entries = entries[:limit]
    return [slice_saccade(read_events(e.path), saccade, polarity, e.label) for e in entries]


@dataclass
class CollapsedFrame:
    intensity: np.ndarray
    label: int | None = None


COLLAPSE_MODES = ("count", "time-sum")


def collapse(pattern: Pattern, mode: str = "count") -> CollapsedFrame:
    """Collapse a pattern over time into a frame normalised to a peak of 1.

    ``mode="count"`` uses per-pixel event counts. ``mode="time-sum"`` sums
    the spike times of each pixel instead.
    """
    if mode == "count":
        per_pixel = pattern.counts().astype(np.float64)
    elif mode == "time-sum":
        per_pixel = np.bincount(pattern.pixel, weights=pattern.time.astype(np.float64), minlength=pattern.n_pixels)
    else:
        raise ValueError(f"unknown collapse mode {mode!r}; expected one of {COLLAPSE_MODES}")
    peak = per_pixel.max(initial=0.0)
    if peak > 0:
        per_pixel = per_pixel / peak
    return CollapsedFrame(per_pixel.reshape(pattern.height, pattern.width), pattern.label)


def export_frame_pgm(frame: CollapsedFrame) -> bytes:
    """Binary (P5) PGM with maxval 255; values are rounded half-up."""
    img = np.asarray(frame.intensity, dtype=np.float64)
    h, w = img.shape
    pix = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path: "str | os.PathLike[str]", data: bytes) -> None:
    Path(path).write_bytes(data)


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a P5 PGM produced by this module (no comment lines)."""
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    body = data[len(data) - w * h:]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


@dataclass
class PsthTable:
    """Average number of events per pattern in each 1 ms bin."""

    values: np.ndarray
    n_patterns: int
    bin_ms: float = 1.0

    @property
    def duration(self) -> int:
        return len(self.values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t_ms", "H"])
        for t, v in enumerate(self.values):
            writer.writerow([t, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_patterns: int = 0) -> "PsthTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        values = np.array([float(r["H"]) for r in sorted(rows, key=lambda r: int(r["t_ms"]))])
        return cls(values, n_patterns)


def compute_psth(patterns: Iterable[Pattern]) -> PsthTable:
    total = None
    n = 0
    duration = None
    for p in patterns:
        if duration is None:
            duration = p.duration
            total = np.zeros(duration, dtype=np.float64)
        elif p.duration != duration:
            raise ValueError("patterns have different durations")
        total += np.bincount(p.time, minlength=duration)
        n += 1
    if n == 0:
        raise EmptyPatternSet("cannot compute a PSTH from zero patterns")
    return PsthTable(total / n, n)
