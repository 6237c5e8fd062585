"""Reader/writer for the N-MNIST binary AER format.

Every event is a 5-byte big-endian record::

    byte 0      x address
    byte 1      y address
    byte 2      bit 7 = polarity (1 = ON), bits 6..0 = timestamp bits 22..16
    byte 3      timestamp bits 15..8
    byte 4      timestamp bits 7..0

Timestamps are microseconds from the start of the recording.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

RECORD_SIZE = 5
TIMESTAMP_BITS = 23
MAX_TIMESTAMP = (1 << TIMESTAMP_BITS) - 1
NMNIST_SIZE = 34


class AerError(ValueError):
    """Base class for malformed AER input."""


class TruncatedRecord(AerError):
    pass


class CoordinateOutOfRange(AerError):
    pass


class FieldOverflow(AerError):
    pass


class MissingSplit(AerError):
    pass


class UnlabeledDirectory(AerError):
    pass


class Polarity(enum.IntEnum):
    OFF = 0
    ON = 1

    @classmethod
    def parse(cls, value: "str | int | Polarity") -> "Polarity":
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(int(value))


class Event(NamedTuple):
    x: int
    y: int
    polarity: Polarity
    timestamp: int


@dataclass(eq=False)
class EventStream:
    """Column-oriented event sequence with timestamps in microseconds."""

    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    timestamp: np.ndarray
    width: int = NMNIST_SIZE
    height: int = NMNIST_SIZE
    # number of records that arrived out of timestamp order and were re-sorted
    n_reordered: int = field(default=0, compare=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        n = len(self.x)
        if not (len(self.y) == len(self.polarity) == len(self.timestamp) == n):
            raise ValueError("event columns differ in length")

    @classmethod
    def from_events(cls, events, width: int = NMNIST_SIZE, height: int = NMNIST_SIZE) -> "EventStream":
        events = list(events)
        if not events:
            return cls.empty(width, height)
        x, y, p, t = zip(*events)
        return cls(np.array(x), np.array(y), np.array([int(v) for v in p]), np.array(t), width, height)

    @classmethod
    def empty(cls, width: int = NMNIST_SIZE, height: int = NMNIST_SIZE) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height)

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), Polarity(int(self.polarity[i])), int(self.timestamp[i]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.polarity, other.polarity)
            and np.array_equal(self.timestamp, other.timestamp)
        )


def decode_events(data: bytes, width: int = NMNIST_SIZE, height: int = NMNIST_SIZE) -> EventStream:
    """Decode an N-MNIST byte string.

    Out-of-order timestamps are stably sorted; the number of records that
    moved is reported in ``EventStream.n_reordered``.
    """
    if len(data) % RECORD_SIZE:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of {RECORD_SIZE}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_SIZE).astype(np.int64)
    x = raw[:, 0]
    y = raw[:, 1]
    polarity = raw[:, 2] >> 7
    ts = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]

    bad = (x >= width) | (y >= height)
    if bad.any():
        i = int(np.argmax(bad))
        raise CoordinateOutOfRange(
            f"record {i}: ({x[i]}, {y[i]}) outside {width}x{height}"
        )

    n_reordered = 0
    if len(ts) > 1 and np.any(np.diff(ts) < 0):
        order = np.argsort(ts, kind="stable")
        n_reordered = int(np.count_nonzero(order != np.arange(len(ts))))
        x, y, polarity, ts = x[order], y[order], polarity[order], ts[order]
    return EventStream(x, y, polarity, ts, width, height, n_reordered)


def encode_events(stream: EventStream) -> bytes:
    x, y, p, ts = stream.x, stream.y, stream.polarity, stream.timestamp
    if len(x) == 0:
        return b""
    if ts.min() < 0 or ts.max() > MAX_TIMESTAMP:
        raise FieldOverflow(f"timestamp outside [0, 2^{TIMESTAMP_BITS})")
    if x.min() < 0 or y.min() < 0 or x.max() > 255 or y.max() > 255:
        raise FieldOverflow("coordinate does not fit in one byte")
    if np.any((p != 0) & (p != 1)):
        raise FieldOverflow("polarity must be 0 or 1")
    out = np.empty((len(x), RECORD_SIZE), dtype=np.uint8)
    out[:, 0] = x
    out[:, 1] = y
    out[:, 2] = (p.astype(np.int64) << 7) | (ts >> 16)
    out[:, 3] = (ts >> 8) & 0xFF
    out[:, 4] = ts & 0xFF
    return out.tobytes()


def read_events(path: "str | os.PathLike[str]", **kwargs) -> EventStream:
    return decode_events(Path(path).read_bytes(), **kwargs)


def write_events(path: "str | os.PathLike[str]", stream: EventStream) -> None:
    Path(path).write_bytes(encode_events(stream))


class IndexEntry(NamedTuple):
    path: Path
    label: int
    split: str


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple[IndexEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[IndexEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def train(self) -> list[IndexEntry]:
        return self.split("train")

    @property
    def test(self) -> list[IndexEntry]:
        return self.split("test")


SPLIT_DIRS = {"train": "Train", "test": "Test"}


def index_dataset(root: "str | os.PathLike[str]") -> DatasetIndex:
    """Index ``root/Train/<digit>/*.bin`` and ``root/Test/<digit>/*.bin``.

    Within a split, entries are ordered by file name and then label. N-MNIST
    file names are the original MNIST sample numbers, so this recovers the
    interleaved MNIST order instead of grouping all samples of one class.
    """
    root = Path(root)
    entries: list[IndexEntry] = []
    for split, dirname in SPLIT_DIRS.items():
        split_dir = root / dirname
        if not split_dir.is_dir():
            raise MissingSplit(f"{split_dir} not found")
        found = []
        for sub in split_dir.iterdir():
            if not sub.is_dir():
                continue
            if not (sub.name.isdigit() and 0 <= int(sub.name) <= 9):
                raise UnlabeledDirectory(f"{sub} is not a class directory 0-9")
            label = int(sub.name)
            for f in sub.iterdir():
                if f.suffix == ".bin" and f.is_file():
                    found.append((f.name, label, f))
        found.sort(key=lambda item: (item[0], item[1]))
        entries.extend(IndexEntry(f, label, split) for _, label, f in found)
    return DatasetIndex(tuple(entries))
