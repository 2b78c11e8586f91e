"""Event-stream ingestion and fixed-interval polarity binning.

File format: UTF-8 text, optional leading comment lines starting with "#",
then one event per line as ``t_us,x,y,p`` with p in {0, 1} (0 = negative
polarity). In memory, polarity is +1/-1. Streams are kept sorted
nondecreasing in t.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor geometry must be at least 1x1")


class EventFormatError(ValueError):
    pass


class EventStream:
    """Column-packed event record (t, x, y, p), sorted nondecreasing in t."""

    def __init__(self, t, x, y, p, sort=True):
        self.t = np.asarray(t, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.p = np.asarray(p, dtype=np.int8)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise ValueError("event columns must have equal length")
        if sort and len(self.t) > 1 and np.any(np.diff(self.t) < 0):
            order = np.argsort(self.t, kind="stable")
            self.t, self.x, self.y, self.p = (
                self.t[order], self.x[order], self.y[order], self.p[order])

    @classmethod
    def empty(cls):
        return cls([], [], [], [])

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def shifted(self, dt_us):
        return EventStream(self.t + int(dt_us), self.x, self.y, self.p, sort=False)


@dataclass
class EventTensorSequence:
    """T x 2 x H x W polarity counts; channel 0 positive, channel 1 negative."""

    data: np.ndarray
    window_us: int
    t0: int


def parse_event_file(path, geom):
    """Parse a ``t,x,y,p`` text file into a sorted EventStream.

    Raises EventFormatError with the offending line number on malformed
    input or out-of-bounds coordinates. An empty file is an empty stream.
    """
    ts, xs, ys, ps = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EventFormatError(
                    f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
            try:
                t, x, y, p = (int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]))
            except ValueError as exc:
                raise EventFormatError(f"{path}:{lineno}: non-integer field ({exc})") from None
            if p not in (0, 1):
                raise EventFormatError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            if not (0 <= x < geom.width and 0 <= y < geom.height):
                raise EventFormatError(
                    f"{path}:{lineno}: coordinate ({x}, {y}) outside {geom.width}x{geom.height}")
            if t < 0:
                raise EventFormatError(f"{path}:{lineno}: negative timestamp {t}")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(1 if p == 1 else -1)
    return EventStream(ts, xs, ys, ps)


def bin_events(stream, t_steps, window_us, geom, clip=None, t0=None):
    """Accumulate events into T fixed-interval two-channel count tensors.

    Event e lands in bin floor((e.t - t0)/window_us); bins at or past T are
    discarded. t0 defaults to the stream's first timestamp. ``clip``
    saturates per-cell counts when given.
    """
    if t_steps < 1:
        raise ValueError("need at least one time bin")
    if window_us < 1:
        raise ValueError("window must be at least 1 us")
    h, w = geom.height, geom.width
    data = np.zeros((t_steps, 2, h, w), dtype=np.float64)
    if len(stream) == 0:
        return EventTensorSequence(data=data, window_us=window_us, t0=0 if t0 is None else int(t0))
    t0 = int(stream.t[0]) if t0 is None else int(t0)
    k = (stream.t - t0) // window_us
    keep = (k >= 0) & (k < t_steps)
    chan = (stream.p[keep] < 0).astype(np.int64)
    flat = ((k[keep] * 2 + chan) * h + stream.y[keep]) * w + stream.x[keep]
    counts = np.bincount(flat, minlength=data.size)
    data += counts.reshape(data.shape)
    if clip is not None:
        np.minimum(data, float(clip), out=data)
    return EventTensorSequence(data=data, window_us=window_us, t0=t0)


def simulate_dvs(frames, threshold, frame_dt_us, lum_floor=1e-3):
    """Convert luminance frames to events via per-pixel log-intensity
    accumulators with carry-over.

    Between consecutive frames, each pixel accumulates the log-luminance
    change; every full multiple of the threshold emits one event of the
    change's sign, timestamps spread uniformly over the inter-frame
    interval; the sub-threshold residue carries over.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("need at least two H x W frames")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    log_frames = np.log(frames + lum_floor)
    h, w = frames.shape[1:]
    acc = np.zeros((h, w), dtype=np.float64)
    ts, xs, ys, ps = [], [], [], []
    for i in range(frames.shape[0] - 1):
        acc += log_frames[i + 1] - log_frames[i]
        n = np.floor(np.abs(acc) / threshold).astype(np.int64)
        yy, xx = np.nonzero(n)
        t_start = i * frame_dt_us
        for y, x in zip(yy, xx):
            cnt = n[y, x]
            sign = 1 if acc[y, x] > 0 else -1
            for j in range(cnt):
                ts.append(int(t_start + frame_dt_us * (j + 1) // (cnt + 1)))
                xs.append(int(x))
                ys.append(int(y))
                ps.append(sign)
        acc -= np.sign(acc) * n * threshold
    return EventStream(ts, xs, ys, ps)
