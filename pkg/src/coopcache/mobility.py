"""Residence-time prediction from RSU attachment sequences.

Each vehicle's history is a list of days, every day a fixed-length sequence
of RSU ids with 0 standing for "not attached to any RSU". A variable-order
Markov model (prediction by partial matching) is trained on these
sequences and rolled forward over the next ``T`` slots to estimate how many
slots the vehicle will spend under each RSU.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MobilityTrace",
    "PpmModel",
    "train_ppm",
    "predict_residence",
    "oracle_residence",
    "uniform_residence",
    "build_residence_matrix",
    "read_mobility_csv",
    "write_mobility_csv",
]


@dataclass(frozen=True)
class MobilityTrace:
    """Attachment history of one vehicle: ``days`` is L x N, 0 = absent."""

    vehicle_id: int
    days: np.ndarray

    def __post_init__(self):
        days = np.asarray(self.days, dtype=np.int64)
        if days.ndim == 1:
            days = days[None, :]
        if days.ndim != 2:
            raise ValueError("a mobility trace is a (days x slots) array")
        if np.any(days < 0):
            raise ValueError(f"negative RSU id in trace of vehicle {self.vehicle_id}")
        days.setflags(write=False)
        object.__setattr__(self, "days", days)

    @property
    def slots_per_day(self) -> int:
        return int(self.days.shape[1])

    @classmethod
    def from_days(cls, vehicle_id, days, slots_per_day):
        """Truncate or pad (with 0) each day to ``slots_per_day`` entries."""
        rows = np.zeros((len(days), slots_per_day), dtype=np.int64)
        for i, day in enumerate(days):
            day = np.asarray(day, dtype=np.int64)[:slots_per_day]
            rows[i, : day.size] = day
        return cls(vehicle_id, rows)


@dataclass
class PpmModel:
    """Context counts of a PPM predictor over the symbols 0..R.

    ``counts[context]`` is a length ``R + 1`` array of next-symbol counts,
    with contexts stored as tuples of at most ``order`` symbols.
    """

    order: int
    rsu_count: int
    counts: dict = field(default_factory=dict)
    horizon: int = 0

    def distribution(self, context) -> np.ndarray:
        """Next-symbol distribution, escaping to shorter contexts when unseen."""
        context = tuple(int(c) for c in context)
        for j in range(min(self.order, len(context)), 0, -1):
            table = self.counts.get(context[-j:])
            if table is not None:
                total = table.sum()
                if total > 0:
                    return table / total
        return np.full(self.rsu_count + 1, 1.0 / (self.rsu_count + 1))


def _sequences(traces):
    for tr in traces:
        days = tr.days if isinstance(tr, MobilityTrace) else np.atleast_2d(np.asarray(tr, dtype=np.int64))
        yield from days


def train_ppm(traces, k: int, rsu_count: int | None = None, horizon: int = 0) -> PpmModel:
    """Count every (context, next) pair with context lengths 1..k.

    Contexts never span day boundaries. ``rsu_count`` defaults to the
    largest id seen.
    """
    if k < 1:
        raise ValueError(f"PPM order must be at least 1, got {k}")
    days = [np.asarray(d, dtype=np.int64) for d in _sequences(traces)]
    if not days or all(d.size == 0 for d in days):
        raise ValueError("cannot train a mobility model on an empty trace set")
    seen = max(int(d.max()) for d in days if d.size)
    if rsu_count is None:
        rsu_count = seen
    elif seen > rsu_count:
        raise ValueError(f"trace contains RSU id {seen} but only {rsu_count} RSUs exist")

    counts = defaultdict(lambda: np.zeros(rsu_count + 1, dtype=np.int64))
    for day in days:
        seq = day.tolist()
        for i in range(1, len(seq)):
            nxt = seq[i]
            for j in range(1, min(k, i) + 1):
                counts[tuple(seq[i - j:i])][nxt] += 1
    return PpmModel(k, rsu_count, dict(counts), horizon)


def predict_residence(model: PpmModel, intraday, horizon: int | None = None) -> np.ndarray:
    """Expected slots per RSU over the next ``horizon`` slots.

    At each step the next-symbol distribution is added to the estimate, and
    the context advances with its most likely symbol (ties to the lower
    id). Mass on the absent symbol 0 is dropped, so the result sums to at
    most ``horizon``.
    """
    T = model.horizon if horizon is None else horizon
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    out = np.zeros(model.rsu_count + 1)
    context = [int(c) for c in np.asarray(intraday, dtype=np.int64)[-model.order:]] if model.order else []
    for _ in range(T):
        dist = model.distribution(context)
        out += dist
        context.append(int(np.argmax(dist)))
        context = context[-model.order:]
    return out[1:]


def oracle_residence(future, horizon: int, rsu_count: int) -> np.ndarray:
    """Exact per-RSU occupancy of the first ``horizon`` future slots."""
    future = np.asarray(future, dtype=np.int64)
    if future.size < horizon:
        raise ValueError(f"future trace covers {future.size} slots, need {horizon}")
    if future.size and future.max() > rsu_count:
        raise ValueError(f"RSU id {future.max()} out of range")
    return np.bincount(future[:horizon], minlength=rsu_count + 1)[1:].astype(np.float64)


def uniform_residence(rsu_count: int, horizon: int) -> np.ndarray:
    """Uninformed predictor: every symbol, absent included, equally likely."""
    return np.full(rsu_count, horizon / (rsu_count + 1))


def build_residence_matrix(vectors, rsu_count: int | None = None) -> np.ndarray:
    """Stack per-vehicle residence vectors into a V x R matrix."""
    rows = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not rows:
        return np.zeros((0, rsu_count or 0))
    R = rows[0].size if rsu_count is None else rsu_count
    for i, row in enumerate(rows):
        if row.ndim != 1 or row.size != R:
            raise ValueError(f"residence vector {i} has shape {row.shape}, expected ({R},)")
    out = np.vstack(rows)
    if np.any(out < 0) or not np.all(np.isfinite(out)):
        raise ValueError("residence times must be finite and nonnegative")
    return out


def read_mobility_csv(path, slots_per_day: int | None = None) -> dict:
    """Read ``vehicle_id, day, slot, rsu_id`` rows into traces by vehicle.

    Slots of every (vehicle, day) must be contiguous from 0. With
    ``slots_per_day`` given, days are truncated or zero-padded to it.
    """
    raw = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["vehicle_id", "day", "slot", "rsu_id"]
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                v, d, s, r = (int(row[k]) for k in expected)
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: non-integer field") from None
            if r < 0:
                raise ValueError(f"{path}:{lineno}: negative rsu_id")
            raw[(v, d)][s] = r
    by_vehicle = defaultdict(list)
    for (v, d), slots in sorted(raw.items()):
        if sorted(slots) != list(range(len(slots))):
            raise ValueError(f"{path}: slots of vehicle {v}, day {d} are not contiguous from 0")
        by_vehicle[v].append([slots[i] for i in range(len(slots))])
    out = {}
    for v, days in by_vehicle.items():
        n = slots_per_day or max(len(d) for d in days)
        out[v] = MobilityTrace.from_days(v, days, n)
    return out


def write_mobility_csv(traces, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "day", "slot", "rsu_id"])
        for tr in traces:
            for d, day in enumerate(tr.days):
                for s, r in enumerate(day):
                    writer.writerow([tr.vehicle_id, d, s, int(r)])
