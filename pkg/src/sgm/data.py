"""Tensor time series ingestion, normalization and cross-validation splits.

Series CSV (long format)::

    location_id,timestamp,feature,value

Labels CSV::

    location_id,timestamp,label

Timestamps are either integer hour indices or ISO-8601 hours; internally both
become integer hours (hours since the Unix epoch for ISO input).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SERIES_HEADER = ["location_id", "timestamp", "feature", "value"]
LABELS_HEADER = ["location_id", "timestamp", "label"]
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class DataError(ValueError):
    pass


class MissingCellError(DataError):
    pass


class DuplicateCellError(DataError):
    pass


class TimeStepError(DataError):
    pass


@dataclass
class TensorSeries:
    values: np.ndarray            # (N, D, T)
    location_ids: list[str]
    feature_names: list[str]
    timestamps: np.ndarray        # (T,) int64 hours
    time_format: str = "index"    # "index" or "iso"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n, d, t = self.values.shape
        if min(n, d, t) < 1:
            raise DataError(f"empty tensor series {self.values.shape}")
        if len(self.location_ids) != n or len(self.feature_names) != d or len(self.timestamps) != t:
            raise DataError("metadata lengths do not match tensor shape")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains NaN or Inf")
        if t > 1:
            steps = np.diff(self.timestamps)
            if np.any(steps <= 0) or np.any(steps != steps[0]):
                raise TimeStepError("timestamps must be strictly increasing with a constant step")

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values) -> "TensorSeries":
        return TensorSeries(values, list(self.location_ids), list(self.feature_names),
                            self.timestamps.copy(), self.time_format)


@dataclass
class EventLabels:
    values: np.ndarray            # (N, T) in {0, 1}
    location_ids: list[str]
    timestamps: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if not np.isin(self.values, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def check_aligned(self, series: TensorSeries):
        if (self.values.shape != (series.shape[0], series.shape[2])
                or list(self.location_ids) != list(series.location_ids)
                or not np.array_equal(self.timestamps, series.timestamps)):
            raise DataError("labels are not aligned with the series")


@dataclass
class NormParams:
    mean: np.ndarray              # (N, D)
    std: np.ndarray               # (N, D)
    clamped: list[tuple[int, int]] = field(default_factory=list)

    def apply(self, values):
        return (values - self.mean[..., None]) / self.std[..., None]

    def invert(self, values):
        return values * self.std[..., None] + self.mean[..., None]

    def to_json(self, location_ids, feature_names) -> dict:
        return {
            "location_ids": list(location_ids),
            "feature_names": list(feature_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "clamped": [list(c) for c in self.clamped],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NormParams":
        return cls(np.array(doc["mean"], dtype=np.float64), np.array(doc["std"], dtype=np.float64),
                   [tuple(c) for c in doc.get("clamped", [])])


@dataclass
class CvGroup:
    """Index ranges ``(start, stop)`` into the time axis for each role."""
    train_segments: list[tuple[int, int]]
    validation_segments: list[tuple[int, int]]
    test_segments: list[tuple[int, int]]

    @staticmethod
    def _idx(segments):
        if not segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(a, b) for a, b in segments])

    def train_index(self):
        return self._idx(self.train_segments)

    def validation_index(self):
        return self._idx(self.validation_segments)

    def test_index(self):
        return self._idx(self.test_segments)


# ------------------------------------------------------------------ timestamps

def _parse_time(raw: str) -> tuple[int, bool]:
    raw = raw.strip()
    try:
        return int(raw), False
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {raw!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    if dt.minute or dt.second or dt.microsecond:
        raise DataError(f"timestamp {raw!r} is not on the hour")
    return int((dt - _EPOCH) // timedelta(hours=1)), True


def format_time(hour: int, time_format: str) -> str:
    if time_format == "iso":
        return (_EPOCH + timedelta(hours=int(hour))).strftime("%Y-%m-%dT%H:00:00")
    return str(int(hour))


# ------------------------------------------------------------------ ingestion

def _reader(fh):
    """csv reader that skips ``#`` comment lines (used for provenance headers)."""
    return csv.reader(line for line in fh if not line.startswith("#"))


def _write_comment(fh, comment):
    if comment:
        fh.write(f"# {comment}\n")


def _check_header(reader, expected, path):
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != expected:
        raise DataError(f"{path}: expected header {','.join(expected)}, got {header}")


def ingest_series(path) -> TensorSeries:
    """Read a long-format series CSV into a dense (location, feature, time) tensor."""
    path = Path(path)
    cells: dict[tuple[str, str, int], float] = {}
    features: list[str] = []
    seen_features: set[str] = set()
    locations: set[str] = set()
    times: set[int] = set()
    iso_flags: set[bool] = set()
    with path.open(newline="") as fh:
        reader = _reader(fh)
        _check_header(reader, SERIES_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            loc, raw_t, feat, raw_v = (c.strip() for c in row)
            t, is_iso = _parse_time(raw_t)
            iso_flags.add(is_iso)
            try:
                v = float(raw_v)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad value {raw_v!r}") from exc
            if not np.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value {raw_v!r}")
            key = (loc, feat, t)
            if key in cells:
                raise DuplicateCellError(f"{path}:{lineno}: duplicate cell {key}")
            cells[key] = v
            if feat not in seen_features:
                seen_features.add(feat)
                features.append(feat)
            locations.add(loc)
            times.add(t)
    if not cells:
        raise DataError(f"{path}: no data rows")
    if len(iso_flags) > 1:
        raise DataError(f"{path}: mixed timestamp formats")
    loc_ids = sorted(locations)
    stamps = np.array(sorted(times), dtype=np.int64)
    if len(stamps) > 1:
        steps = np.diff(stamps)
        if np.any(steps != steps[0]) or steps[0] != 1:
            raise TimeStepError(f"{path}: time step is not a uniform 1 hour")
    expected = len(loc_ids) * len(features) * len(stamps)
    if len(cells) != expected:
        loc_pos = {l: i for i, l in enumerate(loc_ids)}
        feat_pos = {f: i for i, f in enumerate(features)}
        have = np.zeros((len(loc_ids), len(features), len(stamps)), dtype=bool)
        for (l, f, t) in cells:
            have[loc_pos[l], feat_pos[f], t - stamps[0]] = True
        i, j, k = np.argwhere(~have)[0]
        raise MissingCellError(
            f"{path}: missing cell ({loc_ids[i]}, {features[j]}, {format_time(stamps[k], 'index')})")
    values = np.empty((len(loc_ids), len(features), len(stamps)))
    loc_pos = {l: i for i, l in enumerate(loc_ids)}
    feat_pos = {f: i for i, f in enumerate(features)}
    t0 = stamps[0]
    for (l, f, t), v in cells.items():
        values[loc_pos[l], feat_pos[f], t - t0] = v
    return TensorSeries(values, loc_ids, features, stamps, "iso" if True in iso_flags else "index")


def export_series(series: TensorSeries, path, values=None, timestamps=None, comment: str | None = None):
    """Write a series (or a slice given by ``values``/``timestamps``) in long format.

    Floats are written with ``repr`` so ingestion round-trips bit-identically.
    """
    values = series.values if values is None else values
    timestamps = series.timestamps if timestamps is None else timestamps
    with Path(path).open("w", newline="") as fh:
        _write_comment(fh, comment)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for i, loc in enumerate(series.location_ids):
            for k, t in enumerate(timestamps):
                stamp = format_time(t, series.time_format)
                for j, feat in enumerate(series.feature_names):
                    w.writerow([loc, stamp, feat, repr(float(values[i, j, k]))])


def ingest_labels(path, series: TensorSeries) -> EventLabels:
    """Read labels and join them onto ``series`` by (location_id, timestamp).

    Labels naming an unknown location or hour are an error; cells with no
    label row default to 0.
    """
    path = Path(path)
    loc_pos = {l: i for i, l in enumerate(series.location_ids)}
    t_pos = {int(t): k for k, t in enumerate(series.timestamps)}
    out = np.zeros((len(loc_pos), len(t_pos)), dtype=np.int64)
    seen = set()
    with path.open(newline="") as fh:
        reader = _reader(fh)
        _check_header(reader, LABELS_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            loc, raw_t, raw_y = (c.strip() for c in row)
            t, _ = _parse_time(raw_t)
            if loc not in loc_pos or t not in t_pos:
                raise DataError(f"{path}:{lineno}: label ({loc}, {raw_t}) matches no series cell")
            if (loc, t) in seen:
                raise DuplicateCellError(f"{path}:{lineno}: duplicate label ({loc}, {raw_t})")
            seen.add((loc, t))
            if raw_y not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {raw_y!r}")
            out[loc_pos[loc], t_pos[t]] = int(raw_y)
    return EventLabels(out, list(series.location_ids), series.timestamps.copy())


def export_labels(labels: EventLabels, path, time_format="index", comment: str | None = None):
    with Path(path).open("w", newline="") as fh:
        _write_comment(fh, comment)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for i, loc in enumerate(labels.location_ids):
            for k, t in enumerate(labels.timestamps):
                w.writerow([loc, format_time(t, time_format), int(labels.values[i, k])])


# ------------------------------------------------------------------ normalization

def normalize(series: TensorSeries, train_index=None) -> tuple[TensorSeries, NormParams]:
    """Per (location, feature) z-score using population statistics of ``train_index``.

    Zero-variance cells get std clamped to 1; the clamp is logged and recorded.
    """
    if series.shape[2] < 2:
        raise DataError("normalize needs at least 2 timestamps")
    ref = series.values if train_index is None else series.values[:, :, train_index]
    mu = ref.mean(axis=2)
    sd = ref.std(axis=2)
    clamped = [tuple(int(x) for x in ij) for ij in np.argwhere(sd == 0)]
    for i, j in clamped:
        log.warning("zero variance for (%s, %s); std clamped to 1",
                    series.location_ids[i], series.feature_names[j])
    sd = np.where(sd == 0, 1.0, sd)
    params = NormParams(mu, sd, clamped)
    return series.with_values(params.apply(series.values)), params


def denormalize(series: TensorSeries, params: NormParams) -> TensorSeries:
    return series.with_values(params.invert(series.values))


def save_norm(params: NormParams, series: TensorSeries, path):
    Path(path).write_text(json.dumps(params.to_json(series.location_ids, series.feature_names), indent=2))


def load_norm(path) -> NormParams:
    return NormParams.from_json(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ CV groups

def make_cv_groups(series_or_length, n_groups: int = 4, n_segments: int | None = None) -> list[CvGroup]:
    """Rotating train/validation/test groups over equal contiguous segments.

    With five segments s1..s5 and four groups this gives group 1 = train
    {s2, s3, s4}, validation {s5}, test {s1}; group g shifts every role by
    g - 1 segments.  Segment ``n_segments`` is never a test segment when
    ``n_segments > n_groups``.
    """
    t_len = series_or_length if isinstance(series_or_length, int) else series_or_length.shape[2]
    n_segments = n_groups + 1 if n_segments is None else n_segments
    if n_groups < 1:
        raise DataError("need at least one CV group")
    if n_segments < n_groups + 1 or n_segments < 3:
        raise DataError(f"{n_segments} segments are too few for {n_groups} groups")
    if t_len < n_segments:
        raise DataError(f"series of length {t_len} cannot be split into {n_segments} segments")
    edges = np.linspace(0, t_len, n_segments + 1).round().astype(int)
    segs = [(int(edges[i]), int(edges[i + 1])) for i in range(n_segments)]
    groups = []
    for g in range(n_groups):
        test = g
        val = (g - 1) % n_segments
        train = [s for s in ((g + k) % n_segments for k in range(1, n_segments)) if s != val]
        groups.append(CvGroup([segs[s] for s in train], [segs[val]], [segs[test]]))
    return groups


def contiguous_runs(index: np.ndarray) -> list[tuple[int, int]]:
    """Split a sorted/unsorted index set into maximal contiguous ``(start, stop)`` runs."""
    idx = np.unique(np.asarray(index, dtype=np.int64))
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    return [(int(r[0]), int(r[-1]) + 1) for r in np.split(idx, breaks)]
