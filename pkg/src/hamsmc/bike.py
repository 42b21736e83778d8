"""Hourly station demand from raw bike-share trip records.

Each trip contributes one checkout to its start station in the hour of its
start time. Stations are kept when their first-to-last checkout span and
their mean hourly demand over that span both reach configurable minimums.
The result is one multivariate sequence (hours x stations, columns sorted
by station name) covering every hour from the earliest to the latest
checkout of any kept station.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from collections import Counter, defaultdict
from datetime import datetime
from pathlib import Path
from typing import NamedTuple

import numpy as np

from hamsmc.ssm import TrajectoryBatch

TIME_FORMATS = (
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M:%S.%f",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
)


class IngestError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class IngestRules:
    min_span_days: float = 730.0
    min_rate_per_hour: float = 1.0
    start_time_col: str = "starttime"
    stop_time_col: str = "stoptime"
    start_station_col: str = "start station name"
    end_station_col: str = "end station name"


class IngestResult(NamedTuple):
    batch: TrajectoryBatch
    stations: list
    start_hour: str
    skipped_rows: int
    dropped_stations: dict  # name -> reason


def parse_time(text: str) -> datetime:
    text = text.strip().strip('"')
    for fmt in TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unrecognized timestamp {text!r}")


def _hour(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


def ingest_bike_csv(path, rules: IngestRules = IngestRules()) -> IngestResult:
    """Aggregate trips into hourly checkout counts per surviving station.

    Rows with a missing or unparsable field, or a stop time before the start
    time, are skipped and counted.

    Raises:
        IngestError: if required columns are missing or no station survives.
    """
    counts: dict[str, Counter] = defaultdict(Counter)
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip().lower() for h in (reader.fieldnames or [])]
        needed = [rules.start_time_col, rules.stop_time_col, rules.start_station_col, rules.end_station_col]
        missing = [c for c in needed if c.lower() not in header]
        if missing:
            raise IngestError(f"missing columns: {', '.join(missing)}")
        reader.fieldnames = header
        for row in reader:
            try:
                start = parse_time(row[rules.start_time_col.lower()])
                stop = parse_time(row[rules.stop_time_col.lower()])
                station = row[rules.start_station_col.lower()].strip()
                end_station = row[rules.end_station_col.lower()]
                if not station or end_station is None or not end_station.strip() or stop < start:
                    raise ValueError("incomplete row")
            except (ValueError, KeyError, AttributeError, TypeError):
                skipped += 1
                continue
            counts[station][_hour(start)] += 1

    kept, dropped = [], {}
    for name in sorted(counts):
        hours = counts[name]
        first, last = min(hours), max(hours)
        span_hours = (last - first).total_seconds() / 3600.0 + 1.0
        if span_hours / 24.0 < rules.min_span_days:
            dropped[name] = "span"
        elif sum(hours.values()) / span_hours < rules.min_rate_per_hour:
            dropped[name] = "rate"
        else:
            kept.append(name)
    if not kept:
        raise IngestError("no station satisfies the filtering rules")

    first = min(min(counts[n]) for n in kept)
    last = max(max(counts[n]) for n in kept)
    T = int((last - first).total_seconds() // 3600) + 1
    y = np.zeros((T, len(kept)))
    for j, name in enumerate(kept):
        for hour, c in counts[name].items():
            y[int((hour - first).total_seconds() // 3600), j] = c
    batch = TrajectoryBatch([y], [np.zeros((T, 0))], ["bike"])
    return IngestResult(batch, kept, first.isoformat(), skipped, dropped)


def write_ingest(result: IngestResult, out_path) -> Path:
    """Write the dataset JSONL and a ``<name>.stations.json`` sidecar; returns the sidecar path."""
    out_path = Path(out_path)
    result.batch.to_jsonl(out_path)
    side = out_path.with_suffix(".stations.json")
    side.write_text(json.dumps({
        "stations": result.stations,
        "start_hour": result.start_hour,
        "skipped_rows": result.skipped_rows,
        "dropped_stations": result.dropped_stations,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side
