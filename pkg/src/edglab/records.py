"""On-disk trajectory schema: JSONL trajectories and CSV tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

SCHEMA_VERSION = 1


@dataclass
class TrajectoryRecord:
    """Time-stamped occupancy-count snapshots from one replica.

    counts[i] maps cluster size k (>= 1) to the number of sites of that
    size at times[i]; empty sites are implicit (L minus the rest).
    """

    L: int
    N: int
    times: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    replica: int = 0
    seed: Optional[int] = None
    absorbed_at: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def append(self, t: float, counts: dict) -> None:
        self.times.append(float(t))
        self.counts.append(dict(counts))


def write_trajectory_jsonl(path, record: TrajectoryRecord, config=None) -> None:
    """One JSON object per grid time, plus header and absorption lines."""
    with open(path, "w") as fh:
        header = {
            "schema_version": SCHEMA_VERSION,
            "L": record.L,
            "N": record.N,
            "replica": record.replica,
            "seed": record.seed,
        }
        if config is not None:
            header["config"] = config
        fh.write(json.dumps(header) + "\n")
        for t, counts in zip(record.times, record.counts):
            row = {
                "t": t,
                "counts": {str(k): int(n) for k, n in sorted(counts.items())},
                "replica": record.replica,
                "seed": record.seed,
            }
            fh.write(json.dumps(row) + "\n")
        if record.absorbed_at is not None:
            fh.write(json.dumps({"absorbed_at": record.absorbed_at}) + "\n")


def read_trajectory_jsonl(path) -> TrajectoryRecord:
    record = None
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if "schema_version" in obj:
                record = TrajectoryRecord(
                    L=obj["L"],
                    N=obj["N"],
                    replica=obj.get("replica", 0),
                    seed=obj.get("seed"),
                )
            elif "absorbed_at" in obj:
                record.absorbed_at = obj["absorbed_at"]
            else:
                record.append(
                    obj["t"], {int(k): int(n) for k, n in obj["counts"].items()}
                )
    if record is None:
        raise ValueError(f"no trajectory header in {path}")
    return record


def write_measure_csv(path, times, measures) -> None:
    """Long-format CSV ``t,k,F_k`` for a sequence of sparse measures."""
    with open(path, "w") as fh:
        fh.write("t,k,F_k\n")
        for t, meas in zip(times, measures):
            for k in sorted(meas):
                fh.write(f"{float(t)!r},{k},{float(meas[k])!r}\n")


def write_moments_csv(path, times, moments_by_n) -> None:
    """Long-format CSV ``t,n,m_n``; moments_by_n maps n to a time series."""
    with open(path, "w") as fh:
        fh.write("t,n,m_n\n")
        for n in sorted(moments_by_n):
            for t, m in zip(times, moments_by_n[n]):
                fh.write(f"{float(t)!r},{n},{float(m)!r}\n")
