"""Per-iteration metrics rows and their CSV form.

Absent values (no evaluation this iteration, no hindsight batches in the
window) are written as empty fields, never as zeros.  Floats are written with
``repr`` so parsing an exported file gives back the identical row.
Wall-clock time lives in a separate ``timing.csv`` so that ``metrics.csv``
is a pure function of the configuration and seed.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

from htr.errors import InvalidArgumentError


@dataclass
class MetricsRow:
    iter: int
    env_steps: int
    grad_steps: int
    avg_train_adaptation_return: Optional[float] = None
    avg_test_adaptation_return: Optional[float] = None
    final_episode_test_return: Optional[float] = None
    mean_hindsight_task_distance: Optional[float] = None
    hindsight_nonzero_reward_fraction: Optional[float] = None
    real_nonzero_reward_fraction: Optional[float] = None
    hindsight_batch_fraction: Optional[float] = None
    critic_loss: Optional[float] = None
    actor_loss: Optional[float] = None
    kl_loss: Optional[float] = None


HEADER = tuple(f.name for f in fields(MetricsRow))
_INT_FIELDS = {"iter", "env_steps", "grad_steps"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_csv(log: Sequence[MetricsRow], path: Union[str, Path]) -> None:
    if not log:
        raise InvalidArgumentError("cannot export an empty metrics log")
    for prev, row in zip(log, log[1:]):
        if row.iter <= prev.iter or row.env_steps < prev.env_steps:
            raise InvalidArgumentError("iter must increase and env_steps must not decrease")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for row in log:
            d = asdict(row)
            w.writerow([_fmt(d[k]) for k in HEADER])


def read_csv(path: Union[str, Path]) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HEADER:
            raise InvalidArgumentError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for rec in reader:
            vals = {}
            for k in HEADER:
                s = rec[k]
                if k in _INT_FIELDS:
                    vals[k] = int(s)
                else:
                    vals[k] = float(s) if s != "" else None
            rows.append(MetricsRow(**vals))
    return rows


def export_timing(iters: Sequence[int], seconds: Sequence[float], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter", "wall_time"))
        for i, s in zip(iters, seconds):
            w.writerow((i, f"{s:.3f}"))


def column(log: Sequence[MetricsRow], name: str) -> tuple[list[int], list[float]]:
    """``(env_steps, values)`` for the rows where ``name`` is present."""
    xs, ys = [], []
    for row in log:
        v = getattr(row, name)
        if v is not None:
            xs.append(row.env_steps)
            ys.append(v)
    return xs, ys
