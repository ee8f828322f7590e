# -*- coding: utf-8 -*-
# ------------------------------------------------------------------------------
#
#   Copyright 2024 Valory AG
#
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.
#
# ------------------------------------------------------------------------------

"""This module contains the result rows produced by the experiment harness."""

import csv
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Tuple, Union


def _cell(value: Any) -> str:
    """CSV text of a value; floats use repr so they round-trip bit for bit."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def header(row_cls: type) -> Tuple[str, ...]:
    """Column names of a row dataclass."""
    return tuple(f.name for f in fields(row_cls))


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a header and rows, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    return path


@dataclass(frozen=True)
class EpochRow:
    """Metrics after one training epoch."""

    epoch: int
    train_loss: float
    train_error: float
    test_error: float
    g_over_v: float
    v_norm: float
    wall_seconds: float


@dataclass(frozen=True)
class ComparisonRow:
    """
    An epoch row of one (mode, lr) cell of the comparison grid.

    A diverged cell ends with a row for the failed epoch: its metrics are empty
    and diagnostic says what became non-finite.
    """

    mode: str
    lr: float
    epoch: int
    train_loss: Optional[float]
    train_error: Optional[float]
    test_error: Optional[float]
    g_over_v: Optional[float]
    v_norm: Optional[float]
    wall_seconds: Optional[float]
    diverged: bool = False
    diagnostic: str = ""


@dataclass(frozen=True)
class SummaryRow:
    """Best-lr outcome of one parameterization."""

    mode: str
    best_lr: Optional[float]
    final_train_error: Optional[float]
    final_test_error: Optional[float]
    epochs_to_threshold: Optional[int]
    stable_runs: int
    diverged_runs: int
    mean_epoch_seconds: Optional[float]
    relative_overhead: Optional[float]


@dataclass(frozen=True)
class RunRecord:
    """Everything one training run produced."""

    mode: str
    lr: float
    seed: int
    initial_train_loss: float
    initial_train_error: float
    rows: Tuple[EpochRow, ...] = field(default_factory=tuple)
    diverged: bool = False
    diagnostic: str = ""

    @property
    def final(self) -> Optional[EpochRow]:
        """Last completed epoch."""
        return self.rows[-1] if self.rows else None

    @property
    def stable(self) -> bool:
        """Not diverged and the final train loss is below the initial one."""
        return not self.diverged and self.final is not None and self.final.train_loss < self.initial_train_loss

    def epochs_to_threshold(self, threshold: float) -> Optional[int]:
        """First epoch whose train error is at most threshold."""
        for row in self.rows:
            if row.train_error <= threshold:
                return row.epoch
        return None

    def mean_epoch_seconds(self) -> Optional[float]:
        """Average wall time per epoch."""
        if not self.rows:
            return None
        return sum(row.wall_seconds for row in self.rows) / len(self.rows)

    def comparison_rows(self) -> List[ComparisonRow]:
        """Rows of the long-format comparison CSV."""
        rows = [ComparisonRow(self.mode, self.lr, *astuple(row)) for row in self.rows]
        if self.diverged:
            failed = len(self.rows) + 1
            rows.append(ComparisonRow(self.mode, self.lr, failed, *([None] * 6), diverged=True, diagnostic=self.diagnostic))
        return rows

    def write(self, path: Union[str, Path]) -> Path:
        """Write the per-epoch CSV of this run."""
        return write_csv(path, header(EpochRow), (astuple(row) for row in self.rows))
