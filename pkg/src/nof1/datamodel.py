"""Outcome series: columnar per-participant measurements plus the canonical CSV."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import CsvFormatError, ValidationError
from .protocol import WashoutPolicy

CSV_COLUMNS = (
    "participant_id",
    "block",
    "period",
    "within_period_index",
    "time_index",
    "treatment_id",
    "value",
    "weight",
)


class Measurement(NamedTuple):
    participant_id: str
    block: int
    period: int
    within_period_index: int
    time_index: int
    treatment_id: str
    value: Optional[float]
    weight: float


@dataclass(frozen=True, eq=False)
class OutcomeSeries:
    """One participant's measurements, stored column-wise.

    ``value`` uses NaN for missing observations. ``attrs`` carries free-form
    provenance such as the true parameters of a simulated participant.
    """

    participant_id: str
    block: np.ndarray
    period: np.ndarray
    within_period_index: np.ndarray
    time_index: np.ndarray
    treatment_id: np.ndarray
    value: np.ndarray
    weight: np.ndarray
    covariates: dict = field(default_factory=dict)
    protocol: str = ""
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dt in (
            ("block", np.int64),
            ("period", np.int64),
            ("within_period_index", np.int64),
            ("time_index", np.int64),
            ("value", np.float64),
            ("weight", np.float64),
        ):
            arr = np.array(getattr(self, name), dtype=dt)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        tr = np.array([str(t) for t in self.treatment_id], dtype=object)
        tr.setflags(write=False)
        object.__setattr__(self, "treatment_id", tr)
        n = len(self.time_index)
        if any(len(getattr(self, c)) != n for c in CSV_COLUMNS[1:]):
            raise ValidationError("all measurement columns must have equal length")

    def __len__(self):
        return len(self.time_index)

    def __eq__(self, other):
        if not isinstance(other, OutcomeSeries):
            return NotImplemented
        return (
            self.participant_id == other.participant_id
            and all(
                np.array_equal(getattr(self, c), getattr(other, c), equal_nan=c in ("value", "weight"))
                if c != "treatment_id"
                else list(self.treatment_id) == list(other.treatment_id)
                for c in CSV_COLUMNS[1:]
            )
            and self.covariates == other.covariates
        )

    @property
    def measurements(self) -> list:
        return [
            Measurement(
                self.participant_id,
                int(b), int(t), int(m), int(ti), str(x),
                None if np.isnan(y) else float(y),
                float(w),
            )
            for b, t, m, ti, x, y, w in zip(
                self.block, self.period, self.within_period_index, self.time_index,
                self.treatment_id, self.value, self.weight,
            )
        ]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.value)

    @property
    def period_key(self) -> np.ndarray:
        """Integer id of the (block, period) each measurement belongs to."""
        keys = list(zip(self.block.tolist(), self.period.tolist()))
        order = {k: i for i, k in enumerate(sorted(set(keys)))}
        return np.array([order[k] for k in keys], dtype=np.int64)

    def period_treatments(self) -> list:
        """Treatment of each (block, period) in trial order."""
        out = {}
        for b, t, x in zip(self.block.tolist(), self.period.tolist(), self.treatment_id):
            out.setdefault((b, t), x)
        return [out[k] for k in sorted(out)]

    def scaled_time(self, max_time_index: Optional[int] = None) -> np.ndarray:
        """time_index mapped onto [0, 1] over the trial."""
        top = int(self.time_index.max()) if max_time_index is None else int(max_time_index)
        if top <= 0:
            return np.zeros(len(self), dtype=float)
        return self.time_index / float(top)

    @property
    def missing_fraction(self) -> float:
        return float(np.mean(self.missing)) if len(self) else 1.0

    def replace(self, **kw) -> "OutcomeSeries":
        return replace(self, **kw)


def series_from_measurements(measurements, covariates=None, protocol="") -> OutcomeSeries:
    ms = list(measurements)
    if not ms:
        raise ValidationError("no measurements")
    pid = ms[0].participant_id
    return OutcomeSeries(
        participant_id=pid,
        block=[m.block for m in ms],
        period=[m.period for m in ms],
        within_period_index=[m.within_period_index for m in ms],
        time_index=[m.time_index for m in ms],
        treatment_id=[m.treatment_id for m in ms],
        value=[np.nan if m.value is None else m.value for m in ms],
        weight=[m.weight for m in ms],
        covariates=dict(covariates or {}),
        protocol=protocol,
    )


# -- washout -----------------------------------------------------------------


def _post_boundary_periods(series: OutcomeSeries, crossovers_only: bool) -> np.ndarray:
    """Boolean mask of measurements lying in a period that follows a boundary."""
    keys = series.period_key
    treatments = series.period_treatments()
    follows = np.zeros(len(treatments), dtype=bool)
    for j in range(1, len(treatments)):
        follows[j] = (treatments[j] != treatments[j - 1]) if crossovers_only else True
    return follows[keys]


def apply_washout(series: OutcomeSeries, policy: WashoutPolicy) -> OutcomeSeries:
    """Return a copy of ``series`` with washout weights applied; values untouched.

    The first period of the trial is never down-weighted.
    """
    if policy is None or policy.mode == "none":
        return series
    m = series.within_period_index
    mask = _post_boundary_periods(series, policy.crossovers_only)
    w = series.weight.copy()
    if policy.mode == "drop_first_measurements":
        if len(m) and policy.n_drop >= m.max():
            raise ValidationError(
                f"n_drop ({policy.n_drop}) must be smaller than the per-period measurement count"
            )
        w[mask & (m <= policy.n_drop)] = 0.0
    elif policy.mode == "weight_ramp":
        ramp = np.asarray(policy.ramp_weights or (), dtype=float)
        if len(ramp) and len(ramp) >= m.max():
            raise ValidationError("ramp_weights must be shorter than the period")
        for j, r in enumerate(ramp, start=1):
            w[mask & (m == j)] *= r
    else:
        raise ValidationError(f"unknown washout mode {policy.mode!r}")
    return series.replace(weight=w)


# -- CSV ---------------------------------------------------------------------


def _parse_int(text, col, row):
    try:
        return int(text)
    except ValueError:
        raise CsvFormatError(f"column {col!r} must be an integer, got {text!r}", row) from None


def _parse_float(text, col, row):
    try:
        return float(text)
    except ValueError:
        raise CsvFormatError(f"column {col!r} must be numeric, got {text!r}", row) from None


def ingest_csv(source) -> list:
    """Parse canonical CSV into one :class:`OutcomeSeries` per participant.

    ``source`` may be a path, a text/bytes stream, or raw bytes. Row numbers in
    errors count the header as row 1.
    """
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError("empty file", 1) from None
    unknown = [c for c in header if c not in CSV_COLUMNS]
    if unknown:
        raise CsvFormatError(f"unknown column(s) {unknown}", 1)
    required = [c for c in CSV_COLUMNS if c != "weight"]
    absent = [c for c in required if c not in header]
    if absent:
        raise CsvFormatError(f"missing column(s) {absent}", 1)
    idx = {c: header.index(c) for c in header}

    rows = {}
    order = []
    last_time = {}
    period_treat = {}
    for rowno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise CsvFormatError(f"expected {len(header)} fields, got {len(rec)}", rowno)
        pid = rec[idx["participant_id"]]
        if not pid:
            raise CsvFormatError("empty participant_id", rowno)
        b = _parse_int(rec[idx["block"]], "block", rowno)
        t = _parse_int(rec[idx["period"]], "period", rowno)
        m = _parse_int(rec[idx["within_period_index"]], "within_period_index", rowno)
        ti = _parse_int(rec[idx["time_index"]], "time_index", rowno)
        x = rec[idx["treatment_id"]]
        if min(b, t, m) < 1 or ti < 0:
            raise CsvFormatError("block/period/within_period_index are 1-based, time_index 0-based", rowno)
        if not x:
            raise CsvFormatError("empty treatment_id", rowno)
        vtext = rec[idx["value"]]
        y = np.nan if vtext == "" else _parse_float(vtext, "value", rowno)
        if "weight" in idx and rec[idx["weight"]] != "":
            w = _parse_float(rec[idx["weight"]], "weight", rowno)
        else:
            w = 1.0
        if not 0.0 <= w <= 1.0:
            raise CsvFormatError(f"weight {w} outside [0, 1]", rowno)
        if pid in last_time and ti <= last_time[pid]:
            raise CsvFormatError(f"time_index not strictly increasing for participant {pid!r}", rowno)
        last_time[pid] = ti
        prev = period_treat.setdefault((pid, b, t), x)
        if prev != x:
            raise CsvFormatError(
                f"treatment changes inside block {b}, period {t} of participant {pid!r} ({prev} -> {x})",
                rowno,
            )
        if pid not in rows:
            rows[pid] = []
            order.append(pid)
        rows[pid].append((b, t, m, ti, x, y, w))

    out = []
    for pid in order:
        cols = list(zip(*rows[pid]))
        out.append(
            OutcomeSeries(
                participant_id=pid,
                block=cols[0], period=cols[1], within_period_index=cols[2], time_index=cols[3],
                treatment_id=cols[4], value=cols[5], weight=cols[6],
            )
        )
    return out


def _fmt_float(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def emit_csv(series_list, target=None) -> str:
    """Write canonical CSV; returns the text and writes it to ``target`` if given."""
    lines = [",".join(CSV_COLUMNS)]
    for s in series_list:
        for b, t, m, ti, x, y, w in zip(
            s.block.tolist(), s.period.tolist(), s.within_period_index.tolist(),
            s.time_index.tolist(), s.treatment_id, s.value, s.weight,
        ):
            lines.append(f"{s.participant_id},{b},{t},{m},{ti},{x},{_fmt_float(y)},{_fmt_float(w)}")
    text = "\n".join(lines) + "\n"
    if target is not None:
        if hasattr(target, "write"):
            target.write(text)
        else:
            Path(target).write_text(text, encoding="utf-8", newline="\n")
    return text


def emit_covariates(series_list, target=None) -> str:
    names = sorted({k for s in series_list for k in s.covariates})
    lines = [",".join(["participant_id", *names])]
    for s in series_list:
        lines.append(",".join([s.participant_id, *(_fmt_float(s.covariates.get(k, np.nan)) for k in names)]))
    text = "\n".join(lines) + "\n"
    if target is not None:
        Path(target).write_text(text, encoding="utf-8", newline="\n")
    return text


def attach_covariates(series_list, source) -> list:
    """Merge a ``participant_id,<name>...`` covariate table into the series."""
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, (str, Path)) else source.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if not header or header[0] != "participant_id":
        raise CsvFormatError("covariate file must start with a participant_id column", 1)
    table = {}
    for rowno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        table[rec[0]] = {k: _parse_float(v, k, rowno) if v != "" else np.nan for k, v in zip(header[1:], rec[1:])}
    return [s.replace(covariates={**s.covariates, **table.get(s.participant_id, {})}) for s in series_list]
