"""Core domain types, cohort manifest, and bit-exact file I/O.

Feature table CSV schema:
    header: subject_id,site,group,age,sex,<feature...>
    group in {HC, ACr}; sex in {F, M}; UTF-8, LF line endings, '.' decimals.
    Floats are written with shortest round-trip repr, so save/load is the
    identity on finite values.

Epoch bundle: a text manifest (one key=value per line: fs, n_epochs,
n_components, n_samples, epoch_seconds, subject_id, site, group, age,
sex) next to a raw little-endian float32 payload in epoch-major,
component-middle, sample-minor order. The payload shares the manifest's
stem with a .dat extension.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInputError,
    IntegrityError,
    ParseError,
    SchemaError,
    TruncationError,
    ValidationError,
)

GROUPS = ("HC", "ACr")
SEXES = ("F", "M")
META_COLUMNS = ("subject_id", "site", "group", "age", "sex")

#: The eight analysis bands (name, f_lo Hz, f_hi Hz), sorted by f_lo.
DEFAULT_BANDS = (
    ("delta", 1.5, 6.0),
    ("theta", 6.0, 8.5),
    ("alpha1", 8.5, 10.5),
    ("alpha2", 10.5, 12.5),
    ("beta1", 12.5, 18.5),
    ("beta2", 18.5, 21.0),
    ("beta3", 21.0, 30.0),
    ("gamma", 30.0, 45.0),
)


@dataclass(frozen=True)
class RecordMeta:
    """Identity and demographics of one EEG record."""

    subject_id: str
    site: str
    group: str
    age: float
    sex: str

    def __post_init__(self):
        if not self.subject_id:
            raise ValidationError("subject_id must be nonempty")
        if not self.site:
            raise ValidationError("site must be nonempty")
        if self.group not in GROUPS:
            raise ValidationError(
                f"group must be one of {GROUPS}, got {self.group!r}")
        if self.sex not in SEXES:
            raise ValidationError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if not (0.0 < self.age < 120.0):
            raise ValidationError(f"age must lie in (0, 120), got {self.age}")


@dataclass(frozen=True)
class BandScheme:
    """Ordered frequency bands; adjacent bands may share an edge."""

    bands: tuple[tuple[str, float, float], ...] = DEFAULT_BANDS

    def __post_init__(self):
        names = [b[0] for b in self.bands]
        if len(set(names)) != len(names):
            raise ValidationError("band names must be unique")
        for name, lo, hi in self.bands:
            if not lo < hi:
                raise ValidationError(f"band {name}: f_lo must be < f_hi")
        los = [b[1] for b in self.bands]
        if los != sorted(los):
            raise ValidationError("bands must be sorted by f_lo")

    @property
    def names(self) -> list[str]:
        return [b[0] for b in self.bands]

    def edges(self, name: str) -> tuple[float, float]:
        for band, lo, hi in self.bands:
            if band == name:
                return lo, hi
        raise KeyError(name)

    @property
    def f_min(self) -> float:
        return min(b[1] for b in self.bands)

    @property
    def f_max(self) -> float:
        return max(b[2] for b in self.bands)


@dataclass
class EpochSet:
    """Component time series for one record: [n_epochs, n_components, n_samples]."""

    meta: RecordMeta
    fs: float
    data: np.ndarray
    epoch_seconds: float = 5.0

    def __post_init__(self):
        if self.fs <= 0:
            raise ValidationError(f"fs must be positive, got {self.fs}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValidationError("epoch data must be 3-D")
        if self.data.shape[1] < 1:
            raise ValidationError("need at least one component")
        expected = round(self.fs * self.epoch_seconds)
        if self.data.shape[2] != expected:
            raise ValidationError(
                f"n_samples {self.data.shape[2]} != round(fs * epoch_seconds) "
                f"= {expected}")
        bad = np.argwhere(~np.isfinite(self.data))
        if bad.size:
            epochs = sorted({int(e) for e in bad[:, 0]})
            raise ValidationError(
                f"non-finite values in epochs {epochs}")

    @property
    def n_epochs(self) -> int:
        return self.data.shape[0]

    @property
    def n_components(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]


@dataclass
class FeatureTable:
    """Feature matrix with per-row record metadata.

    missing_mask marks cells that were imputed when loading with
    allow_missing; it is all-False for fully observed tables.
    """

    meta: list[RecordMeta]
    feature_names: list[str]
    values: np.ndarray
    missing_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.meta), len(self.feature_names)):
            raise ValidationError(
                f"value matrix shape {self.values.shape} does not match "
                f"{len(self.meta)} records x {len(self.feature_names)} features")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise IntegrityError("duplicate feature names")
        ids = [m.subject_id for m in self.meta]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise IntegrityError(f"duplicate subject_id: {dupes}")
        if self.missing_mask is None:
            self.missing_mask = np.zeros(self.values.shape, dtype=bool)
        if not np.isfinite(self.values).all():
            raise ValidationError("feature values must be finite")

    @property
    def n_records(self) -> int:
        return len(self.meta)

    @property
    def sites(self) -> list[str]:
        return sorted({m.site for m in self.meta})

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def group_labels(self) -> np.ndarray:
        return np.array([m.group for m in self.meta])

    def ages(self) -> np.ndarray:
        return np.array([m.age for m in self.meta], dtype=np.float64)

    def sex01(self) -> np.ndarray:
        """Sex encoded 0 for F, 1 for M."""
        return np.array([1.0 if m.sex == "M" else 0.0 for m in self.meta])

    def select_rows(self, indices) -> "FeatureTable":
        idx = np.asarray(indices, dtype=int)
        return FeatureTable(
            meta=[self.meta[i] for i in idx],
            feature_names=list(self.feature_names),
            values=self.values[idx].copy(),
            missing_mask=self.missing_mask[idx].copy(),
        )

    def select_features(self, names) -> "FeatureTable":
        idx = [self.feature_names.index(n) for n in names]
        return FeatureTable(
            meta=list(self.meta),
            feature_names=list(names),
            values=self.values[:, idx].copy(),
            missing_mask=self.missing_mask[:, idx].copy(),
        )


@dataclass
class CohortManifest:
    """Per-(site, group) counts with age and sex summaries (Table layout)."""

    rows: list[dict]
    total: int

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["site", "group", "count", "age_mean", "age_sd",
                         "sex_f", "sex_m"])
        for row in self.rows:
            sd = "" if row["age_sd"] is None else format_float(row["age_sd"])
            writer.writerow([
                row["site"], row["group"], row["count"],
                format_float(row["age_mean"]), sd, row["sex_f"], row["sex_m"],
            ])
        writer.writerow(["total", "", self.total, "", "", "", ""])
        return buf.getvalue()

    def counts(self) -> dict:
        return {(r["site"], r["group"]): r["count"] for r in self.rows}

    def group_totals(self) -> dict:
        totals: dict[str, int] = {}
        for r in self.rows:
            totals[r["group"]] = totals.get(r["group"], 0) + r["count"]
        return totals


def format_float(x: float) -> str:
    """Shortest decimal representation that round-trips exactly."""
    return repr(float(x))


def manifest(table: FeatureTable) -> CohortManifest:
    """Summarize a cohort per (site, group): count, age mean/SD, sex counts.

    SD uses the n-1 denominator; single-member groups report SD as None
    (rendered blank). Empty (site, group) cells are absent.
    """
    if table.n_records == 0:
        raise EmptyInputError("cannot summarize an empty table")
    cells: dict[tuple[str, str], list[RecordMeta]] = {}
    for m in table.meta:
        cells.setdefault((m.site, m.group), []).append(m)
    rows = []
    for (site, group) in sorted(cells):
        members = cells[(site, group)]
        ages = [m.age for m in members]
        mean = sum(ages) / len(ages)
        if len(ages) > 1:
            sd = math.sqrt(sum((a - mean) ** 2 for a in ages) / (len(ages) - 1))
        else:
            sd = None
        rows.append({
            "site": site,
            "group": group,
            "count": len(members),
            "age_mean": mean,
            "age_sd": sd,
            "sex_f": sum(1 for m in members if m.sex == "F"),
            "sex_m": sum(1 for m in members if m.sex == "M"),
        })
    return CohortManifest(rows=rows, total=table.n_records)


def write_feature_table(table: FeatureTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(META_COLUMNS) + table.feature_names)
        for meta, row in zip(table.meta, table.values):
            writer.writerow([
                meta.subject_id, meta.site, meta.group,
                format_float(meta.age), meta.sex,
            ] + [format_float(v) for v in row])


def feature_table_from_rows(meta_rows, feature_names, rows) -> FeatureTable:
    values = np.array(rows, dtype=np.float64).reshape(len(meta_rows),
                                                      len(feature_names))
    return FeatureTable(meta=list(meta_rows), feature_names=list(feature_names),
                        values=values)


def load_feature_table(path: str, allow_missing: bool = False) -> FeatureTable:
    """Load a feature-table CSV, checking the schema and all invariants.

    Missing feature cells (empty or 'nan') are rejected unless
    allow_missing is set, in which case they are imputed with the
    per-feature median and flagged in missing_mask.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for col in META_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing mandatory column {col!r}")
        if list(header[: len(META_COLUMNS)]) != list(META_COLUMNS):
            raise SchemaError(
                f"{path}: first columns must be {','.join(META_COLUMNS)}")
        feature_names = header[len(META_COLUMNS):]
        metas: list[RecordMeta] = []
        raw_rows: list[list[float]] = []
        missing_cells: list[tuple[int, int]] = []
        for row_idx, row in enumerate(reader):
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}: row {row_idx + 2} has {len(row)} cells, "
                    f"expected {len(header)}")
            sid, site, group, age_s, sex = row[: len(META_COLUMNS)]
            try:
                age = float(age_s)
            except ValueError:
                raise ParseError(
                    f"{path}: row {row_idx + 2}, column age: "
                    f"non-numeric value {age_s!r}") from None
            metas.append(RecordMeta(sid, site, group, age, sex))
            vals = []
            for col_off, cell in enumerate(row[len(META_COLUMNS):]):
                name = feature_names[col_off]
                if cell == "" or cell.lower() == "nan":
                    if not allow_missing:
                        raise ParseError(
                            f"{path}: row {row_idx + 2}, column {name!r}: "
                            "missing value (use allow_missing to impute)")
                    missing_cells.append((row_idx, col_off))
                    vals.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {row_idx + 2}, column {name!r}: "
                        f"non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    if not allow_missing:
                        raise ParseError(
                            f"{path}: row {row_idx + 2}, column {name!r}: "
                            f"non-finite value {cell!r}")
                    missing_cells.append((row_idx, col_off))
                    v = math.nan
                vals.append(v)
            raw_rows.append(vals)
    ids = [m.subject_id for m in metas]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise IntegrityError(f"{path}: duplicate subject_id: {dupes}")
    values = np.array(raw_rows, dtype=np.float64).reshape(len(metas),
                                                          len(feature_names))
    mask = np.zeros(values.shape, dtype=bool)
    for r, c in missing_cells:
        mask[r, c] = True
    if missing_cells:
        for c in range(values.shape[1]):
            col = values[:, c]
            holes = mask[:, c]
            if holes.any():
                observed = col[~holes]
                if observed.size == 0:
                    raise ValidationError(
                        f"{path}: feature {feature_names[c]!r} has no "
                        "observed values to impute from")
                col[holes] = float(np.median(observed))
    return FeatureTable(meta=metas, feature_names=feature_names, values=values,
                        missing_mask=mask)


def _payload_path(manifest_path: str) -> str:
    stem, _ = os.path.splitext(manifest_path)
    return stem + ".dat"


def write_epochs(epochs: EpochSet, manifest_path: str) -> None:
    m = epochs.meta
    lines = [
        f"fs={format_float(epochs.fs)}",
        f"n_epochs={epochs.n_epochs}",
        f"n_components={epochs.n_components}",
        f"n_samples={epochs.n_samples}",
        f"epoch_seconds={format_float(epochs.epoch_seconds)}",
        f"subject_id={m.subject_id}",
        f"site={m.site}",
        f"group={m.group}",
        f"age={format_float(m.age)}",
        f"sex={m.sex}",
    ]
    with open(manifest_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = epochs.data.astype("<f4").tobytes(order="C")
    with open(_payload_path(manifest_path), "wb") as fh:
        fh.write(payload)


def load_epochs(manifest_path: str) -> EpochSet:
    """Load an epoch bundle, checking shape, payload length, and finiteness."""
    fields: dict[str, str] = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(
                    f"{manifest_path}: line {line_no}: expected key=value")
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    required = ("fs", "n_epochs", "n_components", "n_samples",
                "subject_id", "site", "group", "age", "sex")
    for key in required:
        if key not in fields:
            raise SchemaError(f"{manifest_path}: missing manifest key {key!r}")
    try:
        fs = float(fields["fs"])
        n_epochs = int(fields["n_epochs"])
        n_components = int(fields["n_components"])
        n_samples = int(fields["n_samples"])
        age = float(fields["age"])
    except ValueError as exc:
        raise ParseError(f"{manifest_path}: {exc}") from None
    if fs <= 0:
        raise ValidationError(f"{manifest_path}: fs must be positive, got {fs}")
    epoch_seconds = float(fields.get("epoch_seconds", n_samples / fs))
    payload_path = _payload_path(manifest_path)
    with open(payload_path, "rb") as fh:
        payload = fh.read()
    expected_bytes = 4 * n_epochs * n_components * n_samples
    if len(payload) != expected_bytes:
        raise TruncationError(
            f"{payload_path}: payload is {len(payload)} bytes, expected "
            f"{expected_bytes} for {n_epochs}x{n_components}x{n_samples} floats")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    data = data.reshape(n_epochs, n_components, n_samples)
    meta = RecordMeta(fields["subject_id"], fields["site"], fields["group"],
                      age, fields["sex"])
    return EpochSet(meta=meta, fs=fs, data=data, epoch_seconds=epoch_seconds)
