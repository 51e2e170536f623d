"""Metadata manifest: ingestion, imputation, filtering, undersampling, splitting.

All operations take a :class:`DatasetManifest` and return a new one; nothing is
mutated in place. Every curation step can append to a :class:`CurationLog`.
"""
from __future__ import annotations

import csv
import logging
import statistics
import warnings
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyDatasetError,
    ImputationError,
    MissingValueError,
    RangeError,
    RowError,
    SchemaError,
    StratumTooSmallWarning,
)

log = logging.getLogger(__name__)

LABELS = ("covid", "normal", "other_pneumonia")
SEXES = ("female", "male")
MODALITIES = ("ct", "xray")
REQUIRED_COLUMNS = ("image_ref", "label", "country", "age", "sex", "modality", "source")

AGE_MIN, AGE_MAX = 0.0, 100.0
# (name, inclusive upper edge); the last group is open-ended up to AGE_MAX
AGE_GROUPS = (
    ("child", 18.0),
    ("young_adult", 35.0),
    ("adult", 60.0),
    ("elderly", AGE_MAX),
)
AGE_GROUP_NAMES = tuple(name for name, _ in AGE_GROUPS)
STRATA_KEYS = ("label", "age_group", "country")


@dataclass(frozen=True)
class PatientRecord:
    image_ref: str
    label: str
    country: str
    age: float | None
    sex: str | None
    modality: str
    source: str
    age_group: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise SchemaError(f"label {self.label!r} not in {LABELS}")
        if self.modality not in MODALITIES:
            raise SchemaError(f"modality {self.modality!r} not in {MODALITIES}")
        if self.sex is not None and self.sex not in SEXES:
            raise SchemaError(f"sex {self.sex!r} not in {SEXES}")
        if self.age is not None and not AGE_MIN <= self.age <= AGE_MAX:
            raise RangeError(f"age {self.age} outside [{AGE_MIN:g}, {AGE_MAX:g}]")
        if self.age_group is not None and self.age_group not in AGE_GROUP_NAMES:
            raise SchemaError(f"age_group {self.age_group!r} not in {AGE_GROUP_NAMES}")


def _tally(records: Sequence[PatientRecord]) -> dict[str, dict[str, int]]:
    return {
        "label": dict(Counter(r.label for r in records)),
        "country": dict(Counter(r.country for r in records)),
        "age_group": dict(Counter(r.age_group for r in records if r.age_group is not None)),
        "missing": {
            "age": sum(r.age is None for r in records),
            "sex": sum(r.sex is None for r in records),
        },
    }


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered, duplicate-free collection of records with derived tallies."""

    records: tuple[PatientRecord, ...]
    counts: dict[str, dict[str, int]] = field(init=False, compare=False)

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        seen: set[str] = set()
        for r in records:
            if r.image_ref in seen:
                raise SchemaError(f"duplicate image_ref {r.image_ref!r}")
            seen.add(r.image_ref)
        object.__setattr__(self, "counts", _tally(records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def cell_counts(self) -> dict[tuple[str, str], int]:
        """Tally per (country, label) cell."""
        return dict(Counter((r.country, r.label) for r in self.records))

    def summary(self) -> dict[str, float | int]:
        """Headline class-imbalance summary (covid against everything else)."""
        n = len(self.records)
        covid = self.counts["label"].get("covid", 0)
        return {
            "total": n,
            "covid": covid,
            "non_covid": n - covid,
            "covid_fraction": covid / n if n else 0.0,
            "countries": len(self.counts["country"]),
            "missing_age": self.counts["missing"]["age"],
            "missing_sex": self.counts["missing"]["sex"],
        }


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.2, 0.0)
    strata_keys: tuple[str, ...] = ("label", "age_group")
    seed: int = 42

    def __post_init__(self):
        if len(self.fractions) != 3:
            raise ValueError("fractions must be (train, val, test)")
        if any(f < 0 for f in self.fractions):
            raise ValueError(f"negative split fraction in {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {self.fractions} do not sum to 1")
        unknown = set(self.strata_keys) - set(STRATA_KEYS)
        if unknown:
            raise ValueError(f"unknown strata keys {sorted(unknown)}")


class CurationLog:
    """Structured-text record of curation actions, one action per line."""

    def __init__(self):
        self.entries: list[tuple[str, dict, int]] = []

    def add(self, operation: str, rows: int, **params) -> None:
        self.entries.append((operation, params, rows))
        log.info("%s", self.format_entry(operation, params, rows))

    @staticmethod
    def format_entry(operation: str, params: dict, rows: int) -> str:
        parts = [f"operation={operation}"]
        parts += [f"{k}={v}" for k, v in params.items()]
        parts.append(f"rows_affected={rows}")
        return " ".join(parts)

    def lines(self) -> list[str]:
        return [self.format_entry(*e) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


def _note(curation_log: CurationLog | None, operation: str, rows: int, **params) -> None:
    if curation_log is not None:
        curation_log.add(operation, rows, **params)


# ---------------------------------------------------------------------------
# CSV I/O


def _format_age(age: float | None) -> str:
    if age is None:
        return ""
    return str(int(age)) if float(age).is_integer() else repr(float(age))


def _resolve_ref(ref: str, base: Path) -> str:
    return ref if not ref or Path(ref).is_absolute() else str(base / ref)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV. Empty cells in ``age``/``sex`` mean missing.

    Relative ``image_ref`` values are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.resolve().parent
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"manifest {path} lacks required column {col!r}")
        has_group = "age_group" in header
        records = []
        # row index counts data rows from 0, excluding the header
        for i, row in enumerate(reader):
            age_text = (row["age"] or "").strip()
            if age_text:
                try:
                    age = float(age_text)
                except ValueError:
                    raise RowError(i, f"unparseable age {age_text!r}") from None
            else:
                age = None
            group = (row.get("age_group") or "").strip() if has_group else ""
            try:
                records.append(
                    PatientRecord(
                        image_ref=_resolve_ref(row["image_ref"], base),
                        label=row["label"].strip(),
                        country=row["country"].strip(),
                        age=age,
                        sex=(row["sex"] or "").strip() or None,
                        modality=row["modality"].strip(),
                        source=row["source"],
                        age_group=group or None,
                    )
                )
            except (SchemaError, RangeError) as exc:
                raise RowError(i, str(exc)) from None
    return DatasetManifest(tuple(records))


def write_manifest(
    manifest: DatasetManifest, path: str | Path, relative_to: str | Path | None = None
) -> None:
    """Write a manifest CSV; refs under ``relative_to`` are stored relative to it."""
    path = Path(path)

    def ref(r: PatientRecord) -> str:
        if relative_to is None:
            return r.image_ref
        try:
            return Path(r.image_ref).relative_to(relative_to).as_posix()
        except ValueError:
            return r.image_ref

    path.parent.mkdir(parents=True, exist_ok=True)
    with_group = any(r.age_group is not None for r in manifest)
    columns = list(REQUIRED_COLUMNS) + (["age_group"] if with_group else [])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in manifest:
            row = [ref(r), r.label, r.country, _format_age(r.age), r.sex or "",
                   r.modality, r.source]
            if with_group:
                row.append(r.age_group or "")
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Imputation


def _central(values: Sequence[float], strategy: str) -> float:
    if strategy == "country_mean":
        return statistics.fmean(values)
    if strategy == "country_median":
        return float(statistics.median(values))
    raise ValueError(f"unknown imputation strategy {strategy!r}")


def impute_age(
    manifest: DatasetManifest,
    strategy: str = "country_median",
    curation_log: CurationLog | None = None,
) -> DatasetManifest:
    """Fill missing ages with the country's mean or median.

    Countries without any observed age fall back to the same statistic
    computed over every observed age.
    """
    observed = [r.age for r in manifest if r.age is not None]
    missing = len(manifest) - len(observed)
    if missing == 0:
        _central([0.0], strategy)  # validates the strategy name
        _note(curation_log, "impute_age", 0, strategy=strategy)
        return manifest
    if not observed:
        raise ImputationError("every age is missing; nothing to impute from")

    by_country: dict[str, list[float]] = defaultdict(list)
    for r in manifest:
        if r.age is not None:
            by_country[r.country].append(r.age)
    fill = {c: _central(v, strategy) for c, v in by_country.items()}
    fallback = _central(observed, strategy)

    records = tuple(
        r if r.age is not None else replace(r, age=fill.get(r.country, fallback))
        for r in manifest
    )
    _note(curation_log, "impute_age", missing, strategy=strategy)
    return DatasetManifest(records)


def _mode(values: Iterable[str]) -> str:
    counts = Counter(values)
    top = max(counts.values())
    # lexicographic minimum among the tied most-frequent values
    return min(v for v, c in counts.items() if c == top)


def impute_sex(
    manifest: DatasetManifest, curation_log: CurationLog | None = None
) -> DatasetManifest:
    """Fill missing sex with the per-country mode (global mode as fallback)."""
    observed = [r.sex for r in manifest if r.sex is not None]
    missing = len(manifest) - len(observed)
    if missing == 0:
        _note(curation_log, "impute_sex", 0, strategy="country_mode")
        return manifest
    if not observed:
        raise ImputationError("every sex value is missing; nothing to impute from")

    by_country: dict[str, list[str]] = defaultdict(list)
    for r in manifest:
        if r.sex is not None:
            by_country[r.country].append(r.sex)
    fill = {c: _mode(v) for c, v in by_country.items()}
    fallback = _mode(observed)
    records = tuple(
        r if r.sex is not None else replace(r, sex=fill.get(r.country, fallback))
        for r in manifest
    )
    _note(curation_log, "impute_sex", missing, strategy="country_mode")
    return DatasetManifest(records)


# ---------------------------------------------------------------------------
# Grouping, filtering, undersampling


def age_group(age: float) -> str:
    """Map an age in [0, 100] to its group; each upper edge is inclusive."""
    if not AGE_MIN <= age <= AGE_MAX:
        raise RangeError(f"age {age} outside [{AGE_MIN:g}, {AGE_MAX:g}]")
    for name, upper in AGE_GROUPS:
        if age <= upper:
            return name
    raise AssertionError("unreachable")


def assign_age_groups(
    manifest: DatasetManifest, curation_log: CurationLog | None = None
) -> DatasetManifest:
    changed = 0
    records = []
    for i, r in enumerate(manifest):
        if r.age is None:
            raise MissingValueError(f"record {i} ({r.image_ref}) has no age; impute first")
        group = age_group(r.age)
        changed += group != r.age_group
        records.append(r if group == r.age_group else replace(r, age_group=group))
    _note(curation_log, "assign_age_groups", changed)
    return DatasetManifest(tuple(records)) if changed else manifest


def drop_low_sample_countries(
    manifest: DatasetManifest,
    min_count: int = 100,
    curation_log: CurationLog | None = None,
) -> DatasetManifest:
    counts = manifest.counts["country"]
    dropped = sorted(c for c, n in counts.items() if n < min_count)
    for country in dropped:
        _note(curation_log, "drop_country", counts[country], country=country,
              min_count=min_count)
    if not dropped:
        return manifest
    kept = tuple(r for r in manifest if r.country not in dropped)
    if not kept:
        raise EmptyDatasetError(f"no country has at least {min_count} records")
    return DatasetManifest(kept)


def _stable_key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def undersample(
    manifest: DatasetManifest,
    caps: Mapping[str, int],
    seed: int = 42,
    curation_log: CurationLog | None = None,
) -> DatasetManifest:
    """Cap per-country record counts by uniform sampling without replacement.

    Selection for each country depends only on ``seed`` and the country name;
    retained records keep their manifest order.
    """
    for country, cap in caps.items():
        if cap < 0:
            raise ValueError(f"negative cap {cap} for {country!r}")
    by_country: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(manifest):
        by_country[r.country].append(i)

    drop: set[int] = set()
    for country in sorted(caps):
        idx = by_country.get(country, [])
        cap = caps[country]
        if len(idx) <= cap:
            continue
        rng = np.random.default_rng([seed, _stable_key(country)])
        keep = set(rng.choice(len(idx), size=cap, replace=False).tolist())
        drop.update(j for k, j in enumerate(idx) if k not in keep)
        _note(curation_log, "undersample", len(idx) - cap, country=country, cap=cap)
    if not drop:
        return manifest
    return DatasetManifest(tuple(r for i, r in enumerate(manifest) if i not in drop))


# ---------------------------------------------------------------------------
# Stratified split


def _largest_remainder(total: int, fractions: Sequence[Fraction]) -> list[int]:
    exact = [f * total for f in fractions]
    base = [int(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda k: (-(exact[k] - base[k]), k))
    for k in order[: total - sum(base)]:
        base[k] += 1
    return base


def _allocate(sizes: Sequence[int], fractions: Sequence[Fraction]) -> list[list[int]]:
    """Integer split counts per stratum.

    Each stratum gets floor(f_k * n_s) per split; the leftover units are then
    handed out at most one per (stratum, split) so that column totals hit the
    largest-remainder apportionment of the grand total. Rows are filled in
    decreasing leftover order, each taking the splits with the largest unmet
    demand, which realises the totals whenever any assignment can.
    """
    active = [k for k, f in enumerate(fractions) if f > 0]
    base = [[int(f * n) for f in fractions] for n in sizes]
    leftover = [n - sum(row) for n, row in zip(sizes, base)]
    targets = _largest_remainder(sum(sizes), fractions)
    demand = [targets[k] - sum(row[k] for row in base) for k in range(len(fractions))]

    for s in sorted(range(len(sizes)), key=lambda s: (-leftover[s], s)):
        frac = [fractions[k] * sizes[s] - base[s][k] for k in range(len(fractions))]
        chosen = sorted(active, key=lambda k: (-demand[k], -frac[k], k))[: leftover[s]]
        for k in chosen:
            base[s][k] += 1
            demand[k] -= 1
    return base


def _stratum_key(record: PatientRecord, keys: Sequence[str]) -> tuple:
    values = []
    for key in keys:
        value = getattr(record, key)
        if value is None:
            raise MissingValueError(f"{record.image_ref} lacks stratum key {key!r}")
        values.append(value)
    return tuple(values)


def stratified_split(
    manifest: DatasetManifest,
    spec: SplitSpec,
    curation_log: CurationLog | None = None,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Split into (train, val, test) keeping per-stratum proportions.

    A stratum with fewer records than there are nonzero splits goes wholly to
    train, with a :class:`StratumTooSmallWarning`.
    """
    fractions = [Fraction(f).limit_denominator(10**9) for f in spec.fractions]
    nonzero = sum(f > 0 for f in fractions)

    strata: dict[tuple, list[int]] = defaultdict(list)
    for i, r in enumerate(manifest):
        strata[_stratum_key(r, spec.strata_keys)].append(i)
    keys = sorted(strata)

    assignment = [0] * len(manifest)
    regular = []
    for key in keys:
        if len(strata[key]) < nonzero:
            warnings.warn(
                f"stratum {key} has {len(strata[key])} record(s) for {nonzero} "
                "splits; assigning it to train",
                StratumTooSmallWarning,
                stacklevel=2,
            )
        else:
            regular.append(key)

    counts = _allocate([len(strata[k]) for k in regular], fractions)
    rng = np.random.default_rng(spec.seed)
    for key, row in zip(regular, counts):
        idx = strata[key]
        perm = rng.permutation(len(idx))
        start = 0
        for split, n in enumerate(row):
            for p in perm[start : start + n]:
                assignment[idx[p]] = split
            start += n

    parts = tuple(
        DatasetManifest(tuple(r for r, a in zip(manifest.records, assignment) if a == k))
        for k in range(3)
    )
    _note(
        curation_log,
        "stratified_split",
        len(manifest),
        fractions="/".join(f"{f:g}" for f in spec.fractions),
        strata="+".join(spec.strata_keys),
        sizes="/".join(str(len(p)) for p in parts),
    )
    return parts
