"""PHQ-4 scoring, labeling, and the paired description dataset.

The canonical on-disk format is JSON Lines, one sample per line::

    {"sample_id": "s001", "subject_id": "p017", "description": "...",
     "image_path": null, "phq4_items": [1, 0, 2, 1]}

A ``label`` field may be present; it is cross-checked against the label
recomputed from the items and never trusted on its own.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from selfscreen.errors import DuplicateIdError, ValidationError

logger = logging.getLogger(__name__)

N_ITEMS = 4
ITEM_MIN, ITEM_MAX = 0, 3
TOTAL_MAX = N_ITEMS * ITEM_MAX
POSITIVE_CUTOFF = 6

CSV_HEADER = ("sample_id", "subject_id", "description", "phq4_1", "phq4_2", "phq4_3", "phq4_4")
_JSONL_FIELDS = {"sample_id", "subject_id", "description", "image_path", "phq4_items", "label"}

# Counts of the collected cohort after invalid selfies were removed.
REFERENCE_COUNTS = {
    "n_samples": 147,
    "n_subjects": 108,
    "n_negative": 106,
    "n_positive": 41,
    "max_samples_per_subject": 9,
}


class Label(enum.IntEnum):
    NEGATIVE = 0  # normal
    POSITIVE = 1  # depression-anxiety ("abnormal")

    @classmethod
    def parse(cls, value: object) -> "Label":
        """Accept 0/1, booleans, or the names negative/positive/normal/abnormal."""
        if isinstance(value, Label):
            return value
        if isinstance(value, (bool, int)) and int(value) in (0, 1):
            return cls(int(value))
        if isinstance(value, str):
            key = value.strip().lower()
            if key in ("0", "negative", "normal"):
                return cls.NEGATIVE
            if key in ("1", "positive", "abnormal"):
                return cls.POSITIVE
        raise ValidationError(f"unrecognised label {value!r}")

    @property
    def text(self) -> str:
        return self.name.lower()


def _check_items(items: Sequence[int]) -> tuple[int, ...]:
    if isinstance(items, (str, bytes)) or len(items) != N_ITEMS:
        raise ValidationError(f"PHQ-4 needs exactly {N_ITEMS} item scores, got {items!r}")
    checked = []
    for i, v in enumerate(items):
        if isinstance(v, bool) or not isinstance(v, int) or not ITEM_MIN <= v <= ITEM_MAX:
            raise ValidationError(
                f"PHQ-4 item {i} must be an integer in [{ITEM_MIN}, {ITEM_MAX}], got {v!r}"
            )
        checked.append(v)
    return tuple(checked)


def score_phq4(items: Sequence[int]) -> int:
    """Sum the four PHQ-4 frequency scores (0 = not at all ... 3 = nearly every day)."""
    return sum(_check_items(items))


def label_from_score(total: int) -> Label:
    if isinstance(total, bool) or not isinstance(total, int) or not 0 <= total <= TOTAL_MAX:
        raise ValidationError(f"PHQ-4 total must be an integer in [0, {TOTAL_MAX}], got {total!r}")
    return Label.POSITIVE if total >= POSITIVE_CUTOFF else Label.NEGATIVE


@dataclass(frozen=True)
class Phq4Response:
    item_scores: tuple[int, int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "item_scores", _check_items(tuple(self.item_scores)))

    @property
    def total(self) -> int:
        return sum(self.item_scores)

    @property
    def label(self) -> Label:
        return label_from_score(self.total)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    subject_id: str
    phq4: Phq4Response
    description: str | None = None
    image_path: str | None = None

    def __post_init__(self):
        if not isinstance(self.sample_id, str) or not self.sample_id:
            raise ValidationError(f"sample_id must be a non-empty string, got {self.sample_id!r}")
        if not isinstance(self.subject_id, str) or not self.subject_id:
            raise ValidationError(f"sample {self.sample_id!r}: subject_id must be a non-empty string")
        if self.description is None and self.image_path is None:
            raise ValidationError(
                f"sample {self.sample_id!r}: needs a description or an image_path"
            )

    @property
    def label(self) -> Label:
        return self.phq4.label

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "subject_id": self.subject_id,
            "description": self.description,
            "image_path": self.image_path,
            "phq4_items": list(self.phq4.item_scores),
            "label": self.label.text,
        }


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    source_vlm: str | None = None

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        seen = set()
        for s in samples:
            if s.sample_id in seen:
                raise DuplicateIdError(s.sample_id)
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def digest(self) -> str:
        """SHA-256 over the canonical serialization; stable across platforms."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(_dump_record(s.to_record()).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def _dump_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def _sample_from_record(rec: dict, where: str) -> Sample:
    missing = [k for k in ("sample_id", "subject_id", "phq4_items") if rec.get(k) is None]
    if missing:
        raise ValidationError(f"{where}: missing required field(s) {', '.join(missing)}")
    unknown = set(rec) - _JSONL_FIELDS
    if unknown:
        logger.warning("%s: ignoring unknown field(s) %s", where, ", ".join(sorted(unknown)))
    items = rec["phq4_items"]
    if not isinstance(items, list):
        raise ValidationError(f"{where}: phq4_items must be a list of 4 integers")
    try:
        sample = Sample(
            sample_id=str(rec["sample_id"]),
            subject_id=str(rec["subject_id"]),
            phq4=Phq4Response(tuple(items)),
            description=rec.get("description"),
            image_path=rec.get("image_path"),
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    if sample.description is not None and not isinstance(sample.description, str):
        raise ValidationError(f"{where}: description must be a string or null")
    if rec.get("label") is not None:
        stored = Label.parse(rec["label"])
        if stored is not sample.label:
            raise ValidationError(
                f"{where}: stored label {stored.text} disagrees with PHQ-4 total "
                f"{sample.phq4.total} (-> {sample.label.text})"
            )
    return sample


def _read_jsonl(path: Path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{where}: parse error: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ValidationError(f"{where}: expected a JSON object per line")
            samples.append(_sample_from_record(rec, where))
    return samples


def _read_csv(path: Path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        absent = [c for c in CSV_HEADER if c not in header]
        if absent:
            raise ValidationError(f"{path}:1: CSV header lacks column(s) {', '.join(absent)}")
        for row in reader:
            where = f"{path}:{reader.line_num}"
            items = []
            for col in CSV_HEADER[3:]:
                raw = (row.get(col) or "").strip()
                if not raw:
                    raise ValidationError(f"{where}: missing required field {col}")
                try:
                    items.append(int(raw))
                except ValueError:
                    raise ValidationError(f"{where}: {col} is not an integer: {raw!r}") from None
            rec = {
                "sample_id": row["sample_id"] or None,
                "subject_id": row["subject_id"] or None,
                "description": row["description"] or None,
                "image_path": row.get("image_path") or None,
                "phq4_items": items,
            }
            if row.get("label"):
                rec["label"] = row["label"]
            samples.append(_sample_from_record(rec, where))
    return samples


def load_dataset(path: str | Path, format: str | None = None, source_vlm: str | None = None) -> Dataset:
    """Read and validate a dataset; ``format`` is inferred from the suffix if omitted."""
    path = Path(path)
    fmt = (format or ("csv" if path.suffix.lower() == ".csv" else "jsonl")).lower()
    if fmt not in ("jsonl", "csv"):
        raise ValidationError(f"unknown dataset format {format!r}")
    samples = _read_csv(path) if fmt == "csv" else _read_jsonl(path)
    seen: dict[str, int] = {}
    for idx, s in enumerate(samples):
        if s.sample_id in seen:
            raise DuplicateIdError(s.sample_id, f"{path}, records {seen[s.sample_id] + 1} and {idx + 1}")
        seen[s.sample_id] = idx
    return Dataset(tuple(samples), source_vlm=source_vlm)


def save_dataset(dataset: Dataset | Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset:
            fh.write(_dump_record(s.to_record()) + "\n")


@dataclass(frozen=True)
class DatasetStats:
    n_samples: int
    n_subjects: int
    n_negative: int
    n_positive: int
    samples_per_subject: dict[str, int] = field(repr=False)
    # number of samples contributed -> number of subjects contributing that many
    histogram: dict[int, int] = field(default_factory=dict)

    @property
    def max_samples_per_subject(self) -> int:
        return max(self.histogram)

    def as_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_subjects": self.n_subjects,
            "n_negative": self.n_negative,
            "n_positive": self.n_positive,
            "max_samples_per_subject": self.max_samples_per_subject,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
        }

    def deviations(self, reference: dict = REFERENCE_COUNTS) -> dict[str, tuple[int, int]]:
        """Fields that differ from ``reference`` as ``{name: (observed, expected)}``."""
        observed = self.as_dict()
        return {k: (observed[k], v) for k, v in reference.items() if observed[k] != v}


def dataset_stats(dataset: Dataset) -> DatasetStats:
    if len(dataset) == 0:
        raise ValidationError("dataset_stats needs a non-empty dataset")
    per_subject = Counter(s.subject_id for s in dataset)
    labels = Counter(s.label for s in dataset)
    return DatasetStats(
        n_samples=len(dataset),
        n_subjects=len(per_subject),
        n_negative=labels[Label.NEGATIVE],
        n_positive=labels[Label.POSITIVE],
        samples_per_subject=dict(sorted(per_subject.items())),
        histogram=dict(sorted(Counter(per_subject.values()).items())),
    )
