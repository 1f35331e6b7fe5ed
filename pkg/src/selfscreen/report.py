"""Report tables, prediction files and run manifests."""

from __future__ import annotations

import csv
import json
import platform
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from selfscreen.errors import ValidationError
from selfscreen.metrics import MetricsReport, Prediction

REPORT_COLUMNS = ("model", "provider", "variant", "h", "precision", "recall", "f1", "auc", "accuracy",
                  "n_folds_skipped")
METRIC_COLUMNS = ("precision", "recall", "f1", "auc", "accuracy")


def pct(value: float | None) -> str:
    """Percentage with one decimal, as printed in the results table ("" if undefined)."""
    return "" if value is None else f"{100.0 * value:.1f}"


@dataclass(frozen=True)
class ReportRow:
    model: str
    provider: str
    variant: str
    h: int | None
    metrics: MetricsReport | None
    n_folds_skipped: int = 0

    def rendered(self) -> dict[str, str]:
        m = self.metrics
        row = {"model": self.model, "provider": self.provider, "variant": self.variant,
               "h": "" if self.h is None else str(self.h), "n_folds_skipped": str(self.n_folds_skipped)}
        for col in METRIC_COLUMNS:
            row[col] = pct(getattr(m, col)) if m is not None else ""
        return {c: row[c] for c in REPORT_COLUMNS}


def write_report(rows: Sequence[ReportRow], path: str | Path, format: str | None = None) -> Path:
    """Write rows as CSV or JSON (inferred from the suffix when ``format`` is None).

    Rows are ordered by ``h`` when more than one hidden-unit setting is present.
    """
    rows = list(rows)
    if not rows:
        raise ValidationError("report needs at least one row")
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "csv").lower()
    if fmt not in ("csv", "json"):
        raise ValidationError(f"unknown report format {format!r}")
    if any(r.h is not None for r in rows):
        rows.sort(key=lambda r: (r.h is None, r.h or 0))
    rendered = [r.rendered() for r in rows]
    try:
        if fmt == "csv":
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
                writer.writeheader()
                writer.writerows(rendered)
        else:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump({"columns": list(REPORT_COLUMNS), "rows": rendered}, fh, indent=2)
                fh.write("\n")
    except OSError as exc:
        raise ValidationError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["rows"]
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def save_predictions(preds: Iterable[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_record()) + "\n")


def load_predictions(path: str | Path) -> list[Prediction]:
    with open(path, encoding="utf-8") as fh:
        return [Prediction.from_record(json.loads(line)) for line in fh if line.strip()]


def build_manifest(
    command: str,
    config: dict,
    seeds: dict,
    dataset_digest: str | None,
    providers: dict,
    started: datetime,
    outputs: Sequence[str] = (),
    extra: dict | None = None,
) -> dict:
    from selfscreen import __version__

    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "dataset_digest": dataset_digest,
        "providers": providers,
        "outputs": list(outputs),
        "software": {"selfscreen": __version__, "python": sys.version.split()[0],
                     "platform": platform.system()},
        "timestamps": {"started": started.isoformat(),
                       "finished": datetime.now(timezone.utc).isoformat()},
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(manifest: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
