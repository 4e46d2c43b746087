"""Delimiter-separated manifests with named columns.

Required columns: claim, claim_image, document, document_image. Optional:
category (one of the five entailment names; all-or-none across rows), id
(defaults to the row number), and OCR columns, which are read and ignored
(the model never consumes them).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import List, Optional

from .pcf1 import CLASS_NAMES

REQUIRED_COLUMNS = ("claim", "claim_image", "document", "document_image")
LABEL_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}


class ManifestError(Exception):
    """The manifest file violates its column or value contract."""


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    claim: str
    claim_image: str
    document: str
    document_image: str
    label: Optional[int]


def read_manifest(path, delimiter: str = "\t",
                  images_root: Optional[str] = None) -> List[ManifestRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter=delimiter)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        has_category = "category" in reader.fieldnames

        rows: List[ManifestRow] = []
        for index, record in enumerate(reader):
            label = None
            if has_category:
                raw = (record.get("category") or "").strip()
                if raw:
                    if raw not in LABEL_IDS:
                        raise ManifestError(
                            f"{path} row {index}: unknown category {raw!r} "
                            f"(expected one of {list(CLASS_NAMES)})"
                        )
                    label = LABEL_IDS[raw]

            def image_path(column: str) -> str:
                value = (record.get(column) or "").strip()
                if not value:
                    raise ManifestError(f"{path} row {index}: empty {column}")
                return (os.path.join(images_root, value)
                        if images_root else value)

            rows.append(ManifestRow(
                sample_id=(record.get("id") or "").strip() or f"row-{index:06d}",
                claim=record.get("claim") or "",
                claim_image=image_path("claim_image"),
                document=record.get("document") or "",
                document_image=image_path("document_image"),
                label=label,
            ))

    labeled = [r.label is not None for r in rows]
    if any(labeled) and not all(labeled):
        raise ManifestError(f"{path}: categories must be all-or-none across rows")
    return rows
