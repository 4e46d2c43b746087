"""Streaming export pipeline: manifest rows -> encoders -> PCF1 file.

Rows whose images fail to decode are skipped with a logged reason and
never leave partial records; texts that normalize to empty still export
a special-token-only sequence and are logged. Output bytes are a pure
function of the manifest, the images, and the encoder weights.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .encoders import EncoderStack, encode_image_batch, encode_text_batch, normalize_text
from .manifest import ManifestRow
from .pcf1 import DatasetWriter
from .preprocess import ImageDecodeError, preprocess_image


@dataclass
class ExportResult:
    written: int = 0
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    empty_texts: List[str] = field(default_factory=list)


def _log(stream, message: str) -> None:
    if stream is not None:
        print(message, file=stream, flush=True)


def export_manifest(rows: Sequence[ManifestRow], stack: EncoderStack,
                    out_path, batch_size: int = 8,
                    log_stream=sys.stderr) -> ExportResult:
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rows = list(rows)
    has_labels = bool(rows) and all(r.label is not None for r in rows)
    result = ExportResult()

    with DatasetWriter(out_path, text_width=stack.text_width,
                       image_width=stack.image_width,
                       has_labels=has_labels) as writer:
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]

            usable: List[ManifestRow] = []
            pixels: List[np.ndarray] = []
            for row in chunk:
                try:
                    claim_px = preprocess_image(row.claim_image)
                    doc_px = preprocess_image(row.document_image)
                except ImageDecodeError as e:
                    result.skipped.append((row.sample_id, str(e)))
                    _log(log_stream, f"skip {row.sample_id}: {e}")
                    continue
                usable.append(row)
                pixels.append(claim_px)
                pixels.append(doc_px)
            if not usable:
                continue

            for row in usable:
                for name, text in (("claim", row.claim),
                                   ("document", row.document)):
                    if not normalize_text(text):
                        result.empty_texts.append(row.sample_id)
                        _log(log_stream,
                             f"note {row.sample_id}: empty {name} text, "
                             f"exporting special tokens only")

            image_states = encode_image_batch(stack, np.stack(pixels))
            text_states = encode_text_batch(
                stack,
                [row.claim for row in usable] + [row.document for row in usable],
            )
            n = len(usable)
            for i, row in enumerate(usable):
                writer.add_sample(
                    sample_id=row.sample_id,
                    label=row.label if has_labels else None,
                    claim_image=image_states[2 * i],
                    claim_text=text_states[i],
                    doc_image=image_states[2 * i + 1],
                    doc_text=text_states[n + i],
                )
                result.written += 1
            _log(log_stream,
                 f"exported {result.written}/{len(rows)} samples")
    return result
