"""PCF1 dataset writer: the wire format shared with the fusion engine.

Layout (integers little-endian, floats little-endian float32):

    magic "PCF1", version u32 (1), text width u32, image width u32,
    sample count u32, label flag u8, class count u8 (5),
    class names as u16 length + utf-8 each; then per sample:
    id (u16 length + utf-8), label byte (0xFF when unlabeled), and four
    sequences in order claim_image, claim_text, doc_image, doc_text,
    each a u32 token count followed by count x width float32.

The sample count is patched on close, so records can stream through;
each record is buffered and written atomically (a skipped sample never
leaves partial bytes behind).
"""
from __future__ import annotations

import struct
from typing import Optional

import numpy as np

MAGIC = b"PCF1"
VERSION = 1
NO_LABEL = 0xFF
MAX_TEXT_TOKENS = 512

CLASS_NAMES = (
    "Support_Multimodal",
    "Support_Text",
    "Insufficient_Multimodal",
    "Insufficient_Text",
    "Refute",
)


class DatasetWriter:
    """Streaming PCF1 writer; use as a context manager."""

    def __init__(self, path, text_width: int, image_width: int, has_labels: bool):
        if text_width < 1 or image_width < 1:
            raise ValueError("widths must be positive")
        self.text_width = text_width
        self.image_width = image_width
        self.has_labels = has_labels
        self.count = 0
        self._file = open(path, "wb")
        self._file.write(MAGIC)
        self._file.write(struct.pack("<IIII", VERSION, text_width, image_width, 0))
        self._file.write(struct.pack("BB", int(has_labels), len(CLASS_NAMES)))
        for name in CLASS_NAMES:
            raw = name.encode("utf-8")
            self._file.write(struct.pack("<H", len(raw)))
            self._file.write(raw)
        self._count_offset = 4 + 12  # magic + version/text/image words

    def _sequence_bytes(self, what: str, data: np.ndarray, width: int,
                        is_text: bool) -> bytes:
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != width:
            raise ValueError(f"{what}: shape {arr.shape} does not match width {width}")
        if arr.shape[0] < 1:
            raise ValueError(f"{what}: at least one token required")
        if is_text and arr.shape[0] > MAX_TEXT_TOKENS:
            raise ValueError(f"{what}: {arr.shape[0]} tokens exceed {MAX_TEXT_TOKENS}")
        if not np.isfinite(arr).all():
            raise ValueError(f"{what}: non-finite values")
        return struct.pack("<I", arr.shape[0]) + arr.astype("<f4").tobytes()

    def add_sample(self, sample_id: str, label: Optional[int],
                   claim_image: np.ndarray, claim_text: np.ndarray,
                   doc_image: np.ndarray, doc_text: np.ndarray) -> None:
        if self.has_labels:
            if label is None or not 0 <= label < len(CLASS_NAMES):
                raise ValueError(f"sample {sample_id!r}: label {label!r} invalid")
            label_byte = label
        else:
            if label is not None:
                raise ValueError(f"sample {sample_id!r}: unexpected label")
            label_byte = NO_LABEL
        raw_id = sample_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise ValueError(f"sample id {sample_id!r} too long")

        record = bytearray()
        record += struct.pack("<H", len(raw_id))
        record += raw_id
        record += struct.pack("B", label_byte)
        record += self._sequence_bytes("claim_image", claim_image,
                                       self.image_width, is_text=False)
        record += self._sequence_bytes("claim_text", claim_text,
                                       self.text_width, is_text=True)
        record += self._sequence_bytes("doc_image", doc_image,
                                       self.image_width, is_text=False)
        record += self._sequence_bytes("doc_text", doc_text,
                                       self.text_width, is_text=True)
        self._file.write(bytes(record))
        self.count += 1

    def close(self) -> None:
        if self._file.closed:
            return
        self._file.seek(self._count_offset)
        self._file.write(struct.pack("<I", self.count))
        self._file.close()

    def __enter__(self) -> "DatasetWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
