"""Binary embedding datasets, model checkpoints, and synthetic data.

PCF1 embedding dataset layout (all integers little-endian):

    magic           4 bytes  b"PCF1"
    version         u32      (currently 1)
    text_width      u32
    image_width     u32
    sample_count    u32
    has_labels      u8       (0 or 1)
    class_count     u8       (5)
    class names     class_count x (u16 length + utf-8 bytes)
    records         sample_count x:
        sample id   u16 length + utf-8 bytes
        label       u8 (0-4, or 0xFF when has_labels is 0)
        4 sequences in order claim_image, claim_text, doc_image, doc_text:
            token_count u32
            data        token_count x width f32 (image width for image
                        sequences, text width for text sequences)

PCFM model checkpoint layout:

    magic           4 bytes  b"PCFM"
    version         u32      (currently 1)
    config          u32 length + utf-8 JSON (model config + class names)
    param_count     u32
    records         param_count x:
        name        u16 length + utf-8 bytes
        rank        u8
        dims        rank x u32
        data        prod(dims) f32

Readers validate every structural field and raise
:class:`~precofact.errors.DatasetFormatError` with a machine-readable
category; they never read past declared sizes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .coattention import TokenSequence
from .errors import ConfigError, ContractError, DatasetFormatError
from .model import (
    CLASS_NAMES,
    MAX_TEXT_TOKENS,
    ModelConfig,
    ModelParams,
    SampleEmbeddings,
    init_model_params,
)

DATASET_MAGIC = b"PCF1"
CHECKPOINT_MAGIC = b"PCFM"
STATE_MAGIC = b"PCFS"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
NO_LABEL = 0xFF

_SEQ_FIELDS = ("claim_image", "claim_text", "doc_image", "doc_text")


@dataclass(frozen=True)
class DatasetHeader:
    version: int
    text_width: int
    image_width: int
    sample_count: int
    has_labels: bool
    class_names: Tuple[str, ...]


class _Reader:
    """Bounded binary reader that turns short reads into categorized errors."""

    def __init__(self, f, context: str):
        self.f = f
        self.context = context

    def fail(self, category: str, detail: str):
        raise DatasetFormatError(category, f"{self.context}: {detail}")

    def read_exact(self, n: int, what: str, category: str = "truncated-record") -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            self.fail(category, f"file ends inside {what} "
                                f"(wanted {n} bytes, got {len(data)})")
        return data

    def u8(self, what, category="truncated-record") -> int:
        return self.read_exact(1, what, category)[0]

    def u16(self, what, category="truncated-record") -> int:
        return struct.unpack("<H", self.read_exact(2, what, category))[0]

    def u32(self, what, category="truncated-record") -> int:
        return struct.unpack("<I", self.read_exact(4, what, category))[0]

    def text(self, what, category="truncated-record") -> str:
        n = self.u16(f"{what} length", category)
        raw = self.read_exact(n, what, category)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail(category, f"{what} is not valid utf-8")

    def floats(self, count: int, what: str, limit: Optional[int] = None) -> np.ndarray:
        nbytes = count * 4
        if limit is not None and nbytes > limit:
            self.fail("truncated-record",
                      f"{what} declares {nbytes} bytes but only {limit} remain")
        raw = self.read_exact(nbytes, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def at_eof(self) -> bool:
        return self.f.read(1) == b""


def _write_text(f, s: str, what: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ContractError(f"{what} longer than 65535 bytes")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


# ---------------------------------------------------------------------------
# PCF1 embedding datasets
# ---------------------------------------------------------------------------

class DatasetReader:
    """Streaming reader: parses the header eagerly, records on demand."""

    def __init__(self, path):
        self.path = os.fspath(path)
        try:
            self._file = open(self.path, "rb")
        except FileNotFoundError:
            raise
        self._size = os.fstat(self._file.fileno()).st_size
        self._reader = _Reader(self._file, self.path)
        self.header = self._read_header()
        self._cursor = 0

    def _read_header(self) -> DatasetHeader:
        r = self._reader
        magic = r.read_exact(4, "magic", "bad-magic")
        if magic != DATASET_MAGIC:
            r.fail("bad-magic", f"expected {DATASET_MAGIC!r}, found {magic!r}")
        version = r.u32("version", "bad-header")
        if version != DATASET_VERSION:
            r.fail("bad-version", f"unsupported dataset version {version}")
        text_width = r.u32("text width", "bad-header")
        image_width = r.u32("image width", "bad-header")
        if text_width < 1 or image_width < 1:
            r.fail("bad-header", f"widths must be positive "
                                 f"(text={text_width}, image={image_width})")
        sample_count = r.u32("sample count", "bad-header")
        flag = r.u8("label flag", "bad-header")
        if flag not in (0, 1):
            r.fail("bad-header", f"label flag must be 0 or 1, found {flag}")
        n_classes = r.u8("class count", "bad-header")
        if n_classes != len(CLASS_NAMES):
            r.fail("bad-header", f"class count must be {len(CLASS_NAMES)}, "
                                 f"found {n_classes}")
        names = tuple(r.text(f"class name {i}", "bad-header")
                      for i in range(n_classes))
        if names != CLASS_NAMES:
            r.fail("bad-header", f"class table {names} does not match the "
                                 f"canonical category names")
        return DatasetHeader(version, text_width, image_width,
                             sample_count, bool(flag), names)

    def _read_sequence(self, what: str, width: int, is_text: bool) -> TokenSequence:
        r = self._reader
        count = r.u32(f"{what} token count")
        if count < 1:
            r.fail("token-count", f"{what} token count must be >= 1")
        if is_text and count > MAX_TEXT_TOKENS:
            r.fail("token-count",
                   f"{what} has {count} tokens (limit {MAX_TEXT_TOKENS})")
        remaining = self._size - self._file.tell()
        data = r.floats(count * width, f"{what} embeddings", limit=remaining)
        if not np.isfinite(data).all():
            r.fail("non-finite", f"{what} contains NaN or Inf")
        return TokenSequence.dense(Tensor(data.reshape(count, width)))

    def _read_record(self, index: int) -> SampleEmbeddings:
        r = self._reader
        r.context = f"{self.path} (sample {index})"
        sample_id = r.text("sample id")
        label_byte = r.u8("label byte")
        if self.header.has_labels:
            if label_byte >= len(CLASS_NAMES):
                r.fail("label", f"label byte {label_byte} out of range 0-4")
            label = int(label_byte)
        else:
            if label_byte != NO_LABEL:
                r.fail("label", f"unlabeled file carries label byte {label_byte}")
            label = None
        seqs = {}
        for field in _SEQ_FIELDS:
            is_text = "text" in field
            width = self.header.text_width if is_text else self.header.image_width
            seqs[field] = self._read_sequence(field, width, is_text)
        return SampleEmbeddings(label=label, sample_id=sample_id, **seqs)

    def __iter__(self) -> Iterator[SampleEmbeddings]:
        while self._cursor < self.header.sample_count:
            index = self._cursor
            self._cursor += 1
            yield self._read_record(index)
        self._reader.context = self.path
        if not self._reader.at_eof():
            self._reader.fail(
                "trailing-bytes",
                f"data continues past the declared {self.header.sample_count} samples",
            )

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "DatasetReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_header(path) -> DatasetHeader:
    with DatasetReader(path) as reader:
        return reader.header


def read_dataset(path) -> Tuple[DatasetHeader, List[SampleEmbeddings]]:
    """Load and fully validate a PCF1 file."""
    with DatasetReader(path) as reader:
        return reader.header, list(reader)


def _sequence_widths(sample: SampleEmbeddings) -> Tuple[int, int]:
    return sample.claim_text.width, sample.claim_image.width


def write_dataset(samples: Sequence[SampleEmbeddings], path,
                  text_width: Optional[int] = None,
                  image_width: Optional[int] = None) -> None:
    """Write samples as PCF1. Output bytes are a pure function of the input.

    Labels are all-or-nothing: the per-file flag is set only when every
    sample carries one. Widths are inferred from the first sample and must
    be homogeneous (pass them explicitly to write an empty file).
    """
    samples = list(samples)
    if samples:
        tw, iw = _sequence_widths(samples[0])
        if samples[0].doc_text.width != tw or samples[0].doc_image.width != iw:
            raise ContractError("claim and document sequence widths differ")
    else:
        tw = text_width if text_width is not None else 768
        iw = image_width if image_width is not None else 768
    if text_width is not None and text_width != tw:
        raise ContractError(f"text width {tw} does not match requested {text_width}")
    if image_width is not None and image_width != iw:
        raise ContractError(f"image width {iw} does not match requested {image_width}")

    labeled = [s.label is not None for s in samples]
    if any(labeled) and not all(labeled):
        raise ContractError("dataset mixes labeled and unlabeled samples")
    has_labels = bool(samples) and all(labeled)

    try:
        f = open(path, "wb")
    except OSError as e:
        raise ContractError(f"cannot write dataset to {path}: {e}") from e
    with f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIII", DATASET_VERSION, tw, iw, len(samples)))
        f.write(struct.pack("BB", int(has_labels), len(CLASS_NAMES)))
        for name in CLASS_NAMES:
            _write_text(f, name, "class name")
        for i, sample in enumerate(samples):
            if _sequence_widths(sample) != (tw, iw):
                raise ContractError(
                    f"sample {i} widths {_sequence_widths(sample)} differ from "
                    f"the file widths ({tw}, {iw})"
                )
            _write_text(f, sample.sample_id, "sample id")
            f.write(struct.pack("B", NO_LABEL if sample.label is None else sample.label))
            for field in _SEQ_FIELDS:
                seq: TokenSequence = getattr(sample, field)
                data = seq.tokens.value.data.astype("<f4")
                f.write(struct.pack("<I", data.shape[0]))
                f.write(data.tobytes())


# ---------------------------------------------------------------------------
# PCFM model checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams) -> None:
    config_blob = json.dumps(
        {"model": params.config.to_dict(), "class_names": list(CLASS_NAMES)},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(params.named)))
        for name, node in params.named.items():
            _write_text(f, name, "parameter name")
            arr = node.value.data.astype("<f4")
            f.write(struct.pack("B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_checkpoint(path) -> ModelParams:
    """Rebuild a model from a PCFM file; loaded values overwrite a freshly
    initialized parameter set so names and shapes are fully validated."""
    with open(path, "rb") as f:
        r = _Reader(f, os.fspath(path))
        magic = r.read_exact(4, "magic", "bad-magic")
        if magic != CHECKPOINT_MAGIC:
            r.fail("bad-magic", f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
        version = r.u32("version", "bad-header")
        if version != CHECKPOINT_VERSION:
            r.fail("bad-version", f"unsupported checkpoint version {version}")
        blob_len = r.u32("config length", "bad-header")
        blob = r.read_exact(blob_len, "config block", "bad-header")
        try:
            meta = json.loads(blob.decode("utf-8"))
            config = ModelConfig.from_dict(meta["model"])
        except (ValueError, KeyError, TypeError, ConfigError) as e:
            r.fail("bad-header", f"config block unreadable: {e}")
        if tuple(meta.get("class_names", ())) != CLASS_NAMES:
            r.fail("bad-header", "class-name table does not match the engine's")

        params = init_model_params(config, seed=0)
        n = r.u32("parameter count", "bad-header")
        if n != len(params.named):
            r.fail("bad-header",
                   f"checkpoint has {n} parameters, config implies {len(params.named)}")
        seen = set()
        for _ in range(n):
            name = r.text("parameter name")
            if name not in params.named:
                r.fail("bad-header", f"unknown parameter {name!r}")
            if name in seen:
                r.fail("bad-header", f"duplicate parameter {name!r}")
            seen.add(name)
            node = params.named[name]
            rank = r.u8("rank")
            dims = tuple(r.u32(f"dim {i} of {name}") for i in range(rank))
            if dims != node.value.shape:
                r.fail("bad-header",
                       f"parameter {name!r} has shape {dims}, expected {node.value.shape}")
            count = 1
            for dim in dims:
                count *= dim
            data = r.floats(count, f"parameter {name!r}")
            if not np.isfinite(data).all():
                r.fail("non-finite", f"parameter {name!r} contains NaN or Inf")
            node.value = Tensor(data.reshape(dims), dtype=config.dtype)
        if not r.at_eof():
            r.fail("trailing-bytes", "data continues past the parameter records")
    return params


# ---------------------------------------------------------------------------
# tensor archives (internal; training resume state)
# ---------------------------------------------------------------------------

def save_tensor_archive(path, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    """Internal container: like a checkpoint but dtype-preserving, used for
    optimizer/rng state where float32 truncation would break exact resume."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}[arr.dtype]
            _write_text(f, name, "array name")
            f.write(struct.pack("B", code))
            f.write(struct.pack("B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype(f"<f{code}").tobytes())


def load_tensor_archive(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        r = _Reader(f, os.fspath(path))
        magic = r.read_exact(4, "magic", "bad-magic")
        if magic != STATE_MAGIC:
            r.fail("bad-magic", f"expected {STATE_MAGIC!r}, found {magic!r}")
        if r.u32("version", "bad-header") != 1:
            r.fail("bad-version", "unsupported state version")
        blob = r.read_exact(r.u32("meta length", "bad-header"), "meta", "bad-header")
        meta = json.loads(blob.decode("utf-8"))
        arrays = {}
        for _ in range(r.u32("array count", "bad-header")):
            name = r.text("array name")
            code = r.u8("dtype code")
            if code not in (4, 8):
                r.fail("bad-header", f"unknown dtype code {code}")
            rank = r.u8("rank")
            dims = tuple(r.u32("dim") for i in range(rank))
            count = 1
            for dim in dims:
                count *= dim
            raw = r.read_exact(count * code, f"array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=f"<f{code}").reshape(dims).copy()
        if not r.at_eof():
            r.fail("trailing-bytes", "data continues past the array records")
    return meta, arrays


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def _unit_directions(rng: np.random.Generator, count: int, width: int) -> np.ndarray:
    vecs = rng.normal(size=(count, width))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def _cloud(rng, mean: np.ndarray, count: int, noise: float) -> TokenSequence:
    tokens = (mean + noise * rng.normal(size=(count, mean.size))).astype(np.float32)
    return TokenSequence.dense(Tensor(tokens))


def generate_synthetic(samples_per_class: int, token_range=(2, 6),
                       text_width: int = 16, image_width: int = 16,
                       separation: float = 3.0, noise: float = 1.0,
                       seed: int = 0, labeled: bool = True,
                       id_prefix: str = "syn") -> List[SampleEmbeddings]:
    """Balanced 5-class dataset of class-conditional Gaussian token clouds.

    Each class gets one mean direction per source (near-orthogonal at these
    widths), scaled by ``separation``; separation 0 makes the task pure
    noise. Deterministic for a given argument set.
    """
    if samples_per_class < 1:
        raise ContractError("samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = {
        "claim_image": separation * _unit_directions(rng, 5, image_width),
        "claim_text": separation * _unit_directions(rng, 5, text_width),
        "doc_image": separation * _unit_directions(rng, 5, image_width),
        "doc_text": separation * _unit_directions(rng, 5, text_width),
    }
    lo, hi = token_range
    samples = []
    for idx in range(5 * samples_per_class):
        label = idx % 5
        seqs = {
            field: _cloud(rng, means[field][label],
                          int(rng.integers(lo, hi + 1)), noise)
            for field in _SEQ_FIELDS
        }
        samples.append(SampleEmbeddings(
            label=label if labeled else None,
            sample_id=f"{id_prefix}-{idx:05d}", **seqs,
        ))
    return samples


def _orthonormal_topics(rng: np.random.Generator, count: int,
                        width: int) -> np.ndarray:
    if width < count:
        raise ContractError(f"width {width} cannot host {count} orthogonal topics")
    q, _ = np.linalg.qr(rng.normal(size=(width, width)))
    return q[:count]


def generate_cross_modal(samples_per_class: int, tokens_per_source: int = 3,
                         text_width: int = 16, image_width: int = 16,
                         separation: float = 5.0, noise: float = 0.5,
                         agreement_prob: float = 0.75, seed: int = 0,
                         id_prefix: str = "xmod") -> List[SampleEmbeddings]:
    """Balanced 5-class dataset where the label is the relation between the
    claim image's topic and the document text's topic, not either alone.

    Each source's tokens cluster around one of five orthonormal topic
    directions. The claim image draws a uniform topic i; the document text
    carries topic (i + label) mod 5, so the label is the cyclic shift
    between them and every single-source cloud is label-uninformative. The
    document image repeats the shifted topic with probability
    ``agreement_prob`` and a random one otherwise (a weaker, same-modality
    channel against the claim image); the claim text is pure nuisance.
    Classifiers fed only pooled per-source means see no first-order label
    signal, while co-attention pairings mix the two sides before pooling
    and expose the shift directly. Deterministic per argument set.
    """
    if samples_per_class < 1:
        raise ContractError("samples_per_class must be positive")
    if tokens_per_source < 1:
        raise ContractError("tokens_per_source must be positive")
    n_labels = len(CLASS_NAMES)
    rng = np.random.default_rng(seed)
    image_topics = _orthonormal_topics(rng, n_labels, image_width)
    text_topics = _orthonormal_topics(rng, n_labels, text_width)

    def cloud(topics: np.ndarray, code: int) -> TokenSequence:
        base = separation * topics[code]
        tokens = (base + noise * rng.normal(
            size=(tokens_per_source, topics.shape[1]))).astype(np.float32)
        return TokenSequence.dense(Tensor(tokens))

    samples = []
    for idx in range(n_labels * samples_per_class):
        label = idx % n_labels
        i = int(rng.integers(0, n_labels))
        shifted = (i + label) % n_labels
        di_code = (shifted if rng.random() < agreement_prob
                   else int(rng.integers(0, n_labels)))
        ct_code = int(rng.integers(0, n_labels))
        samples.append(SampleEmbeddings(
            claim_image=cloud(image_topics, i),
            claim_text=cloud(text_topics, ct_code),
            doc_image=cloud(image_topics, di_code),
            doc_text=cloud(text_topics, shifted),
            label=label,
            sample_id=f"{id_prefix}-{idx:05d}",
        ))
    return samples


# ---------------------------------------------------------------------------
# dataset statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceStats:
    min_tokens: int
    mean_tokens: float
    max_tokens: int


@dataclass(frozen=True)
class DatasetStats:
    sample_count: int
    labeled: bool
    class_counts: Optional[Tuple[int, ...]]
    source_stats: Dict[str, SourceStats]


def dataset_stats(samples: Sequence[SampleEmbeddings]) -> DatasetStats:
    samples = list(samples)
    labeled = bool(samples) and all(s.label is not None for s in samples)
    counts = None
    if labeled:
        tally = [0] * len(CLASS_NAMES)
        for s in samples:
            tally[s.label] += 1
        counts = tuple(tally)
    per_source = {}
    for field in _SEQ_FIELDS:
        lengths = [getattr(s, field).length for s in samples] or [0]
        per_source[field] = SourceStats(
            min_tokens=min(lengths),
            mean_tokens=float(np.mean(lengths)),
            max_tokens=max(lengths),
        )
    return DatasetStats(
        sample_count=len(samples),
        labeled=labeled,
        class_counts=counts,
        source_stats=per_source,
    )
