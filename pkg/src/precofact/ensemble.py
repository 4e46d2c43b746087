"""Power-weighted combination of per-model class probabilities.

Members are combined per sample and per class as  sum_i  w_i * p_i^N.
The result is deliberately NOT renormalized: downstream argmax decoding
works on raw scores, and the canonical weight set does not sum to 1.
Consequently combined PredictionSets may carry rows that are not
probability distributions, while sets written by a single model always
are; validation here checks non-negativity and finiteness only.

PredictionSet file layout (PCFP):

    magic       4 bytes  b"PCFP"
    version     u32      (currently 1)
    model tag   u16 length + utf-8 bytes
    class_count u8       (5)
    records until EOF:
        sample id  u16 length + utf-8 bytes
        scores     5 x f32
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .errors import ContractError, DatasetFormatError, JoinError
from .model import NUM_CLASSES

PREDICTIONS_MAGIC = b"PCFP"
PREDICTIONS_VERSION = 1


@dataclass(frozen=True)
class PredictionSet:
    """In-memory scores are float64 (combination happens in double);
    the PCFP file stores float32 per the wire contract."""

    sample_ids: Tuple[str, ...]
    probabilities: np.ndarray   # b x 5 float64
    model_tag: str

    def __post_init__(self):
        arr = np.asarray(self.probabilities, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != NUM_CLASSES:
            raise ContractError(
                f"probabilities must be b x {NUM_CLASSES}, got {arr.shape}"
            )
        if arr.shape[0] != len(self.sample_ids):
            raise ContractError(
                f"{len(self.sample_ids)} sample ids for {arr.shape[0]} rows"
            )
        if not np.isfinite(arr).all():
            raise ContractError("scores contain NaN or Inf")
        if (arr < 0).any():
            raise ContractError("scores must be non-negative")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "probabilities", arr)

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class EnsembleConfig:
    weights: Tuple[float, ...]
    power: float

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        if len(weights) < 1:
            raise ContractError("ensemble needs at least one member weight")
        if any(w <= 0 for w in weights):
            raise ContractError(f"weights must be positive, got {weights}")
        if self.power <= 0:
            raise ContractError(f"power must be positive, got {self.power}")


def combine(members: Sequence[PredictionSet], config: EnsembleConfig) -> PredictionSet:
    """Per sample, per class:  sum_i  w_i * p_i^power.

    Members are joined on sample id (the first member fixes the output
    order); a mismatched id set is an error that names the differing ids.
    p^power at p=0 with power < 1 evaluates to 0 (continuous extension).
    """
    members = list(members)
    if not members:
        raise ContractError("combine: no members")
    if len(members) != len(config.weights):
        raise ContractError(
            f"{len(members)} members but {len(config.weights)} weights"
        )

    base_ids = members[0].sample_ids
    base_set = set(base_ids)
    for m in members[1:]:
        other = set(m.sample_ids)
        if other != base_set:
            missing = sorted(base_set - other)[:5]
            extra = sorted(other - base_set)[:5]
            raise JoinError(
                f"member {m.model_tag!r} id set differs from "
                f"{members[0].model_tag!r}: missing {missing}, extra {extra}"
            )

    total = np.zeros((len(base_ids), NUM_CLASSES), dtype=np.float64)
    for weight, member in zip(config.weights, members):
        if member.sample_ids == base_ids:
            probs = member.probabilities
        else:
            index = {sid: i for i, sid in enumerate(member.sample_ids)}
            probs = member.probabilities[[index[sid] for sid in base_ids]]
        total += weight * np.power(probs, config.power)
    return PredictionSet(
        sample_ids=base_ids, probabilities=total, model_tag="ensemble",
    )


def grid_search(
    members: Sequence[PredictionSet],
    weight_grid: Sequence[Sequence[float]],
    power_grid: Sequence[float],
    labels: Sequence[int],
    workers: int = 1,
) -> Tuple[EnsembleConfig, List[Tuple[Tuple[float, ...], float, float]]]:
    """Weighted F1 of combine+argmax over the Cartesian grid.

    Returns the best config (first in iteration order on ties) and the full
    (weights, power, score) table in deterministic grid order.
    """
    weight_grid = [tuple(float(w) for w in ws) for ws in weight_grid]
    power_grid = [float(p) for p in power_grid]
    if not weight_grid or not power_grid:
        raise ContractError("grid_search: empty grid")
    labels = list(labels)
    if len(labels) != len(members[0]):
        raise ContractError(
            f"{len(labels)} labels for {len(members[0])} samples"
        )

    points = [(ws, p) for ws in weight_grid for p in power_grid]

    def score(point):
        ws, p = point
        combined = combine(members, EnsembleConfig(weights=ws, power=p))
        preds = metrics.argmax_predict(combined.probabilities)
        return metrics.evaluate(preds, labels).weighted_f1

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, points))
    else:
        scores = [score(point) for point in points]

    table = [(ws, p, s) for (ws, p), s in zip(points, scores)]
    best_index = max(range(len(table)), key=lambda i: (table[i][2], -i))
    best_ws, best_p, _ = table[best_index]
    return EnsembleConfig(weights=best_ws, power=best_p), table


# ---------------------------------------------------------------------------
# PCFP prediction files
# ---------------------------------------------------------------------------

def write_predictions(preds: PredictionSet, path) -> None:
    tag = preds.model_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ContractError("model tag longer than 65535 bytes")
    with open(path, "wb") as f:
        f.write(PREDICTIONS_MAGIC)
        f.write(struct.pack("<I", PREDICTIONS_VERSION))
        f.write(struct.pack("<H", len(tag)))
        f.write(tag)
        f.write(struct.pack("B", NUM_CLASSES))
        for sid, row in zip(preds.sample_ids, preds.probabilities):
            raw = sid.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(row.astype("<f4").tobytes())


def read_predictions(path) -> PredictionSet:
    context = os.fspath(path)

    def fail(category, detail):
        raise DatasetFormatError(category, f"{context}: {detail}")

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != PREDICTIONS_MAGIC:
        fail("bad-magic", f"expected {PREDICTIONS_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < 11:
        fail("truncated-record", "file ends inside the header")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != PREDICTIONS_VERSION:
        fail("bad-version", f"unsupported predictions version {version}")
    tag_len = struct.unpack_from("<H", raw, 8)[0]
    off = 10 + tag_len
    if off + 1 > len(raw):
        fail("truncated-record", "file ends inside the model tag")
    tag = raw[10:off].decode("utf-8", errors="replace")
    n_classes = raw[off]
    off += 1
    if n_classes != NUM_CLASSES:
        fail("bad-header", f"class count must be {NUM_CLASSES}, found {n_classes}")

    ids, rows = [], []
    while off < len(raw):
        if off + 2 > len(raw):
            fail("truncated-record", f"record {len(ids)}: file ends inside id length")
        id_len = struct.unpack_from("<H", raw, off)[0]
        off += 2
        if off + id_len + 4 * NUM_CLASSES > len(raw):
            fail("truncated-record", f"record {len(ids)}: file ends inside the record")
        ids.append(raw[off:off + id_len].decode("utf-8", errors="replace"))
        off += id_len
        rows.append(np.frombuffer(raw, dtype="<f4", count=NUM_CLASSES, offset=off))
        off += 4 * NUM_CLASSES
    probs = (np.stack(rows).astype(np.float64) if rows
             else np.zeros((0, NUM_CLASSES), dtype=np.float64))
    if not np.isfinite(probs).all():
        fail("non-finite", "scores contain NaN or Inf")
    if (probs < 0).any():
        fail("bad-header", "scores must be non-negative")
    return PredictionSet(sample_ids=tuple(ids), probabilities=probs, model_tag=tag)
