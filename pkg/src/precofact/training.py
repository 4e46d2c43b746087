"""Cross-entropy training: batching, Adam, epoch logging, checkpointing.

Reproducibility contract: one seed derives three independent generators
(parameter init, epoch shuffling, dropout) through numpy's SeedSequence,
so two runs with the same seed produce identical epoch losses and
identical checkpoints, and a run resumed from a saved training state
continues bit-for-bit where it left off.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import dataio, metrics
from .autodiff import Node, Tensor
from .errors import ConfigError, ContractError, TrainingAborted
from .model import ModelConfig, ModelParams, SampleEmbeddings, forward, init_model_params

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 3e-5
    seed: int = 41
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0   # epochs between training-state snapshots; 0 = off

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def cross_entropy(probabilities: Node, labels: Sequence[int]) -> Node:
    """Mean over the batch of -log p[label], with p floored at 1e-12."""
    probs = ad.as_node(probabilities)
    pv = probs.value.data
    labels = np.asarray(labels)
    if pv.ndim != 2:
        raise ContractError(f"probabilities must be a matrix, got shape {pv.shape}")
    b, c = pv.shape
    if labels.shape != (b,):
        raise ContractError(f"{labels.size} labels for {b} probability rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels outside 0-{c - 1}")
    labels = labels.astype(np.int64)

    rows = np.arange(b)
    picked = pv[rows, labels]
    clamped = np.maximum(picked, pv.dtype.type(PROB_FLOOR))
    loss_value = -np.log(clamped).mean()
    out = Node(Tensor(np.asarray(loss_value, dtype=pv.dtype)), parents=(probs,))
    if out.requires_grad:
        live = (picked > PROB_FLOOR).astype(pv.dtype)
        def _bwd():
            g = out.grad
            contrib = -g * live / (b * clamped)
            probs.grad[rows, labels] += contrib.astype(pv.dtype)
        out._backward = _bwd
    return out


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        state = cls()
        for name, node in params.named.items():
            state.m[name] = np.zeros(node.value.shape, dtype=node.value.dtype)
            state.v[name] = np.zeros(node.value.shape, dtype=node.value.dtype)
        return state


def optimizer_step(params: ModelParams, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """One Adam update with bias correction; deterministic given state."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, node in params.named.items():
        g = node.grad
        if not np.isfinite(g).all():
            raise TrainingAborted(
                f"non-finite gradient for parameter {name!r} at step {t}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        node.value = Tensor(node.value.data - update)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_weighted_f1: Optional[float]
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_weighted_f1": self.val_weighted_f1,
            "wall_seconds": self.wall_seconds,
        }, sort_keys=True)


@dataclass
class TrainResult:
    params: ModelParams
    log: List[EpochRecord]
    best_epoch: int
    best_val_f1: Optional[float]


def predict_probs(samples: Sequence[SampleEmbeddings],
                  params: ModelParams) -> np.ndarray:
    """Eval-mode class probabilities, one row per sample."""
    return np.stack([forward(s, params).value.data[0] for s in samples])


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_training_state(path, params: ModelParams, adam: AdamState,
                        train_config: TrainConfig, next_epoch: int,
                        shuffle_rng, dropout_rng,
                        best_epoch: int, best_val_f1: Optional[float]) -> None:
    arrays = {f"param.{n}": node.value.data for n, node in params.named.items()}
    arrays.update({f"adam.m.{n}": a for n, a in adam.m.items()})
    arrays.update({f"adam.v.{n}": a for n, a in adam.v.items()})
    meta = {
        "model_config": params.config.to_dict(),
        "train_config": train_config.to_dict(),
        "adam_step": adam.step,
        "next_epoch": next_epoch,
        "best_epoch": best_epoch,
        "best_val_f1": best_val_f1,
        "shuffle_rng": _rng_state(shuffle_rng),
        "dropout_rng": _rng_state(dropout_rng),
    }
    dataio.save_tensor_archive(path, meta, arrays)


def load_training_state(path):
    meta, arrays = dataio.load_tensor_archive(path)
    config = ModelConfig.from_dict(meta["model_config"])
    params = init_model_params(config, seed=0)
    adam = AdamState(step=meta["adam_step"])
    for name, node in params.named.items():
        node.value = Tensor(arrays[f"param.{name}"], dtype=config.dtype)
        adam.m[name] = arrays[f"adam.m.{name}"].astype(node.value.dtype)
        adam.v[name] = arrays[f"adam.v.{name}"].astype(node.value.dtype)
    return meta, params, adam


def _make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(samples: Sequence[SampleEmbeddings], model_config: ModelConfig,
          train_config: TrainConfig,
          val_samples: Optional[Sequence[SampleEmbeddings]] = None,
          out_dir=None, resume_from=None,
          log_stream=None) -> TrainResult:
    """Run the full training loop.

    Every epoch shuffles, sweeps mini-batches (forward, cross-entropy,
    backward, Adam step), then logs train loss and, when a validation set
    is given, its weighted F1. The best-validation parameters are kept
    (falling back to the final epoch without validation). ``out_dir``
    enables PCFM checkpoints (``model_final.pcfm``, ``model_best.pcfm``),
    the JSONL epoch log, and periodic resume snapshots.
    """
    samples = list(samples)
    if not samples:
        raise ContractError("training set is empty")
    unlabeled = [s.sample_id for s in samples if s.label is None]
    if unlabeled:
        raise ContractError(
            f"{len(unlabeled)} unlabeled samples (first: {unlabeled[0]!r})"
        )
    if val_samples is not None:
        val_samples = list(val_samples)
        if any(s.label is None for s in val_samples):
            raise ContractError("validation samples must be labeled")

    if resume_from is not None:
        meta, params, adam = load_training_state(resume_from)
        if meta["train_config"] != train_config.to_dict():
            raise ConfigError("resume state was written with a different train config")
        if meta["model_config"] != model_config.to_dict():
            raise ConfigError("resume state was written with a different model config")
        shuffle_rng = _restore_rng(meta["shuffle_rng"])
        dropout_rng = _restore_rng(meta["dropout_rng"])
        start_epoch = meta["next_epoch"]
        best_epoch = meta["best_epoch"]
        best_val_f1 = meta["best_val_f1"]
    else:
        init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(
            train_config.seed
        ).spawn(3)
        params = init_model_params(model_config, rng=np.random.default_rng(init_ss))
        adam = AdamState.for_params(params)
        shuffle_rng = np.random.default_rng(shuffle_ss)
        dropout_rng = np.random.default_rng(dropout_ss)
        start_epoch = 0
        best_epoch = -1
        best_val_f1 = None

    labels_by_index = np.array([s.label for s in samples], dtype=np.int64)
    log: List[EpochRecord] = []
    log_path = best_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "epochs.jsonl")
        best_path = os.path.join(out_dir, "model_best.pcfm")
        if start_epoch == 0 and os.path.exists(log_path):
            os.remove(log_path)

    for epoch in range(start_epoch, train_config.epochs):
        started = time.monotonic()
        total_loss = 0.0
        for batch in _make_batches(len(samples), train_config.batch_size, shuffle_rng):
            params.zero_grads()
            rows = [
                forward(samples[i], params, mode="train", rng=dropout_rng)
                for i in batch
            ]
            probs = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
            loss = cross_entropy(probs, labels_by_index[batch])
            ad.backward(loss)
            optimizer_step(
                params, adam, train_config.learning_rate,
                beta1=train_config.beta1, beta2=train_config.beta2,
                eps=train_config.adam_eps,
            )
            total_loss += loss.value.item() * len(batch)
        train_loss = total_loss / len(samples)

        val_f1 = None
        if val_samples:
            preds = metrics.argmax_predict(predict_probs(val_samples, params))
            val_f1 = metrics.evaluate(
                preds, [s.label for s in val_samples]
            ).weighted_f1
            if best_val_f1 is None or val_f1 > best_val_f1:
                best_val_f1 = val_f1
                best_epoch = epoch
                if best_path is not None:
                    dataio.save_checkpoint(best_path, params)

        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_weighted_f1=val_f1,
            wall_seconds=time.monotonic() - started,
        )
        log.append(record)
        if log_stream is not None:
            print(record.to_json(), file=log_stream, flush=True)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(record.to_json() + "\n")

        if (out_dir is not None and train_config.checkpoint_every
                and (epoch + 1) % train_config.checkpoint_every == 0):
            save_training_state(
                os.path.join(out_dir, f"state_epoch{epoch + 1:04d}.pcfs"),
                params, adam, train_config, epoch + 1,
                shuffle_rng, dropout_rng, best_epoch, best_val_f1,
            )

    if best_val_f1 is None:
        # no validation set: final epoch is the selected model
        best_epoch = train_config.epochs - 1
    if out_dir is not None:
        dataio.save_checkpoint(os.path.join(out_dir, "model_final.pcfm"), params)
        if not os.path.exists(best_path):
            dataio.save_checkpoint(best_path, params)

    return TrainResult(
        params=params, log=log, best_epoch=best_epoch, best_val_f1=best_val_f1
    )
