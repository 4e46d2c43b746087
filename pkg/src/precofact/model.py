"""The full fusion model: embedding projections, four co-attention
pairings, mean aggregation, and the three-layer category classifier.

A sample carries four token sequences (claim image, claim text, document
image, document text). Each is projected to the fused width d, the four
pairings are cross-fused (image-image, text-text, and the two cross-modal
pairs), every fused sequence and every projected embedding is mean-pooled,
and the concatenated pool feeds the classifier, which emits a 5-way
probability vector over the entailment categories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import coattention as ca
from .autodiff import Node, Tensor
from .errors import ConfigError, DimensionError, InvalidInputError

CLASS_NAMES = (
    "Support_Multimodal",
    "Support_Text",
    "Insufficient_Multimodal",
    "Insufficient_Text",
    "Refute",
)
NUM_CLASSES = 5
MAX_TEXT_TOKENS = 512

SOURCES = ("claim_image", "claim_text", "doc_image", "doc_text")
_SOURCE_KEYS = ("ci", "ct", "di", "dt")

# (name, query source, key/value source) for each fusion pairing, and the
# fixed order in which their outputs enter the classifier.
PAIRINGS = (
    ("cidi", "ci", "di"),
    ("ctdt", "ct", "dt"),
    ("cidt", "ci", "dt"),
    ("ctdi", "ct", "di"),
)
VARIANTS = ("full", "same_modality_only", "no_coatt")


@dataclass(frozen=True)
class ModelConfig:
    input_width_text: int = 768
    input_width_image: int = 768
    d: int = 512
    heads: int = 4
    d_ff: int = 1024
    d_m1: int = 256
    classes: int = NUM_CLASSES
    dropout: float = 0.1
    activation: str = "relu"
    variant: str = "full"
    use_biases: bool = True
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.input_width_text, self.input_width_image, self.d,
               self.d_ff, self.d_m1, self.heads) < 1:
            raise ConfigError("all widths and head counts must be positive")
        if self.classes != NUM_CLASSES:
            raise ConfigError(f"classifier is fixed at {NUM_CLASSES} classes")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        ad.resolve_dtype(self.dtype)

    @property
    def pairing_count(self) -> int:
        return {"full": 4, "same_modality_only": 2, "no_coatt": 0}[self.variant]

    @property
    def classifier_input_width(self) -> int:
        # 2 fused outputs per pairing plus the 4 projected embeddings.
        return (2 * self.pairing_count + 4) * self.d

    def to_dict(self) -> dict:
        return {
            "input_width_text": self.input_width_text,
            "input_width_image": self.input_width_image,
            "d": self.d,
            "heads": self.heads,
            "d_ff": self.d_ff,
            "d_m1": self.d_m1,
            "classes": self.classes,
            "dropout": self.dropout,
            "activation": self.activation,
            "variant": self.variant,
            "use_biases": self.use_biases,
            "ln_eps": self.ln_eps,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass(frozen=True)
class SampleEmbeddings:
    """One ingested sample: four token sequences plus an optional label."""

    claim_image: ca.TokenSequence
    claim_text: ca.TokenSequence
    doc_image: ca.TokenSequence
    doc_text: ca.TokenSequence
    label: Optional[int] = None
    sample_id: str = ""

    def __post_init__(self):
        for name in ("claim_text", "doc_text"):
            if getattr(self, name).length > MAX_TEXT_TOKENS:
                raise InvalidInputError(
                    f"{name} has {getattr(self, name).length} tokens "
                    f"(limit {MAX_TEXT_TOKENS})"
                )
        if self.label is not None and not 0 <= self.label < NUM_CLASSES:
            raise InvalidInputError(f"label {self.label} out of range 0-4")

    def sequences(self) -> Dict[str, ca.TokenSequence]:
        return {
            "ci": self.claim_image,
            "ct": self.claim_text,
            "di": self.doc_image,
            "dt": self.doc_text,
        }


@dataclass
class ModelParams:
    """Every learnable weight, plus a flat name -> node registry whose
    iteration order is the serialization order."""

    config: ModelConfig
    emb_w: Dict[str, Node]
    emb_b: Dict[str, Optional[Node]]
    coatt: Dict[str, ca.CoAttentionParams]
    cls_wz: Node
    cls_bz: Optional[Node]
    cls_wm1: Node
    cls_bm1: Optional[Node]
    cls_wm2: Node
    cls_bm2: Optional[Node]
    named: Dict[str, Node] = field(default_factory=dict)

    def nodes(self) -> List[Node]:
        return list(self.named.values())

    def zero_grads(self) -> None:
        ad.zero_grads(self.named.values())

    def parameter_count(self) -> int:
        return sum(n.value.size for n in self.named.values())


def _glorot(rng, fan_in, fan_out, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def init_model_params(config: ModelConfig, seed: int = 0,
                      rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Fresh parameters: Glorot-uniform affine maps, unit/zero LayerNorms.

    All four co-attention pairings are allocated regardless of variant so a
    variant switch never changes which names exist; reduced variants simply
    leave the unused pairings untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    dtype = config.dtype
    d = config.d

    named: Dict[str, Node] = {}

    def register(name: str, node: Node) -> Node:
        node.name = name
        named[name] = node
        return node

    emb_w, emb_b = {}, {}
    for key, source in zip(_SOURCE_KEYS, SOURCES):
        width = config.input_width_image if "image" in source else config.input_width_text
        emb_w[key] = register(f"emb.{key}.w", ad.parameter(_glorot(rng, width, d, dtype)))
        if config.use_biases:
            emb_b[key] = register(
                f"emb.{key}.b", ad.parameter(Tensor(np.zeros(d), dtype=dtype))
            )
        else:
            emb_b[key] = None

    coatt = {}
    for name, _, _ in PAIRINGS:
        params = ca.init_coattention(d, config.d_ff, rng, dtype)
        for pname, node in params.named(f"coatt.{name}"):
            register(pname, node)
        coatt[name] = params

    zw = config.classifier_input_width
    cls_wz = register("cls.wz", ad.parameter(_glorot(rng, zw, d, dtype)))
    cls_wm1 = register("cls.wm1", ad.parameter(_glorot(rng, d, config.d_m1, dtype)))
    cls_wm2 = register("cls.wm2", ad.parameter(_glorot(rng, config.d_m1, NUM_CLASSES, dtype)))
    cls_bz = cls_bm1 = cls_bm2 = None
    if config.use_biases:
        cls_bz = register("cls.bz", ad.parameter(Tensor(np.zeros(d), dtype=dtype)))
        cls_bm1 = register(
            "cls.bm1", ad.parameter(Tensor(np.zeros(config.d_m1), dtype=dtype))
        )
        cls_bm2 = register(
            "cls.bm2", ad.parameter(Tensor(np.zeros(NUM_CLASSES), dtype=dtype))
        )

    return ModelParams(
        config=config, emb_w=emb_w, emb_b=emb_b, coatt=coatt,
        cls_wz=cls_wz, cls_bz=cls_bz, cls_wm1=cls_wm1, cls_bm1=cls_bm1,
        cls_wm2=cls_wm2, cls_bm2=cls_bm2, named=named,
    )


def _affine(x: Node, w: Node, b: Optional[Node]) -> Node:
    out = ad.matmul(x, w)
    return ad.add(out, b) if b is not None else out


def embed_sources(sample: SampleEmbeddings,
                  params: ModelParams) -> Dict[str, ca.TokenSequence]:
    """Project each source to width d: activation(X W + b) per token."""
    config = params.config
    dtype = config.dtype
    out = {}
    for key, source in zip(_SOURCE_KEYS, SOURCES):
        seq = sample.sequences()[key]
        expected = config.input_width_image if "image" in source else config.input_width_text
        if seq.width != expected:
            raise DimensionError(
                f"{source} width {seq.width} does not match configured {expected}"
            )
        x = ad.constant(seq.tokens.value.astype(dtype))
        e = ad.activation(_affine(x, params.emb_w[key], params.emb_b[key]),
                          config.activation)
        # keep padded rows exactly zero (the bias term would leak into them)
        mask_col = ad.constant(Tensor(seq.mask.astype(dtype)[:, None]))
        out[key] = ca.TokenSequence(ad.mul(e, mask_col), seq.mask)
    return out


def active_pairings(config: ModelConfig):
    if config.variant == "no_coatt":
        return ()
    if config.variant == "same_modality_only":
        return PAIRINGS[:2]
    return PAIRINGS


def fuse(embedded: Dict[str, ca.TokenSequence], params: ModelParams,
         mode: str = "eval",
         rng: Optional[np.random.Generator] = None) -> List[Tuple[str, ca.TokenSequence]]:
    """Run the variant's co-attention pairings; returns named fused
    sequences in classifier concatenation order (query side first)."""
    config = params.config
    fused: List[Tuple[str, ca.TokenSequence]] = []
    for name, qk, kk in active_pairings(config):
        h_q, h_k = ca.co_attend(
            embedded[qk], embedded[kk], params.coatt[name],
            heads=config.heads, dropout_rate=config.dropout, mode=mode, rng=rng,
            activation=config.activation, ln_eps=config.ln_eps,
        )
        fused.append((qk + kk, h_q))
        fused.append((kk + qk, h_k))
    return fused


def aggregate(seq: ca.TokenSequence) -> Node:
    """Mean over valid tokens only, as a 1-by-d row."""
    count = seq.valid_count
    if count == 0:
        raise InvalidInputError("aggregate: no valid tokens")
    dtype = seq.tokens.value.dtype
    weights = (seq.mask.astype(dtype) / dtype.type(count))[None, :]
    return ad.matmul(ad.constant(Tensor(weights)), seq.tokens)


def classify(parts: List[Node], params: ModelParams, mode: str = "eval",
             rng: Optional[np.random.Generator] = None) -> Node:
    """Two hidden activations then softmax over the 5 classes."""
    config = params.config
    z = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    if z.value.shape[1] != config.classifier_input_width:
        raise DimensionError(
            f"classifier input width {z.value.shape[1]} vs expected "
            f"{config.classifier_input_width} for variant {config.variant}"
        )
    training = mode == "train"
    act = config.activation
    z1 = ad.activation(_affine(z, params.cls_wz, params.cls_bz), act)
    z1 = ad.dropout(z1, config.dropout, training, rng)
    z2 = ad.activation(_affine(z1, params.cls_wm1, params.cls_bm1), act)
    z2 = ad.dropout(z2, config.dropout, training, rng)
    return ad.softmax_rows(_affine(z2, params.cls_wm2, params.cls_bm2))


def forward(sample: SampleEmbeddings, params: ModelParams, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> Node:
    """Full pass: embed, fuse, pool, classify. Returns a 1x5 probability row.

    Eval mode is deterministic; train mode draws dropout masks from rng.
    """
    embedded = embed_sources(sample, params)
    fused = fuse(embedded, params, mode=mode, rng=rng)
    parts = [aggregate(h) for _, h in fused]
    parts += [aggregate(embedded[k]) for k in _SOURCE_KEYS]
    return classify(parts, params, mode=mode, rng=rng)


def forward_probs(sample: SampleEmbeddings, params: ModelParams) -> np.ndarray:
    """Eval-mode probabilities as a plain length-5 vector."""
    return forward(sample, params).value.data[0].copy()
