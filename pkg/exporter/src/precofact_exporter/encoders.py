"""Frozen encoder pair: a text transformer and a vision transformer.

Both are loaded through the Auto classes, switched to eval mode, and never
updated; the exporter emits their final-layer hidden states token by token
(special tokens included, since the fusion engine attends over full
sequences).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

DEFAULT_TEXT_MODEL = "microsoft/deberta-base"
DEFAULT_IMAGE_MODEL = "facebook/deit-base-patch16-224"
MAX_TEXT_TOKENS = 512


@dataclass
class EncoderStack:
    text_tokenizer: object
    text_model: torch.nn.Module
    image_model: torch.nn.Module
    device: torch.device

    @property
    def text_width(self) -> int:
        return int(self.text_model.config.hidden_size)

    @property
    def image_width(self) -> int:
        return int(self.image_model.config.hidden_size)


def load_encoders(text_model: str = DEFAULT_TEXT_MODEL,
                  image_model: str = DEFAULT_IMAGE_MODEL,
                  device: str = "cpu") -> EncoderStack:
    dev = torch.device(device)
    tokenizer = AutoTokenizer.from_pretrained(text_model)
    text = AutoModel.from_pretrained(text_model).to(dev)
    image = AutoModel.from_pretrained(image_model).to(dev)
    for model in (text, image):
        model.eval()
        model.requires_grad_(False)
    return EncoderStack(
        text_tokenizer=tokenizer, text_model=text, image_model=image, device=dev
    )


def normalize_text(text: str) -> str:
    return " ".join(text.split())


@torch.no_grad()
def encode_text_batch(stack: EncoderStack,
                      texts: Sequence[str]) -> List[np.ndarray]:
    """Final hidden states per text, truncated to 512 tokens, specials kept.

    Empty-after-normalization inputs still produce the special-token-only
    sequence (callers log them); padding positions are sliced away so each
    returned matrix covers real tokens only.
    """
    cleaned = [normalize_text(t) for t in texts]
    encoded = stack.text_tokenizer(
        cleaned, return_tensors="pt", padding=True, truncation=True,
        max_length=MAX_TEXT_TOKENS,
    ).to(stack.device)
    hidden = stack.text_model(**encoded).last_hidden_state
    mask = encoded["attention_mask"]
    out = []
    for i in range(hidden.shape[0]):
        n = int(mask[i].sum())
        out.append(hidden[i, :n].cpu().numpy().astype(np.float32))
    return out


@torch.no_grad()
def encode_image_batch(stack: EncoderStack,
                       pixel_batch: np.ndarray) -> List[np.ndarray]:
    """Final hidden states for a (b, 3, H, W) pixel batch: one
    (class token + patch tokens) x width matrix per image."""
    pixels = torch.from_numpy(np.ascontiguousarray(pixel_batch)).to(stack.device)
    hidden = stack.image_model(pixel_values=pixels).last_hidden_state
    return [hidden[i].cpu().numpy().astype(np.float32)
            for i in range(hidden.shape[0])]
