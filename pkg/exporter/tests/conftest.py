import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")

import numpy as np
import pytest
import torch
from PIL import Image
from transformers import (
    BertConfig,
    BertModel,
    BertTokenizerFast,
    ViTConfig,
    ViTModel,
)

from precofact_exporter.encoders import load_encoders

VOCAB = (
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    + list("abcdefghijklmnopqrstuvwxyz")
    + ["the", "cat", "dog", "news", "claim", "photo", "##s", "##ing"]
)


@pytest.fixture(scope="session")
def text_model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("text-model")
    vocab_file = path / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB))
    tokenizer = BertTokenizerFast(vocab_file=str(vocab_file))
    tokenizer.save_pretrained(path)
    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(VOCAB), hidden_size=24, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=48,
        max_position_embeddings=512,
    )
    BertModel(config).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def image_model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("image-model")
    torch.manual_seed(1)
    config = ViTConfig(
        image_size=224, patch_size=16, hidden_size=32, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=64,
    )
    ViTModel(config).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def stack(text_model_dir, image_model_dir):
    return load_encoders(text_model=text_model_dir, image_model=image_model_dir)


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(2)
    sizes = [(512, 512), (640, 360), (224, 224), (300, 800), (256, 256),
             (1024, 768), (240, 320), (500, 500), (360, 640), (277, 277)]
    for i, (w, h) in enumerate(sizes):
        data = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(data, "RGB").save(path / f"img{i}.png")
    gray = rng.integers(0, 256, size=(300, 300), dtype=np.uint8)
    Image.fromarray(gray, "L").save(path / "gray.png")
    (path / "broken.png").write_text("this is not an image")
    return str(path)


def write_manifest(path, rows, columns, delimiter="\t"):
    lines = [delimiter.join(columns)]
    for row in rows:
        lines.append(delimiter.join(str(row.get(c, "")) for c in columns))
    path.write_text("\n".join(lines) + "\n")
    return str(path)
