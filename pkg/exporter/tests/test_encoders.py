import os

import numpy as np

from precofact_exporter.encoders import encode_image_batch, encode_text_batch
from precofact_exporter.preprocess import preprocess_image


def test_image_token_count_is_197(stack, image_dir):
    # 224/16 patches per side -> 196 patch tokens + 1 class token
    pixels = np.stack([preprocess_image(os.path.join(image_dir, "img0.png"))])
    states = encode_image_batch(stack, pixels)
    assert states[0].shape == (197, stack.image_width)


def test_image_batch_matches_single(stack, image_dir):
    a = preprocess_image(os.path.join(image_dir, "img1.png"))
    b = preprocess_image(os.path.join(image_dir, "img2.png"))
    batched = encode_image_batch(stack, np.stack([a, b]))
    single = encode_image_batch(stack, np.stack([b]))
    np.testing.assert_allclose(batched[1], single[0], atol=1e-5)


def test_text_includes_special_tokens(stack):
    states = encode_text_batch(stack, ["the cat"])
    # [CLS] the cat [SEP]
    assert states[0].shape == (4, stack.text_width)


def test_long_text_truncated_to_512(stack):
    text = " ".join(["cat"] * 2000)
    states = encode_text_batch(stack, [text])
    assert states[0].shape[0] == 512


def test_empty_text_yields_special_only_sequence(stack):
    states = encode_text_batch(stack, ["   \n\t  "])
    assert states[0].shape[0] == 2  # [CLS] [SEP]


def test_padding_locations_sliced_away(stack):
    states = encode_text_batch(stack, ["the cat", "the cat sat on a dog mat"])
    assert states[0].shape[0] < states[1].shape[0]
    alone = encode_text_batch(stack, ["the cat"])
    np.testing.assert_allclose(states[0], alone[0], atol=1e-5)


def test_deterministic(stack, image_dir):
    text = ["news photo of a dog"]
    a = encode_text_batch(stack, text)[0]
    b = encode_text_batch(stack, text)[0]
    np.testing.assert_array_equal(a, b)
    px = np.stack([preprocess_image(os.path.join(image_dir, "img4.png"))])
    np.testing.assert_array_equal(
        encode_image_batch(stack, px)[0], encode_image_batch(stack, px)[0]
    )
