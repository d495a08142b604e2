import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathassist.data import ZERO_SHOT_DATASETS
from pathassist.exceptions import InvalidInputError
from pathassist.images import check_image, load_image, random_crop, save_image
from pathassist.tokenizer import BOS, EOS, SEP, VOCAB_SIZE, default_tokenizer


@given(st.text(max_size=200))
def test_round_trip(text):
    tok = default_tokenizer()
    ids = tok.encode(text)
    assert all(0 <= i < VOCAB_SIZE for i in ids)
    assert tok.decode(ids) == text


def test_pieces_compress_domain_text():
    tok = default_tokenizer()
    for spec in ZERO_SHOT_DATASETS.values():
        assert len(tok.encode(spec["prompt"])) < len(spec["prompt"].encode()) / 2


def test_prompt_and_answer_framing():
    tok = default_tokenizer()
    p = tok.encode_prompt("Why?")
    assert p[0] == BOS and p[-1] == SEP
    assert tok.encode_answer("A")[-1] == EOS and tok.encode_answer("") == []
    assert tok.decode(p) == "Why?"
    assert tok.truncate(list(range(10)), 4) == [0, 1, 2, 3]


def test_check_image_rules():
    ok = np.zeros((4, 5, 3), dtype=np.float32)
    assert check_image(ok) is not None
    for bad in (np.zeros((4, 5)), np.zeros((4, 5, 3), dtype=np.uint8), ok + 2, ok * np.nan):
        with pytest.raises(InvalidInputError):
            check_image(bad)
    with pytest.raises(InvalidInputError):
        check_image(ok, min_size=8)


def test_png_and_npy_loading(tmp_path, rng):
    img = rng.uniform(size=(6, 7, 3)).astype(np.float32)
    save_image(img, tmp_path / "a.png")
    assert np.abs(load_image(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-7
    np.save(tmp_path / "b.npy", img)
    assert np.array_equal(load_image(tmp_path / "b.npy"), img)


def test_random_crop_sizes(rng):
    assert random_crop(np.zeros((50, 40, 3), np.float32), 32, rng).shape == (32, 32, 3)
    assert random_crop(np.zeros((10, 40, 3), np.float32), 32, rng).shape == (32, 32, 3)
