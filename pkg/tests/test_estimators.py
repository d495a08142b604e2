import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pathassist.estimators import PlipEncoder, VisualAssistant
from pathassist.exceptions import InvalidInputError
from pathassist.synthetic import caption_for, make_closed_vqa, tissue_image


def _images(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return [tissue_image(i % 4, rng, 32, 32) for i in range(n)], [caption_for(i % 4, rng) for i in range(n)]


def test_plip_encoder_fit_transform():
    imgs, caps = _images()
    enc = PlipEncoder(enc_dim=32, d_proj=16, enc_layers=1, patch_size=8, batch_size=4, steps=4)
    emb = enc.fit(imgs, caps).transform(imgs)
    assert emb.shape == (6, 16)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)
    assert enc.transform_text(caps[:2]).shape == (2, 16)
    assert clone(enc).get_params() == enc.get_params()


def test_plip_encoder_validation():
    enc = PlipEncoder()
    with pytest.raises(NotFittedError):
        enc.transform([np.zeros((32, 32, 3), np.float32)])
    imgs, caps = _images(3)
    with pytest.raises(InvalidInputError):
        enc.fit(imgs, caps[:2])
    with pytest.raises(InvalidInputError):
        enc.fit(imgs, "one caption")


def test_visual_assistant_fit_predict_score(tmp_path):
    recs = make_closed_vqa(tmp_path, 4, seed=0, base=32, dataset="ColonPath")
    va = VisualAssistant(tile_size=32, num_queries=4, d_model=32, n_layers=1, steps=3, micro_batch=2)
    with pytest.raises(NotFittedError):
        va.predict(recs)
    va.fit(recs)
    preds = va.predict(recs)
    assert len(preds) == 4 and all(isinstance(p, str) for p in preds)
    assert 0.0 <= va.score(recs) <= 1.0
    assert va.report(recs).counts["closed"] == 4
    assert set(va.get_params()) >= {"steps", "lr", "seed", "encoder"}
