import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import tiny_plip
from oracles import bce_oracle, central_diff, itc_oracle
from pathassist.checkpoint import Checkpoint
from pathassist.data import PairRecord
from pathassist.exceptions import ConfigurationError, InvalidInputError
from pathassist.plip import (PlipModel, encode_image, encode_text, itc_loss, itm_loss, load_plip,
                             plip_step_losses, sample_hard_negatives, train_plip)
from pathassist.schedules import ScheduleSpec
from pathassist.synthetic import TISSUE_STYLES, caption_for, tissue_image


def _unit(x):
    return F.normalize(torch.as_tensor(x, dtype=torch.float64), dim=-1)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_itc_uniform_embeddings_is_log_n(n):
    e = _unit(torch.ones(n, 6))
    assert abs(itc_loss(e, e, 0.07).item() - math.log(n)) < 1e-10


def test_itc_matches_float64_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(2, 9))
        img, txt = _unit(rng.normal(size=(n, 5))), _unit(rng.normal(size=(n, 5)))
        tau = float(rng.uniform(0.01, 0.5))
        assert itc_loss(img, txt, tau).item() == pytest.approx(itc_oracle(img.numpy(), txt.numpy(), tau), abs=1e-12)


def test_itc_gradient_matches_finite_differences(rng):
    x0, y0 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))

    def f(x):
        return itc_loss(_unit(x), _unit(y0), 0.1).item()

    x = torch.tensor(x0, requires_grad=True)
    itc_loss(F.normalize(x, dim=-1), _unit(y0), 0.1).backward()
    fd = central_diff(f, x0.copy())
    rel = np.abs(x.grad.numpy() - fd).max() / np.abs(fd).max()
    assert rel < 1e-4


def test_itc_rejects_bad_inputs():
    e = _unit(torch.ones(3, 4))
    with pytest.raises(InvalidInputError):
        itc_loss(e, e[:2], 0.07)
    with pytest.raises(InvalidInputError):
        itc_loss(e, e, 0.0)
    with pytest.raises(InvalidInputError):
        itc_loss(e * 2, e, 0.07)


def test_itm_loss_matches_oracle_and_gradient(rng):
    z0 = rng.normal(size=9) * 3
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=np.float64)
    z = torch.tensor(z0, requires_grad=True)
    loss = itm_loss(z, torch.tensor(y))
    assert loss.item() == pytest.approx(bce_oracle(z0, y), abs=1e-12)
    loss.backward()
    fd = central_diff(lambda v: itm_loss(torch.tensor(v), torch.tensor(y)).item(), z0.copy())
    assert np.abs(z.grad.numpy() - fd).max() / np.abs(fd).max() < 1e-4


def test_itm_loss_validation():
    with pytest.raises(InvalidInputError):
        itm_loss(torch.zeros(4), torch.zeros(4))
    with pytest.raises(InvalidInputError):
        itm_loss(torch.zeros(3), torch.tensor([1.0, 0.5, 0.0]))


def test_hard_negative_frequencies_follow_softmax():
    sim = np.array([[5.0, 1.0, 0.0, -1.0], [0.5, 4.0, 1.5, 0.0], [2.0, 0.0, 3.0, 1.0], [0.0, 0.3, 0.6, 2.0]])
    rng = np.random.default_rng(1)
    draws = 10_000
    counts_t = np.zeros((4, 4))
    counts_i = np.zeros((4, 4))
    for _ in range(draws):
        nt, ni = sample_hard_negatives(sim, rng)
        counts_t[np.arange(4), nt] += 1
        counts_i[np.arange(4), ni] += 1
    for counts, mat in ((counts_t, sim), (counts_i, sim.T)):
        assert np.all(np.diag(counts) == 0)
        for i in range(4):
            off = [j for j in range(4) if j != i]
            w = np.exp(mat[i, off] - mat[i, off].max())
            expected = w / w.sum()
            assert np.abs(counts[i, off] / draws - expected).max() < 0.01


def test_hard_negatives_need_two_rows(rng):
    with pytest.raises(InvalidInputError):
        sample_hard_negatives(np.zeros((1, 1)), rng)


def test_encode_image_token_count(rng):
    model = PlipModel(tiny_plip())
    for h, w in [(8, 8), (17, 9), (32, 40)]:
        patches, pooled = encode_image(model, rng.uniform(size=(h, w, 3)).astype(np.float32))
        assert patches.shape == (math.ceil(h / 8) * math.ceil(w / 8), 32)
        assert pooled.norm().item() == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(InvalidInputError):
        encode_image(model, np.zeros((4, 20, 3), dtype=np.float32))


def test_encode_text_validation():
    model = PlipModel(tiny_plip())
    hidden, pooled = encode_text(model, [1, 2, 3])
    assert hidden.shape == (3, 32) and pooled.shape == (16,)
    with pytest.raises(InvalidInputError):
        encode_text(model, [])
    with pytest.raises(InvalidInputError):
        encode_text(model, [1] * 101)
    with pytest.raises(InvalidInputError):
        encode_text(model, [600])


def test_step_losses_layout(rng):
    model = PlipModel(tiny_plip())
    images = torch.rand(4, 3, 32, 32)
    ids = torch.randint(0, 256, (4, 7))
    _, loss_itm = plip_step_losses(model, images.permute(0, 2, 3, 1), ids, torch.zeros(4, 7, dtype=torch.bool), rng)
    assert torch.isfinite(loss_itm)


def _pairs(n=8, seed=0):
    rng = np.random.default_rng(seed)
    imgs, recs = {}, []
    for i in range(n):
        label = i % len(TISSUE_STYLES)
        imgs[str(i)] = tissue_image(label, rng, 32, 32)
        recs.append(PairRecord(id=f"p{i}", image_ref=str(i), caption=caption_for(label, rng)))
    return recs, imgs.__getitem__


def test_train_plip_learns_and_round_trips(tmp_path):
    recs, loader = _pairs()
    cfg = tiny_plip(batch_size=4)
    sched = ScheduleSpec("warmup_cosine", 1e-4, 1e-3, 1e-5, 5, 80)
    ckpt = train_plip(recs, cfg, sched, image_loader=loader)
    hist = np.array(ckpt.metadata["history"])
    assert hist[-10:].sum(1).mean() < hist[:10].sum(1).mean()
    assert hist[-10:, 0].mean() < math.log(4)
    ckpt.save(tmp_path / "c")
    back = Checkpoint.load(tmp_path / "c")
    assert back.metadata == ckpt.metadata
    for g in ckpt.groups:
        assert back.group_hash(g) == ckpt.group_hash(g)
    model = load_plip(back)
    assert 0.001 <= model.tau.item() <= 0.5


def test_train_plip_is_deterministic():
    recs, loader = _pairs(4)
    sched = ScheduleSpec("warmup_cosine", 1e-4, 1e-3, 1e-5, 1, 6)
    a = train_plip(recs, tiny_plip(), sched, image_loader=loader)
    b = train_plip(recs, tiny_plip(), sched, image_loader=loader)
    assert {g: a.group_hash(g) for g in a.groups} == {g: b.group_hash(g) for g in b.groups}


def test_train_plip_rejects_degenerate_inputs():
    recs, loader = _pairs(1)
    sched = ScheduleSpec("warmup_cosine", 1e-4, 1e-3, 1e-5, 0, 2)
    with pytest.raises(ConfigurationError):
        train_plip(recs, tiny_plip(), sched, image_loader=loader)
    with pytest.raises(InvalidInputError):
        train_plip([], tiny_plip(), sched, image_loader=loader)
