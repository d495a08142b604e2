import numpy as np
import pytest
import torch

from conftest import tiny_vlm_config
from pathassist.checkpoint import Checkpoint, group_hashes
from pathassist.data import VQARecord
from pathassist.exceptions import ConfigurationError, InvalidInputError
from pathassist.schedules import ScheduleSpec
from pathassist.synthetic import tissue_image
from pathassist.vlm import StageConfig, VLMConfig, build_vlm, generate, generate_ids, load_vlm, train_stage


def _records(n=4, seed=0):
    rng = np.random.default_rng(seed)
    images = {f"img{i}": tissue_image(i % 4, rng, 32, 32) for i in range(n)}
    recs = [VQARecord(id=f"q{i}", image_ref=f"img{i}", question="Describe the tissue.",
                      answer=["normal", "benign", "in situ", "invasive"][i % 4], kind="open") for i in range(n)]
    return recs, images.__getitem__


def _stage(stage, steps, lr=3e-3, **kw):
    spec = ScheduleSpec("warmup_cosine", lr / 10, lr, lr / 100, max(1, steps // 20), steps)
    return StageConfig(stage=stage, schedules={"connector": spec, "lora": spec}, **kw)


def test_frozen_groups_hash_identical_after_stage2(tiny_vlm):
    recs, loader = _records()
    before = group_hashes(tiny_vlm)
    ckpt = train_stage(tiny_vlm, recs, _stage(2, 20, micro_batch=2), image_loader=loader)
    after = group_hashes(tiny_vlm)
    assert before["vision_encoder"] == after["vision_encoder"]
    assert before["lm_base"] == after["lm_base"]
    assert before["connector"] != after["connector"] and before["lora"] != after["lora"]
    assert ckpt.metadata["steps"] == 20 and ckpt.metadata["stage"] == 2


def test_generate_respects_max_new_tokens(tiny_vlm, rng):
    img = rng.uniform(size=(40, 60, 3)).astype(np.float32)
    assert len(generate_ids(tiny_vlm, img, "What is this?", max_new_tokens=1)) == 1
    assert len(generate_ids(tiny_vlm, img, "What is this?", max_new_tokens=5)) <= 5
    with pytest.raises(InvalidInputError):
        generate_ids(tiny_vlm, img, "What is this?", max_new_tokens=0)


def test_overfits_a_single_pair():
    model = build_vlm(tiny_vlm_config())
    recs, loader = _records(1)
    train_stage(model, recs, _stage(3, 300, lr=3e-3, micro_batch=1, target_loss=0.01), image_loader=loader)
    assert generate(model, loader("img0"), recs[0].prompt_text(), max_new_tokens=10) == recs[0].answer


def test_checkpoint_round_trip(tmp_path, tiny_vlm, rng):
    recs, loader = _records()
    ckpt = train_stage(tiny_vlm, recs, _stage(3, 3, micro_batch=2), image_loader=loader)
    ckpt.save(tmp_path / "ck")
    again = load_vlm(Checkpoint.load(tmp_path / "ck"))
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        assert torch.equal(tiny_vlm.visual_prefix(img), again.visual_prefix(img))
    assert VLMConfig.from_dict(ckpt.metadata["config"]) == tiny_vlm.cfg


def test_cached_prefix_matches_uncached(tiny_vlm, rng):
    tiny_vlm.vision.requires_grad_(False)
    img = rng.uniform(size=(50, 70, 3)).astype(np.float32)
    with torch.no_grad():
        a = tiny_vlm.visual_prefix(img)
        b = tiny_vlm.visual_prefix(img, cache_key="k")
        c = tiny_vlm.visual_prefix(img, cache_key="k")
    assert torch.allclose(a, b, atol=1e-6) and torch.equal(b, c)


def test_stage_config_validation(tiny_vlm):
    recs, loader = _records()
    spec = ScheduleSpec("warmup_cosine", 0.0, 1e-3, 0.0, 0, 5)
    with pytest.raises(ConfigurationError):
        train_stage(tiny_vlm, recs, StageConfig(2, {"connector": spec}), image_loader=loader)
    with pytest.raises(InvalidInputError):
        train_stage(tiny_vlm, [], _stage(2, 2), image_loader=loader)
    with pytest.raises(ConfigurationError):
        StageConfig(2, {}, micro_batch=0)


def test_config_dimension_checks():
    cfg = tiny_vlm_config()
    with pytest.raises(ConfigurationError):
        VLMConfig(plip=cfg.plip, connector=cfg.connector.__class__(enc_dim=64, d_llm=32), lm=cfg.lm)
