"""Deterministic synthetic corpora in the real manifests' schemas.

Tissue images are pink backgrounds with purple "nuclei" whose colour, size and
density depend on the class, so a frozen random encoder still separates them.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import SOURCES, PairRecord, VQARecord, ZERO_SHOT_DATASETS, write_jsonl
from .images import save_image

# background rgb, nucleus rgb, nuclei count per 64x64, nucleus radius
TISSUE_STYLES = [
    ((0.96, 0.84, 0.88), (0.55, 0.35, 0.70), 6, 2.0),
    ((0.90, 0.72, 0.84), (0.40, 0.25, 0.65), 14, 3.0),
    ((0.82, 0.62, 0.80), (0.30, 0.15, 0.55), 24, 3.5),
    ((0.70, 0.45, 0.66), (0.18, 0.08, 0.40), 40, 4.5),
]
TISSUE_WORDS = ["normal", "benign", "in situ", "invasive"]
ORGANS = ["breast", "colon", "oral", "liver", "skin", "kidney"]
FINDINGS = [
    "scattered small round nuclei within pink stroma",
    "glands lined by regular epithelial cells",
    "dense clusters of atypical cells with dark nuclei",
    "irregular nests of tumor cells infiltrating the stroma",
    "mild inflammation with lymphocytes around blood vessels",
    "fibrous connective tissue with few cells",
]


def tissue_image(label: int, rng: np.random.Generator, height: int = 64, width: int = 64) -> np.ndarray:
    bg, nuc, density, radius = TISSUE_STYLES[label % len(TISSUE_STYLES)]
    img = np.empty((height, width, 3), dtype=np.float32)
    img[:] = bg
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    n = max(1, int(round(density * height * width / 4096)))
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(n):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = radius * rng.uniform(0.8, 1.2)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = nuc
    return np.clip(img, 0.0, 1.0)


def nonpath_image(rng: np.random.Generator, height: int = 64, width: int = 64) -> np.ndarray:
    """Grey radiograph-like gradient: no pink, no nuclei."""
    ramp = np.linspace(0.1, 0.9, width, dtype=np.float32)[None, :].repeat(height, 0)
    grey = np.clip(ramp + rng.normal(0.0, 0.05, size=(height, width)).astype(np.float32), 0, 1)
    return np.repeat(grey[:, :, None], 3, axis=2)


def caption_for(label: int, rng: np.random.Generator, long: bool = True, organism: str = "human") -> str:
    organ = ORGANS[int(rng.integers(len(ORGANS)))]
    finding = FINDINGS[int(rng.integers(len(FINDINGS)))]
    head = f"H&E stained section of {organism} {organ} tissue, {TISSUE_WORDS[label]} pattern"
    if not long:
        return head + "."
    return (f"{head}, showing {finding}. The image is a microscopic view at high power "
            f"with features consistent with {TISSUE_WORDS[label]} {organ} pathology.")


def _sizes(rng: np.random.Generator, base: int) -> tuple[int, int]:
    shapes = [(base, base), (base, 2 * base), (2 * base, base), (base + base // 2, base)]
    return shapes[int(rng.integers(len(shapes)))]


def make_pair_sources(out_dir: str | Path, counts: dict[str, int], seed: int = 0, base: int = 64,
                      nonpath_rate: float = 0.15, nonhuman_rate: float = 0.15, short_rate: float = 0.2):
    """Write PNG images and return ``{source: [PairRecord]}`` plus the ground-truth labels.

    Non-pathology images get ids tagged ``xray_``; non-human captions mention
    murine/canine tissue. ``labels[id]`` records which of these (if any) applies.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sources, labels = {}, {}
    for source, n in counts.items():
        if source not in SOURCES:
            raise ValueError(f"unknown source {source}")
        recs = []
        for i in range(n):
            u = rng.uniform()
            label = int(rng.integers(len(TISSUE_STYLES)))
            h, w = _sizes(rng, base)
            if u < nonpath_rate:
                rid, kind = f"xray_{source}_{i:04d}", "nonpath"
                img = nonpath_image(rng, h, w)
                cap = caption_for(label, rng)
            elif u < nonpath_rate + nonhuman_rate:
                rid, kind = f"{source}_{i:04d}", "nonhuman"
                img = tissue_image(label, rng, h, w)
                cap = caption_for(label, rng, organism=["murine", "canine", "mouse"][i % 3])
            else:
                rid = f"{source}_{i:04d}"
                short = rng.uniform() < short_rate
                kind = "short" if short else "keep"
                img = tissue_image(label, rng, h, w)
                cap = caption_for(label, rng, long=not short)
            path = img_dir / f"{rid}.png"
            save_image(img, path)
            recs.append(PairRecord(id=rid, image_ref=str(path.resolve()), caption=cap, source=source))
            labels[rid] = kind
        sources[source] = recs
    return sources, labels


def make_closed_vqa(out_dir: str | Path, n: int, seed: int = 0, base: int = 64, dataset: str = "BACH",
                    prefix: str = "vqa", varied_sizes: bool = False) -> list[VQARecord]:
    """Classification-as-VQA items with letter answers (one class per tissue style)."""
    spec = ZERO_SHOT_DATASETS[dataset]
    letters = list(spec["classes"])
    out_dir = Path(out_dir) / "images"
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        label = i % len(letters)
        style = label if len(letters) == 4 else (0 if label == 0 else 3)
        h, w = _sizes(rng, base) if varied_sizes else (base, base)
        path = out_dir / f"{prefix}_{i:04d}.png"
        save_image(tissue_image(style, rng, h, w), path)
        recs.append(VQARecord(id=f"{prefix}_{i:04d}", image_ref=str(path.resolve()), question=spec["prompt"],
                              answer=letters[label], kind="closed", choices=dict(spec["classes"])))
    return recs


def make_yes_no_vqa(out_dir: str | Path, n: int, seed: int = 0, base: int = 64, prefix: str = "yn"):
    """PathVQA-style closed yes/no items (letterless gold) plus open items."""
    out_dir = Path(out_dir) / "images"
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        label = int(rng.integers(len(TISSUE_STYLES)))
        path = out_dir / f"{prefix}_{i:04d}.png"
        save_image(tissue_image(label, rng, base, base), path)
        if i % 2 == 0:
            ans = "yes" if label == 3 else "no"
            recs.append(VQARecord(id=f"{prefix}_{i:04d}", image_ref=str(path.resolve()),
                                  question="Is there invasive cancer in this tissue?", answer=ans,
                                  kind="closed", choices={"A": "yes", "B": "no"}))
        else:
            recs.append(VQARecord(id=f"{prefix}_{i:04d}", image_ref=str(path.resolve()),
                                  question="What pattern does this tissue show?",
                                  answer=f"{TISSUE_WORDS[label]} pattern", kind="open"))
    return recs


def make_classification_set(out_dir: str | Path, name: str, n: int, seed: int = 0, base: int = 64) -> dict:
    """A zero-shot dataset spec (``name`` + labelled images) for classification_to_vqa."""
    classes = ZERO_SHOT_DATASETS[name]["classes"]
    letters = list(classes)
    img_dir = Path(out_dir) / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n):
        label = i % len(letters)
        style = label if len(letters) == 4 else (0 if label == 0 else 3)
        path = img_dir / f"{name.lower()}_{i:04d}.png"
        save_image(tissue_image(style, rng, base, base), path)
        images.append({"id": f"{i:04d}", "image_ref": str(path.resolve()), "label": classes[letters[label]]})
    return {"name": name, "images": images}


def write_desk_bundle(out_dir: str | Path, seed: int = 0) -> dict[str, Path]:
    """Everything a desk-profile run of the full pipeline needs, with stage configs."""
    out = Path(out_dir)
    raw = out / "raw"
    sources, _ = make_pair_sources(raw, {"quilt": 24, "pmc_oa": 16, "pubmedvision": 8}, seed=seed)
    for name, recs in sources.items():
        write_jsonl(raw / f"{name}.jsonl", recs)
    vqa = out / "vqa"
    pathvqa = make_yes_no_vqa(vqa, 12, seed=seed + 1, prefix="pathvqa")
    pmc = make_closed_vqa(vqa, 12, seed=seed + 2, prefix="pmc", varied_sizes=True)
    test = make_yes_no_vqa(vqa, 6, seed=seed + 3, prefix="test_yn") + make_closed_vqa(
        vqa, 6, seed=seed + 4, prefix="test_mc")
    write_jsonl(vqa / "pathvqa_train.jsonl", pathvqa)
    write_jsonl(vqa / "pmc_vqa_train.jsonl", pmc)
    write_jsonl(vqa / "test.jsonl", test)
    zs = out / "zeroshot"
    zs.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(("BACH", "OSCC", "ColonPath")):
        spec = make_classification_set(zs, name, 8, seed=seed + 10 + i)
        (zs / f"{name.lower()}.json").write_text(json.dumps(spec, indent=1) + "\n", encoding="utf-8")

    # configs live in out/configs and reference everything relative to it
    cfg_dir = out / "configs"
    raw, vqa, zs, runs = (Path("..") / d for d in ("raw", "vqa", "zeroshot", "runs"))
    cfgs = {
        "clean": {"sources": {k: str(raw / f"{k}.jsonl") for k in sorted(sources)}, "judged_sources": ["quilt", "pmc_oa"],
                  "min_words": 20, "judge": {"kind": "mock"}},
        "train-plip": {"manifest": str(runs / "clean" / "pcaption_stage1.jsonl"), "epochs": 3},
        "align": {"plip_checkpoint": str(runs / "train-plip" / "checkpoint"),
                  "manifest": str(runs / "clean" / "pcaption_stage2.jsonl"), "steps": 12},
        "finetune": {"checkpoint": str(runs / "align" / "checkpoint"),
                     "pathvqa": str(vqa / "pathvqa_train.jsonl"), "pmc_vqa": str(vqa / "pmc_vqa_train.jsonl"),
                     "steps": 120},
        "eval": {"checkpoint": str(runs / "finetune" / "checkpoint"), "test": str(vqa / "test.jsonl"),
                 "max_new_tokens": 12},
        "zeroshot": {"checkpoint": str(runs / "finetune" / "checkpoint"),
                     "datasets": [str(zs / f"{n.lower()}.json") for n in ("BACH", "OSCC", "ColonPath")],
                     "max_new_tokens": 8},
    }
    paths = {}
    cfg_dir.mkdir(parents=True, exist_ok=True)
    for name, cfg in cfgs.items():
        p = cfg_dir / f"{name}.json"
        p.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths[name] = p
    return paths
