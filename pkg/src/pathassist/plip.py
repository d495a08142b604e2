"""Pathology language-image pretraining: dual encoder with ITC and ITM objectives."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint
from .exceptions import ConfigurationError, InvalidInputError
from .images import check_image, load_image, random_crop
from .layers import Block, CrossBlock, seeded_init, sincos_2d
from .schedules import ScheduleSpec, make_scheduler
from .tokenizer import PAD, ByteTokenizer, default_tokenizer

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-4


@dataclass
class PlipConfig:
    patch_size: int = 16
    enc_dim: int = 128
    enc_layers: int = 2
    heads: int = 4
    d_proj: int = 64
    temperature: float = 0.07
    max_text_len: int = 100
    vocab_size: int = 512
    crop_size: int = 224
    batch_size: int = 8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if self.crop_size % self.patch_size:
            raise ConfigurationError(
                f"patch_size {self.patch_size} must divide crop_size {self.crop_size}"
            )
        if self.enc_dim % 4 or self.enc_dim % self.heads:
            raise ConfigurationError("enc_dim must be divisible by 4 and by heads")


class VisionTower(nn.Module):
    def __init__(self, cfg: PlipConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.patch_embed = nn.Linear(cfg.patch_size**2 * 3, cfg.enc_dim)
        self.cls = nn.Parameter(torch.zeros(1, cfg.enc_dim))
        self.blocks = nn.ModuleList(Block(cfg.enc_dim, cfg.heads) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(cfg.enc_dim)
        self.proj = nn.Linear(cfg.enc_dim, cfg.d_proj)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` -> hidden states ``(B, 1 + L_v, enc_dim)``; position 0 is CLS."""
        b, h, w, _ = images.shape
        p = self.patch_size
        gh, gw = math.ceil(h / p), math.ceil(w / p)
        x = images.permute(0, 3, 1, 2)
        x = F.pad(x, (0, gw * p - w, 0, gh * p - h))
        x = x.reshape(b, 3, gh, p, gw, p).permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, p * p * 3)
        x = self.patch_embed(x)
        x = x + sincos_2d(gh, gw, x.shape[-1], x.dtype)
        x = torch.cat([self.cls.expand(b, -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class TextTower(nn.Module):
    def __init__(self, cfg: PlipConfig):
        super().__init__()
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.enc_dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_text_len + 1, cfg.enc_dim))
        self.cls = nn.Parameter(torch.zeros(1, cfg.enc_dim))
        self.blocks = nn.ModuleList(Block(cfg.enc_dim, cfg.heads) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(cfg.enc_dim)
        self.proj = nn.Linear(cfg.enc_dim, cfg.d_proj)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """``(B, L)`` ids -> ``(B, 1 + L, enc_dim)``; position 0 is CLS."""
        b, n = ids.shape
        x = torch.cat([self.cls.expand(b, -1, -1), self.tok_emb(ids)], dim=1)
        x = x + self.pos_emb[: n + 1]
        mask = torch.cat([torch.zeros(b, 1, dtype=torch.bool), pad_mask], dim=1)
        for blk in self.blocks:
            x = blk(x, key_padding_mask=mask)
        return self.norm(x)


class MatchHead(nn.Module):
    """Text queries cross-attend to patch tokens; a linear head scores position 0."""

    def __init__(self, cfg: PlipConfig):
        super().__init__()
        self.fusion = CrossBlock(cfg.enc_dim, cfg.heads)
        self.head = nn.Linear(cfg.enc_dim, 1)

    def forward(self, text_hidden, text_pad_mask, patch_tokens):
        fused = self.fusion(text_hidden, patch_tokens)
        return self.head(fused[:, 0]).squeeze(-1)


class PlipModel(nn.Module):
    def __init__(self, cfg: PlipConfig):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionTower(cfg)
        self.text = TextTower(cfg)
        self.itm = MatchHead(cfg)
        seeded_init(self, cfg.seed)
        self.temp = nn.Parameter(torch.tensor(cfg.temperature))

    def group_of(self, key: str) -> str:
        if key.startswith("vision."):
            return "vision_encoder"
        if key.startswith("text."):
            return "text_encoder"
        if key.startswith("itm."):
            return "itm_head"
        if key == "temp":
            return "temperature"
        raise KeyError(key)

    @property
    def tau(self) -> torch.Tensor:
        return self.temp.clamp(0.001, 0.5)

    def encode_images(self, images: torch.Tensor):
        hidden = self.vision(images)
        pooled = F.normalize(self.vision.proj(hidden[:, 0]), dim=-1)
        return hidden[:, 1:], pooled

    def encode_texts(self, ids: torch.Tensor, pad_mask: torch.Tensor):
        hidden = self.text(ids, pad_mask)
        pooled = F.normalize(self.text.proj(hidden[:, 0]), dim=-1)
        return hidden, pooled


def _image_tensor(image, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(image), dtype=dtype)


def encode_image(model: PlipModel, image) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch tokens ``(L_v, enc_dim)`` and a unit-norm pooled embedding for one image.

    Images are zero-padded on the bottom/right to a multiple of the patch size,
    so ``L_v = ceil(H/p) * ceil(W/p)``.
    """
    arr = check_image(image, min_size=model.cfg.patch_size)
    dtype = next(model.parameters()).dtype
    patches, pooled = model.encode_images(_image_tensor(arr, dtype)[None])
    return patches[0], pooled[0]


def encode_text(model: PlipModel, ids: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = list(ids)
    cfg = model.cfg
    if not ids:
        raise InvalidInputError("cannot encode an empty token sequence")
    if len(ids) > cfg.max_text_len:
        raise InvalidInputError(f"sequence of {len(ids)} tokens exceeds max_text_len={cfg.max_text_len}")
    if min(ids) < 0 or max(ids) >= cfg.vocab_size:
        raise InvalidInputError("token id outside the vocabulary")
    t = torch.tensor([ids], dtype=torch.long)
    hidden, pooled = model.encode_texts(t, torch.zeros_like(t, dtype=torch.bool))
    return hidden[0, 1:], pooled[0]


def _check_unit_rows(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=-1)
    if torch.any((norms - 1).abs() > UNIT_NORM_TOL):
        raise InvalidInputError(f"{name} rows must be unit norm (max deviation {float((norms - 1).abs().max()):.2e})")


def itc_loss(img_emb: torch.Tensor, txt_emb: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix ``img @ txt.T / tau``."""
    if img_emb.ndim != 2 or img_emb.shape != txt_emb.shape:
        raise InvalidInputError(f"batch shapes differ: {tuple(img_emb.shape)} vs {tuple(txt_emb.shape)}")
    if img_emb.shape[0] < 1:
        raise InvalidInputError("empty batch")
    if float(tau.detach() if torch.is_tensor(tau) else tau) <= 0:
        raise InvalidInputError("temperature must be > 0")
    _check_unit_rows(img_emb, "img_emb")
    _check_unit_rows(txt_emb, "txt_emb")
    logits = img_emb @ txt_emb.T / tau
    targets = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def _masked_softmax_rows(sim: np.ndarray) -> np.ndarray:
    s = sim.astype(np.float64).copy()
    np.fill_diagonal(s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    w = np.exp(s)
    return w / w.sum(axis=1, keepdims=True)


def sample_hard_negatives(sim, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one in-batch negative per row (text) and per column (image).

    Row ``i`` of ``sim`` scores image ``i`` against every text; the negative text
    for image ``i`` is drawn from the softmax over its off-diagonal entries, and
    the negative image for text ``j`` likewise from column ``j``.
    """
    sim = np.asarray(sim.detach().cpu() if isinstance(sim, torch.Tensor) else sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise InvalidInputError(f"expected a square similarity matrix, got {sim.shape}")
    n = sim.shape[0]
    if n < 2:
        raise InvalidInputError("hard negatives need a batch of at least 2")
    p_text = _masked_softmax_rows(sim)
    p_img = _masked_softmax_rows(sim.T)
    neg_text = np.array([rng.choice(n, p=p_text[i]) for i in range(n)], dtype=np.int64)
    neg_img = np.array([rng.choice(n, p=p_img[j]) for j in range(n)], dtype=np.int64)
    return neg_text, neg_img


def itm_loss(match_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if match_logits.ndim != 1 or match_logits.shape != labels.shape:
        raise InvalidInputError("logits and labels must be 1-D and the same length")
    if match_logits.shape[0] == 0 or match_logits.shape[0] % 3:
        raise InvalidInputError("ITM batch must hold N positives and 2N negatives")
    if not torch.all((labels == 0) | (labels == 1)):
        raise InvalidInputError("ITM labels must be 0 or 1")
    if not torch.all(torch.isfinite(match_logits)):
        raise InvalidInputError("ITM logits must be finite")
    return F.binary_cross_entropy_with_logits(match_logits, labels.to(match_logits.dtype))


def pad_batch(seqs: list[list[int]], pad_id: int = PAD) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    mask = torch.arange(n)[None, :] >= torch.tensor([len(s) for s in seqs])[:, None]
    return ids, mask


def plip_step_losses(model: PlipModel, images: torch.Tensor, ids, pad_mask, rng):
    patches, img_feat = model.encode_images(images)
    txt_hidden, txt_feat = model.encode_texts(ids, pad_mask)
    tau = model.tau
    loss_itc = itc_loss(img_feat, txt_feat, tau)
    with torch.no_grad():
        sim = img_feat @ txt_feat.T / tau
    neg_text, neg_img = sample_hard_negatives(sim, rng)
    nt, ni = torch.from_numpy(neg_text), torch.from_numpy(neg_img)
    logits = torch.cat([
        model.itm(txt_hidden, pad_mask, patches),
        model.itm(txt_hidden[nt], pad_mask[nt], patches),
        model.itm(txt_hidden, pad_mask, patches[ni]),
    ])
    n = images.shape[0]
    labels = torch.cat([torch.ones(n), torch.zeros(2 * n)])
    return loss_itc, itm_loss(logits, labels)


def train_plip(
    records,
    cfg: PlipConfig,
    sched: ScheduleSpec,
    *,
    image_loader: Callable = load_image,
    tokenizer: ByteTokenizer | None = None,
) -> Checkpoint:
    """Train the dual encoder for ``sched.total_steps`` updates on image-caption records.

    Each step draws a shuffled batch, random-crops images to ``cfg.crop_size``,
    and minimises ``itc_loss + itm_loss`` with AdamW.
    """
    records = list(records)
    if not records:
        raise InvalidInputError("empty manifest")
    n = min(cfg.batch_size, len(records))
    if n < 2:
        raise ConfigurationError("ITM hard negatives need batches of at least 2 pairs")
    tok = tokenizer or default_tokenizer()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    model = PlipModel(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=1.0, weight_decay=cfg.weight_decay)
    scheduler = make_scheduler(opt, [sched])

    texts = [tok.truncate(tok.encode(r.caption), cfg.max_text_len) for r in records]
    images = {}
    order: list[int] = []
    history = []
    model.train()
    for step in range(sched.total_steps):
        if len(order) < n:
            order.extend(rng.permutation(len(records)).tolist())
        batch, order = order[:n], order[n:]
        crops = []
        for i in batch:
            if i not in images:
                images[i] = image_loader(records[i].image_ref)
            crops.append(random_crop(images[i], cfg.crop_size, rng))
        x = torch.as_tensor(np.stack(crops), dtype=torch.float32)
        ids, mask = pad_batch([texts[i] or [PAD] for i in batch])
        loss_itc, loss_itm = plip_step_losses(model, x, ids, mask, rng)
        loss = loss_itc + loss_itm
        opt.zero_grad()
        loss.backward()
        opt.step()
        scheduler.step()
        with torch.no_grad():
            model.temp.clamp_(0.001, 0.5)
        history.append([float(loss_itc.detach()), float(loss_itm.detach())])
        if step % 50 == 0:
            log.info("plip step %d itc=%.4f itm=%.4f", step, history[-1][0], history[-1][1])

    model.eval()
    return Checkpoint.from_model(
        model,
        kind="plip",
        config=asdict(cfg),
        schedule=sched.to_dict(),
        seed=cfg.seed,
        steps=sched.total_steps,
        history=history,
    )


def load_plip(ckpt: Checkpoint) -> PlipModel:
    model = PlipModel(PlipConfig(**ckpt.metadata["config"]))
    ckpt.load_into(model)
    return model.eval()
