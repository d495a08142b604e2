"""Vision encoder + connector + adapted LM, greedy generation and the stage-2/3 trainer."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, group_hashes, group_parameters
from .connector import Connector, ConnectorConfig, connect, encode_tiles, plan_tiles, tile_image
from .exceptions import ConfigurationError, InvalidInputError
from .images import check_image, load_image
from .lm import (LMConfig, LoraConfig, ToyDecoderLM, apply_freeze, assemble, attach_lora,
                 freeze_policy, lm_loss)
from .plip import PlipConfig, VisionTower
from .schedules import ScheduleSpec, make_scheduler
from .tokenizer import EOS, PAD, ByteTokenizer, default_tokenizer

log = logging.getLogger(__name__)


class VisionEncoder(VisionTower):
    def encode_images(self, images: torch.Tensor):
        hidden = self(images)
        return hidden[:, 1:], F.normalize(self.proj(hidden[:, 0]), dim=-1)


@dataclass
class VLMConfig:
    plip: PlipConfig = field(default_factory=PlipConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.connector.enc_dim != self.plip.enc_dim:
            raise ConfigurationError("connector.enc_dim must equal plip.enc_dim")
        if self.connector.d_llm != self.lm.d_model:
            raise ConfigurationError("connector.d_llm must equal lm.d_model")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"]["targets"] = list(self.lora.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VLMConfig":
        lora = dict(d.get("lora", {}))
        if "targets" in lora:
            lora["targets"] = tuple(lora["targets"])
        return cls(plip=PlipConfig(**d.get("plip", {})), connector=ConnectorConfig(**d.get("connector", {})),
                   lm=LMConfig(**d.get("lm", {})), lora=LoraConfig(**lora))


class VisionLanguageModel(nn.Module):
    def __init__(self, cfg: VLMConfig):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionEncoder(cfg.plip)
        self.connector = Connector(cfg.connector)
        self.lm = ToyDecoderLM(cfg.lm)
        attach_lora(self.lm, cfg.lora.targets, cfg.lora.r, cfg.lora.alpha, cfg.lora.seed)
        self._tile_cache: dict = {}

    def group_of(self, key: str) -> str:
        if key.startswith("vision."):
            return "vision_encoder"
        if key.startswith("connector."):
            return "connector"
        if key.startswith("lm."):
            return "lora" if ".lora_" in key else "lm_base"
        raise KeyError(key)

    def load_plip_vision(self, plip_ckpt: Checkpoint) -> None:
        self.vision.load_state_dict(
            {k[len("vision."):]: v for k, v in plip_ckpt.groups["vision_encoder"].items()}
        )

    def _vision_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.vision.parameters())

    def visual_prefix(self, image, cache_key=None) -> torch.Tensor:
        """``(K, d_llm)`` prefix; per-tile features are cached by key while the encoder is frozen."""
        if cache_key is None or not self._vision_frozen():
            return connect(image, self.vision, self.connector)
        if cache_key not in self._tile_cache:
            arr = check_image(image)
            plan = plan_tiles(arr.shape[0], arr.shape[1], self.connector.cfg)
            with torch.no_grad():
                tokens = encode_tiles(self.vision, tile_image(arr, self.connector.cfg))
            self._tile_cache[cache_key] = (plan, tokens)
        plan, tokens = self._tile_cache[cache_key]
        return self.connector(self.connector.build_pool(tokens, plan))

    def clear_cache(self) -> None:
        self._tile_cache.clear()

    def logits(self, prefixes: torch.Tensor, text_ids: torch.Tensor) -> torch.Tensor:
        """``(B, K, D)`` prefixes and ``(B, T)`` ids -> ``(B, K + T, V)`` logits."""
        x = torch.cat([prefixes, self.lm.embed(text_ids)], dim=1)
        return self.lm(x)

    def batch_loss(self, prefixes: list[torch.Tensor], sequences) -> torch.Tensor:
        k = prefixes[0].shape[0]
        t = max(len(s.text_ids) for s in sequences)
        ids = torch.full((len(sequences), t), PAD, dtype=torch.long)
        mask = torch.zeros(len(sequences), t, dtype=torch.bool)
        for i, s in enumerate(sequences):
            ids[i, : len(s.text_ids)] = torch.tensor(s.text_ids)
            mask[i, : len(s.loss_mask)] = torch.tensor(s.loss_mask, dtype=torch.bool)
        logits = self.logits(torch.stack(prefixes), ids)
        # position K-1+j predicts text token j
        return lm_loss(logits[:, k - 1 : k - 1 + t], ids, mask)


def build_vlm(cfg: VLMConfig, plip_ckpt: Checkpoint | None = None) -> VisionLanguageModel:
    model = VisionLanguageModel(cfg)
    if plip_ckpt is not None:
        model.load_plip_vision(plip_ckpt)
    return model


def load_vlm(ckpt: Checkpoint) -> VisionLanguageModel:
    model = VisionLanguageModel(VLMConfig.from_dict(ckpt.metadata["config"]))
    ckpt.load_into(model)
    return model.eval()


@torch.no_grad()
def generate_ids(model: VisionLanguageModel, image, question: str, max_new_tokens: int = 32,
                 tokenizer: ByteTokenizer | None = None, cache_key=None) -> list[int]:
    if max_new_tokens < 1:
        raise InvalidInputError("max_new_tokens must be >= 1")
    tok = tokenizer or default_tokenizer()
    prefix = model.visual_prefix(image, cache_key)
    seq = assemble(prefix, question, "", tok, model.cfg.lm.context)
    ids = list(seq.prompt_ids)
    out: list[int] = []
    k = prefix.shape[0]
    for _ in range(max_new_tokens):
        if k + len(ids) >= model.cfg.lm.context:
            break
        logits = model.logits(prefix[None], torch.tensor([ids]))
        nxt = int(logits[0, -1].argmax())
        out.append(nxt)
        if nxt == EOS:
            break
        ids.append(nxt)
    return out


def generate(model: VisionLanguageModel, image, question: str, max_new_tokens: int = 32,
             tokenizer: ByteTokenizer | None = None, cache_key=None) -> str:
    """Greedy decoding until ``<eos>`` or ``max_new_tokens``; returns the decoded answer."""
    tok = tokenizer or default_tokenizer()
    return tok.decode(generate_ids(model, image, question, max_new_tokens, tok, cache_key))


def accumulated_step(optimizer: torch.optim.Optimizer, micro_batches, loss_fn: Callable) -> float:
    """One optimizer update from gradients summed over ``micro_batches``.

    Each micro-batch loss is divided by the number of micro-batches, so equal
    sized micro-batches reproduce the full-batch mean-loss gradient.
    """
    optimizer.zero_grad()
    total = 0.0
    n = len(micro_batches)
    for mb in micro_batches:
        loss = loss_fn(mb) / n
        loss.backward()
        total += float(loss.detach())
    optimizer.step()
    return total


@dataclass
class StageConfig:
    stage: int
    schedules: dict  # ParamGroup name -> ScheduleSpec
    micro_batch: int = 4
    accum: int = 1
    weight_decay: float = 0.0
    seed: int = 0
    target_loss: float | None = None  # stop early once a full pass averages below this

    def __post_init__(self):
        if self.micro_batch < 1 or self.accum < 1:
            raise ConfigurationError("micro_batch and accum must be >= 1")


def train_stage(model: VisionLanguageModel, records, scfg: StageConfig, *,
                image_loader: Callable = load_image, tokenizer: ByteTokenizer | None = None) -> Checkpoint:
    """Run one alignment (2) or instruction-tuning (3) stage in place on ``model``.

    Applies the stage's freeze plan, builds a fresh AdamW with one param group
    (and schedule) per trainable ParamGroup, and verifies on exit that every
    frozen group is bitwise unchanged.
    """
    records = list(records)
    if not records:
        raise InvalidInputError("empty dataset")
    tok = tokenizer or default_tokenizer()
    plan = freeze_policy(scfg.stage)
    apply_freeze(model, plan)
    missing = plan.trainable - set(scfg.schedules)
    if missing:
        raise ConfigurationError(f"no schedule for trainable groups {sorted(missing)}")
    specs: list[ScheduleSpec] = [scfg.schedules[g] for g in sorted(plan.trainable)]
    total = specs[0].total_steps
    if any(s.total_steps != total for s in specs):
        raise ConfigurationError("all group schedules must share total_steps")

    before = group_hashes(model)
    params = group_parameters(model)
    opt = torch.optim.AdamW([{"params": params[g]} for g in sorted(plan.trainable)],
                            lr=1.0, weight_decay=scfg.weight_decay)
    scheduler = make_scheduler(opt, specs)
    rng = np.random.default_rng(scfg.seed)
    torch.manual_seed(scfg.seed)
    images: dict[int, np.ndarray] = {}
    context = model.cfg.lm.context

    def image(i):
        if i not in images:
            images[i] = image_loader(records[i].image_ref)
        return images[i]

    def micro_loss(batch):
        prefixes = [model.visual_prefix(image(i), cache_key=records[i].image_ref) for i in batch]
        seqs = [assemble(p, records[i].prompt_text(), records[i].answer, tok, context)
                for p, i in zip(prefixes, batch)]
        return model.batch_loss(prefixes, seqs)

    per_step = scfg.micro_batch * scfg.accum
    steps_per_pass = max(1, -(-len(records) // per_step))
    order: list[int] = []
    history: list[float] = []
    model.train()
    steps_done = 0
    for step in range(total):
        if len(order) < per_step:
            order.extend(rng.permutation(len(records)).tolist())
        batch, order = order[:per_step], order[per_step:]
        micro = [batch[j : j + scfg.micro_batch] for j in range(0, per_step, scfg.micro_batch)]
        history.append(accumulated_step(opt, micro, micro_loss))
        scheduler.step()
        steps_done = step + 1
        if step % 25 == 0:
            log.info("stage %d step %d loss=%.4f", scfg.stage, step, history[-1])
        if (scfg.target_loss is not None and len(history) >= steps_per_pass
                and np.mean(history[-steps_per_pass:]) < scfg.target_loss):
            break
    model.eval()
    model.clear_cache()

    after = group_hashes(model)
    changed = [g for g in plan.frozen if g in before and before[g] != after[g]]
    if changed:
        raise RuntimeError(f"frozen groups changed during training: {changed}")
    return Checkpoint.from_model(
        model,
        kind="vlm",
        stage=scfg.stage,
        config=model.cfg.to_dict(),
        schedules={g: s.to_dict() for g, s in scfg.schedules.items()},
        micro_batch=scfg.micro_batch,
        accum=scfg.accum,
        seed=scfg.seed,
        steps=steps_done,
        history=history,
    )
