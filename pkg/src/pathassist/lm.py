"""Toy decoder LM, low-rank adapters, prompt assembly and the staged freeze policy."""
from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, InvalidInputError
from .layers import Block, seeded_init
from .tokenizer import ByteTokenizer

DEFAULT_LORA_TARGETS = ("*.q_proj", "*.k_proj", "*.v_proj", "*.o_proj")


@dataclass
class LMConfig:
    vocab_size: int = 512
    d_model: int = 256
    layers: int = 4
    heads: int = 4
    context: int = 512
    seed: int = 0


@dataclass
class LoraConfig:
    r: int = 16
    alpha: float = 32.0
    targets: tuple[str, ...] = DEFAULT_LORA_TARGETS
    seed: int = 0


class ToyDecoderLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.context, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.heads, causal=True) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        seeded_init(self, cfg.seed)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        t = inputs_embeds.shape[-2]
        if t > self.cfg.context:
            raise InvalidInputError(f"sequence of {t} exceeds context {self.cfg.context}")
        x = inputs_embeds + self.pos_emb[:t].to(inputs_embeds.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.lm_head(self.norm(x))


class LoraLinear(nn.Module):
    """``base(x) + (alpha / r) * x A^T B^T`` with ``B`` starting at zero."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, generator: torch.Generator):
        super().__init__()
        self.base = base
        self.r = r
        self.alpha = alpha
        a = torch.empty(r, base.in_features, dtype=base.weight.dtype)
        bound = 1.0 / math.sqrt(base.in_features)
        a.uniform_(-bound, bound, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r, dtype=base.weight.dtype))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def forward(self, x):
        return self.base(x) + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_B @ self.lora_A)


def attach_lora(model: nn.Module, targets=DEFAULT_LORA_TARGETS, r: int = 16, alpha: float = 32.0, seed: int = 0):
    """Wrap every ``nn.Linear`` whose qualified name matches a glob in ``targets``.

    Modifies ``model`` in place and returns it. Base weights are kept as-is.
    """
    if r < 1:
        raise ConfigurationError("LoRA rank must be >= 1")
    names = [
        name
        for name, mod in model.named_modules()
        if isinstance(mod, nn.Linear) and any(fnmatch.fnmatchcase(name, t) for t in targets)
    ]
    if not names:
        raise ConfigurationError(f"no linear layers match {list(targets)}")
    gen = torch.Generator().manual_seed(seed)
    for name in names:
        parent_name, _, attr = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, attr, LoraLinear(getattr(parent, attr), r, alpha, gen))
    return model


def lora_modules(model: nn.Module) -> dict[str, LoraLinear]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LoraLinear)}


@dataclass
class AssembledSequence:
    visual_prefix: torch.Tensor
    prompt_ids: list[int]
    answer_ids: list[int]
    loss_mask: list[int] = field(default_factory=list)

    @property
    def text_ids(self) -> list[int]:
        return self.prompt_ids + self.answer_ids

    def __len__(self) -> int:
        return self.visual_prefix.shape[0] + len(self.prompt_ids) + len(self.answer_ids)


def assemble(visual_prefix: torch.Tensor, question: str, answer: str, tokenizer: ByteTokenizer,
             context: int = 512) -> AssembledSequence:
    """Layout ``[visual prefix | <bos> question <sep> | answer <eos>]``.

    The loss mask covers only the answer tokens; an empty answer (inference)
    yields an all-zero mask.
    """
    if not question:
        raise InvalidInputError("question must be non-empty")
    prompt = tokenizer.encode_prompt(question)
    ans = tokenizer.encode_answer(answer)
    seq = AssembledSequence(visual_prefix, prompt, ans, [0] * len(prompt) + [1] * len(ans))
    if len(seq) > context:
        raise InvalidInputError(f"assembled sequence needs {len(seq)} positions; context is {context}")
    return seq


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions where ``mask`` is set.

    ``logits[t]`` is scored against ``targets[t]``; the caller aligns next-token
    targets. Unmasked rows are never read.
    """
    logits = logits.reshape(-1, logits.shape[-1])
    targets = targets.reshape(-1)
    mask = mask.reshape(-1).bool()
    if logits.shape[0] != targets.shape[0] or mask.shape[0] != targets.shape[0]:
        raise InvalidInputError("logits, targets and mask must cover the same positions")
    if not mask.any():
        raise InvalidInputError("loss mask selects no positions")
    return F.cross_entropy(logits[mask], targets[mask])


GROUPS = ("vision_encoder", "connector", "lora", "lm_base")


@dataclass(frozen=True)
class FreezePlan:
    stage: int
    trainable: frozenset
    frozen: frozenset


def freeze_policy(stage: int) -> FreezePlan:
    # Stage 3 tunes the LM through its adapters only, same groups as stage 2.
    if stage not in (2, 3):
        raise ConfigurationError(f"no freeze policy for stage {stage!r}; expected 2 or 3")
    trainable = frozenset({"connector", "lora"})
    return FreezePlan(stage, trainable, frozenset(GROUPS) - trainable)


def apply_freeze(model: nn.Module, plan: FreezePlan) -> None:
    for name, p in model.named_parameters():
        group = model.group_of(name)
        if group not in plan.trainable and group not in plan.frozen:
            raise ConfigurationError(f"parameter group {group!r} not covered by the stage-{plan.stage} plan")
        p.requires_grad_(group in plan.trainable)
