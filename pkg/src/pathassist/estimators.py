"""scikit-learn style wrappers around the dual encoder and the visual assistant."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .connector import ConnectorConfig
from .data import PairRecord
from .images import load_image
from .lm import LMConfig, LoraConfig
from .metrics import closed_accuracy, evaluate_generations
from .plip import PlipConfig, encode_image, encode_text, load_plip, train_plip
from .schedules import ScheduleSpec
from .tokenizer import default_tokenizer
from .validation import check_images, check_pair_records, check_texts, check_vqa_records
from .vlm import StageConfig, VLMConfig, build_vlm, generate, train_stage


class PlipEncoder(TransformerMixin, BaseEstimator):
    """Contrastive image-text encoder.

    ``fit(images, captions)`` trains from scratch; ``transform(images)`` returns
    unit-norm image embeddings and ``transform_text(texts)`` the text side.
    """

    def __init__(self, crop_size=32, patch_size=16, enc_dim=128, enc_layers=2, d_proj=64, batch_size=8,
                 steps=50, lr=1e-3, weight_decay=0.01, seed=0):
        self.crop_size = crop_size
        self.patch_size = patch_size
        self.enc_dim = enc_dim
        self.enc_layers = enc_layers
        self.d_proj = d_proj
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self) -> PlipConfig:
        return PlipConfig(patch_size=self.patch_size, enc_dim=self.enc_dim, enc_layers=self.enc_layers,
                          d_proj=self.d_proj, crop_size=self.crop_size, batch_size=self.batch_size,
                          weight_decay=self.weight_decay, seed=self.seed)

    def fit(self, X, y=None):
        if y is None:
            records = check_pair_records(X)
            loader = load_image
        else:
            images = check_images(X, min_size=self.crop_size)
            captions = check_texts(y, len(images))
            records = [PairRecord(id=f"{i:08d}", image_ref=str(i), caption=c) for i, c in enumerate(captions)]
            loader = lambda ref: images[int(ref)]  # noqa: E731
        warmup = max(0, self.steps // 10)
        sched = ScheduleSpec("warmup_cosine", self.lr / 10, self.lr, self.lr / 100, warmup, self.steps)
        self.checkpoint_ = train_plip(records, self._config(), sched, image_loader=loader)
        self.model_ = load_plip(self.checkpoint_)
        self.n_features_out_ = self.d_proj
        return self

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, min_size=self.patch_size)
        return np.stack([encode_image(self.model_, im)[1].numpy() for im in images])

    @torch.no_grad()
    def transform_text(self, texts) -> np.ndarray:
        check_is_fitted(self, "model_")
        tok = default_tokenizer()
        ids = [tok.truncate(tok.encode(t), self.model_.cfg.max_text_len) for t in check_texts(texts)]
        return np.stack([encode_text(self.model_, i)[1].numpy() for i in ids])


class VisualAssistant(BaseEstimator):
    """Connector + LoRA adapted decoder answering questions about images.

    ``fit`` runs one instruction-tuning pass over VQA records (stage 3 freeze
    plan), ``predict`` returns greedy generations and ``score`` the mean
    closed-set accuracy.
    """

    def __init__(self, encoder=None, tile_size=64, num_queries=8, d_model=64, n_layers=2, lora_r=8,
                 lora_alpha=16, steps=100, lr=1e-3, micro_batch=10, accum=1, target_loss=None,
                 max_new_tokens=8, seed=0):
        self.encoder = encoder
        self.tile_size = tile_size
        self.num_queries = num_queries
        self.d_model = d_model
        self.n_layers = n_layers
        self.lora_r = lora_r
        self.lora_alpha = lora_alpha
        self.steps = steps
        self.lr = lr
        self.micro_batch = micro_batch
        self.accum = accum
        self.target_loss = target_loss
        self.max_new_tokens = max_new_tokens
        self.seed = seed

    def _build(self):
        plip_ckpt = None
        plip_cfg = PlipConfig(crop_size=32, seed=self.seed)
        if self.encoder is not None:
            check_is_fitted(self.encoder, "checkpoint_")
            plip_ckpt = self.encoder.checkpoint_
            plip_cfg = self.encoder.model_.cfg
        cfg = VLMConfig(
            plip=plip_cfg,
            connector=ConnectorConfig(tile_size=self.tile_size, num_queries=self.num_queries, d_llm=self.d_model,
                                      enc_dim=plip_cfg.enc_dim, seed=self.seed),
            lm=LMConfig(d_model=self.d_model, layers=self.n_layers, seed=self.seed),
            lora=LoraConfig(r=self.lora_r, alpha=self.lora_alpha, seed=self.seed),
        )
        return build_vlm(cfg, plip_ckpt)

    def fit(self, X, y=None):
        records = check_vqa_records(X)
        model = self._build()
        warmup = max(0, self.steps // 20)
        spec = ScheduleSpec("warmup_cosine", self.lr / 10, self.lr, self.lr / 100, warmup, self.steps)
        scfg = StageConfig(stage=3, schedules={"connector": spec, "lora": spec}, micro_batch=self.micro_batch,
                           accum=self.accum, seed=self.seed, target_loss=self.target_loss)
        self.checkpoint_ = train_stage(model, records, scfg)
        self.model_ = model
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        records = check_vqa_records(X)
        return [generate(self.model_, load_image(r.image_ref), r.prompt_text(), self.max_new_tokens)
                for r in records]

    def score(self, X, y=None) -> float:
        """Mean closed-set accuracy over the closed records of ``X``."""
        records = [r for r in check_vqa_records(X) if r.kind == "closed"]
        preds = self.predict(records)
        return float(np.mean([closed_accuracy(p, r.answer, r.choices) for p, r in zip(preds, records)]))

    def report(self, X):
        records = check_vqa_records(X)
        return evaluate_generations(records, dict(zip((r.id for r in records), self.predict(records))))
