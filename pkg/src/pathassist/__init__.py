"""Pathology visual question answering: dual-encoder pretraining, tiled visual prefixes,
adapter-tuned decoding, dataset curation and evaluation."""
__version__ = "0.1.0"

from .checkpoint import Checkpoint
from .connector import Connector, ConnectorConfig, connect, plan_tiles, tile_image
from .data import PairRecord, VQARecord, classification_to_vqa, clean_sources, merge_sources
from .estimators import PlipEncoder, VisualAssistant
from .exceptions import ConfigurationError, InvalidInputError, JudgeError
from .lm import LoraConfig, LMConfig, attach_lora, freeze_policy, lm_loss
from .metrics import closed_accuracy, extract_choice, open_recall, zero_shot_metrics
from .plip import PlipConfig, itc_loss, itm_loss, train_plip
from .schedules import ScheduleSpec, plip_lr, warmup_cosine
from .vlm import VLMConfig, VisionLanguageModel, build_vlm, generate, train_stage

__all__ = [
    "Checkpoint", "Connector", "ConnectorConfig", "connect", "plan_tiles", "tile_image",
    "PairRecord", "VQARecord", "classification_to_vqa", "clean_sources", "merge_sources",
    "PlipEncoder", "VisualAssistant", "ConfigurationError", "InvalidInputError", "JudgeError",
    "LoraConfig", "LMConfig", "attach_lora", "freeze_policy", "lm_loss",
    "closed_accuracy", "extract_choice", "open_recall", "zero_shot_metrics",
    "PlipConfig", "itc_loss", "itm_loss", "train_plip", "ScheduleSpec", "plip_lr", "warmup_cosine",
    "VLMConfig", "VisionLanguageModel", "build_vlm", "generate", "train_stage",
]
