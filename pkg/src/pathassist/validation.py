"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .data import PairRecord, VQARecord
from .exceptions import InvalidInputError
from .images import check_image, load_image


def check_images(images, min_size: int = 1) -> list[np.ndarray]:
    """Accept arrays or file references; return validated ``H x W x 3`` float arrays."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        images = list(images)
    if isinstance(images, (str, np.ndarray)):
        raise InvalidInputError("expected a sequence of images, got a single item")
    out = [check_image(load_image(im) if isinstance(im, str) else im, min_size) for im in images]
    if not out:
        raise InvalidInputError("no images given")
    return out


def check_texts(texts, n: int | None = None) -> list[str]:
    if isinstance(texts, str):
        raise InvalidInputError("expected a sequence of strings, got a single string")
    texts = list(texts)
    bad = [i for i, t in enumerate(texts) if not isinstance(t, str) or not t]
    if bad:
        raise InvalidInputError(f"texts must be non-empty strings; offending positions {bad[:5]}")
    if n is not None and len(texts) != n:
        raise InvalidInputError(f"got {len(texts)} texts for {n} images")
    return texts


def check_pair_records(records) -> list[PairRecord]:
    records = list(records)
    if not records:
        raise InvalidInputError("no records given")
    out = []
    for i, r in enumerate(records):
        if isinstance(r, dict):
            r = PairRecord.from_dict(r)
        if not isinstance(r, PairRecord):
            raise InvalidInputError(f"record {i}: expected PairRecord or dict, got {type(r).__name__}")
        out.append(r)
    return out


def check_vqa_records(records) -> list[VQARecord]:
    records = list(records)
    if not records:
        raise InvalidInputError("no records given")
    out = []
    for i, r in enumerate(records):
        if isinstance(r, dict):
            r = VQARecord.from_dict(r)
        if not isinstance(r, VQARecord):
            raise InvalidInputError(f"record {i}: expected VQARecord or dict, got {type(r).__name__}")
        out.append(r)
    return out
