"""Curation pipeline: records, JSONL manifests, judge/length filters, source
merging with count accounting, and conversion to VQA records."""
from __future__ import annotations

import json
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

from .exceptions import ConfigurationError, InvalidInputError, JudgeError
from .judges import IMAGE_PROMPT, TEXT_PROMPT, JudgeClient, ask_verdict

SOURCES = ("quilt", "pmc_oa", "pubmedvision", "other")
SPLITS = ("train", "val", "test")
KINDS = ("open", "closed")


@dataclass(frozen=True)
class PairRecord:
    id: str
    image_ref: str
    caption: str
    source: str = "other"
    split: str = "train"
    filter_trail: tuple = ()

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("record id must be non-empty")
        if not isinstance(self.caption, str) or not self.caption:
            raise InvalidInputError(f"record {self.id}: caption is required")
        if self.source not in SOURCES:
            raise InvalidInputError(f"record {self.id}: unknown source {self.source!r}")
        if self.split not in SPLITS:
            raise InvalidInputError(f"record {self.id}: unknown split {self.split!r}")
        object.__setattr__(self, "filter_trail", tuple(tuple(t) for t in self.filter_trail))

    def with_verdict(self, stage: str, verdict: str) -> "PairRecord":
        return replace(self, filter_trail=self.filter_trail + ((stage, verdict),))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter_trail"] = [list(t) for t in self.filter_trail]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        return cls(**d)


@dataclass(frozen=True)
class VQARecord:
    id: str
    image_ref: str
    question: str
    answer: str
    kind: str = "open"
    choices: dict | None = None
    source: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidInputError("record id must be non-empty")
        if self.kind not in KINDS:
            raise InvalidInputError(f"record {self.id}: kind must be open or closed")
        if not self.question:
            raise InvalidInputError(f"record {self.id}: question is required")
        if self.kind == "open" and self.choices:
            raise InvalidInputError(f"record {self.id}: open questions carry no choices")
        if self.kind == "closed":
            if not self.choices:
                raise InvalidInputError(f"record {self.id}: closed question without choices")
            if self.answer not in self.choices and not self.answer_is_choice_text:
                raise InvalidInputError(f"record {self.id}: answer {self.answer!r} is not among the choices")

    @property
    def answer_is_choice_text(self) -> bool:
        texts = {v.strip().lower() for v in (self.choices or {}).values()}
        return self.answer.strip().lower() in texts

    @property
    def gold_letter(self) -> str | None:
        return self.answer if self.choices and self.answer in self.choices else None

    def prompt_text(self) -> str:
        """Question as shown to the model; letter choices are appended unless already listed."""
        if self.gold_letter is None or all(f"{k}:" in self.question for k in self.choices):
            return self.question
        listing = " ".join(f"{k}:{v}" for k, v in self.choices.items())
        return f"{self.question} {listing}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VQARecord":
        return cls(**d)


def write_jsonl(path: str | Path, records: Iterable) -> Path:
    """One JSON object per line, UTF-8, sorted by id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted((r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in records), key=lambda d: d["id"])
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_jsonl(path: str | Path, cls=None) -> list:
    rows = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{lineno}: {e}") from None
            rows.append(cls.from_dict(row) if cls else row)
    return rows


@dataclass
class FilterResult:
    stage: str
    kept: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    quarantined: list = field(default_factory=list)

    @property
    def n_input(self) -> int:
        return len(self.kept) + len(self.dropped) + len(self.quarantined)


def _by_id(records):
    return sorted(records, key=lambda r: r.id)


def _judge_filter(records, judge: JudgeClient, prompt: str, payload_of, stage: str,
                  max_in_flight: int = 1) -> FilterResult:
    records = list(records)

    def decide(rec):
        try:
            return ask_verdict(judge, prompt, payload_of(rec))
        except JudgeError:
            return None

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            verdicts = list(pool.map(decide, records))
    else:
        verdicts = [decide(r) for r in records]

    out = FilterResult(stage)
    for rec, verdict in zip(records, verdicts):
        if verdict is None:
            out.quarantined.append(rec.with_verdict(stage, "quarantined"))
        elif verdict == "yes":
            out.dropped.append(rec.with_verdict(stage, "dropped"))
        else:
            out.kept.append(rec.with_verdict(stage, "kept"))
    out.kept, out.dropped, out.quarantined = _by_id(out.kept), _by_id(out.dropped), _by_id(out.quarantined)
    return out


def filter_nonpath_images(records, judge: JudgeClient, prompt: str = IMAGE_PROMPT,
                          max_in_flight: int = 1) -> FilterResult:
    """Drop pairs whose image the judge calls non-pathological (verdict "yes")."""
    return _judge_filter(records, judge, prompt, lambda r: {"id": r.id, "image_ref": r.image_ref},
                         "nonpath_image", max_in_flight)


def filter_nonhuman_text(records, judge: JudgeClient, prompt: str = TEXT_PROMPT,
                         max_in_flight: int = 1) -> FilterResult:
    """Drop pairs whose caption the judge says mentions non-human organisms."""
    records = list(records)
    for r in records:
        if not r.caption:
            raise InvalidInputError(f"record {r.id}: caption is required")
    return _judge_filter(records, judge, prompt, lambda r: {"id": r.id, "text": r.caption},
                         "nonhuman_text", max_in_flight)


def word_count(text: str) -> int:
    return len(text.split())


def filter_min_words(records, threshold: int = 20) -> FilterResult:
    if threshold < 1:
        raise ConfigurationError("word threshold must be >= 1")
    out = FilterResult("min_words")
    for r in records:
        if word_count(r.caption) >= threshold:
            out.kept.append(r.with_verdict("min_words", "kept"))
        else:
            out.dropped.append(r.with_verdict("min_words", "dropped"))
    out.kept, out.dropped = _by_id(out.kept), _by_id(out.dropped)
    return out


@dataclass
class ManifestStats:
    source_in: dict = field(default_factory=dict)
    source_out: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)  # stage -> {input, kept, dropped, quarantined}

    @property
    def total(self) -> int:
        return sum(self.source_out.values())

    def record_stage(self, result: FilterResult) -> None:
        s = self.stages.setdefault(result.stage, {"input": 0, "kept": 0, "dropped": 0, "quarantined": 0})
        s["input"] += result.n_input
        s["kept"] += len(result.kept)
        s["dropped"] += len(result.dropped)
        s["quarantined"] += len(result.quarantined)

    def check(self) -> None:
        for name, s in self.stages.items():
            if s["kept"] != s["input"] - s["dropped"] - s["quarantined"]:
                raise AssertionError(f"stage {name}: counts do not balance: {s}")

    @classmethod
    def merged(cls, parts: Iterable["ManifestStats"]) -> "ManifestStats":
        out = cls()
        for p in parts:
            for src, n in p.source_in.items():
                out.source_in[src] = out.source_in.get(src, 0) + n
            for src, n in p.source_out.items():
                out.source_out[src] = out.source_out.get(src, 0) + n
            for stage, s in p.stages.items():
                agg = out.stages.setdefault(stage, {k: 0 for k in s})
                for k, v in s.items():
                    agg[k] = agg.get(k, 0) + v
        return out

    def to_dict(self) -> dict:
        return {"source_in": dict(sorted(self.source_in.items())),
                "source_out": dict(sorted(self.source_out.items())),
                "stages": {k: dict(v) for k, v in sorted(self.stages.items())},
                "total": self.total}


def _prefixed(rec: PairRecord) -> PairRecord:
    prefix = f"{rec.source}:"
    return rec if rec.id.startswith(prefix) else replace(rec, id=prefix + rec.id)


def merge_sources(manifests, upstream: Iterable[ManifestStats] = ()) -> tuple[list[PairRecord], ManifestStats]:
    """Concatenate manifests, prefixing ids with their source.

    ``upstream`` stats (e.g. from the cleaning stages of each source) are folded
    into the returned stats; per-source output counts come from the records.
    """
    merged: dict[str, PairRecord] = {}
    for manifest in manifests:
        for rec in manifest:
            rec = _prefixed(rec)
            if rec.id in merged:
                raise InvalidInputError(f"duplicate record id after source prefixing: {rec.id}")
            merged[rec.id] = rec
    stats = ManifestStats.merged(upstream)
    counts = Counter(r.source for r in merged.values())
    for src, n in counts.items():
        stats.source_in.setdefault(src, n)
    stats.source_out = dict(counts)
    return _by_id(merged.values()), stats


@lru_cache(maxsize=1)
def default_alignment_questions() -> tuple[str, ...]:
    text = resources.files("pathassist").joinpath("data/alignment_questions.json").read_text("utf-8")
    return tuple(json.loads(text))


def build_alignment_qa(records, templates=None, seed: int = 0) -> list[VQARecord]:
    """One open question per pair: a seeded uniform template draw, answered by the caption."""
    templates = list(default_alignment_questions() if templates is None else templates)
    if not templates:
        raise ConfigurationError("alignment question set is empty")
    rng = random.Random(seed)
    return [
        VQARecord(id=r.id, image_ref=r.image_ref, question=rng.choice(templates), answer=r.caption,
                  kind="open", source=r.source)
        for r in records
    ]


def _coerce_vqa(row, source: str) -> VQARecord:
    d = row.to_dict() if isinstance(row, VQARecord) else dict(row)
    rid = d.get("id", "<missing id>")
    try:
        rec = VQARecord.from_dict(d)
    except (InvalidInputError, TypeError) as e:
        raise InvalidInputError(f"{source} row {rid}: {e}") from None
    prefix = f"{source}:"
    new_id = rec.id if rec.id.startswith(prefix) else prefix + rec.id
    return replace(rec, id=new_id, source=source)


def assemble_vqa_train(pathvqa_rows, pmc_rows) -> list[VQARecord]:
    out = [_coerce_vqa(r, "pathvqa") for r in pathvqa_rows]
    out += [_coerce_vqa(r, "pmc_vqa") for r in pmc_rows]
    ids = Counter(r.id for r in out)
    dup = [i for i, n in ids.items() if n > 1]
    if dup:
        raise InvalidInputError(f"duplicate VQA ids: {dup[:5]}")
    return out


ZERO_SHOT_DATASETS = {
    "BACH": {
        "prompt": "What choice best describes this breast tissue? Just give your choice: "
                  "A:Normal tissue  B: Benign tumors C: In situ cancer D: Invasive cancer",
        "classes": {"A": "Normal tissue", "B": "Benign tumors", "C": "In situ cancer", "D": "Invasive cancer"},
    },
    "OSCC": {
        "prompt": "What choice best describes this oral epithelium tissue? Just give your choice: "
                  "A:Normal oral epithelium  B:Oral squamous cell carcinoma",
        "classes": {"A": "Normal oral epithelium", "B": "Oral squamous cell carcinoma"},
    },
    "ColonPath": {
        "prompt": "What choice best describes this colon tissue? Just give your choice: "
                  "A:Normal tissue B:Tumor tissue",
        "classes": {"A": "Normal tissue", "B": "Tumor tissue"},
    },
}


def classification_to_vqa(dataset_spec: dict) -> list[VQARecord]:
    """Turn a labelled classification set into closed multiple-choice VQA records.

    ``dataset_spec`` holds ``name``, ``images`` (dicts with ``image_ref``,
    ``label`` and optionally ``id``), and for datasets other than the built-in
    BACH/OSCC/ColonPath also ``prompt`` and ``classes`` (letter -> text). Labels
    may be given as the letter or the class text.
    """
    name = dataset_spec.get("name")
    builtin = ZERO_SHOT_DATASETS.get(name, {})
    prompt = dataset_spec.get("prompt", builtin.get("prompt"))
    classes = dataset_spec.get("classes", builtin.get("classes"))
    if not prompt or not classes:
        raise ConfigurationError(f"dataset {name!r} is not built in; give 'prompt' and 'classes'")
    by_text = {v.lower(): k for k, v in classes.items()}
    out = []
    for i, item in enumerate(dataset_spec.get("images", [])):
        label = str(item["label"])
        letter = label if label in classes else by_text.get(label.lower())
        if letter is None:
            raise InvalidInputError(f"{name} image {item.get('id', i)}: label {label!r} not in {sorted(classes)}")
        rid = f"{name}:{item.get('id', f'{i:06d}')}"
        out.append(VQARecord(id=rid, image_ref=item["image_ref"], question=prompt, answer=letter,
                             kind="closed", choices=dict(classes), source=name))
    return out


@dataclass
class CleanResult:
    stage1: list  # judged and merged pairs (pretraining corpus)
    stage2: list  # stage1 minus short captions (alignment corpus)
    dropped: list
    quarantined: list
    stats: ManifestStats


def clean_sources(sources: dict, image_judge: JudgeClient, text_judge: JudgeClient,
                  judged=("quilt", "pmc_oa"), min_words: int = 20, max_in_flight: int = 1) -> CleanResult:
    """Run the judge chain on ``judged`` sources, merge everything, then length-filter."""
    per_source, stats_parts, dropped, quarantined = [], [], [], []
    for name, records in sources.items():
        records = list(records)
        st = ManifestStats(source_in={name: len(records)})
        if name in judged:
            for step in (lambda rs: filter_nonpath_images(rs, image_judge, max_in_flight=max_in_flight),
                         lambda rs: filter_nonhuman_text(rs, text_judge, max_in_flight=max_in_flight)):
                res = step(records)
                st.record_stage(res)
                dropped += res.dropped
                quarantined += res.quarantined
                records = res.kept
        stats_parts.append(st)
        per_source.append(records)
    stage1, stats = merge_sources(per_source, stats_parts)
    words = filter_min_words(stage1, min_words)
    stats.record_stage(words)
    dropped += words.dropped
    stats.check()
    # judge-stage rejects never reach the merge, so prefix them here for uniform ids
    dropped = [_prefixed(r) for r in dropped]
    quarantined = [_prefixed(r) for r in quarantined]
    return CleanResult(stage1, words.kept, _by_id(dropped), _by_id(quarantined), stats)
