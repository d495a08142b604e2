"""``pathassist`` command line: one subcommand per pipeline stage.

Each command reads a JSON/YAML config, writes its artifacts under ``--out``
and a ``run_manifest.json`` holding the resolved config, seed and content
hashes of every input and output. ``pathassist replay`` re-runs a manifest.

Exit codes: 0 success, 2 config/input validation error, 3 judge quorum failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import Checkpoint, canonical_json
from .connector import ConnectorConfig
from .data import (PairRecord, VQARecord, assemble_vqa_train, build_alignment_qa, classification_to_vqa,
                   clean_sources, read_jsonl, write_jsonl)
from .exceptions import ConfigurationError, InvalidInputError, JudgeError
from .images import load_image
from .judges import NON_HUMAN_KEYWORDS, NON_PATHOLOGY_KEYWORDS, KeywordJudge, RemoteJudge
from .lm import LMConfig, LoraConfig
from .metrics import evaluate_generations, evaluate_zero_shot, zero_shot_table
from .plip import PlipConfig, train_plip
from .schedules import (PLIP_DEFAULT, STAGE2_CONNECTOR, STAGE2_LORA, STAGE3_CONNECTOR, STAGE3_LORA,
                        ScheduleSpec, schedule_from_dict)
from .vlm import StageConfig, VLMConfig, build_vlm, generate, load_vlm, train_stage

log = logging.getLogger("pathassist")

EXIT_OK, EXIT_INVALID, EXIT_JUDGE = 0, 2, 3
COMMANDS = ("clean", "train-plip", "align", "finetune", "eval", "zeroshot")

# Desk runs keep the reported schedule shapes but scale rates up tenfold so a
# few dozen steps move the weights.
PROFILES = {
    "desk": {
        "plip": {"crop_size": 32, "batch_size": 8},
        "connector": {"tile_size": 64, "num_queries": 16},
        "lm": {"d_model": 128, "layers": 2},
        "lr_scale": 10.0,
        "micro_batch": 4,
        "accum": 2,
    },
    "full": {
        "plip": {"crop_size": 224, "batch_size": 48},
        "connector": {"tile_size": 224},
        "lm": {},
        "lr_scale": 1.0,
        "micro_batch": 16,
        "accum": 6,
    },
}


class ConfigError(ConfigurationError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"--config: file {path} does not exist")
    data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"--config: {path} must hold a mapping")
    return data


def _field(cfg: dict, key: str, typ=None, required: bool = True, default=None, where: str = "config"):
    if key not in cfg or cfg[key] is None:
        if required:
            raise ConfigError(f"{where}.{key}: missing required field")
        return default
    val = cfg[key]
    if typ is not None and not isinstance(val, typ):
        names = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise ConfigError(f"{where}.{key}: expected {names}, got {type(val).__name__}")
    return val


def _resolve(base: Path, val: str, where: str) -> Path:
    p = Path(val)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"{where}: path {val} does not exist")
    return p


def _dataclass_overrides(cls, overrides: dict, where: str):
    try:
        return cls(**overrides)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _scaled(spec: ScheduleSpec, scale: float) -> dict:
    d = spec.to_dict()
    for k in ("init_lr", "peak_lr", "floor_lr"):
        d[k] *= scale
    return d


class Run:
    """Book-keeping shared by every command: inputs, outputs and the manifest."""

    def __init__(self, command: str, config: dict, args, base: Path):
        self.command = command
        self.base = Path(base).resolve()
        self.config = config
        self.seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        self.profile = args.profile
        self.judge = args.judge
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, Path] = {}
        self.outputs: list[Path] = []
        self.prof = PROFILES[self.profile]

    def path(self, cfg: dict, key: str, where: str = "config", required: bool = True):
        """A config path field, resolved against the config file's directory."""
        val = _field(cfg, key, str, required=required, where=where)
        return None if val is None else _resolve(self.base, val, f"{where}.{key}")

    def input(self, label: str, path: Path) -> Path:
        self.inputs[label] = path
        return path

    def output(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def _hash_entries(self, path: Path) -> dict:
        if path.is_dir():
            return {str(p.relative_to(self.out)): sha256_file(p) for p in sorted(path.rglob("*")) if p.is_file()}
        return {str(path.relative_to(self.out)): sha256_file(path)}

    def write_manifest(self) -> Path:
        outputs = {}
        for p in self.outputs:
            outputs.update(self._hash_entries(p))
        inputs = {}
        for label, p in sorted(self.inputs.items()):
            if p.is_dir():
                inputs[label] = {str(q.relative_to(p)): sha256_file(q) for q in sorted(p.rglob("*")) if q.is_file()}
            else:
                inputs[label] = sha256_file(p)
        resolved = {"command": self.command, "config": self.config, "config_dir": str(self.base), "seed": self.seed,
                    "profile": self.profile, "judge": self.judge}
        manifest = dict(resolved, version=__version__,
                        config_hash=hashlib.sha256(canonical_json(resolved).encode()).hexdigest(),
                        inputs=inputs, outputs=dict(sorted(outputs.items())))
        path = self.out / "run_manifest.json"
        path.write_text(canonical_json(manifest), encoding="utf-8")
        return path


def _make_judges(cfg: dict, run: Run):
    jcfg = _field(cfg, "judge", dict, required=False, default={})
    kind = run.judge or jcfg.get("kind", "mock")
    retry = int(jcfg.get("retry_budget", 2))
    if kind == "mock":
        return (KeywordJudge(jcfg.get("image_keywords", NON_PATHOLOGY_KEYWORDS), field="id", whole_words=False,
                             retry_budget=retry),
                KeywordJudge(jcfg.get("text_keywords", NON_HUMAN_KEYWORDS), field="text", retry_budget=retry))
    if kind == "remote":
        endpoint = os.environ.get("PATHASSIST_JUDGE_ENDPOINT") or jcfg.get("endpoint")
        if not endpoint:
            raise ConfigError("config.judge.endpoint: required for the remote judge "
                              "(or set PATHASSIST_JUDGE_ENDPOINT)")
        key = os.environ.get("PATHASSIST_JUDGE_API_KEY")
        kw = dict(retry_budget=retry, backoff=float(jcfg.get("backoff", 1.0)), timeout=float(jcfg.get("timeout", 60.0)))
        return (RemoteJudge(endpoint, jcfg.get("image_model", "glm-4v-9b"), key, **kw),
                RemoteJudge(endpoint, jcfg.get("text_model", "qwen2-7b-instruct"), key, **kw))
    raise ConfigError(f"config.judge.kind: unknown judge {kind!r}")


def cmd_clean(cfg: dict, run: Run) -> int:
    src_cfg = _field(cfg, "sources", dict)
    sources = {}
    for name in sorted(src_cfg):
        path = run.path(src_cfg, name, where="config.sources")
        sources[name] = read_jsonl(run.input(f"sources.{name}", path), PairRecord)
    judged = _field(cfg, "judged_sources", list, required=False, default=["quilt", "pmc_oa"])
    min_words = _field(cfg, "min_words", int, required=False, default=20)
    jcfg = cfg.get("judge") or {}
    image_judge, text_judge = _make_judges(cfg, run)
    res = clean_sources(sources, image_judge, text_judge, judged=tuple(judged), min_words=min_words,
                        max_in_flight=int(jcfg.get("max_in_flight", 1)))
    write_jsonl(run.output(run.out / "pcaption_stage1.jsonl"), res.stage1)
    write_jsonl(run.output(run.out / "pcaption_stage2.jsonl"), res.stage2)
    write_jsonl(run.output(run.out / "dropped.jsonl"), res.dropped)
    write_jsonl(run.output(run.out / "quarantine.jsonl"), res.quarantined)
    stats_path = run.output(run.out / "stats.json")
    stats_path.write_text(canonical_json(res.stats.to_dict()), encoding="utf-8")
    judged_in = sum(n for s, n in res.stats.source_in.items() if s in judged)
    limit = float(jcfg.get("max_quarantine_fraction", 0.1))
    if judged_in and len(res.quarantined) / judged_in > limit:
        log.error("%d of %d judged records quarantined (limit %.0f%%)", len(res.quarantined), judged_in, 100 * limit)
        return EXIT_JUDGE
    log.info("clean: %d stage-1 pairs, %d stage-2 pairs", len(res.stage1), len(res.stage2))
    return EXIT_OK


def cmd_train_plip(cfg: dict, run: Run) -> int:
    manifest = read_jsonl(run.input("manifest", run.path(cfg, "manifest")), PairRecord)
    overrides = dict(run.prof["plip"], seed=run.seed)
    overrides.update(_field(cfg, "plip", dict, required=False, default={}))
    pcfg = _dataclass_overrides(PlipConfig, overrides, "config.plip")
    epochs = _field(cfg, "epochs", int, required=False, default=30)
    per_epoch = max(1, math.ceil(len(manifest) / pcfg.batch_size))
    if "schedule" in cfg:
        sched = schedule_from_dict(_field(cfg, "schedule", dict))
    else:
        base = _scaled(PLIP_DEFAULT, run.prof["lr_scale"])
        # keep the reported warmup-to-epoch ratio
        ratio = PLIP_DEFAULT.warmup_steps / PLIP_DEFAULT.interval_steps
        warm = min(int(round(ratio * per_epoch)), per_epoch - 1)
        sched = ScheduleSpec(**dict(base, total_steps=epochs * per_epoch, interval_steps=per_epoch,
                                    warmup_steps=warm))
    ckpt = train_plip(manifest, pcfg, sched)
    ckpt.save(run.output(run.out / "checkpoint"))
    return EXIT_OK


def _vlm_config(cfg: dict, run: Run, plip_cfg: dict) -> VLMConfig:
    m = _field(cfg, "model", dict, required=False, default={})
    conn = dict(run.prof["connector"], enc_dim=plip_cfg["enc_dim"], seed=run.seed)
    conn.update(_field(m, "connector", dict, required=False, default={}, where="config.model"))
    lm = dict(run.prof["lm"], seed=run.seed)
    lm.update(_field(m, "lm", dict, required=False, default={}, where="config.model"))
    lora = dict(seed=run.seed, **_field(m, "lora", dict, required=False, default={}, where="config.model"))
    if "targets" in lora:
        lora["targets"] = tuple(lora["targets"])
    conn.setdefault("d_llm", lm.get("d_model", LMConfig.d_model))
    return VLMConfig(plip=PlipConfig(**plip_cfg),
                     connector=_dataclass_overrides(ConnectorConfig, conn, "config.model.connector"),
                     lm=_dataclass_overrides(LMConfig, lm, "config.model.lm"),
                     lora=_dataclass_overrides(LoraConfig, lora, "config.model.lora"))


def _stage_config(cfg: dict, run: Run, stage: int, defaults: dict) -> StageConfig:
    steps = _field(cfg, "steps", int, required=False, default=None)
    given = _field(cfg, "schedules", dict, required=False, default={})
    schedules = {}
    for group, preset in defaults.items():
        if group in given:
            schedules[group] = schedule_from_dict(given[group])
        else:
            spec = ScheduleSpec(**_scaled(preset, run.prof["lr_scale"]))
            schedules[group] = spec.rescaled(steps) if steps else spec
    return StageConfig(stage=stage, schedules=schedules,
                       micro_batch=_field(cfg, "micro_batch", int, required=False, default=run.prof["micro_batch"]),
                       accum=_field(cfg, "accum", int, required=False, default=run.prof["accum"]),
                       weight_decay=float(cfg.get("weight_decay", 0.0)), seed=run.seed)


def cmd_align(cfg: dict, run: Run) -> int:
    plip_dir = run.input("plip_checkpoint", run.path(cfg, "plip_checkpoint"))
    pairs = read_jsonl(run.input("manifest", run.path(cfg, "manifest")), PairRecord)
    questions = None
    qpath = run.path(cfg, "questions", required=False)
    if qpath is not None:
        questions = json.loads(run.input("questions", qpath).read_text(encoding="utf-8"))
    qa = build_alignment_qa(pairs, questions, seed=run.seed)
    write_jsonl(run.output(run.out / "alignment_qa.jsonl"), qa)
    plip_ckpt = Checkpoint.load(plip_dir)
    model = build_vlm(_vlm_config(cfg, run, plip_ckpt.metadata["config"]), plip_ckpt)
    scfg = _stage_config(cfg, run, 2, {"connector": STAGE2_CONNECTOR, "lora": STAGE2_LORA})
    train_stage(model, qa, scfg).save(run.output(run.out / "checkpoint"))
    return EXIT_OK


def cmd_finetune(cfg: dict, run: Run) -> int:
    ckpt = Checkpoint.load(run.input("checkpoint", run.path(cfg, "checkpoint")))
    pathvqa = read_jsonl(run.input("pathvqa", run.path(cfg, "pathvqa")))
    pmc = read_jsonl(run.input("pmc_vqa", run.path(cfg, "pmc_vqa")))
    train = assemble_vqa_train(pathvqa, pmc)
    write_jsonl(run.output(run.out / "vqa_train.jsonl"), train)
    model = load_vlm(ckpt)
    scfg = _stage_config(cfg, run, 3, {"connector": STAGE3_CONNECTOR, "lora": STAGE3_LORA})
    train_stage(model, train, scfg).save(run.output(run.out / "checkpoint"))
    return EXIT_OK


def _generate_all(model, records, max_new_tokens: int) -> dict[str, str]:
    return {r.id: generate(model, load_image(r.image_ref), r.prompt_text(), max_new_tokens) for r in records}


def _write_generations(path: Path, gens: dict[str, str]) -> None:
    write_jsonl(path, [{"id": k, "generation": v} for k, v in gens.items()])


def cmd_eval(cfg: dict, run: Run) -> int:
    records = read_jsonl(run.input("test", run.path(cfg, "test")), VQARecord)
    gpath = run.path(cfg, "generations", required=False)
    if gpath is not None:
        gens = {row["id"]: row["generation"] for row in read_jsonl(run.input("generations", gpath))}
    else:
        model = load_vlm(Checkpoint.load(run.input("checkpoint", run.path(cfg, "checkpoint"))))
        gens = _generate_all(model, records, _field(cfg, "max_new_tokens", int, required=False, default=32))
    _write_generations(run.output(run.out / "generations.jsonl"), gens)
    report = evaluate_generations(records, gens)
    report.save(run.output(run.out / "report.json"))
    (run.out / "report.md").write_text(report.table(cfg.get("name", "model")), encoding="utf-8")
    run.output(run.out / "report.md")
    return EXIT_OK


def cmd_zeroshot(cfg: dict, run: Run) -> int:
    model = load_vlm(Checkpoint.load(run.input("checkpoint", run.path(cfg, "checkpoint"))))
    paths = _field(cfg, "datasets", list)
    max_new = _field(cfg, "max_new_tokens", int, required=False, default=16)
    reports = []
    for i, p in enumerate(paths):
        if not isinstance(p, str):
            raise ConfigError(f"config.datasets[{i}]: expected str, got {type(p).__name__}")
        path = _resolve(run.base, p, f"config.datasets[{i}]")
        spec = json.loads(run.input(f"datasets[{i}]", path).read_text(encoding="utf-8"))
        records = classification_to_vqa(spec)
        name = spec["name"]
        write_jsonl(run.output(run.out / f"{name}_vqa.jsonl"), records)
        gens = _generate_all(model, records, max_new)
        _write_generations(run.output(run.out / f"{name}_generations.jsonl"), gens)
        reports.append(evaluate_zero_shot(name, records, gens))
    out = run.output(run.out / "report.json")
    out.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (run.out / "report.md").write_text(zero_shot_table(reports), encoding="utf-8")
    run.output(run.out / "report.md")
    return EXIT_OK


HANDLERS = {"clean": cmd_clean, "train-plip": cmd_train_plip, "align": cmd_align,
            "finetune": cmd_finetune, "eval": cmd_eval, "zeroshot": cmd_zeroshot}


def run_command(command: str, config: dict, args, base: Path) -> int:
    run = Run(command, config, args, base)
    code = HANDLERS[command](config, run)
    if code == EXIT_OK:
        run.write_manifest()
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathassist", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        p.add_argument("--judge", choices=["mock", "remote"], default=None)
    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p = sub.add_parser("synth", help="write the bundled synthetic desk corpus and stage configs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            from .synthetic import write_desk_bundle

            for name, path in write_desk_bundle(args.out, seed=args.seed).items():
                print(f"{name}: {path}")
            return EXIT_OK
        if args.command == "replay":
            manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            args.seed, args.profile, args.judge = manifest["seed"], manifest["profile"], manifest["judge"]
            return run_command(manifest["command"], manifest["config"], args, Path(manifest["config_dir"]))
        return run_command(args.command, _load_config(args.config), args, Path(args.config).parent)
    except (ConfigurationError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except JudgeError as e:
        print(f"judge error: {e}", file=sys.stderr)
        return EXIT_JUDGE


if __name__ == "__main__":
    sys.exit(main())
