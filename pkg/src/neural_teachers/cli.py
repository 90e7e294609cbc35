"""Command-line pipeline: synthetic data, teacher, pretraining, policy learning, generation, scoring.

Every stage reads a flat ``key=value`` config file (``--config``) overlaid by
command-line flags, writes its artifacts atomically into ``--out-dir`` and
records a JSON manifest. Rerunning a finished stage with the same config is a
no-op after its checksums verify; a different config needs ``--force``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import generator as G
from . import policy as P
from . import teacher as TT
from .checkpoint import (
    CheckpointError,
    atomic_write_bytes,
    file_sha256,
    load_generator,
    load_teacher,
    save_generator,
    save_teacher,
)
from .corpus import (
    build_vocab,
    generate_synthetic_corpus,
    load_lexicon,
    read_corpus,
    sample_lexicon,
    split_corpus,
    split_sentences,
)
from .corpus.lexicon import LexiconError
from .corpus.synthetic import default_grammar
from .evaluation import evaluate_corpus

log = logging.getLogger("neural_teachers")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3


class UsageError(Exception):
    code = EXIT_USAGE


class DataError(Exception):
    code = EXIT_DATA


class MismatchError(Exception):
    code = EXIT_MISMATCH


# Stage hyperparameters appear in RunConfig under these prefixes.
STAGE_CONFIGS = (("teacher_", TT.TeacherConfig), ("gen_", G.GeneratorConfig), ("policy_", P.PolicyConfig))


@dataclass
class RunConfig:
    corpus: str = ""
    out_dir: str = "run"
    seed: int = 0
    dev_size: int = 100
    test_size: int = 0
    min_count: int = 1
    teacher: str = ""
    generator: str = ""
    lexicon: str = ""
    split: str = "dev"
    decode: str = "greedy"
    generations: str = ""
    references: str = ""
    n_recipes: int = 600
    sentences_per_stage: str = "1,3"
    stage_fields: dict = field(default_factory=dict)

    def stage(self, prefix: str, cls):
        values = {k[len(prefix):]: v for k, v in self.stage_fields.items() if k.startswith(prefix)}
        return cls(**values)

    def snapshot(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "stage_fields"}
        for prefix, cls in STAGE_CONFIGS:
            for k, v in dataclasses.asdict(self.stage(prefix, cls)).items():
                out[prefix + k] = v
        return out


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def all_keys() -> dict[str, tuple[object, object]]:
    """Config key -> (type hint, default) for every RunConfig and stage field."""
    hints = _field_types(RunConfig)
    keys = {f.name: (hints[f.name], f.default) for f in dataclasses.fields(RunConfig) if f.name != "stage_fields"}
    for prefix, cls in STAGE_CONFIGS:
        h = _field_types(cls)
        for f in dataclasses.fields(cls):
            keys[prefix + f.name] = (h[f.name], f.default)
    return keys


def parse_value(key: str, text: str, hint) -> object:
    text = text.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r} as {hint.__name__}") from None
    return text


def read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(file_values: dict[str, str], flag_values: dict[str, str]) -> RunConfig:
    keys = all_keys()
    merged = {**file_values, **flag_values}
    unknown = sorted(set(merged) - set(keys))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for k, text in merged.items():
        value = parse_value(k, text, keys[k][0])
        if hasattr(cfg, k) and k != "stage_fields":
            setattr(cfg, k, value)
        else:
            cfg.stage_fields[k] = value
    return cfg


# --- validation -------------------------------------------------------------------

def _need_file(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {path}")
    return p


def validate(cfg: RunConfig, stage: str) -> None:
    if cfg.dev_size < 1 or cfg.test_size < 0:
        raise UsageError("dev_size must be >= 1 and test_size >= 0")
    if cfg.split not in ("dev", "test"):
        raise UsageError("split must be dev or test")
    if cfg.decode not in ("greedy", "sample"):
        raise UsageError("decode must be greedy or sample")
    tc = cfg.stage("teacher_", TT.TeacherConfig)
    if tc.kind not in TT.KINDS:
        raise UsageError(f"teacher_kind must be one of {TT.KINDS}")
    if not 1 <= tc.l_min <= tc.l_max:
        raise UsageError("need 1 <= teacher_l_min <= teacher_l_max")
    try:
        cfg.stage("policy_", P.PolicyConfig).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if stage in ("train-teacher", "pretrain", "train-policy", "generate"):
        _need_file(cfg.corpus, "corpus")
    if stage in ("train-policy", "generate"):
        _need_file(cfg.generator, "generator checkpoint")
    if stage == "train-policy" and cfg.stage("policy_", P.PolicyConfig).needs_teacher:
        _need_file(cfg.teacher, "teacher checkpoint")
    if stage == "evaluate":
        _need_file(cfg.generations, "generations file")
        if cfg.references:
            _need_file(cfg.references, "references file")
    if cfg.lexicon:
        _need_file(cfg.lexicon, "lexicon")


# --- run directory helpers --------------------------------------------------------

class Lock:
    """Exclusive lockfile in the output directory; one stage per directory at a time."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path} exists: another stage is running in this directory "
                             "(remove the file if that process is gone)") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _finite(obj):
    """NaN and infinities become null so the output stays strict JSON."""
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(_finite(obj), sort_keys=True, indent=2) + "\n").encode())


def write_jsonl(path: Path, rows) -> None:
    atomic_write_bytes(path, "".join(json.dumps(_finite(r), sort_keys=True) + "\n" for r in rows).encode())


def manifest_path(out_dir: Path, stage: str) -> Path:
    return out_dir / f"{stage}.manifest.json"


def up_to_date(out_dir: Path, stage: str, cfg: RunConfig, force: bool) -> bool:
    """True when a finished manifest for this exact config exists and its outputs verify."""
    mpath = manifest_path(out_dir, stage)
    if not mpath.exists():
        return False
    if force:
        return False
    manifest = json.loads(mpath.read_text())
    if manifest.get("config") != json.loads(json.dumps(cfg.snapshot(), sort_keys=True)):
        raise UsageError(f"{mpath} records a different config; rerun with --force to overwrite")
    for name, digest in manifest.get("checksums", {}).items():
        path = out_dir / name
        if not path.exists() or file_sha256(path) != digest:
            raise MismatchError(f"{path} does not match the checksum in {mpath}")
    log.info("%s already complete in %s; checksums verified", stage, out_dir)
    return True


def finish(out_dir: Path, stage: str, cfg: RunConfig, started: float, outputs: list[str],
           scores: dict, inputs: dict | None = None) -> dict:
    manifest = {
        "stage": stage,
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "wall_time_s": round(time.time() - started, 3),
        "checksums": {name: file_sha256(out_dir / name) for name in outputs},
        "inputs": inputs or {},
        "dev_scores": scores,
    }
    write_json(manifest_path(out_dir, stage), manifest)
    return manifest


# --- data -------------------------------------------------------------------------

def load_data(cfg: RunConfig):
    try:
        records = read_corpus(cfg.corpus)
        train, dev, test = split_corpus(records, cfg.dev_size, cfg.test_size)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not train:
        raise DataError("training split is empty")
    vocab = build_vocab(train, cfg.min_count)
    return vocab, train, dev, test


def segmented(records, vocab):
    return [split_sentences(vocab.ids(r.body_tokens), vocab.delimiter_ids) for r in records]


def check_vocab(vocab, ck, what: str) -> None:
    stored = ck.meta.get("vocab_checksum")
    if stored != vocab.checksum:
        raise MismatchError(f"{what} vocabulary checksum {stored} differs from the corpus vocabulary "
                            f"checksum {vocab.checksum}")


def _load(loader, path: str, what: str):
    try:
        return loader(path)
    except CheckpointError as exc:
        raise MismatchError(f"{what}: {exc}") from exc


# --- stages -----------------------------------------------------------------------

def cmd_make_synthetic(cfg: RunConfig, args) -> int:
    try:
        lo, hi = (int(x) for x in cfg.sentences_per_stage.split(","))
    except ValueError:
        raise UsageError("sentences_per_stage must look like 1,2") from None
    grammar = dataclasses.replace(default_grammar(), sentences_per_stage=(lo, hi))
    records = generate_synthetic_corpus(cfg.seed, cfg.n_recipes, grammar)
    out = Path(args.output or Path(cfg.out_dir) / "corpus.jsonl")
    write_jsonl(out, (r.to_json() for r in records))
    print(f"wrote {len(records)} recipes to {out} (sha256 {file_sha256(out)})")
    return EXIT_OK


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    out_dir, stage = Path(cfg.out_dir), "teacher"
    if up_to_date(out_dir, stage, cfg, args.force):
        return EXIT_OK
    vocab, train, dev, _ = load_data(cfg)
    tc = cfg.stage("teacher_", TT.TeacherConfig)
    started = time.time()
    try:
        res = TT.train_teacher(segmented(train, vocab), segmented(dev, vocab), len(vocab), tc, cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    name = f"teacher_{tc.kind}.ckpt"
    save_teacher(out_dir / name, res.params, vocab, tc, cfg.seed,
                 {"stage": stage, "best_epoch": res.best_epoch})
    write_jsonl(out_dir / f"{stage}.history.jsonl", res.history)
    best = min([h["dev_loss"] for h in res.history] + [res.initial_dev_loss])
    finish(out_dir, stage, cfg, started, [name, f"{stage}.history.jsonl"],
           {"initial_dev_loss": res.initial_dev_loss, "best_dev_loss": best, "best_epoch": res.best_epoch},
           {"corpus": file_sha256(cfg.corpus)})
    print(f"teacher[{tc.kind}] best dev loss {best:.4f} at epoch {res.best_epoch} -> {out_dir / name}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out_dir, stage = Path(cfg.out_dir), "pretrain"
    if up_to_date(out_dir, stage, cfg, args.force):
        return EXIT_OK
    vocab, train, dev, _ = load_data(cfg)
    gc = cfg.stage("gen_", G.GeneratorConfig)
    started = time.time()
    res = G.pretrain([vocab.encode(r) for r in train], [vocab.encode(r) for r in dev], len(vocab), gc, cfg.seed)
    name = "generator.ckpt"
    save_generator(out_dir / name, res.params, vocab, gc, cfg.seed,
                   {"stage": stage, "best_epoch": res.best_epoch})
    write_jsonl(out_dir / f"{stage}.history.jsonl", res.history)
    best = min(res.dev_losses)
    finish(out_dir, stage, cfg, started, [name, f"{stage}.history.jsonl"],
           {"best_dev_loss": best, "best_epoch": res.best_epoch}, {"corpus": file_sha256(cfg.corpus)})
    print(f"generator best dev loss {best:.4f} at epoch {res.best_epoch} -> {out_dir / name}")
    return EXIT_OK


def cmd_train_policy(cfg: RunConfig, args) -> int:
    out_dir, stage = Path(cfg.out_dir), "policy"
    if up_to_date(out_dir, stage, cfg, args.force):
        return EXIT_OK
    pc = cfg.stage("policy_", P.PolicyConfig)
    vocab, train, dev, _ = load_data(cfg)
    gen, gck = _load(load_generator, cfg.generator, "generator checkpoint")
    check_vocab(vocab, gck, "generator")
    teacher = None
    inputs = {"corpus": file_sha256(cfg.corpus), "generator": file_sha256(cfg.generator)}
    if pc.needs_teacher:
        teacher, tck = _load(load_teacher, cfg.teacher, "teacher checkpoint")
        if tck.meta["vocab_checksum"] != gck.meta["vocab_checksum"]:
            raise MismatchError(f"teacher vocabulary checksum {tck.meta['vocab_checksum']} differs from "
                                f"generator vocabulary checksum {gck.meta['vocab_checksum']}")
        inputs["teacher"] = file_sha256(cfg.teacher)
    started = time.time()
    try:
        res = P.train_policy(gen, teacher, [vocab.encode(r) for r in train], [vocab.encode(r) for r in dev],
                             vocab.delimiter_ids, pc, cfg.seed)
    except P.TeacherMismatch as exc:
        raise MismatchError(str(exc)) from exc
    gc = G.GeneratorConfig(**gck.meta["config"])
    name = f"policy_{pc.reward}.ckpt"
    selection = {"metric": res.selection_metric, "best_epoch": res.best_epoch, "best_score": res.best_score}
    save_generator(out_dir / name, res.params, vocab, gc, cfg.seed,
                   {"stage": stage, "policy": dataclasses.asdict(pc), "selection": selection})
    write_jsonl(out_dir / f"{stage}.history.jsonl", res.history)
    write_jsonl(out_dir / f"{stage}.batches.jsonl", res.batch_log)
    finish(out_dir, stage, cfg, started, [name, f"{stage}.history.jsonl", f"{stage}.batches.jsonl"],
           {"selection": selection, "pretrained": res.pretrained, "best": res.history[res.best_epoch],
            "exploit_at_end": res.exploit_at_end}, inputs)
    print(f"policy[{pc.reward}] best {res.selection_metric} {res.best_score:.4f} at epoch {res.best_epoch} "
          f"(pretrained {res.history[0]['score']:.4f}) -> {out_dir / name}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    out_dir = Path(cfg.out_dir)
    vocab, train, dev, test = load_data(cfg)
    gen, gck = _load(load_generator, cfg.generator, "generator checkpoint")
    check_vocab(vocab, gck, "generator")
    records = dev if cfg.split == "dev" else test
    if not records:
        raise DataError(f"{cfg.split} split is empty")
    gc = cfg.stage("gen_", G.GeneratorConfig)
    rng = np.random.default_rng([cfg.seed, 4])
    rows = []
    for i in range(0, len(records), 64):
        chunk = records[i:i + 64]
        ctx = G.encode_inputs([vocab.encode(r) for r in chunk], gen)
        if cfg.decode == "greedy":
            outs = G.greedy_decode(ctx, gen, gc.max_len)
        else:
            outs = G.sample_decode(ctx, gen, gc.beta, gc.max_len, rng)
        for r, o in zip(chunk, outs):
            rows.append({"title": " ".join(r.title_tokens), "generated": " ".join(vocab.tokens(o.body)),
                         "gold": " ".join(r.body_tokens)})
    name = f"generations_{cfg.split}.jsonl"
    write_jsonl(out_dir / name, rows)
    print(f"wrote {len(rows)} generations to {out_dir / name}")
    return EXIT_OK


def _read_lines(path: str, key: str) -> list[list[str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            try:
                text = json.loads(line)[key]
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: expected a JSON object with {key!r}") from exc
        else:
            text = line
        out.append(text.split())
    return out


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out_dir = Path(cfg.out_dir)
    gens = _read_lines(cfg.generations, "generated")
    golds = _read_lines(cfg.references or cfg.generations, "gold")
    try:
        lexicon = load_lexicon(cfg.lexicon) if cfg.lexicon else sample_lexicon()
        report = evaluate_corpus(gens, golds, lexicon)
    except LexiconError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out_dir / "report.txt", report.format_table().encode())
    atomic_write_bytes(out_dir / "report.json", (report.to_json() + "\n").encode())
    print(report.format_table(), end="")
    return EXIT_OK


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train-teacher": cmd_train_teacher,
    "pretrain": cmd_pretrain,
    "train-policy": cmd_train_policy,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neural-teachers", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    keys = all_keys()
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--force", action="store_true", help="rerun even if a manifest exists")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "make-synthetic":
            sp.add_argument("--output", help="corpus path (default OUT_DIR/corpus.jsonl)")
        for key, (_, default) in keys.items():
            sp.add_argument("--" + key.replace("_", "-"), dest="cfg__" + key, metavar="V",
                            help=f"default {default!r}" if not isinstance(default, dataclasses._MISSING_TYPE)
                            else None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    flags = {k[5:]: v for k, v in vars(args).items() if k.startswith("cfg__") and v is not None}
    try:
        cfg = build_config(read_config_file(args.config) if args.config else {}, flags)
        validate(cfg, args.command)
        if args.command == "evaluate" or args.command == "make-synthetic":
            return COMMANDS[args.command](cfg, args)
        with Lock(Path(cfg.out_dir)):
            return COMMANDS[args.command](cfg, args)
    except (UsageError, DataError, MismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
