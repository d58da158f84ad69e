"""Command-line surface: data generation, pseudo labeling, training phases,
evaluation, inference, and the oracle selfcheck.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from .composer import ComposerConfig
from .errors import ConfigError, DataError, MemdialError
from .inference import DecodeConfig, evaluate, respond
from .neural import ModelConfig
from .training import (TrainingConfig, load_train_state, save_train_state,
                       train)

_SYNTH_FIELDS = {f.name for f in dataclasses.fields(corpus_mod.SyntheticSpec)}


def _coerce(value, typ):
    if typ in (int, "int | None"):
        return int(value)
    if typ in (float, "float | None"):
        return float(value)
    if typ is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return value


def _section_to_dataclass(parser, section, cls, errors):
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    if parser.has_section(section):
        for key, value in parser.items(section):
            if key not in fields:
                errors.append(f"[{section}] unknown key {key!r}")
                continue
            typ = fields[key]
            if isinstance(typ, str):
                typ = {"int": int, "float": float, "bool": bool, "str": str,
                       "int | None": int, "float | None": float}.get(typ, str)
            try:
                kwargs[key] = _coerce(value, typ)
            except ValueError as e:
                errors.append(f"[{section}] {key}: {e}")
    return kwargs


class RunConfig:
    """Validated union of all sections of a run config file."""

    KNOWN_SECTIONS = ("model", "training", "decode", "composer", "paths", "run")

    def __init__(self, path):
        parser = configparser.ConfigParser()
        read = parser.read(path)
        errors = []
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in self.KNOWN_SECTIONS:
                errors.append(f"unknown section [{section}]")
        self.training_kwargs = _section_to_dataclass(parser, "training",
                                                     TrainingConfig, errors)
        self.model_kwargs = _section_to_dataclass(parser, "model", ModelConfig, errors)
        self.decode_kwargs = _section_to_dataclass(parser, "decode", DecodeConfig, errors)
        self.composer_kwargs = _section_to_dataclass(parser, "composer",
                                                     ComposerConfig, errors)
        self.paths = dict(parser.items("paths")) if parser.has_section("paths") else {}
        self.run = dict(parser.items("run")) if parser.has_section("run") else {}
        known_paths = {"corpus", "memory", "truth", "log", "checkpoint", "report"}
        for key in self.paths:
            if key not in known_paths:
                errors.append(f"[paths] unknown key {key!r}")
        known_run = {"eval_m", "eval_mode", "seed"}
        for key in self.run:
            if key not in known_run:
                errors.append(f"[run] unknown key {key!r}")
        if errors:
            raise ConfigError("config validation failed:\n  " + "\n  ".join(errors))

    def training(self):
        return TrainingConfig(**self.training_kwargs).validate()

    def decode(self):
        return DecodeConfig(**self.decode_kwargs).validate()

    def composer(self):
        return ComposerConfig(**self.composer_kwargs)

    def model(self, vocab_size):
        kwargs = dict(self.model_kwargs)
        kwargs.setdefault("vocab_size", vocab_size)
        return ModelConfig(**kwargs)

    def path(self, key, required=True):
        if key not in self.paths:
            if required:
                raise ConfigError(f"config missing [paths] {key}")
            return None
        return self.paths[key]


def _check_writable(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _load_data(cfg):
    cases = corpus_mod.load_corpus(cfg.path("corpus"))
    repo = corpus_mod.load_memory(cfg.path("memory"))
    truth_path = cfg.path("truth", required=False)
    truth = corpus_mod.load_truth(truth_path) if truth_path else None
    return cases, repo, truth


def cmd_gen_data(args):
    with open(args.spec, encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - _SYNTH_FIELDS
    if unknown:
        raise ConfigError(f"synthetic spec: unknown keys {sorted(unknown)}")
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = corpus_mod.SyntheticSpec(**raw)
    result = corpus_mod.generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    for name in ("corpus.jsonl", "memory.jsonl", "truth.jsonl", "meta.json"):
        _check_writable(os.path.join(args.out, name), args.force)
    corpus_mod.write_corpus(result.cases, os.path.join(args.out, "corpus.jsonl"))
    corpus_mod.write_memory(result.repo, os.path.join(args.out, "memory.jsonl"))
    corpus_mod.write_truth(result.truth, os.path.join(args.out, "truth.jsonl"))
    meta = {"user_key_hash": "sha256/16hex", "spec": dataclasses.asdict(spec),
            "table": result.table.tolist()}
    with open(os.path.join(args.out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {len(result.cases)} cases, {len(result.repo.entries)} users -> {args.out}")
    return 0


def cmd_label(args):
    cases = corpus_mod.load_corpus(args.corpus)
    repo = corpus_mod.load_memory(args.memory)
    _check_writable(args.out, args.force)
    rows = []
    for case in cases:
        if case.user_key not in repo.entries:
            raise DataError(f"case {case.id}: user {case.user_key!r} missing "
                            "from memory file")
        mem = corpus_mod.retrieve_memory(repo, case.user_key)
        labels = corpus_mod.pseudo_labels(case, mem)
        rows.append({"id": case.id, "k_bar": labels.k_bar, "p_bar": labels.p_bar})
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"labeled {len(rows)} cases -> {args.out}")
    return 0


def _run_training(args, stop_after_warmup):
    cfg = RunConfig(args.config)
    cases, repo, truth = _load_data(cfg)
    tcfg = cfg.training()
    if stop_after_warmup:
        tcfg.dual_steps = 0
    log_path = cfg.path("log", required=False)
    ckpt_path = cfg.path("checkpoint", required=False)
    if log_path:
        _check_writable(log_path, args.force)
    state = None
    if args.resume:
        state = load_train_state(args.resume)
    vocab = corpus_mod.Vocabulary.from_corpus(cases, repo)
    model_cfg = cfg.model(len(vocab))
    state, records = train(tcfg, cases, repo, model_cfg=model_cfg, vocab=vocab,
                           truth=truth, log_path=log_path,
                           composer_cfg=cfg.composer(), state=state,
                           checkpoint_path=ckpt_path,
                           checkpoint_every=None if not ckpt_path else
                           max(1, tcfg.probe_every))
    if ckpt_path:
        save_train_state(ckpt_path, state)
        print(f"checkpoint -> {ckpt_path}")
    last = records[-1] if records else {}
    print(f"finished at step {last.get('step')} phase {last.get('phase')}")
    return 0


def cmd_warmup(args):
    return _run_training(args, stop_after_warmup=True)


def cmd_train(args):
    return _run_training(args, stop_after_warmup=False)


def cmd_eval(args):
    cfg = RunConfig(args.config)
    cases, repo, truth = _load_data(cfg)
    state = load_train_state(cfg.path("checkpoint"))
    report_path = cfg.path("report", required=False)
    if report_path:
        _check_writable(report_path, args.force)
    m = int(cfg.run.get("eval_m", 2))
    mode = cfg.run.get("eval_mode", "argmax")
    rng = np.random.default_rng(int(cfg.run.get("seed", 0)))
    report = evaluate(cases, repo, state, decode_cfg=cfg.decode(), m=m,
                      truth=truth, mode=mode, rng=rng)
    text = json.dumps(report, sort_keys=True, indent=2)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_infer(args):
    cfg = RunConfig(args.config)
    cases, repo, _ = _load_data(cfg)
    state = load_train_state(cfg.path("checkpoint"))
    if args.case_id:
        matches = [c for c in cases if c.id == args.case_id]
        if not matches:
            raise DataError(f"case id {args.case_id!r} not found")
        case = matches[0]
    else:
        case = cases[0]
    rng = np.random.default_rng(int(cfg.run.get("seed", 0)))
    mode = cfg.run.get("eval_mode", "argmax")
    zp, zk, tokens, _ = respond(case.context, case.user_key, case.knowledge,
                                state, repo, decode_cfg=cfg.decode(),
                                m=int(cfg.run.get("eval_m", 2)),
                                mode=mode, rng=rng)
    print(f"case {case.id}: zp={zp} zk={zk}")
    print(" ".join(tokens))
    return 0


def cmd_selfcheck(args):
    from .selfcheck import run_selfcheck

    ok = run_selfcheck(stream=sys.stdout)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="memdial",
        description="Personalized knowledge-grounded dialogue toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("label", help="tag pseudo labels")
    p.add_argument("--corpus", required=True)
    p.add_argument("--memory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_label)

    for name, fn in (("warmup", cmd_warmup), ("train", cmd_train)):
        p = sub.add_parser(name, help=f"run the {name} phase")
        p.add_argument("--config", required=True)
        p.add_argument("--resume", default=None)
        p.add_argument("--force", action="store_true")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="evaluate a trained state")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="respond to one case")
    p.add_argument("--config", required=True)
    p.add_argument("--case-id", default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("selfcheck", help="run the oracle suite")
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MemdialError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
