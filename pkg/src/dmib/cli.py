"""Command-line entry point.

    dmib train     --config exp.json [--out DIR] [--seed N] [--set key=value ...]
    dmib ablate    --config exp.json ...
    dmib eval      --config exp.json [--checkpoint model.ckpt] ...
    dmib verify    [--trials 100] [--seed N] [--out DIR]
    dmib gen-synth --out DIR [--seed N] [--set n_samples=300 ...]

Experiment configs are JSON documents with a fixed set of keys; unknown keys
are rejected before anything runs. The fully resolved config, including any
``--set`` overrides, is written next to the results.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import shutil
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from .data import (
    MultimodalDataset,
    NoiseSpec,
    Preprocessor,
    SynthSpec,
    gen_synthetic,
    inject_noise_channel,
    load_modalities,
    split_stratified,
    write_labels,
    write_table,
)
from .errors import ConfigurationError, DataError, DmibError
from .losses import AblationFlags
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, ablation_table, cross_validate, evaluate_model, run_ablation
from .verification import run_verification

logger = logging.getLogger("dmib")

# ---------------------------------------------------------------------------
# config schema

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthSpec)}
_NOISE_KEYS = {f.name for f in dataclasses.fields(NoiseSpec)} | {"seed"}
_FLAG_KEYS = {f.name for f in dataclasses.fields(AblationFlags)}

_SCHEMA = {
    "seed": int,
    "out": str,
    "overrides": list,
    "data": {"synthetic": _SYNTH_KEYS, "modalities": list, "names": list, "labels": str},
    "noise": list,
    "split": {"test_frac": float, "k": int},
    "train": _TRAIN_KEYS,
}


def _reject_unknown(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown config key(s) in {section}: {', '.join(unknown)}")


def validate_config(raw: dict) -> None:
    _reject_unknown("<top>", raw, _SCHEMA)
    data = raw.get("data", {})
    _reject_unknown("data", data, _SCHEMA["data"])
    if data.get("synthetic") is not None:
        _reject_unknown("data.synthetic", data["synthetic"], _SYNTH_KEYS)
    _reject_unknown("split", raw.get("split", {}), _SCHEMA["split"])
    train = raw.get("train", {})
    _reject_unknown("train", train, _TRAIN_KEYS)
    if isinstance(train.get("flags"), dict):
        _reject_unknown("train.flags", train["flags"], _FLAG_KEYS)
    for i, spec in enumerate(raw.get("noise", [])):
        _reject_unknown(f"noise[{i}]", spec, _NOISE_KEYS)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one dotted ``key=value`` assignment; values are parsed as JSON when possible."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override must look like key=value, got {assignment!r}")
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(value)


def resolve_config(raw: dict, overrides: List[str] = (), seed: Optional[int] = None,
                   out: Optional[str] = None) -> dict:
    """Validate, apply overrides and materialize every default."""
    cfg = copy.deepcopy(raw)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    validate_config(cfg)
    cfg["overrides"] = list(cfg.get("overrides", [])) + list(overrides)
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "runs/default")

    data = cfg.setdefault("data", {})
    if data.get("synthetic") is None and not data.get("modalities"):
        data["synthetic"] = {}
    if data.get("synthetic") is not None:
        data["synthetic"] = dataclasses.asdict(SynthSpec(**data["synthetic"]))
    else:
        if not data.get("labels"):
            raise ConfigurationError("data.labels is required when data.modalities is given")
        data.setdefault("names", None)
    noise = []
    for spec in cfg.get("noise", []):
        spec = dict(spec)
        spec_seed = spec.pop("seed", cfg["seed"])
        noise.append({**dataclasses.asdict(NoiseSpec(**spec)), "seed": spec_seed})
    cfg["noise"] = noise
    split = cfg.setdefault("split", {})
    split.setdefault("test_frac", 0.2)
    split.setdefault("k", 5)
    train = TrainConfig(**cfg.get("train", {}), seed=cfg["seed"])
    cfg["train"] = {k: v for k, v in train.as_dict().items() if k != "seed"}
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"])


def build_dataset(cfg: dict) -> MultimodalDataset:
    data = cfg["data"]
    if data.get("synthetic") is not None:
        ds = gen_synthetic(SynthSpec(**data["synthetic"]), cfg["seed"])
    else:
        ds = load_modalities(data["modalities"], data["labels"], data.get("names"))
    for spec in cfg["noise"]:
        spec = dict(spec)
        s = spec.pop("seed")
        ds = inject_noise_channel(ds, NoiseSpec(**spec), s)
    return ds


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return raw


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# output handling


class OutputDir:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, path: str):
        self.path = path
        self.created_dir = not os.path.isdir(path)
        self.written: List[str] = []

    def open(self):
        os.makedirs(self.path, exist_ok=True)
        return self

    def file(self, name: str) -> str:
        p = os.path.join(self.path, name)
        self.written.append(p)
        return p

    def write_text(self, name: str, text: str) -> str:
        p = self.file(name)
        with open(p, "w") as fh:
            fh.write(text)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            if os.path.exists(p):
                os.remove(p)
        if self.created_dir and os.path.isdir(self.path):
            shutil.rmtree(self.path, ignore_errors=True)


def _run(out_path: str, body) -> int:
    out = OutputDir(out_path)
    try:
        out.open()
        body(out)
    except (DmibError, OSError, ArithmeticError) as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _prepare(args) -> dict:
    raw = load_config_file(args.config)
    try:
        return resolve_config(raw, args.set or [], args.seed, args.out)
    except TypeError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    try:
        cfg = _prepare(args)
    except DmibError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def body(out: OutputDir):
        ds = build_dataset(cfg)
        plan = split_stratified(ds.labels, cfg["split"]["test_frac"], cfg["split"]["k"], cfg["seed"], ds.group_ids)
        tc = train_config(cfg)
        out.write_text("resolved_config.json", _dump(cfg))
        with open(out.file("training_log.jsonl"), "w") as log_fh:
            record = cross_validate(
                ds, plan, tc, lambda e: log_fh.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")
            )
        out.write_text("run_record.json", _dump(record.as_dict()))
        out.write_text("metrics_report.txt", record.test.to_text())
        chosen = record.selected
        save_checkpoint(
            out.file("model.ckpt"), chosen.net, chosen.prep.blocks(),
            {"modalities": ds.modality_names, "fold": record.selected_fold, "flags": list(record.flags),
             "threshold": tc.threshold},
        )
        print(record.test.to_text().split("# machine-readable")[0], end="")

    return _run(cfg["out"], body)


def cmd_ablate(args) -> int:
    try:
        cfg = _prepare(args)
    except DmibError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def body(out: OutputDir):
        ds = build_dataset(cfg)
        plan = split_stratified(ds.labels, cfg["split"]["test_frac"], cfg["split"]["k"], cfg["seed"], ds.group_ids)
        out.write_text("resolved_config.json", _dump(cfg))
        results = run_ablation(ds, plan, train_config(cfg))
        table = ablation_table(results)
        out.write_text("ablation_table.tsv", table)
        out.write_text("ablation_records.json", _dump([{"row": r, **rec.as_dict()} for r, rec in results]))
        print(table, end="")

    return _run(cfg["out"], body)


def cmd_eval(args) -> int:
    try:
        cfg = _prepare(args)
    except DmibError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ckpt = args.checkpoint or os.path.join(cfg["out"], "model.ckpt")

    def body(out: OutputDir):
        if not os.path.exists(ckpt):
            raise DataError(f"checkpoint not found: {ckpt}")
        net, meta, blocks = load_checkpoint(ckpt)
        ds = build_dataset(cfg)
        if list(meta.get("modalities", ds.modality_names)) != ds.modality_names:
            raise DataError(f"checkpoint modalities {meta['modalities']} != dataset {ds.modality_names}")
        rows = np.arange(ds.n_samples)
        if args.split == "test":
            rows = split_stratified(ds.labels, cfg["split"]["test_frac"], cfg["split"]["k"],
                                    cfg["seed"], ds.group_ids).test
        report = evaluate_model(net, Preprocessor.from_blocks(blocks), ds, rows, meta.get("threshold", 0.5))
        out.write_text(f"eval_report_{args.split}.txt", report.to_text())
        print(report.to_text().split("# machine-readable")[0], end="")

    return _run(cfg["out"], body)


def cmd_verify(args) -> int:
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 2
    report = run_verification(args.trials, args.seed or 0)
    text = report.to_text()
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verification_report.txt"), "w") as fh:
            fh.write(text)
    return 0 if report.passed else 1


def cmd_gen_synth(args) -> int:
    try:
        raw = {}
        if args.config:
            raw = load_config_file(args.config).get("data", {}).get("synthetic") or {}
        for assignment in args.set or []:
            apply_override(raw, assignment)
        _reject_unknown("synthetic", raw, _SYNTH_KEYS)
        spec = SynthSpec(**raw)
    except (DmibError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.out:
        print("error: gen-synth needs --out", file=sys.stderr)
        return 2

    def body(out: OutputDir):
        ds = gen_synthetic(spec, args.seed or 0)
        for name, x in ds.modalities.items():
            write_table(out.file(f"{name}.csv"), ds.sample_ids, x)
        write_labels(out.file("labels.csv"), ds)
        print(f"wrote {len(ds.modalities)} modality tables and labels.csv to {args.out}")

    return _run(args.out, body)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmib", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    common(sub.add_parser("train", help="cross-validate, select by validation AUC, test"))
    common(sub.add_parser("ablate", help="run the six ablation settings"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--split", choices=("all", "test"), default="all")
    p_verify = sub.add_parser("verify", help="numerical self-checks")
    p_verify.add_argument("--trials", type=int, default=100)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default=None)
    common(sub.add_parser("gen-synth", help="write a synthetic dataset"), config_required=False)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler = {
        "train": cmd_train,
        "ablate": cmd_ablate,
        "eval": cmd_eval,
        "verify": cmd_verify,
        "gen-synth": cmd_gen_synth,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
