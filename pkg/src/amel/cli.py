"""Command-line entry point for reproducible runs.

Subcommands: gen-data, train, eval, ablate, gradcheck. Configuration comes
from JSON files with full-default fallbacks; ``--set section.field=value``
flags override file values. Every command writes the exact resolved
RunConfig (plus the tool version and seed) into its output directory, and
never mutates its input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import DomainRelevanceKnob, make_benchmark, read_dataset, write_dataset
from .errors import AmelError, ConfigError
from .evaluation import (
    ablate_aggregation,
    ablate_inference,
    dump_features,
    evaluate_backbone_only,
    evaluate_model,
)
from .gradcheck import phase_gradient_errors
from .model import AmelModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train


@dataclass
class DataConfig:
    """Synthetic benchmark generation parameters."""

    num_sources: int = 3
    n_live: int = 1000
    n_spoof: int = 1000
    relevance_source: int = 0
    relevance_delta: float = 0.0

    def validate(self) -> None:
        if self.num_sources < 1:
            raise ConfigError("data.num_sources", "need at least one source domain")
        if self.n_live < 0 or self.n_spoof < 0:
            raise ConfigError("data.n_live", "sample counts must be non-negative")


@dataclass
class RunConfig:
    seed: int = 0
    train_mode: str = "full"
    protocol: str = "loo"
    target_domain: Optional[int] = None
    dataset_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    out_dir: str = "runs/out"
    ablate_strategies: bool = True
    ablate_inference: bool = True
    ablate_designs: bool = False
    dump_features: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if self.protocol not in ("loo", "limited"):
            raise ConfigError("protocol", f"must be 'loo' or 'limited', got {self.protocol!r}")
        if self.train_mode not in ("full", "dse_dea", "baseline"):
            raise ConfigError("train_mode", f"unknown mode {self.train_mode!r}")
        self.data.validate()
        self.train.validate()
        self.model.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        cfg = cls()
        for section, value in payload.items():
            if not hasattr(cfg, section):
                raise ConfigError(section, "unknown config field")
            if section in ("model", "train", "data"):
                sub = getattr(cfg, section)
                for k, v in value.items():
                    if not hasattr(sub, k):
                        raise ConfigError(f"{section}.{k}", "unknown config field")
                    setattr(sub, k, v)
            else:
                setattr(cfg, section, value)
        return cfg


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.field=value")
        key, raw = item.split("=", 1)
        value = _coerce(raw)
        parts = key.split(".")
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(key, "unknown config field")
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(key, "unknown config field")
        setattr(target, leaf, value)


def load_run_config(args) -> RunConfig:
    if args.config:
        with open(args.config) as f:
            cfg = RunConfig.from_dict(json.load(f))
    else:
        cfg = RunConfig()
    apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    else:
        cfg.train.seed = cfg.seed if "train.seed" not in (args.set or []) else cfg.train.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "checkpoint", None):
        cfg.checkpoint_path = args.checkpoint
    if getattr(args, "dataset", None):
        cfg.dataset_path = args.dataset
    if getattr(args, "protocol", None):
        cfg.protocol = args.protocol
    if getattr(args, "target_domain", None) is not None:
        cfg.target_domain = args.target_domain
    cfg.validate()
    return cfg


def write_run_record(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"tool_version": __version__, "seed": cfg.seed, "config": cfg.to_dict()}
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _target_domain(cfg: RunConfig, num_domains: int) -> int:
    t = cfg.target_domain if cfg.target_domain is not None else num_domains - 1
    if not 0 <= t < num_domains:
        raise ConfigError("target_domain", f"{t} out of range for {num_domains} domains")
    return t


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    write_run_record(cfg, out)
    dataset = make_benchmark(
        cfg.data.num_sources,
        DomainRelevanceKnob(cfg.data.relevance_source, cfg.data.relevance_delta),
        n_live=cfg.data.n_live,
        n_spoof=cfg.data.n_spoof,
        image_hw=cfg.model.input_hw,
        depth_hw=cfg.model.depth_map_hw,
        seed=cfg.seed,
    )
    path = out / "dataset.amel"
    write_dataset(dataset, path)
    print(f"wrote {dataset.num_domains} domains to {path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.dataset_path:
        raise ConfigError("dataset_path", "train needs a dataset file (--dataset)")
    out = Path(cfg.out_dir)
    write_run_record(cfg, out)
    dataset = read_dataset(cfg.dataset_path)
    target = _target_domain(cfg, dataset.num_domains)
    sources = [d for d in range(dataset.num_domains) if d != target]
    sub = dataset.subset(sources)
    model_cfg = dataclasses.replace(cfg.model, num_domains=len(sources))
    model = AmelModel(model_cfg, np.random.default_rng(cfg.seed + 1_000_003))
    records = train(
        model,
        sub,
        cfg.train,
        mode=cfg.train_mode,
        log_path=out / "train_log.jsonl",
    )
    ckpt = out / "checkpoint.amel"
    save_checkpoint(model, ckpt)
    print(f"trained {cfg.train_mode} for {len(records)} iterations; checkpoint at {ckpt}")
    return 0


def _load_eval_inputs(cfg: RunConfig):
    if not cfg.dataset_path:
        raise ConfigError("dataset_path", "this command needs a dataset file (--dataset)")
    if not cfg.checkpoint_path:
        raise ConfigError("checkpoint_path", "this command needs a checkpoint (--checkpoint)")
    dataset = read_dataset(cfg.dataset_path)
    model = load_checkpoint(cfg.checkpoint_path)
    target = _target_domain(cfg, dataset.num_domains)
    images, labels, _ = dataset.domain_arrays(target)
    return dataset, model, target, images, labels


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    write_run_record(cfg, out)
    dataset, model, target, images, labels = _load_eval_inputs(cfg)
    strategies = ("dea", "average_voting", "expert_ensembling", "max_selection")
    if cfg.train_mode == "baseline":
        report = evaluate_backbone_only(model, images, labels)
    else:
        report = evaluate_model(
            model, images, labels, strategies=strategies if cfg.ablate_strategies else ()
        )
    report.write(out / "report.json", out / "roc.csv")
    if cfg.dump_features:
        rows = dump_features(model, dataset, out / "features.csv")
        print(f"dumped {rows} feature rows")
    print(f"target domain {target}: auc={report.auc:.4f} hter={report.hter_at['eer_threshold']:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    write_run_record(cfg, out)
    dataset, model, target, images, labels = _load_eval_inputs(cfg)
    results: dict = {"target_domain": target}
    if cfg.ablate_strategies:
        results["aggregation_strategies"] = ablate_aggregation(model, images, labels)
    if cfg.ablate_inference:
        results["inference_strategies"] = ablate_inference(model, images, labels)
    if cfg.ablate_designs:
        from .model import EXPERT_DESIGNS

        sources = [d for d in range(dataset.num_domains) if d != target]
        sub = dataset.subset(sources)
        designs: dict = {}
        for design in EXPERT_DESIGNS:
            model_cfg = dataclasses.replace(
                cfg.model, num_domains=len(sources), expert_design=design
            )
            m = AmelModel(model_cfg, np.random.default_rng(cfg.seed + 1_000_003))
            train(m, sub, cfg.train, mode=cfg.train_mode)
            rep = evaluate_model(m, images, labels)
            designs[design] = {"auc": rep.auc, "hter": rep.hter_at["eer_threshold"]}
        results["expert_designs"] = designs
    with open(out / "ablation.json", "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    errors = phase_gradient_errors(seed=cfg.seed)
    tol = 1e-4
    ok = all(v < tol for v in errors.values())
    for phase, err in errors.items():
        status = "pass" if err < tol else "FAIL"
        print(f"{status} {phase}: max relative fd error {err:.3e} (tolerance {tol:.0e})")
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        write_run_record(cfg, out)
        with open(out / "gradcheck.json", "w") as f:
            json.dump(
                {"tolerance": tol, "errors": errors, "pass": ok}, f, indent=2, sort_keys=True
            )
            f.write("\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amel",
        description="Domain-expert mixture training and evaluation on synthetic live/spoof data",
    )
    parser.add_argument("--version", action="version", version=f"amel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("gen-data", cmd_gen_data),
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("ablate", cmd_ablate),
        ("gradcheck", cmd_gradcheck),
    ):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON run config; defaults fill missing fields")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument("--dataset", help="dataset file path")
        p.add_argument("--protocol", choices=["loo", "limited"])
        p.add_argument("--target-domain", type=int, dest="target_domain")
        p.add_argument(
            "--set",
            action="append",
            metavar="FIELD=VALUE",
            help="override a config field, e.g. --set train.max_iters=50",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        return args.fn(cfg)
    except AmelError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            record["field"] = exc.field
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
