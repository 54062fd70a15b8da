"""``dashskip`` command line.

Subcommands: train-base, profile, calibrate, train-scorer, infer, bench, oracle.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .calibration import compute_scale_table, sample_calibration_set
from .model import BaseTrainConfig, ModelConfig, TrainingError, path_to_str, train_base_model, validation_quality
from .oracle import enumerate_paths, write_frontier_csv
from .profiler import (adjacent_similarity_profile, io_similarity_profile, static_skip_sweep, write_profile_csv,
                       write_sweep_csv)
from .rewards import (RewardConfig, ScorerTrainConfig, TableEnv, TrainingDivergence, greedy_cost_ratio,
                      search_beta, train_scorer)
from .runtime import run_async, run_sync
from .tasks import TaskSpec, make_task

log = logging.getLogger("dashskip")


@dataclass
class Seeds:
    base: int = 0
    calib: int = 0
    scorer: int = 0
    eval: int = 0


@dataclass
class ScorerDims:
    d_l: int = 16
    d_1: int = 64
    d_2: int = 64
    alpha_penalty: float = 0.05
    single_output: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(max_seq_len=9))
    task: TaskSpec = field(default_factory=lambda: TaskSpec(hops=2, n_pairs=4, n_train=8192, multiple_choice=True))
    base_train: BaseTrainConfig = field(default_factory=lambda: BaseTrainConfig(steps=3000))
    scorer: ScorerDims = field(default_factory=ScorerDims)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: ScorerTrainConfig = field(default_factory=lambda: ScorerTrainConfig(steps=400, lr=0.01))
    seeds: Seeds = field(default_factory=Seeds)
    targets: tuple[float, ...] = (1.33, 1.67, 2.0)
    calib_size: int = 128
    train_pool: int = 1024
    budget_tol: float = 0.015
    bench_seeds: int = 5
    random_trials: int = 200
    profile_samples: int = 256
    out: str = "runs"
    checkpoint: str = "runs/model.ckpt.json"

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return ckpt.config_hash(self.to_dict())


_SECTIONS = {"model": ModelConfig, "task": TaskSpec, "base_train": BaseTrainConfig, "scorer": ScorerDims,
             "reward": RewardConfig, "train": ScorerTrainConfig, "seeds": Seeds}


class ConfigError(ValueError):
    pass


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    raw = yaml.safe_load(p.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    updates = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            known = {f.name for f in fields(cls)}
            bad = set(value) - known
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            updates[key] = replace(getattr(cfg, key), **value)
        elif key in {f.name for f in fields(RunConfig)}:
            updates[key] = tuple(value) if key == "targets" else value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(cfg, **updates)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = replace(cfg, seeds=Seeds(s, s, s, s), model=replace(cfg.model, seed=s))
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "checkpoint", None):
        cfg = replace(cfg, checkpoint=args.checkpoint)
    return cfg


def provenance(cfg: RunConfig, seed: int, what: str) -> str:
    return f"{what} config_hash={cfg.hash} seed={seed}"


def _out(cfg: RunConfig, name: str) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p / name


def _load(cfg: RunConfig, need_scales=False, need_scorer=False) -> ckpt.Checkpoint:
    c = ckpt.load_checkpoint(cfg.checkpoint)
    if need_scales and c.scales is None:
        raise RuntimeFailure(f"{cfg.checkpoint} has no scale table; run `dashskip calibrate` first")
    if need_scorer and c.scorer is None:
        raise RuntimeFailure(f"{cfg.checkpoint} has no scorer; run `dashskip train-scorer` first")
    return c


class RuntimeFailure(RuntimeError):
    pass


# -- commands ------------------------------------------------------------------------


def cmd_train_base(cfg: RunConfig, args) -> int:
    task = make_task(cfg.task)
    model_cfg = replace(cfg.model, max_seq_len=max(cfg.model.max_seq_len, task.seq_len))
    model = train_base_model(model_cfg, task, cfg.base_train)
    q = validation_quality(model, task)
    ckpt.save_checkpoint(cfg.checkpoint, model, task_spec=cfg.task, seed=model_cfg.seed,
                         extra={"config_hash": cfg.hash})
    metric = "val_accuracy" if task.kind == "classification" else "val_perplexity"
    print(f"{metric}={q!r} checkpoint={cfg.checkpoint} seed={model_cfg.seed} config_hash={cfg.hash}")
    return 0


def cmd_profile(cfg: RunConfig, args) -> int:
    c = _load(cfg)
    task = make_task(c.task_spec or cfg.task)
    n = min(cfg.profile_samples, len(task.test))
    tokens = task.test.tokens[:n]
    head = provenance(cfg, cfg.seeds.eval, "profile")
    io = io_similarity_profile(c.model, tokens)
    write_profile_csv(_out(cfg, "io_similarity.csv"), io, head)
    adj = adjacent_similarity_profile(c.model, tokens)
    write_profile_csv(_out(cfg, "adjacent_similarity.csv"), adj, head)
    sweep = static_skip_sweep(c.model, task.test, c.model.n_layers - 2, io)
    write_sweep_csv(_out(cfg, "static_sweep.csv"), sweep, head)
    print(f"io_mean={[round(float(x), 4) for x in io.mean]} sweep={[round(p.accuracy, 4) for p in sweep]}")
    return 0


def cmd_calibrate(cfg: RunConfig, args) -> int:
    c = _load(cfg)
    task = make_task(c.task_spec or cfg.task)
    calib = sample_calibration_set(task.train.tokens, cfg.calib_size, cfg.seeds.calib)
    table = compute_scale_table(c.model, calib)
    ckpt.update_checkpoint(cfg.checkpoint, scales=table)
    print(f"scales={list(table.scales)} calib_size={table.calib_size} fingerprint={table.fingerprint}")
    return 0


def _scorer_init(cfg: RunConfig, model, seed):
    from .policy import init_scorer

    s = cfg.scorer
    return init_scorer(model.config.d_model, model.n_layers, s.d_l, s.d_1, s.d_2, s.alpha_penalty, seed=seed,
                       single_output=s.single_output)


def cmd_train_scorer(cfg: RunConfig, args) -> int:
    from .oracle import MAX_ENUM_LAYERS, PathTable
    from .rewards import LiveEnv

    c = _load(cfg, need_scales=True)
    task = make_task(c.task_spec or cfg.task)
    seed = cfg.seeds.scorer
    pool = task.train.subset(np.arange(min(cfg.train_pool, len(task.train))))
    frozen = cfg.train.mode == "frozen" and c.model.n_layers <= MAX_ENUM_LAYERS
    env = TableEnv(PathTable(c.model, pool, c.scales), c.scales, reward_cfg=cfg.reward) if frozen else \
        LiveEnv(c.model, pool, c.scales, reward_cfg=cfg.reward)
    tc = replace(cfg.train, seed=seed)
    init = _scorer_init(cfg, c.model, seed)
    reward = cfg.reward
    if args.target_ratio is not None:
        res = search_beta(c.model, init, env, 1.0 / args.target_ratio, cfg.reward, tc, tol=cfg.budget_tol)
        reward = replace(cfg.reward, beta=res.beta)
        log.info("budget search: beta=%.6g attained=%s", res.beta, res.attained)
    result = train_scorer(c.model, init, env, reward, tc, log_path=_out(cfg, "scorer_log.csv"),
                          header_comment=provenance(cfg, seed, f"train-scorer beta={reward.beta!r}"))
    ratio, q = greedy_cost_ratio(result.params, env)
    extra = {"scorer_seed": seed, "beta": reward.beta, "config_hash": cfg.hash}
    if cfg.train.mode == "cotrain":
        ckpt.save_checkpoint(cfg.checkpoint, c.model, task_spec=c.task_spec, seed=c.seed, scales=c.scales,
                             scorer=result.params, extra={**c.extra, **extra})
    else:
        ckpt.update_checkpoint(cfg.checkpoint, scorer=result.params, extra=extra)
    print(f"beta={reward.beta!r} train_cost_ratio={ratio!r} train_quality={q!r}")
    if args.target_ratio is not None and abs(ratio - 1.0 / args.target_ratio) > cfg.budget_tol * 2 / args.target_ratio:
        log.warning("target %.3fx not attained (cost ratio %.4f)", args.target_ratio, ratio)
    return 0


def _parse_tokens(text: str) -> np.ndarray:
    p = Path(text)
    if p.exists():
        text = p.read_text()
    toks = [int(t) for t in text.replace(",", " ").split()]
    if not toks:
        raise ValueError("empty input")
    return np.array([toks], dtype=np.int64)


def cmd_infer(cfg: RunConfig, args) -> int:
    c = _load(cfg, need_scales=True, need_scorer=True)
    if args.input is None:
        task = make_task(c.task_spec or cfg.task)
        tokens = task.test.tokens[:1]
    else:
        tokens = _parse_tokens(args.input)
    if tokens.max() >= c.model.config.vocab_size or tokens.min() < 0:
        raise ValueError("input token outside the vocabulary")
    runner = run_async if args.mode == "async" else run_sync
    logits, report = runner(c.model, c.scorer, c.scales, tokens)
    doc = report.to_dict()
    doc["prediction"] = int(logits[0, -1].argmax())
    doc["config_hash"] = cfg.hash
    doc["seed"] = cfg.seeds.eval
    text = json.dumps(doc, indent=2, sort_keys=True)
    _out(cfg, f"infer_{args.mode}.json").write_text(text + "\n")
    print(text)
    return 0


def _bench(cfg: RunConfig, c):
    from .experiments import ScorerSetup, Workbench

    task = make_task(c.task_spec or cfg.task)
    s = cfg.scorer
    return Workbench(c.model, task, c.scales, cfg.reward, cfg.train,
                     ScorerSetup(s.d_l, s.d_1, s.d_2, s.alpha_penalty, s.single_output), cfg.train_pool,
                     cfg.budget_tol)


def cmd_bench(cfg: RunConfig, args) -> int:
    from .experiments import frontier, run_bench

    c = _load(cfg, need_scales=True)
    bench = _bench(cfg, c)
    targets = (args.target_ratio,) if args.target_ratio is not None else cfg.targets
    seeds = [cfg.seeds.scorer + i for i in range(cfg.bench_seeds)]
    rows = run_bench(bench, targets, seeds, cfg.random_trials)
    path = _out(cfg, "bench.csv")
    with path.open("w", newline="") as f:
        f.write(f"# {provenance(cfg, cfg.seeds.scorer, 'bench')}\n")
        w = csv.DictWriter(f, fieldnames=["method", "target_ratio", "achieved_ratio", "quality", "seed"])
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
    front = frontier(bench)
    write_frontier_csv(_out(cfg, "frontier.csv"), front, provenance(cfg, cfg.seeds.eval, "frontier"))
    _print_table(rows)
    return 0


def _print_table(rows) -> None:
    by = {}
    for r in rows:
        by.setdefault((r.method, r.target_speedup), []).append(r)
    print(f"{'method':26s} {'target':>7s} {'ratio':>7s} {'quality':>8s} {'n':>3s}")
    for (m, t), rs in by.items():
        print(f"{m:26s} {t:7.2f} {np.mean([r.achieved_ratio for r in rs]):7.4f} "
              f"{np.mean([r.quality for r in rs]):8.4f} {len(rs):3d}")


def cmd_oracle(cfg: RunConfig, args) -> int:
    from .oracle import PathTable, pareto_frontier

    c = _load(cfg, need_scales=True)
    task = make_task(c.task_spec or cfg.task)
    enumerate_paths(c.model.n_layers)  # raises for L > 8
    table = PathTable(c.model, task.test, c.scales)
    evals = table.evaluations()
    front = pareto_frontier(evals)
    write_frontier_csv(_out(cfg, "frontier.csv"), front, provenance(cfg, cfg.seeds.eval, "oracle"))
    for e in front:
        print(f"{e.cost:3d} {e.quality:.4f} {e.path_str}")
    return 0


COMMANDS = {
    "train-base": cmd_train_base,
    "profile": cmd_profile,
    "calibrate": cmd_calibrate,
    "train-scorer": cmd_train_scorer,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "oracle": cmd_oracle,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dashskip", description="Dynamic layer skipping on a toy transformer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="override every named seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path")
        if name in ("train-scorer", "bench"):
            p.add_argument("--target-ratio", type=float, help="target speedup, e.g. 1.67")
        if name == "infer":
            p.add_argument("--mode", choices=("sync", "async"), default="sync")
            p.add_argument("--input", help="token ids (space/comma separated) or a file holding them")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except (ConfigError, TypeError, ValueError, yaml.YAMLError) as e:
        print(f"dashskip: config error: {e}", file=sys.stderr)
        return 1
    target = getattr(args, "target_ratio", None)
    if target is not None and not 1.0 <= target <= 4.0:
        print("dashskip: --target-ratio must lie in [1, 4]", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, ckpt.CheckpointError, RuntimeFailure, TrainingError, TrainingDivergence,
            ValueError) as e:
        print(f"dashskip {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
