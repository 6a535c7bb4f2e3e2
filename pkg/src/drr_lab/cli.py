"""Experiment harness: ``drr-lab <command> [--config FILE] [--set key=value ...]``.

Config files are plain ``section.key = value`` lines, ``#`` starts a comment.
Every command writes its artifact plus ``<artifact>.manifest.json`` holding
the config digest, seed, library versions and wall time.

Exit codes: 0 success, 2 usage, 3 missing or mismatched prerequisite,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, CheckpointError, load_checkpoint, read_checkpoint_header, save_checkpoint
from .baselines import LinUcbPolicy, PmfRanker, PopularityModel
from .datasets import (FIVE_STAR, JESTER, CsvSchema, DatasetError, analyze_sequential_patterns, build_eval_sessions,
                       parse_generic_csv, parse_movielens_1m, parse_movielens_100k,
                       read_canonical_csv, split_random, write_canonical_csv, write_pattern_csv)
from .envloop import (EXPLORE_ACTIONS, DrrPolicy, TrainConfig, TrainingAborted, eval_offline, eval_online, eval_online_policy,
                      reward_kind_for, train, write_training_log)
from .pmf import EmbeddingFileError, PmfConfig, PmfDivergence, load_embeddings, rmse, save_embeddings, train_pmf
from .staterep import VARIANTS

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
FORMATS = ("ml100k", "ml1m", "csv")
METRICS_HEADER = "metric,k,value,seed,variant,dataset"


class UsageError(Exception):
    pass


class MissingPrerequisite(Exception):
    pass


# ---------------------------------------------------------------- config

@dataclass
class DatasetSection:
    name: str = "ml100k"
    path: str = "data/ml-100k/u.data"
    format: str = "ml100k"
    scale: str = "five_star"
    train_fraction: float = 0.8
    csv_delimiter: str = ","


@dataclass
class EmbeddingSection:
    k: int = 100
    learning_rate: float = 0.005
    l2_lambda: float = 0.02
    epochs: int = 30
    init_scale: float = 0.1


@dataclass
class AgentSection:
    variant: str = "drr_ave"
    actor_hidden: tuple = (256, 128)
    critic_hidden: tuple = (256, 128)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    l2: float = 1e-6
    gamma: float = 0.9
    tau: float = 0.001
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    batch_size: int = 64
    buffer_capacity: int = 100_000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    priority_floor: float = 1e-5
    explore_action: str = "item"
    n: int = 5
    T: int = 10
    M: int = 1500


@dataclass
class EvalSection:
    k: tuple = (5, 10)
    seeds: tuple = (0, 1, 2, 3, 4)
    linucb_alphas: tuple = (0.1, 0.5, 1.0)
    sweep_T: tuple = (5, 10, 15, 20)


@dataclass
class PathsSection:
    data: str = "runs/data"
    embeddings: str = "runs/embeddings"
    checkpoints: str = "runs/checkpoints"
    reports: str = "runs/reports"


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    agent: AgentSection = field(default_factory=AgentSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> None:
        a = self.agent
        if not 0.0 <= a.gamma <= 1.0:
            raise UsageError(f"agent.gamma must lie in [0, 1], got {a.gamma}")
        if a.n < 1 or a.T < 1 or a.M < 1:
            raise UsageError("agent.n, agent.T and agent.M must be >= 1")
        if a.variant not in VARIANTS:
            raise UsageError(f"agent.variant must be one of {', '.join(VARIANTS)}")
        if a.explore_action not in EXPLORE_ACTIONS:
            raise UsageError(f"agent.explore_action must be one of {', '.join(EXPLORE_ACTIONS)}")
        if self.dataset.format not in FORMATS:
            raise UsageError(f"dataset.format must be one of {', '.join(FORMATS)}")
        if self.dataset.scale not in ("five_star", "jester"):
            raise UsageError("dataset.scale must be five_star or jester")
        if not self.eval.k or min(self.eval.k) < 1:
            raise UsageError("eval.k must list positive cutoffs")

    # -- text form
    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        sec = getattr(self, section, None) if section in _SECTIONS else None
        if sec is None or not name or name not in {f.name for f in dataclasses.fields(sec)}:
            raise UsageError(f"unknown config key {key!r}")
        current = getattr(sec, name)
        setattr(sec, name, _coerce(raw.strip(), current, key))

    def dumps(self) -> str:
        lines = []
        for section in _SECTIONS:
            sec = getattr(self, section)
            for f in dataclasses.fields(sec):
                lines.append(f"{section}.{f.name} = {_render(getattr(sec, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self, sections=None) -> str:
        """sha256 over the canonical text of the chosen sections (all by default)."""
        keep = tuple(sections or _SECTIONS)
        text = "".join(line + "\n" for line in self.dumps().splitlines() if line.split(".", 1)[0] in keep)
        return hashlib.sha256(text.encode()).hexdigest()

    def agent_config(self) -> AgentConfig:
        a = self.agent
        return AgentConfig(variant=a.variant, n=a.n, actor_hidden=tuple(a.actor_hidden),
                           critic_hidden=tuple(a.critic_hidden), actor_lr=a.actor_lr, critic_lr=a.critic_lr,
                           l2=a.l2, gamma=a.gamma, tau=a.tau, batch_size=a.batch_size, eps_start=a.eps_start,
                           eps_end=a.eps_end, eps_decay_steps=a.eps_decay_steps)

    def train_config(self, seed: int) -> TrainConfig:
        a = self.agent
        return TrainConfig(episodes=a.M, horizon=a.T, buffer_capacity=a.buffer_capacity, per_alpha=a.per_alpha,
                           per_beta_start=a.per_beta_start, per_beta_end=a.per_beta_end,
                           priority_floor=a.priority_floor, seed=seed, explore_action=a.explore_action)

    def pmf_config(self, seed: int) -> PmfConfig:
        e = self.embedding
        return PmfConfig(k=e.k, learning_rate=e.learning_rate, l2_lambda=e.l2_lambda, epochs=e.epochs,
                         seed=seed, init_scale=e.init_scale)


_SECTIONS = ("dataset", "embedding", "agent", "eval", "paths")
# which sections each artifact depends on; used for the mismatch check
_EMB_SECTIONS = ("dataset", "embedding")
_CKPT_SECTIONS = ("dataset", "embedding", "agent")


def _render(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(kind(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key}") from None
    return raw


def parse_config(text: str, cfg: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value'")
        try:
            cfg.set(key.strip(), value)
        except UsageError as exc:
            raise UsageError(f"{origin}:{lineno}: {exc}") from None
    return cfg


def load_config(path: str | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingPrerequisite(f"config file {path} not found")
        parse_config(p.read_text(encoding="utf-8"), cfg, str(p))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- artifacts

def _versions() -> dict:
    import numba
    return {"drr_lab": __version__, "numpy": np.__version__, "numba": numba.__version__,
            "python": platform.python_version()}


def write_manifest(artifact: Path, cfg: RunConfig, seed: int | None, started: float, argv, extra=None) -> Path:
    out = {"artifact": artifact.name, "command": argv[0] if argv else "", "argv": list(argv),
           "config_digest": cfg.digest(), "config": cfg.dumps().splitlines(), "seed": seed,
           "versions": _versions(), "wall_time_seconds": round(time.time() - started, 3)}
    out.update(extra or {})
    path = artifact.with_name(artifact.name + ".manifest.json")
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_manifest(artifact: Path) -> dict:
    path = artifact.with_name(artifact.name + ".manifest.json")
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _scale(cfg: RunConfig):
    return JESTER if cfg.dataset.scale == "jester" else FIVE_STAR


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.data) / cfg.dataset.name


def _split_paths(cfg: RunConfig, seed: int) -> tuple[Path, Path]:
    d = _data_dir(cfg)
    return d / f"train_seed{seed}.csv", d / f"test_seed{seed}.csv"


def _embedding_path(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.paths.embeddings) / f"{cfg.dataset.name}_k{cfg.embedding.k}_seed{seed}.bin"


def _checkpoint_path(cfg: RunConfig, seed: int) -> Path:
    a = cfg.agent
    return Path(cfg.paths.checkpoints) / f"{cfg.dataset.name}_{a.variant}_T{a.T}_seed{seed}.ckpt"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; {hint}")
    return path


def _load_split(cfg: RunConfig, seed: int):
    """Re-derive the split from the prepared canonical files (raw ids keep the index spaces aligned)."""
    data = _require(_data_dir(cfg) / "ratings.csv", "run `drr-lab prepare-data` first")
    _require(_split_paths(cfg, seed)[0], f"run `drr-lab prepare-data --seed {seed}` first")
    ds = read_canonical_csv(data, _scale(cfg))
    return ds, split_random(ds, cfg.dataset.train_fraction, seed)


def _check_digest(meta: dict, cfg: RunConfig, sections, what: str, force: bool) -> None:
    want = cfg.digest(sections)
    have = meta.get("config_digest_" + "_".join(sections))
    if have != want and not force:
        raise MissingPrerequisite(f"{what} was built with a different configuration; rebuild it or pass --force")


def _load_embeddings(cfg: RunConfig, seed: int, force: bool):
    path = _require(_embedding_path(cfg, seed), f"run `drr-lab pretrain-pmf --seed {seed}` first")
    _check_digest(_read_manifest(path), cfg, _EMB_SECTIONS, str(path), force)
    return load_embeddings(path)


def _load_bundle(cfg: RunConfig, seed: int, tbl, force: bool):
    path = _require(_checkpoint_path(cfg, seed), f"run `drr-lab train --seed {seed}` first")
    meta = read_checkpoint_header(path).get("meta", {})
    _check_digest(meta, cfg, _CKPT_SECTIONS, str(path), force)
    bundle, _ = load_checkpoint(path, tbl)
    return bundle


def write_metrics_csv(rows, path: Path) -> None:
    lines = [METRICS_HEADER]
    for metric, k, value, seed, variant, dataset in rows:
        lines.append(f"{metric},{k},{value!r},{seed},{variant},{dataset}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------- commands

def cmd_prepare_data(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    src = Path(args.input or cfg.dataset.path)
    _require(src, "point --input or dataset.path at the raw ratings file")
    fmt = cfg.dataset.format
    if fmt == "ml100k":
        ds = parse_movielens_100k(src)
    elif fmt == "ml1m":
        ds = parse_movielens_1m(src)
    else:
        ds = parse_generic_csv(src, CsvSchema(delimiter=cfg.dataset.csv_delimiter), _scale(cfg))
    out = _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_canonical_csv(ds, out / "ratings.csv")
    sp = split_random(ds, cfg.dataset.train_fraction, args.seed)
    train_p, test_p = _split_paths(cfg, args.seed)
    write_canonical_csv(sp.train, train_p)
    write_canonical_csv(sp.test, test_p)
    split_info = {"seed": args.seed, "fraction": cfg.dataset.train_fraction, "events": len(ds),
                  "train_events": len(sp.train), "test_events": len(sp.test),
                  "users": ds.num_users, "items": ds.num_items}
    split_p = out / f"split_seed{args.seed}.json"
    split_p.write_text(json.dumps(split_info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(split_p, cfg, args.seed, started, argv, {"split": split_info})
    print(f"{len(ds)} events, {ds.num_users} users, {ds.num_items} items -> "
          f"{split_info['train_events']}/{split_info['test_events']} train/test")
    return EXIT_OK


def cmd_pretrain_pmf(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    _, sp = _load_split(cfg, args.seed)
    tbl = train_pmf(sp.train, cfg.pmf_config(args.seed))
    path = _embedding_path(cfg, args.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(tbl, path)
    scores = {"train_rmse": rmse(tbl, sp.train), "test_rmse": rmse(tbl, sp.test)}
    write_manifest(path, cfg, args.seed, started, argv,
                   {"config_digest_" + "_".join(_EMB_SECTIONS): cfg.digest(_EMB_SECTIONS), **scores})
    print(f"train RMSE {scores['train_rmse']:.4f}  test RMSE {scores['test_rmse']:.4f} -> {path}")
    return EXIT_OK


def _train_bundle(cfg: RunConfig, seed: int, force: bool):
    _, sp = _load_split(cfg, seed)
    tbl = _load_embeddings(cfg, seed, force)
    bundle, rows = train(cfg.agent_config(), sp.train, tbl, cfg.train_config(seed))
    return sp, tbl, bundle, rows


def cmd_train(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    _, _, bundle, rows = _train_bundle(cfg, args.seed, args.force)
    path = _checkpoint_path(cfg, args.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    key = "config_digest_" + "_".join(_CKPT_SECTIONS)
    save_checkpoint(bundle, path, {key: cfg.digest(_CKPT_SECTIONS), "seed": args.seed})
    write_training_log(rows, path.with_suffix(".log.csv"))
    write_manifest(path, cfg, args.seed, started, argv, {"steps": len(rows), "parameter_digest": bundle.digest()})
    mean_r = float(np.mean([r.reward for r in rows])) if rows else 0.0
    print(f"{len(rows)} steps, mean reward {mean_r:.4f} -> {path}")
    return EXIT_OK


def _offline_report(args, cfg, sp, tbl):
    sessions, _ = build_eval_sessions(sp, cfg.agent.n)
    scale = sp.train.scale
    ks, T = list(cfg.eval.k), cfg.agent.T
    if args.policy == "drr":
        bundle = _load_bundle(cfg, args.seed, tbl, args.force)
        before = bundle.digest()
        rep, _ = eval_offline(DrrPolicy(bundle), sessions, ks, T, scale, seed=args.seed)
        if bundle.digest() != before:
            raise RuntimeError("offline evaluation changed agent parameters")
        return rep, cfg.agent.variant
    if args.policy == "popularity":
        best = None
        for strategy in PopularityModel.STRATEGIES:
            rep, _ = eval_offline(PopularityModel(sp.train, strategy), sessions, ks, T, scale, seed=args.seed)
            if best is None or rep.precision_at[max(ks)] > best.precision_at[max(ks)]:
                best = rep
        return best, "popularity"
    rep, _ = eval_offline(PmfRanker(tbl), sessions, ks, T, scale, seed=args.seed)
    return rep, "pmf"


def cmd_eval_offline(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    _, sp = _load_split(cfg, args.seed)
    tbl = _load_embeddings(cfg, args.seed, args.force)
    rep, variant = _offline_report(args, cfg, sp, tbl)
    out = Path(cfg.paths.reports)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"offline_{cfg.dataset.name}_{variant}_T{cfg.agent.T}_seed{args.seed}.csv"
    write_metrics_csv(rep.as_rows(variant, cfg.dataset.name), path)
    write_manifest(path, cfg, args.seed, started, argv, {"sessions": rep.episodes,
                                                         "short_sessions": rep.short_sessions})
    for k in sorted(rep.precision_at):
        print(f"P@{k} {rep.precision_at[k]:.4f}  NDCG@{k} {rep.ndcg_at[k]:.4f}")
    print(f"cumulative reward {rep.cumulative_reward:.2f} -> {path}")
    return EXIT_OK


def online_sessions(cfg: RunConfig, sp):
    sessions, _ = build_eval_sessions(sp, cfg.agent.n)
    return sessions


def cmd_eval_online(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    _, sp = _load_split(cfg, args.seed)
    tbl = _load_embeddings(cfg, args.seed, args.force)
    sessions = online_sessions(cfg, sp)
    kind = reward_kind_for(sp.train.scale)
    T = cfg.agent.T
    extra = {}
    if args.policy == "drr":
        bundle = _load_bundle(cfg, args.seed, tbl, args.force)
        res = eval_online(bundle, tbl, sessions, T, seed=args.seed, kind=kind)
        variant = cfg.agent.variant
    else:
        best, best_alpha = None, None
        for alpha in cfg.eval.linucb_alphas:
            r = eval_online_policy(LinUcbPolicy(tbl, alpha), tbl, sessions, T, kind=kind, seed=args.seed)
            extra[f"linucb_alpha_{alpha:g}"] = r.report.cumulative_reward
            if best is None or r.report.cumulative_reward > best.report.cumulative_reward:
                best, best_alpha = r, alpha
        res, variant = best, "linucb"
        extra["linucb_alpha"] = best_alpha
    out = Path(cfg.paths.reports)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"online_{cfg.dataset.name}_{variant}_T{T}_seed{args.seed}.csv"
    write_metrics_csv(res.report.as_rows(variant, cfg.dataset.name), path)
    write_manifest(path, cfg, args.seed, started, argv, {"sessions": len(sessions), **extra})
    print(f"cumulative reward {res.report.cumulative_reward:.2f} over {len(sessions)} sessions -> {path}")
    return EXIT_OK


def cmd_analyze_patterns(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    data = _require(_data_dir(cfg) / "ratings.csv", "run `drr-lab prepare-data` first")
    ds = read_canonical_csv(data, _scale(cfg))
    rows, mean = analyze_sequential_patterns(ds, args.max_run)
    out = Path(cfg.paths.reports)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"patterns_{cfg.dataset.name}.csv"
    write_pattern_csv(rows, mean, path)
    write_manifest(path, cfg, None, started, argv, {"max_run": args.max_run})
    for r in rows:
        print(f"{r.polarity:8s} m={r.run_length}  mean {r.mean_rating:.4f}  n={r.count}")
    print(f"global mean {mean:.4f} -> {path}")
    return EXIT_OK


def sweep_rows(cfg: RunConfig, Ts, seeds, force: bool = False):
    """Train + offline-evaluate per (T, seed); rows in (T, seed) order."""
    rows = []
    for T in Ts:
        for seed in seeds:
            run = dataclasses.replace(cfg, agent=dataclasses.replace(cfg.agent, T=T))
            sp, tbl, bundle, _ = _train_bundle(run, seed, force)
            sessions, _ = build_eval_sessions(sp, run.agent.n)
            rep, _ = eval_offline(DrrPolicy(bundle), sessions, list(run.eval.k), T, sp.train.scale, seed=seed)
            for metric, k, value, *_ in rep.as_rows(run.agent.variant, run.dataset.name):
                rows.append((T, seed, metric, k, value))
    return rows


def cmd_sweep_T(args, cfg: RunConfig, argv) -> int:
    started = time.time()
    Ts = tuple(args.T) if args.T else cfg.eval.sweep_T
    if not Ts or min(Ts) < 1:
        raise UsageError("sweep-T needs a non-empty list of positive horizons")
    seeds = tuple(args.seeds) if args.seeds else cfg.eval.seeds
    rows = sweep_rows(cfg, Ts, seeds, args.force)
    out = Path(cfg.paths.reports)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_T_{cfg.dataset.name}_{cfg.agent.variant}.csv"
    lines = ["T,seed,metric,k,value"] + [f"{T},{s},{m},{k},{v!r}" for T, s, m, k, v in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    kmax = max(cfg.eval.k)
    means = {T: float(np.mean([v for t, _, m, k, v in rows if t == T and m == "precision" and k == kmax]))
             for T in Ts}
    best_T = max(means, key=lambda t: (means[t], -t))
    summary = {"precision_by_T": {str(t): v for t, v in means.items()}, "argmax_T": best_T,
               "matches_reference_T10": best_T == 10}
    write_manifest(path, cfg, None, started, argv, summary)
    for t in Ts:
        mark = "  <- argmax" if t == best_T else ""
        print(f"T={t:3d}  mean P@{kmax} {means[t]:.4f}{mark}")
    print(f"argmax T = {best_T} ({'matches' if best_T == 10 else 'differs from'} the reference T=10) -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="drr-lab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"drr-lab {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, fn, help_text, seed=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--force", action="store_true", help="accept artifacts built from a different config")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="split/initialization seed (default 0)")
        p.set_defaults(fn=fn)
        return p

    p = add("prepare-data", cmd_prepare_data, "parse a raw log, write canonical CSV and the seeded 80/20 split")
    p.add_argument("--input", help="raw ratings file (default: dataset.path)")
    p.add_argument("--format", choices=FORMATS, help="raw file format (default: dataset.format)")
    add("pretrain-pmf", cmd_pretrain_pmf, "fit PMF embeddings on the train split")
    p = add("train", cmd_train, "train the actor-critic agent")
    _agent_flags(p)
    for name, fn, text in (("eval-offline", cmd_eval_offline, "rerank held-out items per session"),
                           ("eval-online", cmd_eval_online, "simulated online run with per-session reset")):
        p = add(name, fn, text)
        _agent_flags(p)
        choices = ("drr", "popularity", "pmf") if name == "eval-offline" else ("drr", "linucb")
        p.add_argument("--policy", choices=choices, default="drr")
    p = add("analyze-patterns", cmd_analyze_patterns, "mean next rating after runs of positive/negative ratings",
            seed=False)
    p.add_argument("--max-run", type=int, default=5)
    p = add("sweep-T", cmd_sweep_T, "train and evaluate over several episode lengths", seed=False)
    _agent_flags(p, with_T=False)
    p.add_argument("--T", type=_int_list, help="comma-separated horizons (default: eval.sweep_T)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: eval.seeds)")
    return ap


def _agent_flags(p, with_T: bool = True):
    p.add_argument("--variant", choices=VARIANTS, help="state representation (agent.variant)")
    if with_T:
        p.add_argument("--T", type=int, help="episode length (agent.T)")
    p.add_argument("--episodes", type=int, help="training episodes (agent.M)")


def _apply_flags(args, cfg: RunConfig) -> None:
    if getattr(args, "variant", None):
        cfg.agent.variant = args.variant
    if isinstance(getattr(args, "T", None), int):
        cfg.agent.T = args.T
    if getattr(args, "episodes", None):
        cfg.agent.M = args.episodes
    if getattr(args, "format", None):
        cfg.dataset.format = args.format
    cfg.validate()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command (see --help)")
        cfg = load_config(args.config, args.set)
        _apply_flags(args, cfg)
        return args.fn(args, cfg, argv)
    except UsageError as exc:
        print(f"drr-lab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisite as exc:
        print(f"drr-lab: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetError, EmbeddingFileError, CheckpointError, PmfDivergence, TrainingAborted,
            FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"drr-lab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
