"""Command-line experiment harness.

Every command reads one JSON config, writes the fully resolved config next
to its outputs and finishes with a ``manifest.json`` listing each written
file with its SHA-256. Exit codes: 0 success, 2 config or compatibility
error, 3 numeric failure.
"""

from __future__ import annotations

import os

# the thread count must be in place before numpy loads its BLAS
_THREADS = os.environ.get("DIFFSEG_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dmod
from . import infer as imod
from . import metrics as mmod
from .model import UNetConfig, param_shapes
from .postprocess import postprocess_muscle
from .schedule import dump_csv, resample, uniform_indices
from .tensor import load_checkpoint, save_checkpoint
from .train import NonFiniteError, Strategy, TrainConfig, fit

logger = logging.getLogger("diffseg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- config


@dataclass
class TaskSection:
    seed: int = 0
    n_train: int = 200
    n_val: int = 16
    n_test: int = 50
    size: int = 32
    classes: int = 3
    difficulty: float = 0.5
    path: str | None = None


@dataclass
class InferSection:
    sampler: str = "ddpm"
    steps: int = 5
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class EvalSection:
    postprocess: bool = False
    spacing: list[float] = field(default_factory=lambda: [1.0, 1.0])
    hd95_pooled: bool = True


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferSection = field(default_factory=InferSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "task": dataclasses.asdict(self.task),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "infer": dataclasses.asdict(self.infer),
            "eval": dataclasses.asdict(self.eval),
            "out": self.out,
            "seed": self.seed,
        }


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def model_for(strategy: Strategy, base: UNetConfig) -> UNetConfig:
    """``base`` with the strategy-implied input flags."""
    return dataclasses.replace(base, with_self_cond_input=strategy.self_conditioning, diffusion=strategy.diffusion)


def resolve_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Merge flags into the raw JSON, fill defaults and check consistency.

    Flag precedence: ``--seed`` sets the global seed (and with it the
    training seed), ``--strategy`` the training strategy, ``--sampler`` and
    ``--steps`` the inference section, ``--out`` the output directory.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(raw) - {"task", "model", "train", "infer", "eval", "out", "seed"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    raw_model = dict(raw.get("model") or {})
    raw_train = dict(raw.get("train") or {})
    raw_infer = dict(raw.get("infer") or {})
    seed = int(overrides.get("seed", raw.get("seed", 0)))
    if "strategy" in overrides:
        raw_train["strategy"] = overrides["strategy"]
    raw_train["seed"] = seed
    if "sampler" in overrides:
        raw_infer["sampler"] = overrides["sampler"]
    if "steps" in overrides:
        raw_infer["steps"] = overrides["steps"]
    raw_infer.setdefault("seeds", [seed])

    train = _section(TrainConfig, raw_train, "train")
    # input flags follow the strategy unless the config states them explicitly
    raw_model.setdefault("with_self_cond_input", train.strategy.self_conditioning)
    raw_model.setdefault("diffusion", train.strategy.diffusion)
    cfg = RunConfig(
        task=_section(TaskSection, raw.get("task"), "task"),
        model=_section(UNetConfig, raw_model, "model"),
        train=train,
        infer=_section(InferSection, raw_infer, "infer"),
        eval=_section(EvalSection, raw.get("eval"), "eval"),
        out=str(overrides.get("out", raw.get("out", "runs/default"))),
        seed=seed,
    )
    try:
        cfg.model.validate()
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.model.with_self_cond_input != train.strategy.self_conditioning or cfg.model.diffusion != train.strategy.diffusion:
        raise ConfigError(f"model input flags are inconsistent with strategy {train.strategy.value}")
    if cfg.infer.sampler not in imod.SAMPLERS:
        raise ConfigError(f"sampler must be one of {imod.SAMPLERS}")
    if cfg.infer.steps < 1 or not cfg.infer.seeds:
        raise ConfigError("infer.steps must be >= 1 and infer.seeds non-empty")
    if cfg.task.classes != cfg.model.classes:
        raise ConfigError("task.classes and model.classes differ")
    if cfg.task.path is None and [cfg.task.size] * 2 != list(cfg.model.spatial):
        raise ConfigError("task.size must match model.spatial")
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(raw, overrides)


# ------------------------------------------------------------------ outputs


class RunDir:
    """Output directory that remembers every file it writes."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        rel = str(Path(rel))
        if rel not in self.files:
            self.files.append(rel)
        return p

    def write_json(self, rel: str, obj) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        return p

    def write_csv(self, rel: str, header: list[str], rows) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                values = [row[h] for h in header] if isinstance(row, dict) else row
                w.writerow([_fmt(v) for v in values])
        return p

    def finish(self) -> Path:
        entries = []
        for rel in sorted(self.files):
            digest = hashlib.sha256((self.root / rel).read_bytes()).hexdigest()
            entries.append({"file": rel, "sha256": digest})
        p = self.root / "manifest.json"
        p.write_text(json.dumps({"files": entries}, indent=1) + "\n")
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def load_tasks(task: TaskSection) -> dict[str, list[dmod.SynthTask]]:
    if task.path:
        splits = dmod.load_dataset(task.path)
        missing = {"train", "val", "test"} - set(splits)
        if missing:
            raise ConfigError(f"dataset at {task.path} lacks splits {sorted(missing)}")
        return splits
    args = dict(size=task.size, classes=task.classes, difficulty=task.difficulty)
    return {
        "train": dmod.gen_dataset([task.seed, 0], task.n_train, **args),
        "val": dmod.gen_dataset([task.seed, 1], task.n_val, **args),
        "test": dmod.gen_dataset([task.seed, 2], task.n_test, **args),
    }


def check_checkpoint(params, model_cfg: UNetConfig) -> None:
    expected = param_shapes(model_cfg)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        diff = sorted(set(expected) ^ set(got)) or [k for k in expected if tuple(expected[k]) != got[k]]
        raise ConfigError(f"checkpoint does not match the model config (first differences: {diff[:5]})")


# ----------------------------------------------------------------- commands


def run_training(cfg: RunConfig, run: RunDir, splits=None, strategy: Strategy | None = None, prefix: str = ""):
    """Train one model into ``run``; returns the fit result and model config."""
    strategy = Strategy(strategy or cfg.train.strategy)
    model_cfg = model_for(strategy, cfg.model)
    train_cfg = dataclasses.replace(cfg.train, strategy=strategy)
    splits = splits or load_tasks(cfg.task)

    def on_checkpoint(step, params):
        save_checkpoint(run.path(f"{prefix}checkpoints/step_{step:06d}.ckpt"), params)

    result = fit(model_cfg, train_cfg, splits["train"], splits["val"], on_checkpoint=on_checkpoint)
    header = ["step", "sampled_t", "loss", "ce", "dice_loss", "lr", "wall_ms"]
    run.write_csv(f"{prefix}train_log.csv", header, result.log)
    run.write_csv(f"{prefix}val_log.csv", ["step", "val_dice"], result.val_log)
    save_checkpoint(run.path(f"{prefix}best.ckpt"), result.best_params)
    save_checkpoint(run.path(f"{prefix}final.ckpt"), result.params)
    run.write_json(f"{prefix}best.json", {"step": result.best_step})
    return result, model_cfg


def cmd_train(cfg: RunConfig) -> Path:
    run = RunDir(cfg.out)
    run.write_json("resolved_config.json", cfg.to_dict())
    run_training(cfg, run)
    run.finish()
    return run.root


def _postprocess(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros_like(labels)
    for c in range(1, classes):
        out[postprocess_muscle(labels == c)] = c
    return out


def evaluate_trace(trace: imod.StepTrace, reference: np.ndarray, cfg: RunConfig) -> list[mmod.MetricReport]:
    labels = trace.final.labels
    if cfg.eval.postprocess:
        labels = np.stack([_postprocess(m, cfg.model.classes) for m in labels])
    return [mmod.evaluate(p, r, cfg.model.classes, cfg.eval.spacing) for p, r in zip(labels, reference)]


def cmd_infer(checkpoint: str, cfg: RunConfig) -> Path:
    model_cfg = cfg.model
    params = load_checkpoint(checkpoint)
    check_checkpoint(params, model_cfg)
    test = load_tasks(cfg.task)["test"]
    images, reference = dmod.stack(test)
    run = RunDir(cfg.out)
    run.write_json("resolved_config.json", dict(cfg.to_dict(), checkpoint=str(checkpoint)))
    s = cfg.train.schedule()
    summary = {}
    for seed in cfg.infer.seeds:
        trace = imod.predict(params, model_cfg, images, cfg.infer.sampler, cfg.infer.steps, s, seed, reference)
        for i in range(len(test)):
            imod.write_trace_csv(run.path(f"seed_{seed}/trace_{i:04d}.csv"), trace, i)
            dmod.write_pgm(run.path(f"seed_{seed}/mask_{i:04d}.pgm"), trace.final.labels[i], maxval=255)
        summary[str(seed)] = {
            "k": [r.k for r in trace.steps],
            "t_k": [r.t for r in trace.steps],
            "mean_dice": trace.mean_dice().tolist(),
            "mean_hd95": trace.mean_hd95().tolist(),
        }
    run.write_json("summary.json", summary)
    run.finish()
    return run.root


COMPARE_ORDER = [
    Strategy.NO_DIFFUSION,
    Strategy.STANDARD,
    Strategy.SELF_COND_SAME_T,
    Strategy.SELF_COND_NEXT_T,
    Strategy.RECYCLE_NEXT_T,
    Strategy.RECYCLE_MAX_T,
]


def cmd_compare(cfg: RunConfig, strategies=COMPARE_ORDER) -> Path:
    """Train every strategy under one budget and emit the comparison tables."""
    run = RunDir(cfg.out)
    run.write_json("resolved_config.json", cfg.to_dict())
    splits = load_tasks(cfg.task)
    images, reference = dmod.stack(splits["test"])
    s = cfg.train.schedule()
    seed = cfg.infer.seeds[0]
    per_sample: dict[tuple[str, str], dict[str, np.ndarray]] = {}
    probs: dict[tuple[str, str], np.ndarray] = {}
    rows: list[dict] = []

    def record(name, sampler, reports, p):
        dice = np.array([r.mean_dice for r in reports])
        hd = np.array([r.mean_hd95 for r in reports])
        per_sample[(name, sampler)] = {"dice": dice, "hd95": hd}
        probs[(name, sampler)] = p
        rows.append(
            {
                "strategy": name,
                "sampler": sampler,
                "dice_mean": dice.mean(),
                "dice_sd": dice.std(ddof=1) if len(dice) > 1 else 0.0,
                "hd95_mean": hd.mean(),
                "hd95_sd": hd.std(ddof=1) if len(hd) > 1 else 0.0,
            }
        )

    header = ["strategy", "sampler", "dice_mean", "dice_sd", "hd95_mean", "hd95_sd"]
    try:
        for strategy in strategies:
            result, model_cfg = run_training(cfg, run, splits, strategy, prefix=f"{strategy.value}/")
            for sampler in imod.SAMPLERS:
                trace = imod.predict(result.best_params, model_cfg, images, sampler, cfg.infer.steps, s, seed, reference)
                record(strategy.value, sampler, evaluate_trace(trace, reference, cfg), trace.final.probs)
        if (Strategy.RECYCLE_MAX_T.value, "ddpm") in probs and (Strategy.NO_DIFFUSION.value, "ddpm") in probs:
            p = imod.ensemble(probs[(Strategy.RECYCLE_MAX_T.value, "ddpm")], probs[(Strategy.NO_DIFFUSION.value, "ddpm")])
            trace = imod.StepTrace([imod.StepRecord(k=1, t=0, probs=p, labels=p.argmax(axis=1))])
            record("ensemble", "ddpm", evaluate_trace(trace, reference, cfg), p)
    finally:
        run.write_csv("table.csv", header, rows)
        _write_per_sample(run, per_sample)
        _write_stats(run, per_sample)
        run.finish()
    return run.root


def _write_per_sample(run: RunDir, per_sample) -> None:
    keys = list(per_sample)
    header = ["sample"] + [f"{n}/{s}/{m}" for n, s in keys for m in ("dice", "hd95")]
    n = len(next(iter(per_sample.values()))["dice"]) if per_sample else 0
    rows = [[i] + [per_sample[k][m][i] for k in keys for m in ("dice", "hd95")] for i in range(n)]
    run.write_csv("per_sample.csv", header, rows)


def _write_stats(run: RunDir, per_sample) -> None:
    ref_name = Strategy.RECYCLE_MAX_T.value
    rows = []
    for (name, sampler), vals in per_sample.items():
        ref = per_sample.get((ref_name, sampler))
        if ref is None or name == ref_name:
            continue
        for metric in ("dice", "hd95"):
            res = mmod.paired_t_test(ref[metric], vals[metric])
            rows.append(
                {"reference": ref_name, "strategy": name, "sampler": sampler, "metric": metric, "t": res.t, "p": res.p, "degenerate": int(res.degenerate)}
            )
    run.write_csv("pvalues.csv", ["reference", "strategy", "sampler", "metric", "t", "p", "degenerate"], rows)
    ref = per_sample.get((ref_name, "ddpm"))
    for other in (Strategy.NO_DIFFUSION.value, Strategy.STANDARD.value):
        if ref is None or (other, "ddpm") not in per_sample:
            continue
        ba = mmod.bland_altman(ref["dice"], per_sample[(other, "ddpm")]["dice"])
        with open(run.path(f"bland_altman_{ref_name}_vs_{other}.csv"), "w", newline="") as fh:
            mmod.write_bland_altman_csv(fh, ba)


def cmd_schedule_dump(cfg: RunConfig, steps: int | None, out) -> None:
    s = cfg.train.schedule()
    if steps:
        s = resample(s, uniform_indices(s.T, steps))
    dump_csv(s, out)
    # the alpha range is easy to misquote (0.999 vs 0.9999 at t=1); state it
    full = cfg.train.schedule()
    print(
        f"alpha_1={float(full.alphas[1])!r} alpha_T={float(full.alphas[full.T])!r} "
        f"sqrt_bar_alpha_1={float(full.sqrt_bar_alphas[1])!r} sqrt_bar_alpha_T={float(full.sqrt_bar_alphas[full.T])!r}",
        file=sys.stderr,
    )


def cmd_gen_data(cfg: RunConfig) -> Path:
    # the dataset's own manifest.json lists the splits
    return dmod.save_dataset(cfg.out, load_tasks(dataclasses.replace(cfg.task, path=None)))


def cmd_xt_info(cfg: RunConfig, grid: int, draws: int) -> Path:
    s = cfg.train.schedule()
    task = load_tasks(cfg.task)["test"][0]
    x0 = dmod.encode_mask(task.labels, task.classes, np.float64)
    t_grid = np.unique(np.round(np.linspace(1, s.T, grid)).astype(int))
    rows = dmod.xt_information(x0, s, t_grid, np.random.default_rng(cfg.seed), draws)
    run = RunDir(cfg.out)
    run.write_csv("xt_information.csv", ["t", "ce", "ce_se", "dice", "dice_se"], rows)
    run.finish()
    return run.root


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=True, sampler=True):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if strategy:
            p.add_argument("--strategy", choices=[s.value for s in Strategy])
        if sampler:
            p.add_argument("--sampler", choices=imod.SAMPLERS)
            p.add_argument("--steps", type=int, help="number of sampling steps K")
        return p

    common(sub.add_parser("train", help="train one strategy"), sampler=False)
    p = common(sub.add_parser("infer", help="sample per-step traces from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    common(sub.add_parser("compare", help="train all strategies and tabulate"), strategy=False)
    p = common(sub.add_parser("schedule-dump", help="write the noise schedule as CSV"), strategy=False, sampler=False)
    p.add_argument("--steps", type=int, help="resample to K steps first")
    common(sub.add_parser("gen-data", help="write the synthetic dataset to disk"), strategy=False, sampler=False)
    p = common(sub.add_parser("xt-info", help="information left in noisy masks"), strategy=False, sampler=False)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--draws", type=int, default=100)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "strategy": getattr(args, "strategy", None),
        "sampler": getattr(args, "sampler", None),
        "steps": getattr(args, "steps", None) if args.command in ("infer", "compare") else None,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "infer":
            print(cmd_infer(args.checkpoint, cfg))
        elif args.command == "compare":
            print(cmd_compare(cfg))
        elif args.command == "schedule-dump":
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    cmd_schedule_dump(cfg, args.steps, fh)
            else:
                cmd_schedule_dump(cfg, args.steps, sys.stdout)
        elif args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "xt-info":
            print(cmd_xt_info(cfg, args.grid, args.draws))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
