"""Command-line front end: train, prune, transfer, sample, eval, sweep, bench.

Every command reads an optional JSON config file, overrides it with explicit
flags, validates the merged result before any compute, and echoes the
effective configuration into the output directory.  Exit codes: 2 for config
problems, 3 for pattern problems, 4 for architecture mismatches, 5 when the
compressed path is requested for an incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .diffusion import DATASETS, NoisePredictor, ToyDataset, ddpm_sample, make_schedule, toy_batch
from .errors import (
    ArchitectureError,
    CompressedPathError,
    CompressionError,
    ConfigError,
    DimensionError,
    PatternError,
    TrainingError,
)
from .evalbench import (
    DEFAULT_BENCH_SIZES,
    DEFAULT_SWEEP_PATTERNS,
    bench_spmm,
    energy_distance,
    format_float,
    macs_count,
    sweep_ratios,
    write_bench_csv,
    write_sweep_csv,
)
from .rng import stream
from .sparsity import NMPattern, is_transposable
from .trainer import MaskSchedule, TeacherHandle, TrainConfig, prune_one_shot, train_dense, transfer_train

METRIC_NAME = "energy_distance(FID proxy)"

DEFAULTS = {
    "train-dense": {
        "data": "gauss8",
        "steps": 2000,
        "batch_size": 128,
        "lr": 0.2,
        "lr_schedule": "cosine",
        "T": 100,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "hidden": "128,128",
        "seed": 0,
    },
    "prune": {"pattern": "2:4", "transposable": False, "strict": False, "seed": 0},
    "train-sparse": {
        "data": "gauss8",
        "steps": 4000,
        "batch_size": 128,
        "lr": 0.05,
        "lr_schedule": "cosine",
        "lambda1": 0.5,
        "lambda2": 0.5,
        "lambda_w": 1e-4,
        "pattern": None,
        "progressive": None,
        "switch_every": 1000,
        "freeze_masks": False,
        "teacher_bank": 2048,
        "seed": 0,
    },
    "sample": {"n": 1000, "compressed": False, "svg": False, "seed": 0},
    "eval": {"data": "gauss8", "n": 2000, "seed": 0},
    "sweep": {
        "data": "gauss8",
        "steps": 2000,
        "batch_size": 128,
        "lr": 0.05,
        "lr_schedule": "cosine",
        "lambda1": 0.5,
        "lambda2": 0.5,
        "lambda_w": 1e-4,
        "teacher_bank": 2048,
        "n_eval": 2000,
        "patterns": ",".join(str(p) for p in DEFAULT_SWEEP_PATTERNS),
        "seed": 0,
    },
    "bench": {
        "sizes": ",".join(f"{r}x{c}x{b}" for r, c, b in DEFAULT_BENCH_SIZES),
        "reps": 5,
        "seed": 0,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsedm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=needs_out, help="output directory for this run")

    p = sub.add_parser("train-dense", help="train a dense noise predictor on a toy dataset")
    common(p)
    p.add_argument("--data", choices=DATASETS, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=None)
    p.add_argument("--T", type=int, default=None, dest="T")
    p.add_argument("--beta-start", type=float, default=None)
    p.add_argument("--beta-end", type=float, default=None)
    p.add_argument("--hidden", default=None, help="comma list of hidden widths, e.g. 128,128")

    p = sub.add_parser("prune", help="one-shot magnitude pruning of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True, help="run directory or model.ckpt path")
    p.add_argument("--pattern", default=None, help="N:M pattern, e.g. 2:4")
    p.add_argument("--transposable", action="store_true", default=None)
    p.add_argument("--strict", action="store_true", default=None,
                   help="error instead of skipping layers the group size does not divide")

    p = sub.add_parser("train-sparse", help="sparse STE training with dense-teacher transfer")
    common(p)
    p.add_argument("--student", required=True, help="pruned checkpoint to start from")
    p.add_argument("--teacher", required=True, help="dense checkpoint used for distillation")
    p.add_argument("--data", choices=DATASETS, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=None)
    p.add_argument("--lambda1", type=float, default=None, help="distillation loss weight")
    p.add_argument("--lambda2", type=float, default=None, help="noise-prediction loss weight")
    p.add_argument("--lambda-w", type=float, default=None, help="sparse-mask regularization strength")
    p.add_argument("--pattern", default=None, help="fixed pattern; defaults to the student's")
    p.add_argument("--progressive", default=None, help="comma list of patterns, densest first")
    p.add_argument("--switch-every", type=int, default=None, help="steps between progressive switches")
    p.add_argument("--freeze-masks", action="store_true", default=None,
                   help="project masks only at schedule switches")
    p.add_argument("--teacher-bank", type=int, default=None, help="teacher sample pool size")

    p = sub.add_parser("sample", help="ancestral sampling from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--compressed", action="store_true", default=None,
                   help="run 2:4 layers through the compressed kernel")
    p.add_argument("--svg", action="store_true", default=None, help="also write a scatter plot")

    p = sub.add_parser("eval", help="energy distance to data plus MACs accounting")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", choices=DATASETS, default=None)
    p.add_argument("--n", type=int, default=None)

    p = sub.add_parser("sweep", help="prune + transfer-train one student per keep ratio")
    common(p)
    p.add_argument("--ckpt", required=True, help="dense teacher checkpoint")
    p.add_argument("--data", choices=DATASETS, default=None)
    p.add_argument("--steps", type=int, default=None, help="transfer budget per pattern")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--lambda-w", type=float, default=None)
    p.add_argument("--teacher-bank", type=int, default=None)
    p.add_argument("--n-eval", type=int, default=None)
    p.add_argument("--patterns", default=None, help="comma list of N:M patterns")

    p = sub.add_parser("bench", help="compressed vs dense multiply micro-benchmark")
    common(p)
    p.add_argument("--sizes", default=None, help="comma list of ROWSxCOLSxBATCH")
    p.add_argument("--reps", type=int, default=None)

    return parser


def _merge_config(cmd: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.setdefault("seed", 0)
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from None
    return out


def _echo_config(out: Path, cmd: str, cfg: dict) -> None:
    doc = {"command": cmd, **cfg}
    (out / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _write_trace(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in str(text).split(",") if x != "")
    except ValueError:
        raise ConfigError(f"bad hidden widths {text!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise ConfigError(f"bad hidden widths {text!r}")
    return dims


def _train_config(cfg: dict, **overrides) -> TrainConfig:
    base = dict(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        lr_schedule=cfg["lr_schedule"],
        seed=cfg["seed"],
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


def _write_samples_csv(path: Path, pts: np.ndarray) -> None:
    lines = ["x,y"]
    for x, y in pts:
        lines.append(f"{x:.9g},{y:.9g}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_scatter_svg(path: Path, pts: np.ndarray, size: int = 440, margin: int = 20) -> None:
    bound = 3.0 if len(pts) == 0 else max(3.0, float(np.abs(pts).max()))
    span = size - 2 * margin

    def sx(v):
        return margin + (v + bound) / (2 * bound) * span

    def sy(v):
        return size - margin - (v + bound) / (2 * bound) * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for x, y in pts:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="#336699" fill-opacity="0.5"/>')
    parts.append("</svg>")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_dense(args) -> int:
    cfg = _merge_config("train-dense", args)
    out = _out_dir(args)
    sched = make_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]))
    dataset = ToyDataset(cfg["data"])
    config = _train_config(cfg)
    hidden = _parse_hidden(cfg["hidden"])
    _echo_config(out, "train-dense", cfg)
    model = NoisePredictor.create(stream(cfg["seed"], "init"), hidden=hidden)
    model, trace = train_dense(model, dataset, sched, config)
    ckpt.save_model(out, model, sched, cfg["seed"], extra={"label": "dense"})
    _write_trace(out / "trace.jsonl", trace)
    print(f"trained dense model for {config.steps} steps, final loss "
          f"{trace[-1]['loss_total']:.4f}" if trace else "trained dense model for 0 steps")
    print(f"wrote {out / ckpt.CKPT_NAME}")
    return 0


def cmd_prune(args) -> int:
    cfg = _merge_config("prune", args)
    out = _out_dir(args)
    pattern = NMPattern.parse(str(cfg["pattern"]))
    model, sched, meta = ckpt.load_model(args.ckpt)
    _echo_config(out, "prune", cfg)
    prune_one_shot(model, pattern, transposable=bool(cfg["transposable"]), strict=bool(cfg["strict"]))
    for layer in model.layers:
        if layer.pattern is None:
            print(f"{layer.name}: dense (input width {layer.in_features} "
                  f"not divisible by {pattern.m})")
        else:
            zeros = float((layer.mask.bits == 0).mean())
            extra = ""
            if bool(cfg["transposable"]) and layer.out_features % pattern.m == 0 and (pattern.n, pattern.m) == (2, 4):
                extra = ", transposable" if is_transposable(layer.mask, pattern) else ""
            print(f"{layer.name}: pattern {layer.pattern} sparsity {zeros:.3f}{extra}")
    ckpt.save_model(out, model, sched, meta.get("seed", cfg["seed"]), extra={"label": f"pruned-{pattern}"})
    print(f"wrote {out / ckpt.CKPT_NAME}")
    return 0


def _build_schedule(cfg: dict, student: NoisePredictor, steps: int) -> MaskSchedule:
    if cfg.get("progressive"):
        patterns = [NMPattern.parse(p) for p in str(cfg["progressive"]).split(",") if p]
        return MaskSchedule.progressive(patterns, steps, int(cfg["switch_every"]))
    if cfg.get("pattern"):
        return MaskSchedule.fixed(NMPattern.parse(str(cfg["pattern"])), steps)
    recorded = [l.pattern for l in student.layers if l.pattern is not None]
    if not recorded:
        raise ConfigError("student checkpoint is dense; pass --pattern or --progressive")
    return MaskSchedule.fixed(recorded[0], steps)


def cmd_train_sparse(args) -> int:
    cfg = _merge_config("train-sparse", args)
    out = _out_dir(args)
    student, sched, _ = ckpt.load_model(args.student)
    teacher, t_sched, _ = ckpt.load_model(args.teacher)
    if t_sched.T != sched.T:
        raise ConfigError(f"student schedule T={sched.T} differs from teacher T={t_sched.T}")
    dataset = ToyDataset(cfg["data"])
    config = _train_config(
        cfg,
        lambda_w=float(cfg["lambda_w"]),
        lambda1=float(cfg["lambda1"]),
        lambda2=float(cfg["lambda2"]),
        mask_refresh=0 if cfg["freeze_masks"] else 1,
        teacher_bank=int(cfg["teacher_bank"]),
    )
    schedule = _build_schedule(cfg, student, config.steps)
    _echo_config(out, "train-sparse", cfg)
    student, trace = transfer_train(student, TeacherHandle(teacher), dataset, sched, config, schedule)
    label = "ste-baseline" if config.lambda1 == 0.0 else "transfer"
    ckpt.save_model(out, student, sched, cfg["seed"], extra={"label": label})
    _write_trace(out / "trace.jsonl", trace)
    if trace:
        print(f"trained sparse model for {config.steps} steps, final loss "
              f"{trace[-1]['loss_total']:.4f} (pattern {trace[-1]['active_pattern']})")
    print(f"wrote {out / ckpt.CKPT_NAME}")
    return 0


def cmd_sample(args) -> int:
    cfg = _merge_config("sample", args)
    out = _out_dir(args)
    model, sched, _ = ckpt.load_model(args.ckpt)
    compressed = bool(cfg["compressed"])
    if compressed:
        masked = [l for l in model.layers if l.pattern is not None]
        if not masked or any((l.pattern.n, l.pattern.m) != (2, 4) for l in masked):
            raise CompressedPathError(
                "--compressed needs a 2:4 checkpoint; prune to 2:4 first"
            )
    n = int(cfg["n"])
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    _echo_config(out, "sample", cfg)
    pts = ddpm_sample(model, n, sched, stream(cfg["seed"], "sample"), compressed=compressed).data
    _write_samples_csv(out / "samples.csv", pts)
    if cfg["svg"]:
        _write_scatter_svg(out / "samples.svg", pts)
    print(f"wrote {n} samples to {out / 'samples.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _merge_config("eval", args)
    out = _out_dir(args)
    model, sched, _ = ckpt.load_model(args.ckpt)
    dataset = ToyDataset(cfg["data"])
    n = int(cfg["n"])
    if n < 2:
        raise ConfigError(f"eval needs n >= 2, got {n}")
    _echo_config(out, "eval", cfg)
    samples = ddpm_sample(model, n, sched, stream(cfg["seed"], "sample"))
    ref = toy_batch(dataset, n, stream(cfg["seed"], "eval"))
    macs = macs_count(model, (1,))
    report = {
        "energy_distance": float(energy_distance(samples, ref)),
        "macs_dense": macs.dense_total,
        "macs_sparse": macs.sparse_total,
        "reduction": macs.reduction,
        "n": n,
        "seed": cfg["seed"],
        "metric": METRIC_NAME,
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"energy distance {format_float(report['energy_distance'])}, "
          f"MACs reduction {report['reduction']:.4f}")
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _merge_config("sweep", args)
    out = _out_dir(args)
    teacher, sched, _ = ckpt.load_model(args.ckpt)
    dataset = ToyDataset(cfg["data"])
    patterns = [NMPattern.parse(p) for p in str(cfg["patterns"]).split(",") if p]
    config = _train_config(
        cfg,
        lambda_w=float(cfg["lambda_w"]),
        lambda1=float(cfg["lambda1"]),
        lambda2=float(cfg["lambda2"]),
        teacher_bank=int(cfg["teacher_bank"]),
    )
    _echo_config(out, "sweep", cfg)
    rows = sweep_ratios(teacher, patterns, dataset, sched, config, n_eval=int(cfg["n_eval"]))
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        print(f"{r['pattern']:>6}  sparsity {r['sparsity']:.5f}  "
              f"macs {r['macs_sparse']:>8}  energy {format_float(r['energy_distance'])}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def _parse_sizes(text: str):
    sizes = []
    for part in str(text).split(","):
        if not part:
            continue
        bits = part.lower().split("x")
        if len(bits) != 3:
            raise ConfigError(f"bad bench size {part!r}, expected ROWSxCOLSxBATCH")
        try:
            sizes.append(tuple(int(b) for b in bits))
        except ValueError:
            raise ConfigError(f"bad bench size {part!r}") from None
    if not sizes:
        raise ConfigError("bench needs at least one size")
    return sizes


def cmd_bench(args) -> int:
    cfg = _merge_config("bench", args)
    out = _out_dir(args)
    sizes = _parse_sizes(cfg["sizes"])
    reps = int(cfg["reps"])
    _echo_config(out, "bench", cfg)
    records = bench_spmm(sizes, reps=reps, seed=cfg["seed"])
    write_bench_csv(records, out / "bench.csv")
    for r in records:
        print(f"{r.rows}x{r.cols} batch {r.batch}: dense {r.t_dense_ns} ns, "
              f"spmm {r.t_spmm_ns} ns, macs ratio {r.macs_ratio}, max rel err {r.max_rel_err:.2e}")
    print(f"wrote {out / 'bench.csv'}")
    return 0


COMMANDS = {
    "train-dense": cmd_train_dense,
    "prune": cmd_prune,
    "train-sparse": cmd_train_sparse,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (PatternError, CompressionError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ArchitectureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except CompressedPathError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
