"""Command-line harness: ``params``, ``train``, ``eval`` and ``sweep``.

Every training run writes a fixed artifact set into its output directory
(manifest.json, epochs.csv, report.json, reliability.csv, checkpoint.ksn)
plus rendered figures under figures/. Re-running ``train`` from a manifest
reproduces epochs.csv bitwise.
"""

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .bayes import ScaleMixturePrior, train_step
from .config import RunConfig, apply_overrides, from_manifest, load_ini
from .data import (
    BatchPlan, Dataset, batches, load_cifar, load_idx, num_batches, subset,
    synth_dataset,
)
from .errors import ConfigError, KsnetError
from .metrics import PredictionSet, evaluate, write_reliability_csv
from .models import (
    build_model, count_params, load_checkpoint, predict_deterministic,
    predict_ensemble, save_checkpoint,
)
from .optim import make_optimizer
from .rng import StreamHub
from .tensor import Tensor

EPOCH_COLUMNS = ("epoch", "total", "log_q", "log_prior", "nll")
CHECKPOINT_NAME = "checkpoint.ksn"
EVAL_CHUNK = 256


def _fmt(v: float) -> str:
    return f"{float(v):.10g}"


# ---------------------------------------------------------------------------
# dataset resolution

def _find_idx(root: Path, stem: str) -> str:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return str(candidate)
    raise ConfigError(f"data_dir: missing {root / stem}[.gz]")


def load_datasets(cfg: RunConfig, hub: StreamHub) -> Tuple[Dataset, Dataset]:
    """Resolve the configured train/eval dataset pair."""
    if cfg.dataset in ("blobs", "striped"):
        kind = "gaussian_blobs" if cfg.dataset == "blobs" else "striped"
        shape = (cfg.input_channels, cfg.input_size, cfg.input_size)
        # both splits share class means; only the noise stream differs
        train = synth_dataset(kind, cfg.synth_n, cfg.classes, shape,
                              hub.stream("data/train"), noise=cfg.synth_noise,
                              separation=cfg.synth_separation, split="train",
                              means_rng=hub.stream("data/means"))
        test = synth_dataset(kind, cfg.synth_eval_n, cfg.classes, shape,
                             hub.stream("data/eval"), noise=cfg.synth_noise,
                             separation=cfg.synth_separation, split="test",
                             means_rng=hub.stream("data/means"))
    elif cfg.dataset in ("mnist", "fmnist"):
        root = Path(cfg.data_dir) / cfg.dataset
        train = load_idx(_find_idx(root, "train-images-idx3-ubyte"),
                         _find_idx(root, "train-labels-idx1-ubyte"),
                         dataset=cfg.dataset, split="train")
        test = load_idx(_find_idx(root, "t10k-images-idx3-ubyte"),
                        _find_idx(root, "t10k-labels-idx1-ubyte"),
                        dataset=cfg.dataset, split="test")
    else:
        root = Path(cfg.data_dir) / cfg.dataset
        if cfg.dataset == "cifar10":
            train_paths = [str(root / f"data_batch_{i}.bin") for i in range(1, 6)]
            test_paths = [str(root / "test_batch.bin")]
            variant = "c10"
        else:
            train_paths = [str(root / "train.bin")]
            test_paths = [str(root / "test.bin")]
            variant = "c100"
        for p in train_paths + test_paths:
            if not Path(p).exists():
                raise ConfigError(f"data_dir: missing {p}")
        train = load_cifar(train_paths, variant, split="train")
        test = load_cifar(test_paths, variant, split="test")
    if cfg.train_limit:
        train = subset(train, np.arange(min(cfg.train_limit, len(train))))
    if cfg.eval_limit:
        test = subset(test, np.arange(min(cfg.eval_limit, len(test))))
    return train, test


# ---------------------------------------------------------------------------
# evaluation

def predict_probs(model, ds: Dataset, cfg: RunConfig, hub: StreamHub) -> np.ndarray:
    """Chunked inference over a dataset under the configured protocol."""
    chunks = []
    for start in range(0, len(ds), EVAL_CHUNK):
        x = Tensor(ds.images[start:start + EVAL_CHUNK])
        if cfg.inference == "posterior_mean":
            probs = predict_deterministic(model, x)
        elif cfg.inference == "mcdrop":
            if not model.is_mcdrop:
                raise ConfigError("inference: mcdrop needs an mcdrop-mode model")
            probs = predict_ensemble(model, x, cfg.ensemble_samples, hub)
        else:
            probs = predict_ensemble(model, x, cfg.ensemble_samples, hub)
        chunks.append(probs)
    return np.concatenate(chunks)


def evaluate_model(model, ds: Dataset, cfg: RunConfig, hub: StreamHub):
    probs = predict_probs(model, ds, cfg, hub)
    # defend against float32 rounding before the simplex check
    probs = probs / probs.sum(axis=1, keepdims=True)
    return evaluate(PredictionSet(probs, ds.labels))


def _write_report(report, out: Path, figures: bool) -> None:
    (out / "report.json").write_text(report.to_json() + "\n")
    write_reliability_csv(report.bins["equal_width"], str(out / "reliability.csv"))
    if figures:
        from .plots import save_reliability_figure
        figdir = out / "figures"
        figdir.mkdir(exist_ok=True)
        save_reliability_figure(report.bins["equal_width"],
                                str(figdir / "reliability.png"))


# ---------------------------------------------------------------------------
# commands

def cmd_params(cfg: RunConfig, deltas: Optional[List[float]], out_dir: Optional[str]) -> int:
    rows = []
    base_cfg = dataclasses.replace(cfg, mode="baseline")
    baseline = build_model(base_cfg.model_config(), StreamHub(cfg.seed))
    base_total, _ = count_params(baseline)
    for delta in (deltas or [cfg.delta]):
        model_cfg = dataclasses.replace(cfg, delta=delta).model_config()
        model = build_model(model_cfg, StreamHub(cfg.seed))
        total, table = count_params(model)
        rows.append((delta, total, total / base_total, table))
    print(f"{'delta':>8} {'params':>12} {'RS':>8}")
    for delta, total, rs, _ in rows:
        print(f"{delta:>8g} {total:>12d} {rs:>8.4f}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "params.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["delta", "params", "rs"])
            for delta, total, rs, _ in rows:
                w.writerow([f"{delta:g}", total, _fmt(rs)])
        with open(out / "params_layers.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["delta", "layer", "params"])
            for delta, _, _, table in rows:
                for layer, count in table:
                    w.writerow([f"{delta:g}", layer, count])
    return 0


def run_train(cfg: RunConfig, resume: Optional[str] = None) -> dict:
    """Train per config and write the full artifact set; returns summary info."""
    if not cfg.out_dir:
        raise ConfigError("out_dir: required for train")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    hub = StreamHub(cfg.seed)
    train_ds, eval_ds = load_datasets(cfg, hub)
    if resume:
        model, optimizer, start_epoch, global_step, _ = load_checkpoint(resume)
    else:
        model = build_model(cfg.model_config(), hub)
        optimizer = make_optimizer(cfg.optimizer,
                                   list(model.named_params().items()), cfg.lr)
        start_epoch, global_step = 0, 0

    plan = BatchPlan(cfg.batch_size, seed=cfg.seed)
    kl_weight = cfg.kl_weight_value(num_batches(len(train_ds), plan), cfg.batch_size)
    prior = ScaleMixturePrior()

    rows: List[List[float]] = []
    for epoch in range(start_epoch, cfg.epochs):
        sums = np.zeros(4, dtype=np.float64)
        count = 0
        for batch in batches(train_ds, plan, epoch):
            breakdown = train_step(model, batch, optimizer, prior, kl_weight,
                                   hub, global_step)
            global_step += 1
            f = breakdown.floats()
            sums += (f["total"], f["log_q"], f["log_prior"], f["nll"])
            count += 1
        means = sums / max(count, 1)
        rows.append([epoch, *means])
        print(f"epoch {epoch}: total={means[0]:.4f} nll={means[3]:.4f}")

    with open(out / "epochs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPOCH_COLUMNS)
        for row in rows:
            w.writerow([int(row[0])] + [_fmt(v) for v in row[1:]])

    save_checkpoint(model, optimizer, str(out / CHECKPOINT_NAME),
                    cfg.epochs, global_step, cfg.seed)

    report = evaluate_model(model, eval_ds, cfg, hub)
    _write_report(report, out, cfg.figures)
    if cfg.figures and rows:
        from .plots import save_loss_figure
        (out / "figures").mkdir(exist_ok=True)
        save_loss_figure(rows, str(out / "figures" / "loss.png"))

    manifest = {
        "library": "ksnet",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "epochs": [[int(r[0])] + [float(v) for v in r[1:]] for r in rows],
        "report": json.loads(report.to_json()),
        "wall_clock_sec": time.time() - started,
        "artifacts": ["manifest.json", "epochs.csv", "report.json",
                      "reliability.csv", CHECKPOINT_NAME],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return {"out": str(out), "report": report, "rows": rows}


def run_eval(cfg: RunConfig, checkpoint: str) -> dict:
    if not cfg.out_dir:
        raise ConfigError("out_dir: required for eval")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _, _ = load_checkpoint(checkpoint)
    if model.cfg != cfg.model_config():
        raise ConfigError("checkpoint model config does not match the requested config")
    hub = StreamHub(cfg.seed)
    _, eval_ds = load_datasets(cfg, hub)
    report = evaluate_model(model, eval_ds, cfg, hub)
    _write_report(report, out, cfg.figures)
    print(report.csv_header())
    print(report.csv_row())
    return {"out": str(out), "report": report}


def run_sweep(cfg: RunConfig, deltas: List[float]) -> dict:
    if not cfg.out_dir:
        raise ConfigError("out_dir: required for sweep")
    if cfg.mode not in ("ksn", "fksn"):
        raise ConfigError("sweep: mode must be ksn or fksn")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for delta in deltas:
        sub_cfg = dataclasses.replace(cfg, delta=delta,
                                      out_dir=str(out / f"delta_{delta:g}"))
        result = run_train(sub_cfg)
        model_total, _ = count_params(
            build_model(sub_cfg.model_config(), StreamHub(cfg.seed)))
        rows.append((delta, model_total, result["report"].acc))
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["delta", "params", "accuracy"])
        for delta, total, acc in rows:
            w.writerow([f"{delta:g}", total, _fmt(acc)])
    if cfg.figures:
        from .plots import save_sweep_figure
        figdir = out / "figures"
        figdir.mkdir(exist_ok=True)
        save_sweep_figure(rows, str(figdir / "sweep.png"))
    return {"out": str(out), "rows": rows}


# ---------------------------------------------------------------------------
# argument parsing

def _parse_deltas(raw: str) -> List[float]:
    try:
        values = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"--deltas: {exc}") from exc
    if not values:
        raise ConfigError("--deltas: empty list")
    return values


_OVERRIDE_FIELDS = [f for f in dataclasses.fields(RunConfig)
                    if f.name not in ("out_dir", "seed", "figures")]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip figure rendering")
    for f in _OVERRIDE_FIELDS:
        tname = f.type if isinstance(f.type, str) else f.type.__name__
        kind = {"int": int, "float": float, "str": str}.get(tname, str)
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            type=kind, default=None)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "from_manifest", None):
        cfg = from_manifest(args.from_manifest)
    elif args.config:
        cfg = load_ini(args.config)
    else:
        cfg = RunConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in _OVERRIDE_FIELDS}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.no_figures:
        overrides["figures"] = False
    return apply_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ksnet",
        description="Kernel seed networks: train, evaluate, count, sweep.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="parameter table and RS ratio (no training)")
    _add_common(p)
    p.add_argument("--deltas", type=str, default=None,
                   help="comma-separated deltas for a multi-row table")

    p = sub.add_parser("train", help="train a model and write run artifacts")
    _add_common(p)
    p.add_argument("--from-manifest", dest="from_manifest", default=None,
                   help="re-execute the config embedded in a manifest.json")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="train/evaluate across deltas")
    _add_common(p)
    p.add_argument("--deltas", type=str, required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "params":
            deltas = _parse_deltas(args.deltas) if args.deltas else None
            return cmd_params(cfg, deltas, args.out)
        if args.command == "train":
            run_train(cfg, resume=args.resume)
            return 0
        if args.command == "eval":
            run_eval(cfg, args.checkpoint)
            return 0
        if args.command == "sweep":
            run_sweep(cfg, _parse_deltas(args.deltas))
            return 0
    except KsnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
