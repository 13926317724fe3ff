"""Command-line entry point: split, train, eval, ensemble, synth.

Every command is non-interactive and exit-code disciplined: 0 on success,
2 for configuration or data problems (the diagnostic names the offending
key or path), 3 when training aborts on a non-finite loss. Outputs land
under --out with fixed filenames: curves.csv, checkpoint.bin, report.json,
probs.csv, manifest.txt (plus split.csv where a split is produced).

The MIXVAE_SEED environment variable overrides the configured seed in any
command that uses one.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .autodiff import Rng, no_grad
from .config import (RunConfig, SEED_ENV_VAR, load_config, manifest_text,
                     parse_config_text, resolve_config)
from .errors import ConfigError, DatasetError, MixvaeError, NonFiniteLossError
from .model import VaeClassifier, load_checkpoint, save_checkpoint
from .trainer import train, write_curves_csv


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _effective_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    return seed


def _build_corpus(config: RunConfig, rng: Rng):
    if config["data.manifest"]:
        return data_mod.load_manifest(config["data.manifest"])
    if not config["data.synthetic"]:
        raise ConfigError("config key data.manifest: empty, and data.synthetic is false")
    return data_mod.synthetic_dataset(config["data.n_per_class"],
                                      config["data.resolution"], rng)


def _resolve_split(config: RunConfig, samples, rng: Rng) -> data_mod.SplitIndex:
    if config["data.split"]:
        return data_mod.read_split_csv(config["data.split"], samples)
    return data_mod.stratified_split(samples, config["data.split_fraction"], rng)


def cmd_synth(args) -> int:
    seed = _effective_seed(args.seed)
    rng = Rng(seed).derive("corpus")
    samples = data_mod.synthetic_dataset(args.n_per_class, args.resolution, rng)
    out = _ensure_out(args.out)
    manifest = data_mod.write_corpus(samples, out)
    hist = data_mod.class_histogram(samples)
    print(f"wrote {len(samples)} samples to {manifest} (per class: {hist})")
    return 0


def cmd_split(args) -> int:
    seed = _effective_seed(args.seed)
    samples = data_mod.load_manifest(args.manifest)
    split = data_mod.stratified_split(samples, args.fraction, Rng(seed).derive("split"))
    out = _ensure_out(args.out)
    path = os.path.join(out, "split.csv")
    data_mod.write_split_csv(path, split)
    print(f"wrote {path}: {len(split.train_ids)} train / {len(split.val_ids)} val")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = config.seed
    root = Rng(seed)
    out = _ensure_out(args.out)

    samples = _build_corpus(config, root.derive("corpus"))
    split = _resolve_split(config, samples, root.derive("split"))
    data_mod.write_split_csv(os.path.join(out, "split.csv"), split)

    dataset = data_mod.SplitDataset(samples, split, config.train_augment(),
                                    config.test_augment(),
                                    config["model.recon_resolution"])
    model = VaeClassifier(config.model_config(), root.derive("init"))
    result = train(model, dataset, config.optim_config(), root.derive("train"),
                   mixup_config=config.mixup_config(),
                   objective=config.objective_config())

    write_curves_csv(os.path.join(out, "curves.csv"), result.curves)
    manifest = manifest_text(config)
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(manifest)
    best = VaeClassifier(config.model_config(), rng=None)
    best.load_state(result.best_params)
    save_checkpoint(os.path.join(out, "checkpoint.bin"), best,
                    epoch=result.best_epoch,
                    best_val_accuracy=result.best_val_accuracy,
                    rng_state=result.state.rng_state,
                    run_config_text=manifest)
    print(f"trained {len(result.curves)} epochs; best val accuracy "
          f"{result.best_val_accuracy:.6f} at epoch {result.best_epoch}; artifacts in {out}")
    return 0


def _collect_probs(model: VaeClassifier, dataset: data_mod.SplitDataset,
                   ids: Sequence[str], batch_size: int):
    probs_rows: List[np.ndarray] = []
    truth_rows: List[int] = []
    with no_grad():
        for batch in dataset.batches_for_ids(ids, batch_size):
            x, _, y = batch[0], batch[1], batch[2]
            out = model.forward(x, "eval")
            probs_rows.append(out.probs.data)
            truth_rows.extend(int(t) for t in np.argmax(y, axis=1))
    return np.concatenate(probs_rows, axis=0), truth_rows


def _write_probs_csv(path: str, ids: Sequence[str], probs: np.ndarray,
                     truths: Sequence[int]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,p0,p1,p2,p3,truth\n")
        for sid, row, truth in zip(ids, probs, truths):
            cells = ",".join(repr(float(v)) for v in row)
            fh.write(f"{sid},{cells},{truth}\n")


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model()

    if checkpoint.run_config_text is not None:
        raw = parse_config_text(checkpoint.run_config_text, "<checkpoint run config>")
    else:
        raw = {}
    config = resolve_config(raw, apply_env_seed=False)
    if args.manifest:
        samples = data_mod.load_manifest(args.manifest)
    else:
        samples = _build_corpus(config, Rng(config.seed).derive("corpus"))
    split = data_mod.read_split_csv(args.split, samples)

    dataset = data_mod.SplitDataset(samples, split, config.train_augment(),
                                    config.test_augment(),
                                    config["model.recon_resolution"])
    batch = config["optim.batch_size"]
    probs, truths = _collect_probs(model, dataset, split.val_ids, batch)
    report = metrics_mod.evaluate(probs, truths)

    out = _ensure_out(args.out)
    metrics_mod.write_report(os.path.join(out, "report.json"), report)
    _write_probs_csv(os.path.join(out, "probs.csv"), split.val_ids, probs, truths)
    print(f"evaluated {len(truths)} samples: accuracy {report.accuracy:.6f}, "
          f"weighted F1 {report.weighted_f1:.6f}; report in {out}")
    return 0


def _read_probs_csv(path: str) -> Tuple[List[str], np.ndarray, List[int]]:
    if not os.path.exists(path):
        raise DatasetError(f"probability file not found: {path}")
    ids: List[str] = []
    rows: List[List[float]] = []
    truths: List[int] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "id,p0,p1,p2,p3,truth":
            raise DatasetError(f"{path}: expected header id,p0,p1,p2,p3,truth, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise DatasetError(f"{path} line {lineno}: expected 6 columns")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:5]])
            truths.append(int(parts[5]))
    return ids, np.asarray(rows, dtype=np.float64), truths


def cmd_ensemble(args) -> int:
    members = [_read_probs_csv(p) for p in args.probs]
    ref_ids, _, ref_truths = members[0]
    for path, (ids, _, truths) in zip(args.probs[1:], members[1:]):
        if ids != ref_ids:
            if len(ids) != len(ref_ids):
                raise DatasetError(
                    f"{path}: {len(ids)} rows do not align with "
                    f"{len(ref_ids)} rows in {args.probs[0]}")
            row, a, b = next((i, x, y) for i, (x, y) in enumerate(zip(ids, ref_ids)) if x != y)
            raise DatasetError(
                f"{path}: sample ids do not align with {args.probs[0]}: "
                f"first mismatch at row {row}: {a!r} vs {b!r}")
        if truths != ref_truths:
            raise DatasetError(f"{path}: truth labels do not match {args.probs[0]}")
    if args.truth:
        truth_map = {}
        with open(args.truth, encoding="utf-8") as fh:
            fh.readline()  # header
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                sid, _, rest = line.partition(",")
                truth_map[sid] = int(rest.split(",")[0])
        for sid, t in zip(ref_ids, ref_truths):
            if sid in truth_map and truth_map[sid] != t:
                raise DatasetError(
                    f"truth file {args.truth} disagrees with member files on {sid!r}")
    averaged = metrics_mod.ensemble_probs([m[1] for m in members])
    report = metrics_mod.evaluate(averaged, ref_truths)
    out = _ensure_out(args.out)
    metrics_mod.write_report(os.path.join(out, "report.json"), report)
    _write_probs_csv(os.path.join(out, "probs.csv"), ref_ids, averaged, ref_truths)
    print(f"ensembled {len(members)} member(s) over {len(ref_ids)} samples: "
          f"accuracy {report.accuracy:.6f}, weighted F1 {report.weighted_f1:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixvae",
        description="VAE-classifier training with manifold mixup (CPU, deterministic).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic 4-class corpus on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified 80/20 split of a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", default=None, help="key=value config file (defaults apply)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split's validation side")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None,
                   help="corpus manifest; defaults to the checkpoint's recorded data source")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="average member probability files and re-evaluate")
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--truth", default=None, help="optional id,truth CSV to cross-check")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MixvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
