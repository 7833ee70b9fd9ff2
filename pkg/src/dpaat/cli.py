"""Command-line front end.

    dpaat <command> --config <path> [--set section.key=value]... [--out DIR]

Commands: synth-data, train, attack, eval, gradcam, report, ablation.
Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_io
from .attacks import attack_dataset
from .config import ConfigError, parse_config, parse_lines
from .estimator import AdversarialTrainingClassifier
from .gradcam import grad_cam, render
from .metrics import evaluate, read_eval_csv, write_eval_csv
from .models import CheckpointError, load_checkpoint, predict_proba, resolve_arch, save_checkpoint
from .trainers import DPAAT, DPAAT_A_ONLY, DPAAT_B_ONLY, METHODS, write_training_log

log = logging.getLogger("dpaat")

COMMANDS = ("synth-data", "train", "attack", "eval", "gradcam", "report", "ablation")
ABLATION_VARIANTS = (("D-A", DPAAT_A_ONLY), ("D-B", DPAAT_B_ONLY), ("D-(A+B)", DPAAT))


class UsageError(Exception):
    pass


class PrerequisiteError(RuntimeError):
    pass


# -- artifact paths -------------------------------------------------------------

def checkpoint_path(out, method, root="train"):
    return Path(out) / root / method / "model.dpat"


def training_log_path(out, method, root="train"):
    return Path(out) / root / method / "train_log.csv"


def eval_report_path(out, method):
    return Path(out) / "eval" / method / "eval_report.csv"


# -- shared steps -----------------------------------------------------------------

def load_data(cfg):
    """Full dataset and its (train, val, test) split, as the config describes."""
    d = cfg.data
    if d.source == "synth":
        full = data_io.synth(d.classes, d.per_class, d.size, seed=d.seed, noise=d.noise)
    else:
        full = data_io.load_folder(d.source, d.index)
    return full, data_io.split(full, d.split, seed=d.seed)


def make_estimator(cfg, method=None, **changes):
    t = cfg.train.with_(method=method or cfg.train.method, **changes)
    return AdversarialTrainingClassifier(
        method=t.method, arch=cfg.arch, alpha=t.alpha, beta=t.beta, xi=t.xi, delta_eps=t.delta_eps,
        sync_variant=t.sync_variant, lr=t.lr, batch_size=t.batch_size, epochs=t.epochs,
        warmup_epochs=t.warmup_epochs, patience=t.patience, attack=t.attack, eps_min=t.eps_min,
        gamma_cap=t.gamma_cap, regenerate=t.regenerate, random_state=t.seed, model_seed=cfg.model_seed,
    )


def fit_and_save(cfg, splits, method, root="train", **changes):
    train_set, val_set, _ = splits
    est = make_estimator(cfg, method, **changes)
    arch = resolve_arch(cfg.arch, input_shape=train_set.image_shape, n_classes=train_set.n_classes)
    est.set_params(arch=arch)
    est.fit(train_set.images, train_set.labels, val_set.images, val_set.labels)
    ckpt = checkpoint_path(cfg.output_dir, method, root)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(est.params_, ckpt)
    write_training_log(est.history_, training_log_path(cfg.output_dir, method, root), wall_time=cfg.wall_time)
    log.info("%s: best epoch %d, wrote %s", method, est.best_epoch_, ckpt)
    return est


def require_checkpoint(cfg, method, root="train"):
    path = checkpoint_path(cfg.output_dir, method, root)
    if not path.is_file():
        raise PrerequisiteError(f"no checkpoint for method {method} at {path}; run "
                                f"'dpaat train --set train.method={method}' with the same --out first")
    return load_checkpoint(path)


def batched_proba(params, x, batch_size=256):
    return np.concatenate([predict_proba(params, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def evaluate_params(params, test, cfg, method):
    clean = batched_proba(params, test.images)
    adv_probs = {}
    for name, spec in cfg.eval_attacks.items():
        adv = attack_dataset(params, test.images, test.labels, spec, batch_size=cfg.eval_batch_size, seed=cfg.eval_seed)
        adv_probs[name] = batched_proba(params, adv.x_adv)
    return evaluate(method, test.labels, clean, adv_probs, n_classes=test.n_classes)


# -- commands ---------------------------------------------------------------------

def cmd_synth_data(cfg):
    full, _ = load_data(cfg)
    d = cfg.data
    root = cfg.output_dir / "data"
    data_io.save_folder(full, root)
    tags = np.full(len(full), "unused", dtype=object)
    for part, tag in zip(data_io.split_indices(full.labels, full.n_classes, d.split, d.seed), ("train", "val", "test")):
        tags[part] = tag
    ext = "pgm" if full.images.shape[1] == 1 else "ppm"
    with open(root / "splits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "split"])
        w.writerows([f"img{i:05d}.{ext}", tags[i]] for i in range(len(full)))
    (root / "checksum.txt").write_text(full.checksum() + "\n")
    log.info("wrote %d images to %s", len(full), root)


def cmd_train(cfg):
    _, splits = load_data(cfg)
    fit_and_save(cfg, splits, cfg.train.method)


def cmd_attack(cfg):
    method = cfg.train.method
    params = require_checkpoint(cfg, method)
    _, (_, _, test) = load_data(cfg)
    root = cfg.output_dir / "attack" / method
    root.mkdir(parents=True, exist_ok=True)
    stats = []
    for name, spec in cfg.eval_attacks.items():
        adv = attack_dataset(params, test.images, test.labels, spec, batch_size=cfg.eval_batch_size, seed=cfg.eval_seed)
        adv_set = data_io.Dataset(np.clip(adv.x_adv, 0.0, 1.0), test.labels, test.class_names, "test")
        data_io.save_folder(adv_set, root / name, prefix="adv")
        with open(root / name / "delta_norms.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "delta_norm", "epsilon", "success"])
            for i, (lab, n, e, s) in enumerate(zip(test.labels, adv.delta_norms, adv.epsilon, adv.success)):
                w.writerow([i, int(lab), repr(float(n)), repr(float(e)), int(bool(s))])
        stats.append([name, len(test), repr(float(np.mean(adv.delta_norms))), repr(float(np.max(adv.delta_norms))),
                      repr(float(spec.epsilon)), repr(float(np.mean(adv.success)))])
    with open(root / "attack_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attack", "n", "mean_delta_norm", "max_delta_norm", "epsilon", "success_rate"])
        w.writerows(stats)
    log.info("wrote adversarial test sets under %s", root)


def cmd_eval(cfg):
    method = cfg.train.method
    params = require_checkpoint(cfg, method)
    _, (_, _, test) = load_data(cfg)
    report = evaluate_params(params, test, cfg, method)
    path = eval_report_path(cfg.output_dir, method)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(report.rows, path)
    log.info("wrote %s", path)
    return report


def cmd_gradcam(cfg):
    method = cfg.train.method
    params = require_checkpoint(cfg, method)
    _, (_, _, test) = load_data(cfg)
    pred = np.argmax(batched_proba(params, test.images), axis=1)
    correct = np.flatnonzero(pred == test.labels)[: cfg.gradcam_count]
    out = cfg.output_dir / "gradcam" / method
    for i in correct:
        result = grad_cam(params, test.images[i], int(test.labels[i]), layer=cfg.gradcam_layer)
        render(result, out, f"test{i:05d}", method)
    log.info("wrote %d heatmaps to %s", len(correct), out)


def cmd_report(cfg):
    files = [(m, eval_report_path(cfg.output_dir, m)) for m in METHODS]
    rows = [r for m, path in files if path.is_file() for r in read_eval_csv(path)]
    if not rows:
        raise PrerequisiteError(f"no eval reports under {cfg.output_dir / 'eval'}; run 'dpaat eval' first")
    attacks = [a for a in cfg.eval_attacks if any(r.attack == a for r in rows)]
    attacks += [a for a in dict.fromkeys(r.attack for r in rows) if a not in attacks]
    root = cfg.output_dir / "report"
    root.mkdir(parents=True, exist_ok=True)
    write_eval_csv(rows, root / "all_reports.csv")
    methods = list(dict.fromkeys(r.method for r in rows))
    with open(root / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "gacc"] + attacks)
        for m in methods:
            mine = {r.attack: r for r in rows if r.method == m}
            gacc = next(iter(mine.values())).gacc
            w.writerow([m, repr(gacc)] + [repr(mine[a].racc) if a in mine else "" for a in attacks])
    log.info("wrote %s", root / "comparison.csv")


def cmd_ablation(cfg):
    full, splits = load_data(cfg)
    checksum = full.checksum()
    root = cfg.output_dir / "ablation"
    results = []
    for label, method in ABLATION_VARIANTS:
        fit_and_save(cfg, splits, method, root="ablation")
        params = load_checkpoint(checkpoint_path(cfg.output_dir, method, "ablation"))
        report = evaluate_params(params, splits[2], cfg, method)
        results.append((label, method, report))
    attacks = list(cfg.eval_attacks)
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "method", "data_checksum", "gacc", "map"] + [f"racc:{a}" for a in attacks])
        for label, method, report in results:
            by = {r.attack: r for r in report.rows}
            first = report.rows[0]
            w.writerow([label, method, checksum[:16], repr(first.gacc), repr(first.map)]
                       + [repr(by[a].racc) for a in attacks])
    log.info("wrote %s", root / "ablation.csv")
    return results


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "report": cmd_report,
    "ablation": cmd_ablation,
}


def run(command, config=None, overrides=(), out=None):
    """Execute one command; returns the exit status."""
    if command not in HANDLERS:
        log.error("unknown command %r; choose from %s", command, ", ".join(COMMANDS))
        return 1
    overrides = list(overrides)
    if out is not None:
        overrides.append(f"output.dir={out}")
    try:
        cfg = parse_config(config, overrides) if config is not None else parse_lines([], "<defaults>", overrides)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[command](cfg)
    except (PrerequisiteError, CheckpointError, data_io.DataError, OSError, ValueError) as exc:
        log.error("%s failed: %s", command, exc)
        return 2
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def main(argv=None):
    parser = _Parser(prog="dpaat", description="Adversarial training laboratory (STD, AT, SAT, AMAT, DPAAT).")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="section.key = value config file (defaults if omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logging.getLogger("dpaat").setLevel(logging.INFO)
    return run(args.command, args.config, args.overrides, args.out)


if __name__ == "__main__":
    sys.exit(main())
