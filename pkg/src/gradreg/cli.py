"""Command line entry point: ``gradreg {train,attack,robust} --config FILE``.

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 training
divergence.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import dataio
from . import model as mdl
from .numcore import InvalidParameterError, lp_norm, make_rng
from .perturb import PerturbSpec, decompose_perturbation
from .robust import (EstimatorUndefinedError, NoiseModel, RiskReport, line_search_dataset, linear_density_missrate,
                     noise_misclassification, predict_missrate, stats_from_search,
                     write_min_perturb_csv, write_summary_json)
from .train import (DivergenceError, TrainConfig, evaluate_error, train, train_two_stage,
                    write_history_csv)
from .viz import (ImageGrid, panel_perturbations, render_perturbation_panel, square_tile_shape,
                  write_histogram_csv, write_pgm_grid)

log = logging.getLogger("gradreg")

EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 1, 2, 3

DEFAULTS = {
    "dataset": "mnist",
    "train_images": "",
    "train_labels": "",
    "test_images": "",
    "test_labels": "",
    "train_limit": "0",
    "test_limit": "0",
    "blob_n_per_class": "200",
    "blob_dim": "16",
    "blob_classes": "3",
    "blob_spread": "0.05",
    "blob_test_fraction": "0.25",
    "hidden": "",
    "p": "2",
    "sigma": "0",
    "lambda": "0",
    "decay_normalization": "batch_sum_half",
    "max_norm": "",
    "lr": "0.1",
    "epochs": "10",
    "batch": "100",
    "momentum": "0.5",
    "seed": "0",
    "two_stage_first": "0",
    "stage2_cap": "0",
    "noise_levels": "0,0.1,0.3",
    "noise_trials": "5",
    "ls_step": "0.01",
    "ls_tmax": "20",
    "bin_width": "0.01",
    "stats_split": "train",
    "stats_limit": "0",
    "ld_sigma": "0.01",
    "ld_cutoff": "0.1",
    "magnify": "10",
    "panel_count": "20",
    "panel_cols": "10",
    "attack_limit": "1000",
    "decompose_count": "3",
    "out_dir": "out",
}


class UsageError(Exception):
    pass


class RunConfig(dict):
    """Flat ``key = value`` settings with typed accessors."""

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{source}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
            cfg[key] = value
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.parse(f.read(), path)

    def dump(self):
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))

    def int(self, key):
        try:
            return int(self[key])
        except ValueError:
            raise UsageError(f"{key}: expected an integer, got {self[key]!r}") from None

    def float(self, key):
        try:
            return float(self[key])
        except ValueError:
            raise UsageError(f"{key}: expected a number, got {self[key]!r}") from None

    def floats(self, key):
        return [float(v) for v in self[key].split(",") if v.strip()]

    def ints(self, key):
        return [int(v) for v in self[key].split(",") if v.strip()]

    def optional_float(self, key):
        return self.float(key) if self[key] else None


def _require_file(path, key):
    if not path:
        raise UsageError(f"config key {key} is required for the mnist dataset")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{key}: no such file: {path}")
    return path


def load_data(cfg):
    """Return (train, test) datasets described by the config."""
    if cfg["dataset"] == "blobs":
        data = dataio.synthetic_blobs(make_rng(cfg.int("seed")), cfg.int("blob_n_per_class"),
                                      cfg.int("blob_dim"), cfg.int("blob_classes"),
                                      cfg.float("blob_spread"))
        n_test = int(round(len(data) * cfg.float("blob_test_fraction")))
        train_set, test_set = dataio.split(data, len(data) - n_test)
    elif cfg["dataset"] == "mnist":
        train_set = dataio.load_mnist(_require_file(cfg["train_images"], "train_images"),
                                      _require_file(cfg["train_labels"], "train_labels"))
        test_set = dataio.load_mnist(_require_file(cfg["test_images"], "test_images"),
                                     _require_file(cfg["test_labels"], "test_labels"))
    else:
        raise UsageError(f"dataset must be 'mnist' or 'blobs', got {cfg['dataset']!r}")
    if cfg.int("train_limit"):
        train_set = train_set.subset(slice(0, cfg.int("train_limit")))
    if cfg.int("test_limit"):
        test_set = test_set.subset(slice(0, cfg.int("test_limit")))
    return train_set, test_set


def _p_value(cfg):
    return math.inf if cfg["p"].lower() in ("inf", "infinity") else cfg.float("p")


def train_config(cfg):
    sigma = cfg.float("sigma")
    spec = PerturbSpec(_p_value(cfg), sigma) if sigma > 0 else None
    return TrainConfig(learning_rate=cfg.float("lr"), epochs=cfg.int("epochs"),
                       batch_size=cfg.int("batch"), seed=cfg.int("seed"), spec=spec,
                       weight_decay=cfg.float("lambda"), max_norm=cfg.optional_float("max_norm"),
                       momentum=cfg.float("momentum"),
                       decay_normalization=cfg["decay_normalization"])


def _prepare_out(cfg, out):
    out = out or cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    cfg["out_dir"] = out
    with open(os.path.join(out, "resolved_config.txt"), "w") as f:
        f.write(cfg.dump())
    return out


def _write_json(doc, path):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_train(cfg, model_path, out):
    train_set, test_set = load_data(cfg)
    tcfg = train_config(cfg)
    out = _prepare_out(cfg, out)
    sizes = [train_set.dim] + cfg.ints("hidden") + [train_set.num_classes]
    model = mdl.init_mlp(sizes, make_rng(cfg.int("seed")))
    summary = {}
    n_first = cfg.int("two_stage_first")
    if n_first:
        cap = cfg.int("stage2_cap") or None
        result = train_two_stage(model, train_set, n_first, tcfg, cap, val=test_set)
        model, history = result.model, result.history
        summary.update(stage1_loss=result.stage1_loss, stopped_early=result.stopped_early,
                       stage2_epochs=result.stage2_epochs)
    else:
        history = []
        model = train(model, train_set, tcfg, val=test_set, history=history)
    model_path = model_path or os.path.join(out, "model.bin")
    mdl.save_model(model, model_path)
    write_history_csv(history, os.path.join(out, "history.csv"))
    summary.update(train_error=evaluate_error(model, train_set),
                   test_error=evaluate_error(model, test_set),
                   epochs_run=len(history), model=os.path.basename(model_path))
    _write_json(summary, os.path.join(out, "summary.json"))
    log.info("test error %.4f", summary["test_error"])
    return summary


def _load_model(model_path, out):
    path = model_path or os.path.join(out, "model.bin")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such model file: {path}")
    return mdl.load_model(path)


def cmd_attack(cfg, model_path, out):
    spec = PerturbSpec(_p_value(cfg), cfg.float("sigma"))
    _, test_set = load_data(cfg)
    out = _prepare_out(cfg, out)
    model = _load_model(model_path, out)
    magnify = cfg.float("magnify")
    panel = test_set.subset(slice(0, cfg.int("panel_count")))
    files = render_perturbation_panel(model, panel, spec, magnify, out,
                                      cols=cfg.int("panel_cols"))

    rows = test_set.subset(slice(0, cfg.int("attack_limit")))
    eps = panel_perturbations(model, rows, spec)
    clean = mdl.predict(model, rows.inputs)
    adv = mdl.predict(model, rows.inputs + eps)
    norms = np.atleast_1d(lp_norm(eps, spec.p, axis=1))
    with open(os.path.join(out, "attack.csv"), "w") as f:
        f.write("example,label,pred_clean,pred_perturbed,eps_norm\n")
        for i in range(len(rows)):
            f.write(f"{i},{rows.labels[i]},{clean[i]},{adv[i]},{float(norms[i])!r}\n")

    # per-class split of the p=2 perturbation: one grid row per example
    shape = square_tile_shape(rows.dim)
    targets = rows.targets()
    tiles = []
    for i in range(min(cfg.int("decompose_count"), len(rows))):
        dec = decompose_perturbation(model, rows.inputs[i], targets[i], spec.sigma)
        tiles += [0.5 + magnify * c.reshape(shape) for c in dec.components]
    if tiles:
        path = os.path.join(out, "decomposition.pgm")
        write_pgm_grid(ImageGrid(tiles, cols=rows.num_classes), path)
        files.append(path)
    summary = {"n": len(rows), "flip_rate": float(np.mean(clean != adv)) if len(rows) else 0.0,
               "clean_error": float(np.mean(clean != rows.labels)) if len(rows) else 0.0,
               "p": repr(spec.p), "sigma": spec.sigma,
               "files": [os.path.basename(f) for f in files]}
    _write_json(summary, os.path.join(out, "attack.json"))
    return summary


def cmd_robust(cfg, model_path, out):
    train_set, test_set = load_data(cfg)
    out = _prepare_out(cfg, out)
    model = _load_model(model_path, out)
    stats_set = train_set if cfg["stats_split"] == "train" else test_set
    if cfg.int("stats_limit"):
        stats_set = stats_set.subset(slice(0, cfg.int("stats_limit")))
    lengths, status = line_search_dataset(model, stats_set, cfg.float("ls_step"),
                                          cfg.float("ls_tmax"))
    stats = stats_from_search(lengths, status, cfg.float("bin_width"))
    write_min_perturb_csv(lengths, status, stats_set.labels,
                          os.path.join(out, "min_perturbations.csv"))
    write_histogram_csv(stats.samples, stats.bin_width, os.path.join(out, "histogram.csv"))

    p_miss = evaluate_error(model, test_set)
    rng = make_rng(cfg.int("seed"))
    reports = []
    for s in cfg.floats("noise_levels"):
        noise = NoiseModel(s, test_set.dim)
        actual = noise_misclassification(model, test_set, noise, cfg.int("noise_trials"), rng)
        reports.append(RiskReport(s, p_miss, predict_missrate(p_miss, stats, noise), actual))
    ld_noise = NoiseModel(cfg.float("ld_sigma"), test_set.dim)
    extra = {"p_miss_clean": p_miss}
    ld = {"sigma_noise": ld_noise.sigma_noise}
    try:
        ld["predicted_increase"] = linear_density_missrate(stats, p_miss, ld_noise,
                                                           cfg.float("ld_cutoff"))
    except EstimatorUndefinedError as exc:
        # too few small perturbations to fit a density: report why, keep going
        ld["predicted_increase"] = None
        ld["undefined_reason"] = str(exc)
    ld["actual_increase"] = noise_misclassification(model, test_set, ld_noise,
                                                    cfg.int("noise_trials"), rng) - p_miss
    extra["linear_density"] = ld
    write_summary_json(stats, reports, os.path.join(out, "robust.json"), **extra)
    return {"stats": stats, "reports": reports, **extra}


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "robust": cmd_robust}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gradreg", description="Train, attack and analyse gradient-perturbation models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value run configuration")
        p.add_argument("--model", help="model file (default: <out>/model.bin)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        COMMANDS[args.command](cfg, args.model, args.out)
    except (UsageError, InvalidParameterError, dataio.InvalidLabelError) as exc:
        print(f"gradreg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, dataio.IdxFormatError) as exc:
        print(f"gradreg: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"gradreg: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
