"""``coxcnn`` command line: simulate, train, evaluate, crossval, gradcheck.

Every command resolves its parameters as defaults < ``--config`` file <
explicit flags and writes the effective set to ``run_config.json`` next to
its outputs. Passing that file back through ``--config`` replays the run.

Exit codes: 0 success, 2 invalid arguments, 3 data/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import gradcheck as gc
from . import model as model_mod
from . import tensor_nn as nn
from .augment import AugmentConfig, augment_dataset
from .baseline_cph import BaselinePipeline, fit_baseline
from .errors import (
    FormatError,
    IllConditionedError,
    InvalidArgumentError,
    NoComparablePairsError,
    NoEventsError,
    TrainingDivergedError,
)
from .evaluation import c_index, cross_validate, make_folds, render_table, result_records, write_jsonl
from .simdata import derive_seed, load_idx, read_dataset, simulate, synth_digits, write_dataset

log = logging.getLogger("coxcnn")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_CONFIG = "run_config.json"
CONFIG_VERSION = 1

CNN_DEFAULTS: dict[str, Any] = {
    "epochs": 100,
    "lr": 1e-4,
    "momentum": 0.9,
    "batch_size": 64,
    "dropout": 0.5,
    "dropout_on": "both",
    "standardize": True,
    "strict_risk_set": False,
    "precision": 32,
    "augment": False,
    "shift_pixels": 2,
    "time_jitter": 0.05,
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {
        "out": None,
        "synthetic": False,
        "idx_images": None,
        "idx_labels": None,
        "classes": [0, 6],
        "n": None,
        "seed": 0,
        "lambda0": 5.0,
        "non_censored_fraction": 0.5,
        "mask_distribution": "uniform",
        "mask_sigma": 1.0,
        "mask_scale": 1.0,
        "ink": 0.3,
    },
    "train": {"data": None, "out": None, "method": "cnn", "pca_dim": 20, "seed": 0, **CNN_DEFAULTS},
    "evaluate": {"data": None, "model": None, "out": None, "seed": 0},
    "crossval": {
        "data": None,
        "out": None,
        "methods": ["cnn", "cph"],
        "k": 10,
        "seed": 0,
        "jobs": 1,
        "pca_dims": [10, 20, 40, 60, 80],
        "stratified": True,
        **CNN_DEFAULTS,
    },
    "gradcheck": {"seed": 0, "n_seeds": 20, "precision": [64, 32], "full_model": False, "out": None},
}


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_cnn_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("CNN training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--momentum", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--dropout", type=float, help="dropout rate on the FC layers")
    g.add_argument("--dropout-on", choices=["both", "last"])
    g.add_argument("--standardize", action=argparse.BooleanOptionalAction, help="per-image z-scoring at input")
    g.add_argument("--strict-risk-set", action=argparse.BooleanOptionalAction)
    g.add_argument("--precision", type=int, choices=[32, 64])
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, help="bbox-shift augmentation")
    g.add_argument("--shift-pixels", type=int)
    g.add_argument("--time-jitter", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coxcnn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of parameters (a saved run_config.json works)")
        p.add_argument("--seed", type=int)
        return p

    p = command("simulate", "generate a censored survival dataset from digit images")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--synthetic", action="store_true", help="use the built-in digit renderer")
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--classes", type=_int_list)
    p.add_argument("--n", type=int, help="number of images (synthetic) or cap on IDX images")
    p.add_argument("--lambda0", type=float)
    p.add_argument("--non-censored-fraction", type=float)
    p.add_argument("--mask-distribution", choices=["uniform", "gaussian"])
    p.add_argument("--mask-sigma", type=float)
    p.add_argument("--mask-scale", type=float)
    p.add_argument("--ink", type=float, help="peak stroke intensity of synthetic digits")

    p = command("train", "fit a CoxCNN or the linear CPH baseline")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=["cnn", "cph"])
    p.add_argument("--pca-dim", type=int)
    _add_cnn_flags(p)

    p = command("evaluate", "c-index of a saved model on a dataset")
    p.add_argument("--data")
    p.add_argument("--model", help="model.cxnn or baseline JSON")
    p.add_argument("--out", help="optional output directory")

    p = command("crossval", "k-fold comparison of methods")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--methods", type=_str_list)
    p.add_argument("--k", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--pca-dims", type=_int_list)
    p.add_argument("--stratified", action=argparse.BooleanOptionalAction)
    _add_cnn_flags(p)

    p = command("gradcheck", "finite-difference gradient suite")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--precision", type=_int_list, help="comma list of 32 and/or 64")
    p.add_argument("--full-model", action=argparse.BooleanOptionalAction, help="also check the default-size network")
    p.add_argument("--out")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[command])
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    path = getattr(ns, "config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InvalidArgumentError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"config file {path} is not valid JSON: {e}")
        if "params" in loaded and "command" in loaded:
            if loaded["command"] != command:
                raise InvalidArgumentError(f"{path} is a {loaded['command']!r} config, not {command!r}")
            loaded = loaded["params"]
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise InvalidArgumentError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(explicit)
    return cfg


def write_run_config(directory: Path, command: str, cfg: dict[str, Any]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RUN_CONFIG
    doc = {"version": CONFIG_VERSION, "command": command, "params": cfg}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _require(cfg: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise InvalidArgumentError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ---------------------------------------------------------------------------
# trainers (top-level classes so worker processes can unpickle them)


def cnn_config(cfg: dict[str, Any], seed: int) -> model_mod.CoxCnnConfig:
    sgd = nn.SgdConfig(cfg["lr"], cfg["momentum"], cfg["epochs"], cfg["batch_size"], seed)
    return model_mod.CoxCnnConfig(
        dropout_rate=cfg["dropout"],
        dropout_on=cfg["dropout_on"],
        standardize=cfg["standardize"],
        strict_risk_set=cfg["strict_risk_set"],
        sgd=sgd,
    )


class CnnPredictor:
    def __init__(self, model: model_mod.CoxCnnModel, bits: int):
        self.model, self.bits = model, bits

    def __call__(self, samples) -> np.ndarray:
        with nn.precision(self.bits):
            return model_mod.predict_risks(self.model, [s.image for s in samples])


class CnnTrainer:
    """Builds, optionally augments for, and trains a CoxCNN on one fold."""

    def __init__(self, cfg: dict[str, Any]):
        self.cfg = dict(cfg)

    def fit(self, samples, seed: int) -> model_mod.CoxCnnModel:
        cfg = self.cfg
        with nn.precision(cfg["precision"]):
            if cfg["augment"]:
                acfg = AugmentConfig(cfg["shift_pixels"], time_jitter_frac=cfg["time_jitter"], seed=derive_seed(seed, 2))
                samples = augment_dataset(samples, acfg)
            mcfg = cnn_config(cfg, derive_seed(seed, 1))
            channels = samples[0].image.channels
            m = model_mod.build(mcfg, channels, seed=derive_seed(seed, 0))
            result = model_mod.train(m, samples)
            m.metadata["loss_history"] = result.loss_history
            return m

    def __call__(self, samples, seed: int) -> CnnPredictor:
        return CnnPredictor(self.fit(samples, seed), self.cfg["precision"])


class CphPredictor:
    def __init__(self, pipeline: BaselinePipeline):
        self.pipeline = pipeline

    def __call__(self, samples) -> np.ndarray:
        return self.pipeline.predict([s.image for s in samples])


class CphTrainer:
    def __init__(self, pca_dim: int):
        self.pca_dim = pca_dim

    def __call__(self, samples, seed: int) -> CphPredictor:
        return CphPredictor(fit_baseline(samples, self.pca_dim))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict[str, Any]) -> int:
    _require(cfg, "out")
    n = cfg["n"]
    if cfg["synthetic"]:
        if cfg["idx_images"] or cfg["idx_labels"]:
            raise InvalidArgumentError("use either --synthetic or --idx-images/--idx-labels, not both")
        images = synth_digits(2000 if n is None else n, cfg["classes"], seed=derive_seed(cfg["seed"], 0), ink=cfg["ink"])
    elif cfg["idx_images"] and cfg["idx_labels"]:
        images = load_idx(cfg["idx_images"], cfg["idx_labels"], cfg["classes"])
        if n is not None:
            images = images[:n]
    else:
        raise InvalidArgumentError("need --synthetic or both --idx-images and --idx-labels")
    if n is not None and n < 1:
        raise InvalidArgumentError("--n must be positive")
    ds = simulate(
        images,
        seed=cfg["seed"],
        lambda0=cfg["lambda0"],
        non_censored_fraction=cfg["non_censored_fraction"],
        mask_distribution=cfg["mask_distribution"],
        mask_sigma=cfg["mask_sigma"],
        mask_scale=cfg["mask_scale"],
    )
    out = Path(cfg["out"])
    write_dataset(ds, out)
    write_run_config(out, "simulate", cfg)
    t, r = ds.times(), np.array([s.true_risk for s in ds.samples])
    print(f"wrote {out}")
    print(f"n={len(ds)} events={int(ds.events().sum())}")
    print(f"time range [{t.min():.6g}, {t.max():.6g}]  risk range [{r.min():.6g}, {r.max():.6g}]")
    return EXIT_OK


def cmd_train(cfg: dict[str, Any]) -> int:
    _require(cfg, "data", "out")
    ds = read_dataset(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["method"] == "cph":
        pipe = CphTrainer(cfg["pca_dim"])(ds.samples, cfg["seed"]).pipeline
        pipe.save(out / "baseline.json")
        history = pipe.cph.loss_history
        print(f"wrote {out / 'baseline.json'} (Newton-Raphson: {pipe.cph.iterations} iterations, "
              f"|grad|={pipe.cph.grad_norm:.3g})")
    else:
        if cfg["lr"] == 0:
            print("warning: learning rate is 0; parameters will not change", file=sys.stderr)
        m = CnnTrainer(cfg).fit(ds.samples, cfg["seed"])
        history = m.metadata["loss_history"]
        model_mod.save_model(m, out / "model.cxnn")
        print(f"wrote {out / 'model.cxnn'} ({m.parameter_count()} parameters)")
    (out / "loss_history.json").write_text(json.dumps(history) + "\n")
    write_run_config(out, "train", cfg)
    if history:
        print(f"final loss {history[-1]:.6g}")
    return EXIT_OK


def load_any_model(path: str | Path):
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == model_mod.MODEL_MAGIC:
        return model_mod.load_model(p)
    try:
        return BaselinePipeline.load(p)
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"{p} is neither a model container nor a baseline JSON: {e}")


def cmd_evaluate(cfg: dict[str, Any]) -> int:
    _require(cfg, "data", "model")
    ds = read_dataset(cfg["data"])
    m = load_any_model(cfg["model"])
    if isinstance(m, BaselinePipeline):
        risks = CphPredictor(m)(ds.samples)
    else:
        risks = CnnPredictor(m, 32)(ds.samples)
    res = c_index(risks, [s.record for s in ds.samples])
    print(f"c-index {res.c_index:.4f} ({res.comparable_pairs} comparable pairs)")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        doc = {"c_index": res.c_index, "concordant": res.concordant, "discordant": res.discordant,
               "tied_risk": res.tied_risk, "comparable_pairs": res.comparable_pairs}
        (out / "evaluation.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        write_run_config(out, "evaluate", cfg)
    return EXIT_OK


def run_crossval(ds, cfg: dict[str, Any]) -> tuple[list[dict], dict[str, dict[str, float]]]:
    """All fold rows plus the ``{method: {column: mean}}`` table cells."""
    unknown = set(cfg["methods"]) - {"cnn", "cph"}
    if unknown:
        raise InvalidArgumentError(f"unknown method(s): {', '.join(sorted(unknown))}")
    plan = make_folds([s.record for s in ds.samples], cfg["k"], cfg["stratified"], cfg["seed"])
    rows: list[dict] = []
    table: dict[str, dict[str, float]] = {}
    for method in cfg["methods"]:
        if method == "cnn":
            cv = cross_validate(ds, CnnTrainer(cfg), plan, cfg["jobs"])
            rows += result_records("CoxCNN", "default", cv)
            table["CoxCNN"] = {"c-index": cv.mean}
            log.info("CoxCNN mean c-index %.4f", cv.mean)
        else:
            cells = {}
            for d in cfg["pca_dims"]:
                cv = cross_validate(ds, CphTrainer(d), plan, cfg["jobs"])
                rows += result_records("CPH", f"pca={d}", cv)
                cells[f"pca={d}"] = cv.mean
                log.info("CPH pca=%d mean c-index %.4f", d, cv.mean)
            table["CPH"] = cells
    return rows, table


def cmd_crossval(cfg: dict[str, Any]) -> int:
    _require(cfg, "data", "out")
    if cfg["jobs"] < 1:
        raise InvalidArgumentError("--jobs must be at least 1")
    ds = read_dataset(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows, table = run_crossval(ds, cfg)
    write_jsonl(rows, out / "results.jsonl")
    text = render_table(table)
    (out / "table.txt").write_text(text)
    write_run_config(out, "crossval", cfg)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(cfg: dict[str, Any]) -> int:
    bits_list = cfg["precision"] if isinstance(cfg["precision"], list) else [cfg["precision"]]
    if any(b not in gc.SETTINGS for b in bits_list):
        raise InvalidArgumentError("precision must be 32 and/or 64")
    if cfg["n_seeds"] < 1:
        raise InvalidArgumentError("--n-seeds must be positive")
    seeds = [derive_seed(cfg["seed"], i) % 2**31 for i in range(cfg["n_seeds"])]
    lines, failed = [], 0
    for bits in bits_list:
        results = gc.run_suite(seeds, bits, full_model=cfg["full_model"])
        for name in dict.fromkeys(r.name for r in results):
            group = [r for r in results if r.name == name]
            worst = max(group, key=lambda r: r.report.max_rel_error)
            bad = [r for r in group if not r.passed]
            failed += len(bad)
            status = "PASS" if not bad else "FAIL"
            lines.append(f"{status} {bits}-bit {name:<10} max_rel_err={worst.report.max_rel_error:.3e} "
                         f"tol={worst.report.tolerance:.0e} seeds={len(group)}")
            for r in bad:
                for block, err in enumerate(r.report.per_block):
                    if err >= r.report.tolerance:
                        lines.append(f"    seed {r.seed} block {block}: rel_err={err:.3e}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(report)
        write_run_config(out, "gradcheck", cfg)
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "crossval": cmd_crossval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except (InvalidArgumentError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except (FormatError, NoEventsError, NoComparablePairsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, IllConditionedError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
