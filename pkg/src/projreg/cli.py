"""Experiment command line: bound checks, histograms, sweeps, training runs.

Subcommands: verify-bound, hist-norms, penalty-sweep, train. Every run
resolves its parameters from built-in defaults, then an optional config
file (flat key=value lines or a single JSON object), then explicit
flags, and writes the fully-resolved configuration to an audit JSON next
to the output CSV. Outputs are byte-identical across reruns of the same
resolved config. Exit codes: 0 success, 1 failed check or divergence,
2 usage error.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from projreg.analysis import (
    norm_histogram,
    penalty_density_sweep,
    sparse_unit_vector,
    verify_bound_mc,
    verify_jensen_small,
)
from projreg.data import (
    Dataset,
    SynthSpec,
    gen_sparse_classification,
    gen_sparse_regression,
    load_idx_images,
    split_dataset,
)
from projreg.learn import (
    Activation,
    LossKind,
    OptimizerKind,
    RegKind,
    TrainConfig,
    TrainingDivergedError,
    init_dense_model,
    train,
)
from projreg.numerics import Rng
from projreg.penalty import PenaltyFamily, PenaltySpec
from projreg.sampler import SamplerConfig, ScoreMode, SelectionMode

__all__ = ["main", "console_main", "load_config"]


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    items = [t for t in str(text).split(",") if t.strip() != ""]
    return [float(t) for t in items]


@dataclass
class Param:
    name: str  # flag spelling, also the config-file key
    type: type  # int, float, str, bool, or list (comma list of floats)
    default: object
    help: str = ""
    choices: tuple | None = None
    required: bool = False

    def coerce(self, value):
        if self.type is list:
            return _parse_float_list(value)
        if self.type is bool:
            return value if isinstance(value, bool) else _parse_bool(str(value))
        return self.type(value)


_SHARED = [
    Param("seed", int, 0, "random seed"),
    Param("config", str, None, "config file (key=value lines or a JSON object)"),
]

_SCHEMAS: dict[str, list[Param]] = {
    "verify-bound": _SHARED + [
        Param("n", int, None, "weight vector length", required=True),
        Param("density", float, 0.01, "fraction of nonzero weights"),
        Param("T", float, 0.5, "uniform-threshold parameter"),
        Param("S", int, 500, "number of Monte Carlo experiments"),
        Param("sp", float, 0.01, "sampling density (used only in the reported alt bound)"),
        Param("tolerance", float, 0.02, "relative Monte Carlo tolerance"),
        Param("out", str, "bound_report.csv", "output CSV path"),
    ],
    "hist-norms": _SHARED + [
        Param("sp", list, [0.01, 0.05, 0.1], "comma list of sampling densities"),
        Param("n", int, 10000, "weight vector length"),
        Param("experiments", int, 10000, "mask draws per density"),
        Param("density", float, 0.01, "parent vector density"),
        Param("out", str, "norm_hist.csv", "output CSV path"),
    ],
    "penalty-sweep": _SHARED + [
        Param("n", int, 1000, "vector length"),
        Param("sp", float, 0.01, "sampling density of each mask"),
        Param("S", int, 20, "experiments per density"),
        Param("densities", list, None, "comma list of densities (default: log grid)"),
        Param("grid-points", int, 40, "points in the default log grid 0.001..1"),
        Param("out", str, "penalty_sweep.csv", "output CSV path"),
    ],
    "train": _SHARED + [
        Param("task", str, "synth-cls", "dataset", choices=("synth-reg", "synth-cls", "digits")),
        Param("loss", str, None, "loss (default mse for synth-reg, ce otherwise)",
              choices=("mse", "ce", "projected-ce")),
        Param("reg", str, "none", "regularizer", choices=("none", "l1", "l2", "proposed")),
        Param("lambda", float, 1e-3, "penalty weight"),
        Param("variant", str, "squared", "projected penalty variant", choices=("squared", "sqrt")),
        Param("normalize-counter", bool, True, "divide lambda by the max selection count"),
        Param("sp", float, 0.01, "sampling density"),
        Param("S", int, 10, "experiments per step"),
        Param("T", float, 0.5, "threshold parameter"),
        Param("alpha", float, 0.9, "momentum coefficient"),
        Param("score-mode", str, "magnitude", "sampling score mode",
              choices=("magnitude", "negated")),
        Param("selection-mode", str, "topk", "mask selection mode",
              choices=("topk", "prob-threshold", "uniform-threshold", "uniform-subset")),
        Param("lr", float, 0.001, "learning rate"),
        Param("batch-size", int, 32, "mini-batch size"),
        Param("epochs", int, 10, "training epochs"),
        Param("optimizer", str, "adam", "optimizer", choices=("adam", "sgd")),
        Param("hidden", int, 0, "hidden layer width (0 = linear model)"),
        Param("n", int, 2000, "synthetic sample count"),
        Param("d", int, 50, "synthetic feature count"),
        Param("classes", int, 10, "synthetic class count"),
        Param("density", float, 0.05, "synthetic ground-truth density"),
        Param("noise-std", float, 1.0, "synthetic noise scale"),
        Param("t-metric", float, 1e-3, "|w| threshold for the density metric"),
        Param("init-scale", float, 0.0, "weight init std (0 = 1/sqrt(fan_in))"),
        Param("data-dir", str, None, "directory with IDX files for the digits task"),
        Param("out", str, "metrics.csv", "output CSV path"),
    ],
}


def load_config(path) -> dict:
    """Read a flat key=value file or a single JSON object."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: JSON parse error at line {e.lineno}: {e.msg}") from e
        if not isinstance(obj, dict):
            raise UsageError(f"{path}: expected a single JSON object")
        return obj
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}: parse error at line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _resolve(schema: list[Param], args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; unknown config keys fail."""
    flags = {p.name: getattr(args, p.name.replace("-", "_")) for p in schema}
    file_values = {}
    config_path = flags.get("config")
    if config_path is not None:
        raw = load_config(config_path)
        known = {p.name: p for p in schema}
        for key in raw:
            if key not in known or key == "config":
                raise UsageError(f"unknown config key {key!r}")
        file_values = raw

    resolved = {}
    for p in schema:
        if p.name == "config":
            resolved[p.name] = config_path
            continue
        if flags[p.name] is not None:
            value = flags[p.name]
        elif p.name in file_values:
            try:
                value = p.coerce(file_values[p.name])
            except (ValueError, TypeError) as e:
                raise UsageError(f"config key {p.name!r}: {e}") from e
        else:
            value = p.default
        if value is None and p.required:
            raise UsageError(f"missing required parameter --{p.name}")
        resolved[p.name] = value
    return resolved


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return f"{v:.12g}"
        return "" if v is None else str(v)

    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def _write_audit(out_path: str, command: str, resolved: dict) -> None:
    audit = {"command": command}
    audit.update({k: v for k, v in resolved.items() if k != "config"})
    path = Path(out_path).with_suffix(".audit.json")
    path.write_text(json.dumps(audit, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_verify_bound(cfg: dict) -> int:
    rng = Rng(cfg["seed"])
    w = sparse_unit_vector(cfg["n"], cfg["density"], rng.substream(0), magnitudes="gaussian")
    sampler = SamplerConfig(
        s_p=cfg["sp"], S=cfg["S"], T=cfg["T"], alpha=1.0,
        selection_mode=SelectionMode.UNIFORM_THRESHOLD,
    )
    report = verify_bound_mc(w, sampler, rng.substream(1), cfg["tolerance"])

    exact_lhs = exact_rhs = None
    if cfg["n"] <= 20:
        exact_lhs, exact_rhs = verify_jensen_small(w, cfg["T"])

    header = ["n", "density", "T", "S", "s_p", "seed", "tolerance",
              "mc_mean_lhs", "analytic_rhs", "bound_rhs_alt", "holds",
              "exact_lhs", "exact_rhs"]
    row = [cfg["n"], cfg["density"], cfg["T"], cfg["S"], cfg["sp"], cfg["seed"],
           cfg["tolerance"], report.mc_mean_lhs, report.analytic_rhs,
           report.bound_rhs_alt, report.holds, exact_lhs, exact_rhs]
    _write_csv(cfg["out"], header, [row])
    _write_audit(cfg["out"], "verify-bound", cfg)
    if not report.holds:
        raise CheckFailed(
            f"bound violated: mc_mean_lhs={report.mc_mean_lhs} > "
            f"analytic_rhs={report.analytic_rhs} (tolerance {cfg['tolerance']})"
        )
    return 0


def cmd_hist_norms(cfg: dict) -> int:
    for sp in cfg["sp"]:
        if not (0.0 < sp <= 1.0):
            raise UsageError(f"sp values must be in (0, 1], got {sp}")
    rng = Rng(cfg["seed"])
    w = sparse_unit_vector(cfg["n"], cfg["density"], rng.substream(0), magnitudes="gaussian")
    rows = []
    for i, sp in enumerate(cfg["sp"]):
        sampler = SamplerConfig(s_p=sp, alpha=1.0, selection_mode=SelectionMode.UNIFORM_SUBSET)
        hist = norm_histogram(w, sampler, cfg["experiments"], rng.substream(1 + i))
        for lo, hi, count in zip(hist.bin_edges, hist.bin_edges[1:], hist.counts):
            rows.append([sp, float(lo), float(hi), int(count)])
    _write_csv(cfg["out"], ["s_p", "bin_lo", "bin_hi", "count"], rows)
    _write_audit(cfg["out"], "hist-norms", cfg)
    return 0


def default_density_grid(points: int) -> list[float]:
    return list(np.logspace(-3.0, 0.0, points))


def cmd_penalty_sweep(cfg: dict) -> int:
    densities = cfg["densities"]
    if densities is None:
        if cfg["grid-points"] < 1:
            raise UsageError("grid-points must be >= 1")
        densities = default_density_grid(cfg["grid-points"])
    if len(densities) == 0:
        raise UsageError("empty density grid")
    for d in densities:
        if not (0.0 < d <= 1.0):
            raise UsageError(f"densities must be in (0, 1], got {d}")
    sampler = SamplerConfig(
        s_p=cfg["sp"], S=cfg["S"], alpha=1.0, selection_mode=SelectionMode.UNIFORM_SUBSET
    )
    rows = penalty_density_sweep(cfg["n"], densities, sampler, Rng(cfg["seed"]))
    _write_csv(
        cfg["out"],
        ["density", "r_l1", "r_l2", "r_proposed"],
        [[r.density, r.r_l1, r.r_l2, r.r_proposed] for r in rows],
    )
    _write_audit(cfg["out"], "penalty-sweep", cfg)
    return 0


def _digits_dir(cfg: dict) -> Path:
    if cfg["data-dir"] is not None:
        return Path(cfg["data-dir"])
    return Path(importlib.resources.files("projreg") / "fixtures")


def _build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    rng = Rng(cfg["seed"]).substream(10)
    if cfg["task"] == "digits":
        base = _digits_dir(cfg)
        train_set = load_idx_images(
            base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte"
        )
        test_set = load_idx_images(
            base / "t10k-images-idx3-ubyte", base / "t10k-labels-idx1-ubyte"
        )
        train_set.split, test_set.split = "train", "test"
        return train_set, test_set
    spec = SynthSpec(
        n=cfg["n"], d=cfg["d"], true_density=cfg["density"],
        noise_std=cfg["noise-std"],
        n_classes=cfg["classes"] if cfg["task"] == "synth-cls" else 2,
        seed=cfg["seed"],
    )
    if cfg["task"] == "synth-reg":
        data, _ = gen_sparse_regression(spec, rng)
    else:
        data = gen_sparse_classification(spec, rng)
    return split_dataset(data, 0.8)


def cmd_train(cfg: dict) -> int:
    loss_name = cfg["loss"] or ("mse" if cfg["task"] == "synth-reg" else "ce")
    loss = LossKind(loss_name)
    if cfg["task"] == "synth-reg" and loss is not LossKind.MSE:
        raise UsageError(f"incompatible task/loss pair: {cfg['task']} with {loss_name}")
    if cfg["task"] != "synth-reg" and loss is LossKind.MSE:
        raise UsageError(f"incompatible task/loss pair: {cfg['task']} with {loss_name}")

    train_set, test_set = _build_datasets(cfg)
    out_dim = train_set.n_classes if train_set.n_classes is not None else 1
    dims = [train_set.d] + ([cfg["hidden"]] if cfg["hidden"] > 0 else []) + [out_dim]
    out_act = Activation.SOFTMAX_OUTPUT if train_set.n_classes is not None else Activation.IDENTITY
    model = init_dense_model(
        dims, Rng(cfg["seed"]).substream(20), output_activation=out_act,
        scale=cfg["init-scale"] if cfg["init-scale"] > 0 else None,
    )

    family = PenaltyFamily.PROJECTED_SQUARED if cfg["variant"] == "squared" \
        else PenaltyFamily.PROJECTED_SQRT
    train_cfg = TrainConfig(
        loss=loss,
        reg=RegKind(cfg["reg"]),
        sampler=SamplerConfig(
            s_p=cfg["sp"], S=cfg["S"], T=cfg["T"], alpha=cfg["alpha"],
            score_mode=ScoreMode(cfg["score-mode"]),
            selection_mode=SelectionMode(cfg["selection-mode"]),
        ),
        penalty=PenaltySpec(
            family=family, lambda_base=cfg["lambda"],
            normalize_by_counter=cfg["normalize-counter"],
        ),
        learning_rate=cfg["lr"],
        batch_size=cfg["batch-size"],
        epochs=cfg["epochs"],
        optimizer=OptimizerKind(cfg["optimizer"]),
        seed=cfg["seed"],
        metric_threshold=cfg["t-metric"],
    )

    rows = train(model, train_set, test_set, train_cfg)
    _write_csv(
        cfg["out"],
        ["iteration", "split", "loss", "accuracy", "weight_magnitude", "weight_density"],
        [[r.iteration, r.split, r.loss, r.accuracy, r.weight_magnitude, r.weight_density]
         for r in rows],
    )
    _write_audit(cfg["out"], "train", cfg)
    return 0


_COMMANDS = {
    "verify-bound": cmd_verify_bound,
    "hist-norms": cmd_hist_norms,
    "penalty-sweep": cmd_penalty_sweep,
    "train": cmd_train,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="projreg",
        description="Stochastic-projection regularization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in _SCHEMAS.items():
        p = sub.add_parser(name, help=f"run the {name} experiment")
        for param in schema:
            kwargs = {"help": param.help, "default": None}
            if param.type is bool:
                kwargs["type"] = _parse_bool
                kwargs["metavar"] = "BOOL"
            elif param.type is list:
                kwargs["type"] = _parse_float_list
                kwargs["metavar"] = "X,Y,..."
            else:
                kwargs["type"] = param.type
            if param.choices:
                kwargs["choices"] = param.choices
                kwargs.pop("metavar", None)
            p.add_argument(f"--{param.name}", **kwargs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    schema = _SCHEMAS[args.command]
    try:
        resolved = _resolve(schema, args)
        return _COMMANDS[args.command](resolved)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        print(f"usage: projreg {args.command} --help", file=sys.stderr)
        return 2
    except (ValueError, IndexError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckFailed, TrainingDivergedError, AssertionError) as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
