"""Command line interface: ``dsebm {synth,train,score,eval,gradcheck,landscape}``.

Option values are resolved in order: command line flag, ``--config`` file
(``key = value`` lines), ``DSEBM_<KEY>`` environment variable, built-in default.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, detection, gradcheck, persistence, training
from .datasets import DataError
from .numerics import NumericalError
from .persistence import ArtifactError, ModelArtifact

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENV_PREFIX = "DSEBM_"

log = logging.getLogger("dsebm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# option name -> (type, default); None default means required
OPTIONS = {
    "synth": {
        "kind": (str, "gaussians"), "n": (int, 1000), "d": (int, 2), "separation": (float, 6.0),
        "rho": (float, 0.2), "split": (float, 0.5), "seed": (int, 0), "out_dir": (str, "."),
    },
    "train": {
        "arch": (str, None), "data": (str, None), "out": (str, None), "trace": (str, ""),
        "inlier_classes": (str, ""), "sigma": (float, 0.1), "batch_size": (int, 128),
        "epochs": (int, 100), "lr": (float, 0.01), "momentum": (float, 0.9), "seed": (int, 0),
        "normalization": (str, "zscore"), "hidden": (str, "16"), "k_ebm": (int, 16),
        "k_rnn": (int, 8), "conv_layers": (str, "c4x3,p2,d16"),
    },
    "score": {
        "model": (str, None), "data": (str, None), "out": (str, None), "rho": (float, 0.0),
        "inlier_classes": (str, ""),
    },
    "eval": {
        "scores": (str, ""), "model": (str, ""), "data": (str, ""), "inlier_classes": (str, ""),
        "rho": (float, 0.0), "energy_threshold": (float, float("nan")),
        "recon_threshold": (float, float("nan")), "best_f1": (bool, False),
        "out": (str, ""), "sweep": (str, ""),
    },
    "gradcheck": {"seed": (int, 0), "instances": (int, 5), "out": (str, "")},
    "landscape": {
        "model": (str, None), "out": (str, None), "svg": (str, ""), "lo": (float, float("nan")),
        "hi": (float, float("nan")), "points": (int, 401), "energy_threshold": (float, float("nan")),
        "recon_threshold": (float, float("nan")),
    },
}

HELP = {
    "synth": "write synthetic train/test files with planted outliers",
    "train": "train a model by denoising score matching",
    "score": "write per-sample energy and reconstruction error",
    "eval": "precision/recall/F1 for both decision rules",
    "gradcheck": "finite-difference check of every analytic gradient",
    "landscape": "evaluate energy and reconstruction error on a grid",
}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsebm", description="Deep structured energy based models for anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.commands = {}
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name])
        parser.commands[name] = p
        p.add_argument("--config", help="key = value file supplying defaults for any flag")
        for key, (typ, default) in opts.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                hint = "required" if default is None else f"default {default}"
                p.add_argument(flag, dest=key, type=typ, default=None, help=hint)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Effective options for ``command`` after flag/config/env/default layering."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_values) - set(OPTIONS[command])
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    out = {}
    for key, (typ, default) in OPTIONS[command].items():
        value = getattr(args, key, None)
        if value is None and key in file_values:
            value = file_values[key]
        env = os.environ.get(ENV_PREFIX + key.upper())
        if value is None and env is not None:
            value = env
        if value is None:
            if default is None:
                raise UsageError(f"missing required option --{key.replace('_', '-')}")
            value = default
        try:
            out[key] = _parse_bool(value) if typ is bool else typ(value)
        except ValueError:
            raise UsageError(f"bad value for {key}: {value!r}") from None
    return out


def _classes(text: str) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()]


def parse_conv_layers(text: str) -> list[dict]:
    """``"c4x3,p2,d16"`` -> conv(4 filters, 3x3), pool(2), dense(16)."""
    layers = []
    for tok in _classes(text):
        try:
            if tok[0] == "c":
                f, k = tok[1:].split("x")
                layers.append({"type": "conv", "filters": int(f), "size": int(k)})
            elif tok[0] == "p":
                layers.append({"type": "pool", "size": int(tok[1:])})
            elif tok[0] == "d":
                layers.append({"type": "dense", "outputs": int(tok[1:])})
            else:
                raise ValueError
        except ValueError:
            raise UsageError(f"bad layer token {tok!r} (use cFxK, pP or dK)") from None
    return layers


def _load_data(path: str):
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    return datasets.load_dataset(path)


def _truth(ds, inlier_classes: str):
    classes = _classes(inlier_classes)
    return ds.with_inliers(classes).is_outlier if classes else None


# ---------------------------------------------------------------- commands

def cmd_synth(o: dict) -> int:
    kind = o["kind"]
    if kind == "gaussians":
        raw = datasets.synth_gaussians(o["n"], o["d"], o["separation"], o["seed"])
    elif kind == "bimodal":
        raw = datasets.synth_bimodal_1d(o["n"], o["seed"])
    elif kind == "sequences":
        raw = datasets.synth_sequences(o["n"], o["d"], separation=o["separation"], seed=o["seed"])
    elif kind == "images":
        raw = datasets.synth_images(o["n"], separation=o["separation"], seed=o["seed"])
    else:
        raise UsageError(f"unknown synth kind {kind!r}")
    ds = datasets.make_contaminated(raw, ["0"], o["rho"], o["split"], o["seed"])
    ext = {"static": ".csv", "sequence": ".jsonl", "image": ".dsbt"}[ds.kind]
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for part in ("train", "test"):
        datasets.save_dataset(ds.part(part), out_dir / f"{part}{ext}")
    print(f"wrote {out_dir / ('train' + ext)} ({int(np.sum(ds.split == 'train'))} items) and "
          f"{out_dir / ('test' + ext)} ({int(np.sum(ds.split == 'test'))} items)")
    return EXIT_OK


def cmd_train(o: dict) -> int:
    if o["arch"] not in persistence.ARCHITECTURES:
        raise UsageError(f"unknown architecture {o['arch']!r}")
    ds = _load_data(o["data"])
    expected_kind = {"dense": "static", "recurrent": "sequence", "conv": "image"}[o["arch"]]
    if ds.kind != expected_kind:
        raise DataError(f"{o['arch']} models need {expected_kind} data, got {ds.kind}")
    classes = _classes(o["inlier_classes"])
    if classes:
        ds = ds.subset(np.flatnonzero(~ds.with_inliers(classes).is_outlier))
        if len(ds) == 0:
            raise DataError("no training items belong to the inlier classes")
    config = training.TrainConfig(
        noise_sigma=o["sigma"], batch_size=o["batch_size"], epochs=o["epochs"],
        learning_rate=o["lr"], momentum=o["momentum"], seed=o["seed"],
        normalization=o["normalization"],
    )
    arch_opts = {
        "dense": {"hidden": [int(h) for h in _classes(o["hidden"])]},
        "recurrent": {"k_ebm": o["k_ebm"], "k_rnn": o["k_rnn"]},
        "conv": {"layers": parse_conv_layers(o["conv_layers"])},
    }[o["arch"]]
    model, normalizer, trace = training.fit(o["arch"], ds.items, config, **arch_opts)
    persistence.save_model(ModelArtifact(model, normalizer, {"command": "train", **o}), o["out"])
    trace_path = o["trace"] or o["out"] + ".trace.json"
    Path(trace_path).write_text(json.dumps({"config": o, **trace.to_dict()}, indent=2))
    print(f"final objective {trace.objective[-1]:.6g} (first epoch {trace.objective[0]:.6g})")
    print(f"model written to {o['out']}; checksum {trace.checksum}")
    return EXIT_OK


def _score(artifact: ModelArtifact, ds, inlier_classes: str):
    expected_kind = {"dense": "static", "recurrent": "sequence", "conv": "image"}[artifact.arch]
    if ds.kind != expected_kind:
        raise DataError(f"{artifact.arch} model cannot score {ds.kind} data")
    items = artifact.normalizer.apply(ds.items) if artifact.normalizer else ds.items
    try:
        return detection.score_samples(artifact.model, items, ds.ids, _truth(ds, inlier_classes))
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _write_scores(report, path, config):
    report.write(path)
    with open(path, "a") as fh:
        fh.write(f"# config {json.dumps(config, sort_keys=True)}\n")


def cmd_score(o: dict) -> int:
    artifact = persistence.load_model(o["model"])
    report = _score(artifact, _load_data(o["data"]), o["inlier_classes"])
    if o["rho"] > 0:
        report.set_thresholds(o["rho"])
    _write_scores(report, o["out"], o)
    print(f"scored {len(report)} samples -> {o['out']}")
    return EXIT_OK


def cmd_eval(o: dict) -> int:
    if o["scores"]:
        report = detection.ScoreReport.read(o["scores"])
        if o["inlier_classes"]:
            raise UsageError("--inlier-classes applies to --data, not --scores")
    elif o["model"] and o["data"]:
        report = _score(persistence.load_model(o["model"]), _load_data(o["data"]), o["inlier_classes"])
    else:
        raise UsageError("eval needs --scores, or --model with --data")
    if len(report) == 0:
        raise DataError("no samples to evaluate")
    if report.truth is None:
        raise DataError("no ground truth: pass --inlier-classes or a score file with an outlier column")
    for c in detection.CRITERIA:
        manual = o[f"{c}_threshold"]
        if o["best_f1"]:
            report.thresholds[c] = detection.best_f1_threshold(report.values(c), report.truth)
        elif not np.isnan(manual):
            report.thresholds[c] = manual
        elif o["rho"] > 0:
            report.thresholds[c] = detection.choose_threshold(report.values(c), o["rho"])
        elif c not in report.thresholds:
            raise UsageError(f"no threshold for {c}: give --rho, --{c}-threshold or --best-f1")
    ev = detection.evaluate(report)
    summary = {"config": o, "results": ev.summary()}
    for c, r in ev.results.items():
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        print(f"{c:6s} threshold={r.threshold:.6g} precision={fmt(r.precision)} "
              f"recall={fmt(r.recall)} f1={fmt(r.f1)}")
    if o["out"]:
        Path(o["out"]).write_text(json.dumps(summary, indent=2, sort_keys=True))
    if o["sweep"]:
        with open(o["sweep"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["criterion", "threshold", "f1"])
            for c, r in ev.results.items():
                for thr, f1 in r.sweep:
                    w.writerow([c, repr(thr), repr(f1)])
    return EXIT_OK


def cmd_gradcheck(o: dict) -> int:
    results = gradcheck.run_suites(o["seed"], o["instances"])
    table = gradcheck.summarize(results)
    print(f"{'arch':10s} {'max input err':>14s} {'max param err':>14s}  status")
    for arch, row in table.items():
        status = "ok" if row["passed"] else "FAIL"
        print(f"{arch:10s} {row['input']:14.3e} {row['param']:14.3e}  {status}")
    print(f"tolerances: input {gradcheck.INPUT_TOL:g}, parameters {gradcheck.PARAM_TOL:g}")
    if o["out"]:
        Path(o["out"]).write_text(json.dumps({"config": o, "table": table}, indent=2, sort_keys=True))
    return EXIT_OK if all(r["passed"] for r in table.values()) else EXIT_NUMERIC


def landscape_grid(artifact: ModelArtifact, lo: float, hi: float, points: int):
    """Energy and reconstruction error on an inclusive grid over ``[lo, hi]`` (per axis)."""
    model = artifact.model
    if model.arch != "dense" or model.input_dim not in (1, 2):
        raise UsageError("landscape needs a dense model with 1-D or 2-D input")
    axis = np.linspace(lo, hi, points)
    if model.input_dim == 1:
        grid = axis[:, None]
    else:
        g0, g1 = np.meshgrid(axis, axis, indexing="ij")
        grid = np.column_stack([g0.ravel(), g1.ravel()])
    x = artifact.normalizer.apply(grid) if artifact.normalizer else grid
    energy = model.energy(x)
    recon = np.sum(model.score(x) ** 2, axis=1)
    return grid, energy, recon


def _svg_1d(grid, energy, recon, thresholds) -> str:
    w, h, pad = 640, 200, 30
    x = grid[:, 0]
    panels = []
    for row, (name, y, th) in enumerate((("energy", energy, thresholds.get("energy")),
                                         ("error", recon, thresholds.get("recon")))):
        top = row * (h + pad) + pad
        vals = y if th is None else np.append(y, th)
        y0, y1 = float(vals.min()), float(vals.max())
        span = (y1 - y0) or 1.0

        def px(a):
            return pad + (a - x[0]) / ((x[-1] - x[0]) or 1.0) * (w - 2 * pad)

        def py(v):
            return top + h - (v - y0) / span * h

        pts = " ".join(f"{px(a):.2f},{py(v):.2f}" for a, v in zip(x, y))
        panels.append(f'<text x="{pad}" y="{top - 8}" font-size="12">{name}</text>')
        panels.append(f'<polyline fill="none" stroke="black" points="{pts}"/>')
        if th is not None:
            panels.append(f'<line x1="{pad}" x2="{w - pad}" y1="{py(th):.2f}" y2="{py(th):.2f}" '
                          f'stroke="red" stroke-dasharray="4 3"/>')
    total = 2 * (h + pad) + pad
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{total}">'
            + "".join(panels) + "</svg>\n")


def _svg_2d(grid, energy, points) -> str:
    cell = max(1, 400 // points)
    e = energy.reshape(points, points)
    lo, hi = float(e.min()), float(e.max())
    rects = []
    for i in range(points):
        for j in range(points):
            shade = int(255 * (e[i, j] - lo) / ((hi - lo) or 1.0))
            rects.append(f'<rect x="{i * cell}" y="{(points - 1 - j) * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb({shade},{shade},{shade})"/>')
    size = points * cell
    return f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">' + "".join(rects) + "</svg>\n"


def cmd_landscape(o: dict) -> int:
    artifact = persistence.load_model(o["model"])
    lo, hi = o["lo"], o["hi"]
    if np.isnan(lo) or np.isnan(hi):
        norm = artifact.normalizer
        center = float(np.mean(norm.mean)) if norm else 0.0
        scale = float(np.max(norm.std)) if norm else 1.0
        lo = center - 4 * scale if np.isnan(lo) else lo
        hi = center + 4 * scale if np.isnan(hi) else hi
    if not hi > lo or o["points"] < 2:
        raise UsageError("need lo < hi and at least 2 points")
    grid, energy, recon = landscape_grid(artifact, lo, hi, o["points"])
    with open(o["out"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(grid.shape[1])] + ["energy", "recon_error"])
        for g, e, r in zip(grid, energy, recon):
            w.writerow([repr(float(v)) for v in g] + [repr(float(e)), repr(float(r))])
    thresholds = {c: o[f"{c}_threshold"] for c in detection.CRITERIA if not np.isnan(o[f"{c}_threshold"])}
    if o["svg"]:
        svg = _svg_1d(grid, energy, recon, thresholds) if grid.shape[1] == 1 else _svg_2d(grid, energy, o["points"])
        Path(o["svg"]).write_text(svg)
    print(f"wrote {len(grid)} grid points to {o['out']}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "score": cmd_score, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "landscape": cmd_landscape,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        options = resolve(args.command, args)
        return COMMANDS[args.command](options)
    except UsageError as exc:
        parser.commands[args.command].print_usage(sys.stderr)
        print(f"dsebm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArtifactError, OSError) as exc:
        print(f"dsebm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"dsebm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"dsebm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
