"""Command-line interface.

Exit codes: 0 success, 2 malformed input, 3 grid mismatch, 4 numerical
failure.  Every command that writes files also writes a JSON manifest naming
them.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import metaimage
from .broken_geodesic import DriverConfig, path_metric, replay, run_broken_geodesic
from .demons import NumericalError
from .evaluation import LabelImage, evaluate_pair, transfer_labels
from .field_core import (
    ContractError,
    DisplacementTransform,
    GridMismatchError,
    ScalarImage,
    VectorField,
    warp,
)
from .svf_exp import exp_svf, inverse_transform
from .synth import (
    SynthSpec,
    generate_deformation,
    make_pair,
    metric_vs_degree,
    phantom,
    sweep_csv,
)

log = logging.getLogger("brokengeo")

EXIT_OK = 0
EXIT_MALFORMED = 2
EXIT_MISMATCH = 3
EXIT_NUMERICAL = 4


class InputError(Exception):
    """Unreadable or malformed user input."""


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


# -- small I/O helpers ----------------------------------------------------------

def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read JSON {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def _load_driver_config(path) -> DriverConfig:
    data = _load_json(path)
    try:
        return DriverConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config {path}: {exc}") from exc


def _read_image(path) -> ScalarImage:
    obj = _read_any(path)
    if not isinstance(obj, ScalarImage):
        raise InputError(f"{path}: expected a scalar image, found a vector field")
    return obj


def _read_field(path) -> VectorField:
    obj = _read_any(path)
    if not isinstance(obj, VectorField):
        raise InputError(f"{path}: expected a vector field, found a scalar image")
    return obj


def _read_any(path):
    try:
        return metaimage.read(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _read_labels(path) -> LabelImage:
    img = _read_image(path)
    try:
        return LabelImage.from_image(img)
    except ContractError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class Run:
    """Collects outputs and writes the manifest at the end of a command."""

    def __init__(self, command: str, manifest_path: Path | None, inputs: dict, config=None):
        self.command = command
        self.manifest_path = manifest_path
        self.inputs = {k: str(v) for k, v in inputs.items() if v is not None}
        self.config = config or {}
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def image(self, path: Path, obj) -> Path:
        self.outputs += [str(p) for p in metaimage.write(path, obj)]
        return path

    def text(self, path: Path, content: str) -> Path:
        _write_text(path, content)
        self.outputs.append(str(path))
        return path

    def finish(self, status: int) -> int:
        if self.manifest_path is None:
            return status
        manifest = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": [p for p in self.outputs if Path(p).exists()],
            "tool_version": tool_version(),
            "wall_time": time.perf_counter() - self.t0,
            "exit_status": status,
        }
        if self.manifest_path.parent.exists():
            _write_text(self.manifest_path, json.dumps(manifest, indent=2))
        return status


# -- commands -----------------------------------------------------------------

def cmd_register(args) -> int:
    out = Path(args.out_dir)
    cfg = _load_driver_config(args.config)
    moving = _read_image(args.moving)
    fixed = _read_image(args.fixed)
    out.mkdir(parents=True, exist_ok=True)
    run = Run("register", out / "manifest.json",
              {"moving": args.moving, "fixed": args.fixed, "config": args.config},
              cfg.to_dict())
    try:
        g = run_broken_geodesic(moving, fixed, cfg)
        leg_paths = []
        for i, v in enumerate(g.legs, start=1):
            leg_paths.append(run.image(out / f"leg_{i:03d}_svf.mhd", v).name)
        run.image(out / "composed.mhd", g.composed.disp)
        run.image(out / "warped.mhd", g.final_image)
        report = {
            "n_legs": g.n_legs,
            "legs": leg_paths,
            "leg_lengths": list(g.leg_lengths),
            "total_length": g.total_length,
            "metric": path_metric(g),
            "initial_energy": g.initial_energy,
            "energy_history": list(g.energy_history),
            "leg_wall_times": list(g.leg_wall_times),
            "composed": "composed.mhd",
            "warped": "warped.mhd",
            "config": cfg.to_dict(),
        }
        run.text(out / "report.json", json.dumps(report, indent=2))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["leg_index", "leg_length", "energy"])
        for i, (length, e) in enumerate(zip(g.leg_lengths, g.energy_history), start=1):
            w.writerow([i, repr(length), repr(e)])
        run.text(out / "energy.csv", buf.getvalue())
        log.info("%d legs, path length %.6g, mse %.6g -> %.6g",
                 g.n_legs, g.total_length, g.initial_energy, g.final_energy)
    except BaseException as exc:
        run.finish(_status_for(exc))
        raise
    return run.finish(EXIT_OK)


def cmd_apply(args) -> int:
    out = Path(args.out_path)
    image = _read_image(args.image)
    disp = _read_field(args.transform)
    t = DisplacementTransform(disp, "file")
    run = Run("apply", _manifest_for(out),
              {"image": args.image, "transform": args.transform},
              {"scheme": args.scheme, "labels": args.labels})
    if args.labels:
        try:
            labels = LabelImage.from_image(image)
        except ContractError as exc:
            raise InputError(f"{args.image}: {exc}") from exc
        result = transfer_labels(labels, t).to_image()
    else:
        result = warp(image, t, args.scheme)
    run.image(out, result)
    return run.finish(EXIT_OK)


def cmd_invert(args) -> int:
    out = Path(args.out_path)
    cfg = _load_driver_config(args.config)
    v = _read_field(args.svf)
    run = Run("invert", _manifest_for(out), {"svf": args.svf, "config": args.config},
              cfg.leg_cfg.to_dict())
    t = exp_svf(v, cfg.leg_cfg.exp_cfg) if args.forward else inverse_transform(v, cfg.leg_cfg.exp_cfg)
    run.image(out, t.disp)
    return run.finish(EXIT_OK)


def cmd_metric(args) -> int:
    report_path = Path(args.report)
    report = _load_json(report_path)
    if "legs" not in report:
        raise InputError(f"{report_path}: not a registration report (no 'legs')")
    legs = report["legs"]
    if legs:
        fields = [_read_field(report_path.parent / p) for p in legs]
        cfg = DriverConfig.from_dict(report.get("config", {}))
        dims = fields[0].dims
        g = replay(ScalarImage(np.zeros(dims), fields[0].spacing),
                   ScalarImage(np.zeros(dims), fields[0].spacing), fields, cfg)
        value = path_metric(g)
    else:
        value = 0.0
    print(f"{value:.10g}")
    run = Run("metric", Path(args.manifest) if args.manifest else None, {"report": args.report})
    return run.finish(EXIT_OK)


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    spec_dict = _load_json(args.spec)
    try:
        spec = SynthSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad synth spec {args.spec}: {exc}") from exc
    cfg = _load_driver_config(args.config)
    labels = None
    if args.image:
        img = _read_image(args.image)
    else:
        img, labels = phantom((args.phantom,) * args.ndim)
        labels = LabelImage(labels, img.spacing)
    out.mkdir(parents=True, exist_ok=True)
    run = Run("synth", out / "manifest.json",
              {"image": args.image, "spec": args.spec, "config": args.config},
              {"spec": json.loads(spec.to_json()), "driver": cfg.to_dict()})
    run.text(out / "spec.json", spec.to_json())
    if args.sweep:
        degrees = _parse_range(args.degrees)
        rows = metric_vs_degree(img, degrees, args.seeds, spec, cfg, threads=args.threads)
        run.text(out / "metric_vs_degree.csv", sweep_csv(rows))
        return run.finish(EXIT_OK)

    v = VectorField(generate_deformation(img.dims, spec).data, img.spacing)
    moving, fixed, truth = make_pair(img, spec, cfg.leg_cfg.exp_cfg)
    run.image(out / "moving.mhd", moving)
    run.image(out / "fixed.mhd", fixed)
    run.image(out / "truth_svf.mhd", v)
    run.image(out / "truth_transform.mhd", truth.disp)
    if labels is not None:
        run.image(out / "labels_moving.mhd", labels.to_image())
        run.image(out / "labels_fixed.mhd", transfer_labels(labels, truth).to_image())
    return run.finish(EXIT_OK)


def cmd_evaluate(args) -> int:
    out = Path(args.out_path)
    moving = _read_image(args.moving)
    fixed = _read_image(args.fixed)
    report_path = Path(args.report)
    report = _load_json(report_path)
    if "legs" not in report:
        raise InputError(f"{report_path}: not a registration report (no 'legs')")
    cfg = _load_driver_config(args.config) if args.config else DriverConfig.from_dict(report.get("config", {}))
    legs = [_read_field(report_path.parent / p) for p in report["legs"]]
    labels_moving = _read_labels(args.labels_moving) if args.labels_moving else None
    labels_fixed = _read_labels(args.labels_fixed) if args.labels_fixed else None
    run = Run("evaluate", _manifest_for(out),
              {"moving": args.moving, "fixed": args.fixed, "report": args.report,
               "labels_moving": args.labels_moving, "labels_fixed": args.labels_fixed},
              cfg.to_dict())
    try:
        g = replay(moving, fixed, legs, cfg)
        result = evaluate_pair(moving, fixed, g, labels_moving, labels_fixed, cfg=cfg)
    except ContractError as exc:
        if isinstance(exc, GridMismatchError):
            raise
        raise InputError(str(exc)) from exc
    run.text(out, result.to_json())
    return run.finish(EXIT_OK)


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _parse_range(text: str) -> list[int]:
    try:
        if "-" in text:
            lo, hi = (int(s) for s in text.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",")]
    except ValueError as exc:
        raise InputError(f"bad degree list {text!r}") from exc


# -- entry point --------------------------------------------------------------

def _status_for(exc: BaseException) -> int:
    if isinstance(exc, GridMismatchError):
        return EXIT_MISMATCH
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_MALFORMED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brokengeo", description="Broken-geodesic diffeomorphic registration.")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register MOVING onto FIXED")
    r.add_argument("moving")
    r.add_argument("fixed")
    r.add_argument("--config", help="driver/leg config JSON")
    r.add_argument("--out", dest="out_dir", required=True)
    r.set_defaults(func=cmd_register)

    a = sub.add_parser("apply", help="warp an image (or label map) by a displacement field")
    a.add_argument("image")
    a.add_argument("transform", help="displacement field (MetaImage vector field)")
    a.add_argument("out_path")
    a.add_argument("--scheme", choices=("linear", "cubic"), default="linear")
    a.add_argument("--labels", action="store_true", help="nearest-neighbour label transfer")
    a.set_defaults(func=cmd_apply)

    i = sub.add_parser("invert", help="displacement of exp(-v) for a velocity field v")
    i.add_argument("svf")
    i.add_argument("out_path")
    i.add_argument("--config")
    i.add_argument("--forward", action="store_true", help="write exp(v) instead of its inverse")
    i.set_defaults(func=cmd_invert)

    m = sub.add_parser("metric", help="print the path length of a registration report")
    m.add_argument("report")
    m.add_argument("--manifest")
    m.set_defaults(func=cmd_metric)

    s = sub.add_parser("synth", help="make a synthetic pair or run the degree sweep")
    s.add_argument("image", nargs="?", help="base image; defaults to the built-in phantom")
    s.add_argument("--spec", help="SynthSpec JSON")
    s.add_argument("--config", help="driver config JSON (sweep and exponential settings)")
    s.add_argument("--out", dest="out_dir", required=True)
    s.add_argument("--phantom", type=int, default=128, help="phantom size per axis")
    s.add_argument("--ndim", type=int, choices=(2, 3), default=2)
    s.add_argument("--sweep", action="store_true", help="write metric_vs_degree.csv")
    s.add_argument("--degrees", default="1-10")
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("evaluate", help="MSE, Dice, Jacobian and roundtrip statistics")
    e.add_argument("moving")
    e.add_argument("fixed")
    e.add_argument("--report", required=True)
    e.add_argument("--labels-moving")
    e.add_argument("--labels-fixed")
    e.add_argument("--config")
    e.add_argument("--out", dest="out_path", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except GridMismatchError as exc:
        print(f"error: grid mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
