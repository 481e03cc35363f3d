"""Command-line surface: calibrate, eval, landscape, hessian, sweep, quantize.

Config precedence is CLI flag > config file (--config, JSON) > built-in
default, and the full effective configuration is echoed into every result
artifact. All commands are deterministic given identical inputs and seed;
--threads (or QTK_THREADS) only caps worker threads and never changes any
emitted value. Exit codes: 0 success, 2 parse/validation failure, 3
degenerate input (all-zero tensor, empty dataset).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bias import CORRECTION_MODES, bias_correct
from .errors import DegenerateInputError, FormatError, QtkError, ShapeError
from .graph import (
    CalibSet,
    StepVector,
    accuracy,
    forward,
    load_model,
    loss,
    save_model,
    subset,
)
from .landscape import (
    gaussian_curvature,
    gradient_fd,
    grid_scan,
    hessian_fd,
    interaction_split,
    interaction_term,
    loss_evaluator,
    write_grid_csv,
    write_matrix_csv,
    write_vector_csv,
)
from .optimize import LineSearchConfig, PipelineConfig, PowellConfig, joint_calibrate
from .quantizer import QuantParams, quantize
from .tensor import Tensor, load_qtn, save_qtn

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DEGENERATE = 3

DEFAULTS = {
    "wbits": 4,
    "abits": 4,
    "p_grid": "2.0,2.4,2.8,3.2,3.6,4.0",
    "subset_size": 512,
    "seed": 0,
    "batch_size": 256,
    "threads": None,  # resolved from QTK_THREADS, else 1
    "max_outer": 20,
    "ftol": 1e-4,
    "ls_tol": 1e-4,
    "bias_correct": "none",
    "quantize_first_last": False,
    "h_rel": 0.01,
    "rel_lo": 0.5,
    "rel_hi": 1.5,
    "resolution": 9,
    "params": "weights",
}

_BITS_CHOICES = (2, 3, 4, 5, 6, 7, 8, 32)


def _merge_config(args: argparse.Namespace, keys: list[str]) -> dict:
    """defaults < config file < explicitly passed CLI flags."""
    effective = {k: DEFAULTS[k] for k in keys}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise FormatError(f"cannot read config file {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise FormatError(f"config file {config_path} must hold a JSON object")
        for key, value in file_cfg.items():
            if key not in DEFAULTS:
                raise FormatError(f"config file {config_path}: unknown key {key!r}")
            if key in keys:
                effective[key] = value
    for key in keys:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            effective[key] = cli_value
    if "threads" in effective and effective["threads"] is None:
        effective["threads"] = int(os.environ.get("QTK_THREADS", "1"))
    return effective


def _echo(cfg: dict) -> dict:
    """Config as embedded in result artifacts. The worker-thread cap never
    changes any emitted value, so it is left out to keep results of
    different-thread invocations byte-identical."""
    return {k: v for k, v in cfg.items() if k != "threads"}


def _parse_bits(value) -> int | None:
    bits = int(value)
    if bits not in _BITS_CHOICES:
        raise FormatError(f"bitwidth must be one of {_BITS_CHOICES}, got {bits}")
    return None if bits == 32 else bits


def _parse_p_grid(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        values = tuple(float(v) for v in text)
    else:
        values = tuple(float(tok) for tok in str(text).split(",") if tok.strip())
    if len(values) < 3:
        raise FormatError(f"p grid needs at least 3 values, got {values}")
    if any(p <= 0 for p in values):
        raise FormatError(f"p grid values must be positive, got {values}")
    return values


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FormatError(f"file not found: {path}")
    return path


def _load_steps_file(path: str) -> StepVector:
    _require_file(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(doc, dict) and "steps" in doc:
        doc = doc["steps"]
    if not isinstance(doc, list):
        raise FormatError(f"{path}: expected a step list or a result object with 'steps'")
    return StepVector.from_json(doc)


def _load_calib(args, cfg, inputs_attr="calib", labels_attr="labels") -> CalibSet:
    inputs = _require_file(getattr(args, inputs_attr))
    labels = _require_file(getattr(args, labels_attr))
    return CalibSet.from_files(inputs, labels, batch_size=cfg["batch_size"])


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_json(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _quantized_weights(model, steps: StepVector, mode: str) -> dict[int, Tensor]:
    out = {}
    for entry in steps:
        if entry.kind != "weight":
            continue
        layer = model.layers[entry.layer]
        wq = quantize(layer.weight, entry.params())
        if mode != "none":
            wq = bias_correct(layer.weight, wq, axis=0, mode=mode)
        out[entry.layer] = wq
    return out


# --- subcommands ------------------------------------------------------------


def cmd_calibrate(args) -> int:
    keys = [
        "wbits", "abits", "p_grid", "subset_size", "seed", "batch_size", "threads",
        "max_outer", "ftol", "ls_tol", "bias_correct", "quantize_first_last",
    ]
    cfg = _merge_config(args, keys)
    cfg["p_grid"] = list(_parse_p_grid(cfg["p_grid"]))
    bits_w = _parse_bits(cfg["wbits"])
    bits_a = _parse_bits(cfg["abits"])

    model = load_model(_require_file(args.model), skip_first_last=not cfg["quantize_first_last"])
    calib = _load_calib(args, cfg)
    calib = subset(calib, cfg["subset_size"], seed=cfg["seed"])

    pipeline_cfg = PipelineConfig(
        p_grid=tuple(cfg["p_grid"]),
        powell=PowellConfig(
            max_outer=cfg["max_outer"],
            ftol=cfg["ftol"],
            line_search=LineSearchConfig(tol=cfg["ls_tol"]),
        ),
        threads=cfg["threads"],
    )
    result = joint_calibrate(model, calib, bits_w, bits_a, pipeline_cfg)

    mode = cfg["bias_correct"]
    report = {
        "schema": "qtk-result-v1",
        "model": model.name,
        "config": _echo(cfg),
        "p_samples": [{"p": p, "loss": v} for p, v in result.p_samples],
        "p_best": result.p_best,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "loss_trace": result.loss_trace,
        "steps": result.steps.to_json(),
        "calib_accuracy": accuracy(
            model, calib, result.steps, bias_correction=mode, threads=cfg["threads"]
        ),
    }
    if mode != "none":
        report["final_loss_corrected"] = loss(
            model, calib, result.steps, bias_correction=mode, threads=cfg["threads"]
        )

    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "result.json"), report)
    _write_json(os.path.join(args.out, "timings.json"), result.timings)
    save_model(
        model,
        os.path.join(args.out, "quantized"),
        weights_override=_quantized_weights(model, result.steps, mode),
        quantize_flags=False,
    )
    _print_json({"result": os.path.join(args.out, "result.json"),
                 "final_loss": result.final_loss,
                 "calib_accuracy": report["calib_accuracy"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    keys = ["batch_size", "threads", "bias_correct", "quantize_first_last"]
    cfg = _merge_config(args, keys)
    model = load_model(_require_file(args.model), skip_first_last=not cfg["quantize_first_last"])
    calib = _load_calib(args, cfg, inputs_attr="inputs", labels_attr="labels")
    steps = _load_steps_file(args.delta) if args.delta else None
    mode = cfg["bias_correct"]

    report = {
        "schema": "qtk-eval-v1",
        "model": model.name,
        "config": _echo(cfg),
        "n": calib.n,
        "loss": loss(model, calib, steps, bias_correction=mode, threads=cfg["threads"]),
        "accuracy": accuracy(model, calib, steps, bias_correction=mode, threads=cfg["threads"]),
    }
    if args.logits_out:
        logits = forward(model, calib.inputs, steps, bias_correction=mode)
        save_qtn(args.logits_out, logits)
        report["logits_out"] = args.logits_out
    _print_json(report)
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


def cmd_landscape(args) -> int:
    keys = ["batch_size", "threads", "rel_lo", "rel_hi", "resolution"]
    cfg = _merge_config(args, keys)
    model = load_model(_require_file(args.model))
    calib = _load_calib(args, cfg)
    steps = _load_steps_file(args.steps)
    baseline = steps.deltas
    if cfg["resolution"] < 2:
        raise FormatError(f"resolution must be >= 2, got {cfg['resolution']}")

    evaluate = loss_evaluator(model, calib, steps, threads=cfg["threads"])
    lo, hi = float(cfg["rel_lo"]), float(cfg["rel_hi"])
    vi, vj, grid = grid_scan(
        evaluate,
        baseline,
        args.i,
        args.j,
        (lo * baseline[args.i], hi * baseline[args.i]),
        (lo * baseline[args.j], hi * baseline[args.j]),
        cfg["resolution"],
    )
    write_grid_csv(args.out, vi, vj, grid)
    _write_json(args.out + ".config.json", {"config": _echo(cfg), "i": args.i, "j": args.j})
    _print_json({"out": args.out, "loss_min": float(grid.min()), "loss_max": float(grid.max())})
    return EXIT_OK


def cmd_hessian(args) -> int:
    keys = ["batch_size", "threads", "h_rel", "params"]
    cfg = _merge_config(args, keys)
    model = load_model(_require_file(args.model))
    calib = _load_calib(args, cfg)
    steps = _load_steps_file(args.steps)
    if len(steps) == 0:
        raise DegenerateInputError("step vector is empty; nothing to probe")

    if cfg["params"] == "weights":
        indices = [i for i, e in enumerate(steps) if e.kind == "weight"]
        if not indices:
            raise FormatError("no weight entries in the step vector; use --params all")
    elif cfg["params"] == "all":
        indices = list(range(len(steps)))
    else:
        raise FormatError(f"--params must be 'weights' or 'all', got {cfg['params']!r}")

    evaluate = loss_evaluator(model, calib, steps, threads=cfg["threads"])
    baseline = steps.deltas
    hess = hessian_fd(evaluate, baseline, h_rel=cfg["h_rel"], indices=indices)
    grad = gradient_fd(evaluate, baseline, h_rel=cfg["h_rel"], indices=indices)
    labels = [f"{steps.entries[i].kind[0]}{steps.entries[i].layer}" for i in indices]

    write_matrix_csv(args.out_prefix + ".hessian.csv", hess.matrix, labels)
    write_vector_csv(args.out_prefix + ".gradient.csv", grad, labels)
    _write_json(args.out_prefix + ".config.json", {"config": _echo(cfg), "params": labels})

    curvature = gaussian_curvature(hess, grad)
    eps = baseline[np.asarray(indices)] / 2.0  # half-step rounding noise proxy
    diag_part, cross_part = interaction_split(hess, eps)
    _print_json(
        {
            "schema": "qtk-hessian-v1",
            "k": curvature.k,
            "log_abs_det": curvature.log_abs_det,
            "det_sign": curvature.det_sign,
            "grad_norm": float(np.linalg.norm(grad)),
            "interaction": {
                "total": interaction_term(hess, eps),
                "diagonal": diag_part,
                "cross": cross_part,
            },
            "hessian_csv": args.out_prefix + ".hessian.csv",
            "gradient_csv": args.out_prefix + ".gradient.csv",
        }
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    keys = [
        "wbits", "abits", "p_grid", "seed", "batch_size", "threads",
        "max_outer", "ftol", "ls_tol", "quantize_first_last",
    ]
    cfg = _merge_config(args, keys)
    cfg["p_grid"] = list(_parse_p_grid(cfg["p_grid"]))
    bits_w = _parse_bits(cfg["wbits"])
    bits_a = _parse_bits(cfg["abits"])

    model = load_model(_require_file(args.model), skip_first_last=not cfg["quantize_first_last"])
    calib = _load_calib(args, cfg)
    if args.eval_inputs or args.eval_labels:
        if not (args.eval_inputs and args.eval_labels):
            raise FormatError("--eval-inputs and --eval-labels must be given together")
        eval_set = CalibSet.from_files(
            _require_file(args.eval_inputs), _require_file(args.eval_labels),
            batch_size=cfg["batch_size"],
        )
    else:
        eval_set = calib

    if args.sizes:
        sizes = [int(tok) for tok in args.sizes.split(",") if tok.strip()]
    else:
        sizes = []
        size = 32
        while size < calib.n:
            sizes.append(size)
            size *= 2
        sizes.append(calib.n)
    if any(s < 1 for s in sizes):
        raise FormatError(f"sweep sizes must be positive, got {sizes}")
    if any(s > calib.n for s in sizes):
        raise FormatError(f"sweep sizes must be <= {calib.n}, got {sizes}")
    sizes = sorted(sizes)

    pipeline_cfg = PipelineConfig(
        p_grid=tuple(cfg["p_grid"]),
        powell=PowellConfig(
            max_outer=cfg["max_outer"],
            ftol=cfg["ftol"],
            line_search=LineSearchConfig(tol=cfg["ls_tol"]),
        ),
        threads=cfg["threads"],
    )
    rows = []
    for size in sizes:
        sub = subset(calib, size, seed=cfg["seed"])
        result = joint_calibrate(model, sub, bits_w, bits_a, pipeline_cfg)
        rows.append(
            (
                size,
                loss(model, eval_set, result.steps, threads=cfg["threads"]),
                accuracy(model, eval_set, result.steps, threads=cfg["threads"]),
            )
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("size,loss,accuracy\n")
        for size, lv, av in rows:
            fh.write(f"{size},{lv!r},{av!r}\n")
    _write_json(args.out + ".config.json", {"config": _echo(cfg), "sizes": sizes})
    _print_json({"out": args.out, "rows": len(rows)})
    return EXIT_OK


def cmd_quantize(args) -> int:
    keys = ["bias_correct", "quantize_first_last"]
    cfg = _merge_config(args, keys)
    model = load_model(_require_file(args.model), skip_first_last=not cfg["quantize_first_last"])
    steps = _load_steps_file(args.delta)
    manifest = save_model(
        model,
        args.out_dir,
        weights_override=_quantized_weights(model, steps, cfg["bias_correct"]),
        quantize_flags=False,
    )
    _print_json({"manifest": manifest, "config": _echo(cfg)})
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, config=True) -> None:
    if config:
        p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (or QTK_THREADS); never changes results")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtk",
        description="Post-training quantization toolkit: loss-driven step-size "
        "calibration and loss-landscape diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="run the full calibration pipeline")
    p.add_argument("--model", required=True, help="model manifest JSON")
    p.add_argument("--calib", required=True, help="calibration inputs (.qtn)")
    p.add_argument("--labels", required=True, help="calibration labels (.qtn)")
    p.add_argument("--wbits", type=int, default=None, help="weight bits (2-8, or 32 = off)")
    p.add_argument("--abits", type=int, default=None, help="activation bits (2-8, or 32 = off)")
    p.add_argument("--p-grid", dest="p_grid", default=None, help="comma-separated norm exponents")
    p.add_argument("--subset-size", dest="subset_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="seed for calibration-subset sampling")
    p.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    p.add_argument("--ftol", type=float, default=None)
    p.add_argument("--ls-tol", dest="ls_tol", type=float, default=None)
    p.add_argument("--bias-correct", dest="bias_correct", nargs="?", const="mean",
                   default=None, choices=[m for m in CORRECTION_MODES if m != "none"])
    p.add_argument("--quantize-first-last", dest="quantize_first_last", action="store_const",
                   const=True, default=None, help="also quantize the first and last weight layers")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate a stored step vector on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--delta", default=None, help="steps JSON or calibrate result.json (omit for FP32)")
    p.add_argument("--inputs", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bias-correct", dest="bias_correct", nargs="?", const="mean",
                   default=None, choices=[m for m in CORRECTION_MODES if m != "none"])
    p.add_argument("--quantize-first-last", dest="quantize_first_last", action="store_const",
                   const=True, default=None)
    p.add_argument("--logits-out", dest="logits_out", default=None,
                   help="also write raw logits for the inputs to this .qtn file")
    p.add_argument("--out", default=None, help="also write the report JSON here")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("landscape", help="loss over a 2-D grid of two step sizes")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--steps", required=True, help="baseline step vector (JSON)")
    p.add_argument("--i", type=int, required=True, help="first parameter index")
    p.add_argument("--j", type=int, required=True, help="second parameter index")
    p.add_argument("--rel-lo", dest="rel_lo", type=float, default=None)
    p.add_argument("--rel-hi", dest="rel_hi", type=float, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_common(p)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("hessian", help="finite-difference Hessian/gradient diagnostics")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--steps", required=True)
    p.add_argument("--h-rel", dest="h_rel", type=float, default=None)
    p.add_argument("--params", default=None, choices=["weights", "all"])
    p.add_argument("--out-prefix", dest="out_prefix", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_hessian)

    p = sub.add_parser("sweep-calib-size", help="re-calibrate over growing calibration subsets")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--sizes", default=None, help="comma-separated subset sizes (default: doubling)")
    p.add_argument("--eval-inputs", dest="eval_inputs", default=None)
    p.add_argument("--eval-labels", dest="eval_labels", default=None)
    p.add_argument("--wbits", type=int, default=None)
    p.add_argument("--abits", type=int, default=None)
    p.add_argument("--p-grid", dest="p_grid", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    p.add_argument("--ftol", type=float, default=None)
    p.add_argument("--ls-tol", dest="ls_tol", type=float, default=None)
    p.add_argument("--quantize-first-last", dest="quantize_first_last", action="store_const",
                   const=True, default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("quantize", help="write grid-snapped (optionally corrected) weights")
    p.add_argument("--model", required=True)
    p.add_argument("--delta", required=True, help="steps JSON or calibrate result.json")
    p.add_argument("--bias-correct", dest="bias_correct", nargs="?", const="mean",
                   default=None, choices=[m for m in CORRECTION_MODES if m != "none"])
    p.add_argument("--quantize-first-last", dest="quantize_first_last", action="store_const",
                   const=True, default=None)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_common(p, config=True)
    p.set_defaults(fn=cmd_quantize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DegenerateInputError as exc:
        sys.stderr.write(f"qtk: degenerate input: {exc}\n")
        return EXIT_DEGENERATE
    except (FormatError, ShapeError) as exc:
        sys.stderr.write(f"qtk: {exc}\n")
        return EXIT_PARSE
    except QtkError as exc:
        sys.stderr.write(f"qtk: {exc}\n")
        return EXIT_PARSE
    except OSError as exc:
        sys.stderr.write(f"qtk: {exc}\n")
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
