"""Command-line entry point: ``clq {gen-toy,quantize,eval,inspect,ablate}``.

Exit codes: 0 success, 1 data or format error, 2 configuration error,
3 search failure. Errors go to stderr with the offending block, layer or
tensor named in the message.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .calibration import accumulated_drift
from .errors import CLQError, ConfigurationError, SearchFailure
from .model import Dims, ModelGraph, build_toy, make_inputs
from .pipeline import FORMAT_VERSION, PipelineConfig, ablate, ablation_csv, end_to_end_error, max_workers, run
from .rotation import OutlierMetric

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_SEARCH = 0, 1, 2, 3
REPORT = "report.json"
EVAL_TOL = 1e-6


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, type=Path, help="model directory from gen-toy")
    p.add_argument("--bits-w", type=int, default=4, choices=(4, 8, 16))
    p.add_argument("--bits-a", type=int, default=4, choices=(4, 8, 16))
    p.add_argument("--metric", default=OutlierMetric.ABS_MAX.value, choices=[m.value for m in OutlierMetric])
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--grid", type=int, default=16, help="grid points per axis")
    p.add_argument("--calib-batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0, help="calibration input seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clq", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="write a random toy model directory")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=None, help="defaults to 4 * dim")
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--cross-tokens", type=int, default=8)
    p.add_argument("--outlier-frac", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("quantize", help="run the PTQ pipeline and write an artifact")
    _add_search_flags(p)
    p.add_argument("--no-cbc", action="store_true")
    p.add_argument("--no-obs", action="store_true")
    p.add_argument("--no-clps", action="store_true")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="re-measure an artifact against its model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--artifact", required=True, type=Path)
    p.add_argument("--inputs-seed", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)

    p = sub.add_parser("inspect", help="dump per-layer search results")
    p.add_argument("--artifact", required=True, type=Path)

    p = sub.add_parser("ablate", help="design ladder and outlier-metric sweep as CSV")
    _add_search_flags(p)
    p.add_argument("--out", type=Path, default=None, help="CSV path (stdout if omitted)")
    return parser


def _config(args, **toggles) -> PipelineConfig:
    return PipelineConfig(bits_w=args.bits_w, bits_a=args.bits_a, metric=args.metric, beta=args.beta,
                          gamma=args.gamma, grid_points=args.grid, calib_batch=args.calib_batch,
                          seed=args.seed, **toggles)


def cmd_gen_toy(args) -> int:
    dims = Dims(dim=args.dim, blocks=args.blocks, heads=args.heads,
                ffn=args.ffn if args.ffn is not None else 4 * args.dim,
                tokens=args.tokens, cross_tokens=args.cross_tokens)
    g = build_toy(dims, seed=args.seed, outlier_frac=args.outlier_frac)
    nbytes = io.save_model(args.out, g, dtype=args.dtype)
    print(f"wrote {args.out}: {len(g.layer_names())} layers, {g.num_params()} params, {nbytes} bytes ({args.dtype})")
    return EXIT_OK


def cmd_quantize(args) -> int:
    g = io.load_model(args.model)
    cfg = _config(args, enable_cbc=not args.no_cbc, enable_obs=not args.no_obs, enable_clps=not args.no_clps)
    qm, report = run(g, cfg)
    packed = io.save_quantized(args.out, qm, extra={"model_sha256": io.weights_digest(g)})
    data = report.to_dict()
    data["model"] = str(args.model)
    (args.out / REPORT).write_text(json.dumps(data, indent=2))
    print(report.table())
    print(f"wrote {args.out}: packed.bin {packed} bytes, fp16 model {report.fp16_bytes} bytes, "
          f"ratio {report.size_ratio:.3f}, run {report.label}")
    return EXIT_OK


def _check_pair(g: ModelGraph, manifest: dict) -> None:
    if Dims(**manifest["dims"]) != g.dims:
        raise ConfigurationError(f"artifact dims {manifest['dims']} do not match model dims {g.dims.to_dict()}")
    digest = manifest.get("model_sha256")
    if digest is not None and digest != io.weights_digest(g):
        raise ConfigurationError("artifact was quantized from a different model (weights checksum mismatch)")


def cmd_eval(args) -> int:
    g = io.load_model(args.model)
    qm = io.load_quantized(args.artifact)
    _check_pair(g, qm.manifest)
    stored = None
    report_path = args.artifact / REPORT
    if report_path.exists():
        stored = json.loads(report_path.read_text())
    seed = args.inputs_seed if args.inputs_seed is not None else (stored or {}).get("eval_seed", 0)
    batch = args.batch if args.batch is not None else (stored or {}).get("eval_batch", 8)
    inputs = make_inputs(g.dims, batch, seed)
    err = end_to_end_error(g, qm.state, inputs)
    drift = accumulated_drift(g, qm.state, inputs)
    print(f"end-to-end relative error: {err:.9g}  (inputs seed {seed}, batch {batch})")
    print("drift per block: " + ", ".join(f"{d:.6g}" for d in drift))
    if stored and stored.get("eval_seed") == seed and stored.get("eval_batch") == batch:
        gap = abs(err - stored["e2e_rel_error"])
        if gap > EVAL_TOL:
            print(f"error: recomputed error differs from {REPORT} by {gap:.3g}", file=sys.stderr)
            return EXIT_DATA
        print(f"matches {REPORT} (|diff| = {gap:.3g})")
    return EXIT_OK


def _swap_summary(spec) -> str:
    if spec is None:
        return "none"
    moved = int(np.count_nonzero(spec.swap != np.arange(spec.dim)))
    head = ",".join(str(int(i)) for i in spec.swap[:4])
    return f"b={spec.block_size} moved={moved} top=[{head}]"


def cmd_inspect(args) -> int:
    qm = io.load_quantized(args.artifact)
    m = qm.manifest
    print(f"artifact {args.artifact}: W{m['bits_w']}A{m['bits_a']}, dims {m['dims']}, "
          f"format_version {m['format_version']}, block order {m['block_order']}")
    print(f"{'layer':<24}{'bits':>5}{'p_lo':>9}{'p_hi':>9}{'objective':>14}  {'target':<22}swap")
    for entry in m["layers"]:
        name = entry["name"]
        s = entry.get("search") or {}
        print(f"{name:<24}{entry['bits']:>5}{s.get('p_lo', float('nan')):>9.4f}{s.get('p_hi', float('nan')):>9.4f}"
              f"{s.get('objective', float('nan')):>14.6g}  {s.get('target', '-'):<22}"
              f"{_swap_summary(qm.state.rotations.get(name))}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    max_workers()  # validate CLQ_THREADS before any work
    g = io.load_model(args.model)
    text = ablation_csv(ablate(g, _config(args)))
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
        print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "ablate": cmd_ablate,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, SearchFailure):
        return EXIT_SEARCH
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CLQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
