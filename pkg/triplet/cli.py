"""
Command-line surface.

    triplet phantom   generate and save preprocessed phantom volumes
    triplet simulate  build the paired SPET/LPET dataset
    triplet train     three-stage training with cross-validation
    triplet infer     denoise one LPET sinogram with a checkpoint
    triplet eval      score a prediction against a reference
    triplet xform     radon / fbp / dwt / idwt on TNSR files
    triplet ablate    train one of the ablation presets I..V

Every subcommand accepts --config, --seed and --out. Failures exit 1 with a
single `error: {...}` line on stderr; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import colorama
from colorama import Fore, Style

from . import __version__
from .config import ABLATIONS, RunConfig, load_config
from .datagen import derive_seed, generate_phantom, load_dataset, build_dataset, preprocess
from .errors import TripletError
from .metrics import CSV_HEADER, diff_map, evaluate, render_diff_map
from .projection import Geometry, Sinogram, fbp, forward_project
from .storage import load_subbands, read_tnsr, save_json, save_subbands, write_tnsr
from .trainer import TripletModel, infer, train_full
from .wavelet import dwt3, idwt3

logger = logging.getLogger("triplet.cli")

LEVEL_COLORS = {
    "DEBUG": Fore.CYAN,
    "INFO": Fore.GREEN,
    "WARNING": Fore.YELLOW,
    "ERROR": Fore.RED,
    "CRITICAL": Fore.RED + Style.BRIGHT,
}


class LevelFormatter(logging.Formatter):
    """`LEVEL:     message` with the level name coloured."""

    def __init__(self, use_color: bool = True) -> None:
        super().__init__("%(message)s")
        self.use_color = use_color

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        level = f"{record.levelname}:".ljust(10)
        if self.use_color:
            level = f"{LEVEL_COLORS.get(record.levelname, '')}{level}{Style.RESET_ALL}"
        return f"{level}{message}"


def setup_logging(level: Optional[str] = None) -> None:
    colorama.just_fix_windows_console()
    name = (level or os.environ.get("TRIPLET_LOG_LEVEL", "INFO")).upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(LevelFormatter(use_color=sys.stderr.isatty()))
    root = logging.getLogger("triplet")
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, name, logging.INFO))
    root.propagate = False


# ============================================================================
# Subcommands
# ============================================================================

def _config(args: argparse.Namespace, preset: Optional[str] = None) -> RunConfig:
    return load_config(args.config, preset, args.seed, args.out)


def _workspace(config: RunConfig) -> Path:
    path = Path(config.workspace)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ensure_dataset(config: RunConfig, directory: Optional[str]):
    root = Path(directory) if directory else _workspace(config) / "dataset"
    if not (root / "manifest.json").exists():
        logger.info("No dataset at %s, generating one", root)
        build_dataset(config, root)
    return load_dataset(root)


def cmd_phantom(args: argparse.Namespace) -> int:
    config = _config(args)
    data = config.data
    out = _workspace(config) / "phantoms"
    count = args.count if args.count is not None else data.n_phantoms
    for index in range(count):
        seed = derive_seed(config.seed, index)
        phantom = generate_phantom(data.volume_size, data.n_structures, data.intensity_range, seed)
        volume = preprocess(phantom.volume, data.normalization)
        path = write_tnsr(out / f"p{index:03d}.tnsr", volume)
        save_json(path.with_suffix(".json"), {
            "seed": seed,
            "normalization": data.normalization,
            "structures": [{"kind": s.kind, "center": list(s.center), "axes": list(s.axes),
                            "intensity": s.intensity} for s in phantom.structures],
        })
        print(path)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _config(args)
    root = _workspace(config) / "dataset"
    manifest = build_dataset(config, root)
    n_samples = sum(len(p["patches"]) for p in manifest["phantoms"].values())
    print(json.dumps({"dataset": str(root), "phantoms": len(manifest["phantoms"]), "samples": n_samples}))
    return 0


def _train(config: RunConfig, args: argparse.Namespace, run_dir: Path) -> int:
    dataset = _ensure_dataset(config, args.dataset)
    report = train_full(config, dataset, run_dir, max_steps=args.max_steps)
    for entry in report.fold_metrics:
        print(json.dumps({k: entry[k] for k in ("fold", "psnr", "ssim", "rrmse", "input_psnr")}))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args, args.preset)
    return _train(config, args, _workspace(config) / "runs" / config.preset)


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args, args.method)
    return _train(config, args, _workspace(config) / "ablation" / args.method)


def cmd_infer(args: argparse.Namespace) -> int:
    model = TripletModel.load(Path(args.checkpoint))
    sino = Sinogram(read_tnsr(args.input), model.geometry)
    result = infer(sino, model)
    if args.output:
        prefix = Path(args.output)
    else:
        prefix = _workspace(_config(args)) / "inference" / Path(args.input).stem
    for name in ("s_den", "i_hat", "i_input"):
        print(write_tnsr(prefix.parent / f"{prefix.name}_{name}.tnsr", getattr(result, name)))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred, ref = read_tnsr(args.pred), read_tnsr(args.ref)
    row = evaluate(pred, ref, args.sample_id or Path(args.pred).stem)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if args.header:
        writer.writerow(CSV_HEADER)
    writer.writerow(row.as_csv())
    if args.diff_map:
        for path in render_diff_map(diff_map(pred, ref), Path(args.diff_map), args.vmax):
            logger.info("Difference map written to %s", path)
    return 0


def _geometry(config: RunConfig, size: int, n_angles: int, n_bins: Optional[int] = None) -> Geometry:
    g = config.geometry
    return Geometry(n_angles, n_bins or g.n_bins or Geometry.default(size).n_bins, size, g.bin_spacing, g.ray_step)


def cmd_xform(args: argparse.Namespace) -> int:
    output = Path(args.output)
    if args.op == "dwt":
        volume = read_tnsr(args.input)
        save_subbands(output, dwt3(volume[None] if args.no_channel else volume, args.levels))
    elif args.op == "idwt":
        volume = idwt3(load_subbands(args.input))
        write_tnsr(output, volume[0] if args.no_channel else volume)
    elif args.op == "radon":
        config = _config(args)
        volume = read_tnsr(args.input)
        geom = _geometry(config, volume.shape[0], args.n_angles or config.geometry.n_angles)
        write_tnsr(output, forward_project(volume, geom).data)
    else:
        config = _config(args)
        data = read_tnsr(args.input)
        geom = _geometry(config, args.size or config.data.patch_size[0], data.shape[0], data.shape[1])
        write_tnsr(output, fbp(Sinogram(data, geom), args.filter or config.geometry.filter))
    print(output)
    return 0


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config document (default: TRIPLET_CONFIG or ./config.yaml)")
    common.add_argument("--seed", type=int, help="master seed (default: TRIPLET_SEED or config)")
    common.add_argument("--out", help="workspace directory (default: TRIPLET_WORKSPACE or ./workspace)")

    parser = argparse.ArgumentParser(prog="triplet", description="Desk-scale low-dose PET denoising pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate phantom volumes")
    p.add_argument("--count", type=int, help="number of phantoms (default: data.n_phantoms)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", parents=[common], help="build the paired dataset")
    p.set_defaults(func=cmd_simulate)

    for name, func, help_text in (("train", cmd_train, "train and cross-validate"),
                                  ("ablate", cmd_ablate, "train an ablation preset")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ablate":
            p.add_argument("--method", required=True, choices=sorted(ABLATIONS))
        else:
            p.add_argument("--preset", help="named preset overlaid on the config")
        p.add_argument("--dataset", help="dataset directory (default: <out>/dataset, built if missing)")
        p.add_argument("--max-steps", type=int, help="cap on optimizer steps per stage")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", parents=[common], help="denoise one LPET sinogram")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="s_low TNSR [angles, bins, slices]")
    p.add_argument("--output", help="output prefix (default: <out>/inference/<input stem>)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="print one MetricsRow")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--sample-id")
    p.add_argument("--diff-map", help="PNG prefix for mid-slice difference maps")
    p.add_argument("--vmax", type=float)
    p.add_argument("--header", action="store_true", help="print the CSV header before the row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xform", parents=[common], help="transform a TNSR file")
    p.add_argument("op", choices=("radon", "fbp", "dwt", "idwt"))
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--no-channel", action="store_true", help="dwt/idwt on a bare [D, H, W] volume")
    p.add_argument("--n-angles", type=int)
    p.add_argument("--size", type=int, help="fbp image size (default: data.patch_size)")
    p.add_argument("--filter", choices=("ramp", "hann"))
    p.set_defaults(func=cmd_xform)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()
    try:
        return args.func(args)
    except (TripletError, ValueError, OSError) as e:
        line = json.dumps({"type": type(e).__name__, "message": str(e)})
        print(f"error: {line}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n[triplet] Interrupted", file=sys.stderr)
        return 130
