"""Command-line interface: synth, evolve, eval, report, infer-prep.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every failure prints a single ``lesionforge: error: ...`` line to stderr.
Environment overrides: LESIONFORGE_SEED and LESIONFORGE_WORKERS apply when
the corresponding flag is absent.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import pandas as pd

from . import __version__
from .evolution import PRESETS, clamp_to_plausible, get_preset, simulate_prior
from .inference import pack_input, preprocess
from .metrics import evaluate_case
from .nifti import read_nifti, write_nifti
from .pipeline import SCHEMA_VERSION, PipelineConfig, generate_dataset
from .rng import RngStream
from .stats import aggregate_report
from .volume import LabelVolume, as_lesion_mask

log = logging.getLogger("lesionforge")


class ConfigError(ValueError):
    """Configuration or usage problem; maps to exit code 2."""


def _env_int(name: str, fallback):
    raw = os.environ.get(name)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"environment variable {name}={raw!r} is not an integer")


def _load_mask(path):
    try:
        return as_lesion_mask(read_nifti(path))
    except ValueError as exc:
        raise RuntimeError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config_path = Path(args.config)
    try:
        raw = json.loads(config_path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")

    input_specs = raw.pop("inputs", None)
    if not input_specs:
        raise ConfigError("config must list at least one entry under 'inputs'")
    if args.out is not None:
        raw["output_dir"] = str(args.out)
    seed = _env_int("LESIONFORGE_SEED", None) if args.seed is None else args.seed
    if seed is not None:
        raw["master_seed"] = seed
    try:
        cfg = PipelineConfig.from_json(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}")

    base = config_path.parent
    inputs = []
    for i, spec in enumerate(input_specs):
        try:
            parc_path = base / spec["parcellation"]
            mask_path = base / spec["lesion_mask"]
        except (TypeError, KeyError):
            raise ConfigError(
                f"inputs[{i}] must provide 'parcellation' and 'lesion_mask' paths")
        parc = read_nifti(parc_path)
        if not isinstance(parc, LabelVolume):
            raise RuntimeError(f"{parc_path}: expected an integer parcellation")
        inputs.append((parc, _load_mask(mask_path)))

    workers = args.workers or _env_int("LESIONFORGE_WORKERS", None) or 1
    manifest = generate_dataset(inputs, cfg, workers=workers)
    print(f"wrote {len(manifest.records)} triplets to {cfg.output_dir}")
    return 0


def cmd_evolve(args) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(
            f"unknown preset {args.preset!r}; valid presets: {sorted(PRESETS)}")
    if args.replicas < 1:
        raise ConfigError(f"replicas must be >= 1, got {args.replicas}")
    mask = _load_mask(args.mask)
    parc = None
    forbidden = set()
    if args.parc is not None:
        parc = read_nifti(args.parc)
        if not isinstance(parc, LabelVolume):
            raise RuntimeError(f"{args.parc}: expected an integer parcellation")
    if args.forbidden:
        forbidden = {int(c) for c in args.forbidden.split(",")}
        if parc is None:
            raise ConfigError("--forbidden requires --parc")

    cfg = get_preset(args.preset)
    seed = args.seed if args.seed is not None else _env_int("LESIONFORGE_SEED", 0)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed)
    for i in range(args.replicas):
        prior = simulate_prior(mask, cfg, root.child(i))
        if parc is not None:
            prior = clamp_to_plausible(prior, parc, forbidden)
        write_nifti(prior, out_dir / f"prior-{i:02d}.nii.gz")
    print(f"wrote {args.replicas} simulated prior masks to {out_dir}")
    return 0


def _nifti_names(directory: Path) -> dict[str, Path]:
    out = {}
    for path in sorted(directory.iterdir()):
        if path.name.endswith(".nii") or path.name.endswith(".nii.gz"):
            out[path.name] = path
    return out


def _case_id(filename: str) -> str:
    for suffix in (".nii.gz", ".nii"):
        if filename.endswith(suffix):
            return filename[: -len(suffix)]
    return filename


def cmd_eval(args) -> int:
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    gt_files = _nifti_names(gt_dir)
    pred_files = _nifti_names(pred_dir)
    orphans = sorted(set(gt_files) ^ set(pred_files))
    if orphans:
        raise ConfigError(f"unmatched filenames between --gt and --pred: {orphans}")
    if not gt_files:
        raise ConfigError("no NIfTI files to evaluate")

    rows = []
    for name in sorted(gt_files):
        gt = _load_mask(gt_files[name])
        pred = _load_mask(pred_files[name])
        m = evaluate_case(gt, pred, min_lesion_mm3=args.min_lesion_mm3)
        rows.append({
            "case_id": _case_id(name),
            "dsc": m.dsc,
            "lesional_dsc": m.lesional_dsc,
            "ppv": m.ppv,
            "fpr": m.fpr,
            "hd95_mm": "" if m.hd95_mm is None else m.hd95_mm,
            "assd_mm": "" if m.assd_mm is None else m.assd_mm,
            "pred_empty": m.pred_empty,
            "gt_volume_mm3": m.gt_volume_mm3,
            "pred_volume_mm3": m.pred_volume_mm3,
        })

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"evaluated {len(rows)} cases -> {out_path}")
    return 0


def cmd_report(args) -> int:
    tables = {}
    for path in args.metrics:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"metrics file not found: {path}")
        tables[path.stem] = pd.read_csv(path)
    group_keys = args.group_by.split(",") if args.group_by else ()
    for key in group_keys:
        for name, df in tables.items():
            if key not in df.columns:
                raise ConfigError(f"group key {key!r} missing from {name}")

    report = aggregate_report(tables, group_keys)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.medians.to_csv(out_dir / "medians.csv", index=False)
    report.comparisons.to_csv(out_dir / "comparisons.csv", index=False)
    ba_rows = []
    for method, ba in report.bland_altman.items():
        ba_rows.append({"method": method, "bias": ba.bias,
                        "loa_low": ba.loa_low, "loa_high": ba.loa_high})
        pd.DataFrame({
            "mean_volume_mm3": ba.means,
            "diff_volume_mm3": ba.diffs,
        }).to_csv(out_dir / f"bland_altman_{method}.csv", index=False)
    if ba_rows:
        pd.DataFrame(ba_rows).to_csv(out_dir / "bland_altman_summary.csv",
                                     index=False)
    print(f"wrote report tables to {out_dir}")
    return 0


def cmd_infer_prep(args) -> int:
    img = read_nifti(args.infile)
    if isinstance(img, LabelVolume):
        raise RuntimeError(f"{args.infile}: expected a scalar image")
    prepped = preprocess(img)
    prior = None
    if args.prior is not None:
        prior = _load_mask(args.prior)
    packed = pack_input(prepped, prior)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(packed.image, out_dir / "image.nii.gz")
    write_nifti(packed.prior, out_dir / "prior.nii.gz")
    print(f"wrote preprocessed two-channel pair to {out_dir} "
          f"(dims {packed.image.dims}, spacing {packed.image.spacing})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionforge",
        description="Synthetic longitudinal lesion datasets and "
                    "segmentation evaluation.")
    parser.add_argument("--version", action="version",
                        version=f"lesionforge {__version__} "
                                f"(manifest schema {SCHEMA_VERSION})")
    parser.add_argument("--verbosity", choices=("quiet", "normal", "debug"),
                        default="normal")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic training dataset")
    p.add_argument("--config", required=True, help="pipeline JSON config")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--workers", type=int, help="parallel workers (default 1)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evolve",
                       help="simulate prior-timepoint masks from a lesion mask")
    p.add_argument("--mask", required=True, help="binary lesion mask (NIfTI)")
    p.add_argument("--parc", help="parcellation for plausibility clamping")
    p.add_argument("--forbidden", help="comma-separated forbidden class ids")
    p.add_argument("--preset", required=True,
                   help=f"preset name, one of {sorted(PRESETS)}")
    p.add_argument("-n", "--replicas", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--min-lesion-mm3", type=float, default=3.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate metric CSVs and compare methods")
    p.add_argument("--metrics", nargs="+", required=True,
                   help="per-method metric CSVs (method name = file stem)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--group-by", help="comma-separated grouping columns")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("infer-prep",
                       help="preprocess a scan (+ optional prior) for inference")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--prior")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer_prep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {"quiet": logging.WARNING, "normal": logging.INFO,
             "debug": logging.DEBUG}[args.verbosity]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lesionforge: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"lesionforge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
