"""End-to-end synthetic dataset generation with reproducible parallelism.

For each input (parcellation, lesion mask) pair the pipeline derives
``masks_per_input`` aggressive lesion-evolution variants, synthesizes
``scans_per_mask`` accepted domain-randomized scans per variant, and samples
``priors_per_scan`` realistic prior-timepoint masks per scan, yielding
N x M x P x L training triplets {image, prior mask, ground truth}.

Every random decision draws from a stream addressed by (master_seed, input,
variant, scan, prior, stage), never by worker id, so outputs are
byte-identical across worker counts and reruns.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .evolution import (
    EvolutionConfig,
    aggressive_preset,
    clamp_to_plausible,
    merge_lesions_into_parcellation,
    realistic_preset,
    simulate_prior,
)
from .nifti import read_nifti, write_nifti
from .rng import RngStream
from .synthgen import GmmSynthConfig, synthesize_scan
from .volume import LabelVolume, LesionMask, ScalarVolume

SCHEMA_VERSION = "1"

# Stage tags closing every RNG path; paths are documented in the manifest.
STAGE_EVOLUTION_AGGRESSIVE = 0
STAGE_WARP = 1
STAGE_SCAN = 2
STAGE_EVOLUTION_REALISTIC = 3
STAGE_EMPTY_PRIOR = 4

RNG_SCHEME = {
    "aggressive_evolution": "(input, variant, 0)",
    "spatial_warp": "(input, variant, scan | 0 if shared warps, 1)",
    "intensity_chain": "(input, variant, scan, 2) then child(attempt)",
    "realistic_evolution": "(input, variant, scan, prior, 3)",
    "empty_prior_flag": "(input, variant, scan, prior, 4)",
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the generative pipeline needs besides the input volumes."""

    lesion_class: int
    wm_class: int
    forbidden_classes: frozenset[int] = frozenset()
    masks_per_input: int = 15
    scans_per_mask: int = 25
    priors_per_scan: int = 5
    aggressive: EvolutionConfig = field(default_factory=aggressive_preset)
    realistic: EvolutionConfig = field(default_factory=realistic_preset)
    synth: GmmSynthConfig = field(default_factory=GmmSynthConfig)
    empty_prior_fraction: float = 0.2
    master_seed: int = 0
    output_dir: str = "dataset"
    independent_warps: bool = True
    connectivity: int = 26

    def __post_init__(self):
        object.__setattr__(self, "forbidden_classes",
                           frozenset(int(c) for c in self.forbidden_classes))
        for name in ("masks_per_input", "scans_per_mask", "priors_per_scan"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.empty_prior_fraction <= 1.0:
            raise ValueError("empty_prior_fraction must be in [0, 1], "
                             f"got {self.empty_prior_fraction}")
        if self.lesion_class in self.forbidden_classes:
            raise ValueError("lesion_class cannot be a forbidden class")

    def to_json(self) -> dict:
        return {
            "lesion_class": self.lesion_class,
            "wm_class": self.wm_class,
            "forbidden_classes": sorted(self.forbidden_classes),
            "masks_per_input": self.masks_per_input,
            "scans_per_mask": self.scans_per_mask,
            "priors_per_scan": self.priors_per_scan,
            "aggressive": self.aggressive.to_json(),
            "realistic": self.realistic.to_json(),
            "synth": self.synth.to_json(),
            "empty_prior_fraction": self.empty_prior_fraction,
            "master_seed": self.master_seed,
            "output_dir": str(self.output_dir),
            "independent_warps": self.independent_warps,
            "connectivity": self.connectivity,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        for key, loader in (("aggressive", EvolutionConfig.from_json),
                            ("realistic", EvolutionConfig.from_json),
                            ("synth", GmmSynthConfig.from_json)):
            if key in d:
                d[key] = loader(d[key])
        if "forbidden_classes" in d:
            d["forbidden_classes"] = frozenset(d["forbidden_classes"])
        return cls(**d)


@dataclass
class TripletRecord:
    """One emitted training triplet plus its provenance."""

    n: int
    m: int
    p: int
    l: int
    image: str
    labels: str
    gt: str
    prior: str
    prior_is_empty: bool
    prior_forced_empty: bool
    attempts: int
    ef: float | None
    ef_threshold: float | None

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, d: dict) -> "TripletRecord":
        return cls(**d)


@dataclass
class Manifest:
    """Self-contained dataset description enabling exact reruns."""

    config: PipelineConfig
    num_inputs: int
    records: list[TripletRecord]
    tool_version: str = __version__
    schema_version: str = SCHEMA_VERSION
    created_at: str = ""

    def to_json(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "schema_version": self.schema_version,
            "created_at": self.created_at,
            "num_inputs": self.num_inputs,
            "rng_scheme": RNG_SCHEME,
            "config": self.config.to_json(),
            "records": [r.to_json() for r in self.records],
        }

    def save(self, path) -> None:
        payload = json.dumps(self.to_json(), indent=2, sort_keys=True)
        Path(path).write_text(payload + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        d = json.loads(Path(path).read_text())
        return cls(
            config=PipelineConfig.from_json(d["config"]),
            num_inputs=d["num_inputs"],
            records=[TripletRecord.from_json(r) for r in d["records"]],
            tool_version=d["tool_version"],
            schema_version=d["schema_version"],
            created_at=d["created_at"],
        )


def _scan_dir(n: int, m: int, p: int) -> str:
    return f"sub-{n:03d}/aug-{m:03d}/scan-{p:03d}"


def _run_variant_job(args) -> list[TripletRecord]:
    """Worker unit: one (input, variant) pair, writing P scans and their priors."""
    n, m, parc, mask, cfg, out_root = args
    out_root = Path(out_root)
    root = RngStream(cfg.master_seed)

    evo_rng = root.child(n, m, STAGE_EVOLUTION_AGGRESSIVE)
    variant = simulate_prior(mask, cfg.aggressive, evo_rng, cfg.connectivity)
    variant = clamp_to_plausible(variant, parc, cfg.forbidden_classes)
    merged = merge_lesions_into_parcellation(parc, variant, cfg.lesion_class)

    records = []
    for p in range(cfg.scans_per_mask):
        try:
            warp_key = p if cfg.independent_warps else 0
            warp_rng = root.child(n, m, warp_key, STAGE_WARP)
            scan_rng = root.child(n, m, p, STAGE_SCAN)
            image, warped, report = synthesize_scan(
                merged, cfg.synth, cfg.lesion_class, cfg.wm_class,
                warp_rng, scan_rng)
            gt = LesionMask(warped.geom, warped.data == cfg.lesion_class)

            rel = _scan_dir(n, m, p)
            scan_dir = out_root / rel
            scan_dir.mkdir(parents=True, exist_ok=True)
            image32 = ScalarVolume(image.geom,
                                   np.asarray(image.data, dtype=np.float32))
            write_nifti(image32, scan_dir / "image.nii.gz")
            write_nifti(warped, scan_dir / "labels.nii.gz")
            write_nifti(gt, scan_dir / "gt.nii.gz")

            acceptance = report.acceptance
            for l in range(cfg.priors_per_scan):
                prior_rng = root.child(n, m, p, l, STAGE_EVOLUTION_REALISTIC)
                prior = simulate_prior(gt, cfg.realistic, prior_rng,
                                       cfg.connectivity)
                prior = clamp_to_plausible(prior, warped, cfg.forbidden_classes)
                empty_rng = root.child(n, m, p, l, STAGE_EMPTY_PRIOR)
                forced_empty = bool(
                    empty_rng.gen.uniform() < cfg.empty_prior_fraction)
                if forced_empty:
                    prior = LesionMask.empty(gt.geom)
                prior_name = f"prior-{l:02d}.nii.gz"
                write_nifti(prior, scan_dir / prior_name)
                records.append(TripletRecord(
                    n=n, m=m, p=p, l=l,
                    image=f"{rel}/image.nii.gz",
                    labels=f"{rel}/labels.nii.gz",
                    gt=f"{rel}/gt.nii.gz",
                    prior=f"{rel}/{prior_name}",
                    prior_is_empty=prior.foreground_count() == 0,
                    prior_forced_empty=forced_empty,
                    attempts=report.attempts,
                    ef=None if acceptance is None else acceptance.target_ef,
                    ef_threshold=None if acceptance is None
                    else acceptance.threshold,
                ))
        except Exception as exc:
            raise RuntimeError(
                f"scan job (n={n}, m={m}, p={p}) failed: {exc}") from exc
    return records


def generate_dataset(inputs, cfg: PipelineConfig, workers: int = 1) -> Manifest:
    """Run the full pipeline over (parcellation, mask) pairs and persist results.

    Writes one directory per scan (image, warped labels, ground-truth mask,
    prior masks, all NIfTI) under ``cfg.output_dir`` plus a ``manifest.json``
    at its root. Output bytes do not depend on ``workers``.
    """
    if not inputs:
        raise ValueError("at least one input pair required")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    for n, (parc, mask) in enumerate(inputs):
        if not isinstance(parc, LabelVolume):
            raise TypeError(f"input {n}: parcellation must be a LabelVolume")
        if not parc.geom.matches(mask.geom):
            raise ValueError(f"geometry mismatch in input pair {n}")
        if not np.any(parc.data == cfg.wm_class):
            raise ValueError(f"input {n}: parcellation lacks WM class "
                             f"{cfg.wm_class}")

    out_root = Path(cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = [
        (n, m, parc, mask, cfg, str(out_root))
        for n, (parc, mask) in enumerate(inputs)
        for m in range(cfg.masks_per_input)
    ]
    if workers == 1:
        results = [_run_variant_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant_job, jobs))

    records = [rec for batch in results for rec in batch]
    records.sort(key=lambda r: (r.n, r.m, r.p, r.l))
    manifest = Manifest(
        config=cfg,
        num_inputs=len(inputs),
        records=records,
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    manifest.save(out_root / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list[CheckResult]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def verify_manifest(manifest: Manifest, root) -> VerificationReport:
    """Re-check a generated dataset against its manifest.

    Validates the record count, file presence, per-triplet geometry
    agreement, ground-truth/label consistency, the intensity clip, and that
    no mask touches a forbidden class of its label map.
    """
    root = Path(root)
    cfg = manifest.config
    checks = []

    expected = (manifest.num_inputs * cfg.masks_per_input
                * cfg.scans_per_mask * cfg.priors_per_scan)
    checks.append(CheckResult(
        "record_count", len(manifest.records) == expected,
        f"{len(manifest.records)} records, expected {expected}"))

    missing = []
    for rec in manifest.records:
        for rel in (rec.image, rec.labels, rec.gt, rec.prior):
            if not (root / rel).exists():
                missing.append(rel)
    checks.append(CheckResult(
        "files_exist", not missing,
        "all files present" if not missing else f"missing: {missing[:5]}"))
    if missing:
        return VerificationReport(checks)

    geom_ok = gt_ok = clip_ok = forbidden_ok = True
    detail = {"geometry": "", "gt": "", "clip": "", "forbidden": ""}
    seen_scans = set()
    for rec in sorted(manifest.records, key=lambda r: (r.n, r.m, r.p, r.l)):
        scan_key = (rec.n, rec.m, rec.p)
        prior = read_nifti(root / rec.prior)
        if scan_key not in seen_scans:
            seen_scans.add(scan_key)
            image = read_nifti(root / rec.image)
            labels = read_nifti(root / rec.labels)
            gt = read_nifti(root / rec.gt)
            if not (image.geom.matches(labels.geom)
                    and image.geom.matches(gt.geom)):
                geom_ok = False
                detail["geometry"] = f"mismatch at {scan_key}"
            if not np.array_equal(gt.data != 0,
                                  labels.data == cfg.lesion_class):
                gt_ok = False
                detail["gt"] = f"gt/labels disagree at {scan_key}"
            if float(image.data.max()) > cfg.synth.clip_max + 1e-6:
                clip_ok = False
                detail["clip"] = (f"intensity {image.data.max():.3f} above "
                                  f"{cfg.synth.clip_max} at {scan_key}")
            forbidden_here = np.isin(labels.data,
                                     sorted(cfg.forbidden_classes))
        if not prior.geom.matches(image.geom):
            geom_ok = False
            detail["geometry"] = f"prior geometry mismatch at {scan_key}"
        if cfg.forbidden_classes and np.any((prior.data != 0) & forbidden_here):
            forbidden_ok = False
            detail["forbidden"] = f"prior overlaps forbidden class at {scan_key}"

    checks.append(CheckResult("geometry", geom_ok, detail["geometry"]))
    checks.append(CheckResult("gt_matches_labels", gt_ok, detail["gt"]))
    checks.append(CheckResult("intensity_clip", clip_ok, detail["clip"]))
    checks.append(CheckResult("forbidden_overlap", forbidden_ok,
                              detail["forbidden"]))
    return VerificationReport(checks)
