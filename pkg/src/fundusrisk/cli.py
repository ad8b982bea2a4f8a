"""Command-line experiment runner.

Subcommands: synth, pretrain, train, eval, ablate, biomarker,
export-embeddings. Every command reads one YAML config (strict keys,
versioned schema), applies --seed/--out overrides, and writes a resolved
config snapshot next to its outputs so a run can be reproduced from the
snapshot alone.

Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import yaml

from .backbone import BackboneConfig
from .checkpoint import content_hash
from .errors import NumericError, ValidationError
from .fusion import (FusionConfig, VARIANTS, predict_betas, save_stage2,
                     train_stage2, variant_config)
from .pretrain import (Stage1Config, evaluate, export_embeddings, load_stage1,
                       map_labels, save_stage1, train_stage1)
from .survstats import (BiomarkerReport, biomarker_analysis, concordance_index,
                        format_mean_sd, km_curves_svg, km_estimate, logrank_test,
                        stratified_event_folds, time_dependent_auc)
from .synthdata import (DatasetBundle, SynthConfig, demo_coefficients,
                        generate_dataset, load_dataset)

SCHEMA_VERSION = 1
OUT_ENV_VAR = "FUNDUSRISK_OUT"


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class SynthSpec:
    """Dataset section; coefficient_scale multiplies the built-in demo
    coefficient pattern unless an explicit coefficients list is given."""

    n_subjects: int = 400
    image_size: int = 32
    n_variants: int = 52
    lesion_signal: float = 1.0
    lesion_hazard: float | None = None
    coefficient_scale: float = 1.0
    coefficients: list[float] | None = None
    baseline_rate: float = math.log(2.0)
    censor_horizon: float = 4.0
    seed: int = 11

    def to_synth_config(self) -> SynthConfig:
        if self.coefficients is not None:
            coefs = np.asarray(self.coefficients, dtype=float)
        else:
            coefs = self.coefficient_scale * demo_coefficients(self.n_variants)
        return SynthConfig(
            n_subjects=self.n_subjects, image_size=self.image_size,
            n_variants=self.n_variants, lesion_signal=self.lesion_signal,
            lesion_hazard=self.lesion_hazard,
            true_coefficients=coefs, baseline_rate=self.baseline_rate,
            censor_horizon=self.censor_horizon, seed=self.seed)


@dataclass
class CvSpec:
    k: int = 3
    inner_k: int = 4
    horizon: float = 2.0
    split_seed: int = 1
    inner_seed: int = 2

    def __post_init__(self):
        if self.k < 2 or self.inner_k < 2:
            raise ValidationError("cv.k and cv.inner_k must be >= 2")


@dataclass
class AblationSpec:
    variants: list[str] = field(default_factory=lambda: sorted(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    stage1_seed_base: int = 100
    fusion_seed_base: int = 200

    def __post_init__(self):
        bad = [v for v in self.variants if v.lower() not in VARIANTS]
        if bad:
            raise ValidationError(f"ablation: unknown variants {bad}")
        self.variants = [v.lower() for v in self.variants]


@dataclass
class BiomarkerSpec:
    alpha: float = 0.05
    include_severity: bool = True


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/exp"
    synth: SynthSpec = field(default_factory=SynthSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    cv: CvSpec = field(default_factory=CvSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    biomarker: BiomarkerSpec = field(default_factory=BiomarkerSpec)

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        d["schema_version"] = SCHEMA_VERSION
        return d


def _plain(obj):
    """Recursively turn tuples into lists so YAML round-trips cleanly."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"{path}: unknown sections {sorted(unknown)}")
    kwargs = {}
    section_types = {"synth": SynthSpec, "stage1": Stage1Config,
                     "fusion": FusionConfig, "cv": CvSpec,
                     "ablation": AblationSpec, "biomarker": BiomarkerSpec}
    for name, value in data.items():
        if name == "out_dir":
            kwargs[name] = str(value)
            continue
        if not isinstance(value, dict):
            raise ValidationError(f"{path}: section {name} must be a mapping")
        kwargs[name] = _build(section_types[name], value, f"{path}: {name}")
    return ExperimentConfig(**kwargs)


def write_snapshot(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.yaml").write_text(
        yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def resolve_out_dir(cfg: ExperimentConfig, args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return Path(env) / Path(cfg.out_dir).name
    return Path(cfg.out_dir)


@dataclass
class DataArrays:
    """Bundle unpacked into aligned tensors/arrays for the two stages."""

    images: torch.Tensor
    severity: np.ndarray
    class_label: np.ndarray
    subject_ids: np.ndarray
    events_all: np.ndarray
    s2_mask: np.ndarray            # severity < 10, aligned with samples
    s2_ids: np.ndarray
    covariates: torch.Tensor
    times: np.ndarray
    events: np.ndarray
    age_z: np.ndarray

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle) -> "DataArrays":
        recs = {r.subject_id: r for r in bundle.records}
        sids = np.array([s.subject_id for s in bundle.samples])
        sev = np.array([s.severity for s in bundle.samples])
        mask = sev < 10
        s2_ids = sids[mask]
        return cls(
            images=torch.stack([torch.from_numpy(s.image) for s in bundle.samples]),
            severity=sev,
            class_label=np.array([s.class_label for s in bundle.samples]),
            subject_ids=sids,
            events_all=np.array([recs[s].event for s in sids]),
            s2_mask=mask,
            s2_ids=s2_ids,
            covariates=torch.from_numpy(
                np.stack([recs[s].covariates for s in s2_ids])).float(),
            times=np.array([recs[s].event_time for s in s2_ids]),
            events=np.array([recs[s].event for s in s2_ids]),
            age_z=np.array([recs[s].covariates[0] for s in s2_ids]),
        )


@dataclass
class FoldSplit:
    stage1_idx: np.ndarray         # sample indices for stage-1 training
    train: np.ndarray              # indices into the stage-2 arrays
    val: np.ndarray
    test: np.ndarray


def fold_split(data: DataArrays, cv: CvSpec, fold: int) -> FoldSplit:
    if not 0 <= fold < cv.k:
        raise ValidationError(f"fold {fold} out of range for k={cv.k}")
    folds = stratified_event_folds(data.subject_ids, data.events_all, cv.k,
                                   seed=cv.split_seed)
    test_ids = set(folds[fold])
    is_test = np.array([s in test_ids for s in data.subject_ids])
    stage1_idx = np.flatnonzero(~is_test)

    s2_test = np.array([s in test_ids for s in data.s2_ids])
    rest = np.flatnonzero(~s2_test)
    inner = stratified_event_folds(data.s2_ids[rest], data.events[rest],
                                   cv.inner_k, seed=cv.inner_seed + fold)
    val_ids = set(inner[0])
    val = np.array([i for i in rest if data.s2_ids[i] in val_ids])
    train = np.array([i for i in rest if data.s2_ids[i] not in val_ids])
    return FoldSplit(stage1_idx, train, val, np.flatnonzero(s2_test))


def _load_data(out_root: Path) -> tuple[DataArrays, DatasetBundle]:
    manifest = out_root / "dataset" / "manifest.csv"
    if not manifest.exists():
        raise ValidationError(
            f"dataset manifest not found: {manifest}; run `fundusrisk synth` first")
    bundle = load_dataset(manifest)
    return DataArrays.from_bundle(bundle), bundle


def _stage1_path(out_root: Path, fold: int) -> Path:
    return out_root / f"fold{fold}" / "stage1.npz"


def _fold_list(cfg: ExperimentConfig, args) -> list[int]:
    if getattr(args, "fold", None) is not None:
        return [args.fold]
    return list(range(cfg.cv.k))


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    if args.seed is not None:
        cfg.synth.seed = args.seed
    dataset_dir = out_root / "dataset"
    generate_dataset(cfg.synth.to_synth_config(), dataset_dir)
    write_snapshot(cfg, dataset_dir)
    print(f"dataset written to {dataset_dir}")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    if args.seed is not None:
        cfg.stage1.seed = args.seed
    data, _ = _load_data(out_root)
    for fold in _fold_list(cfg, args):
        split = fold_split(data, cfg.cv, fold)
        idx = split.stage1_idx
        result = train_stage1(data.images[idx], data.severity[idx],
                              data.class_label[idx], cfg.stage1,
                              verbose=args.verbose)
        fold_dir = out_root / f"fold{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_stage1(_stage1_path(out_root, fold), result)
        labels = torch.from_numpy(map_labels(data.severity[idx],
                                             data.class_label[idx],
                                             cfg.stage1.label_scheme))
        clean_acc = evaluate(result.backbone, result.prototypes,
                             data.images[idx], labels, cfg.stage1.logit_scale)
        metrics = {"fold": fold, "epochs_run": len(result.history),
                   "best_epoch": result.best_epoch,
                   "train_acc_clean": clean_acc,
                   "history": result.history}
        (fold_dir / "stage1_metrics.json").write_text(json.dumps(metrics, indent=2))
        write_snapshot(cfg, fold_dir)
        print(f"fold {fold}: stage-1 train acc {clean_acc:.4f} "
              f"({len(result.history)} epochs) -> {_stage1_path(out_root, fold)}")
    return 0


def _pooled_features(backbone, data: DataArrays) -> tuple[torch.Tensor, ...]:
    emb = export_embeddings(backbone, data.images[data.s2_mask])
    return tuple(torch.from_numpy(emb[f"scale{j}"]) for j in (1, 2, 3, 4))


def _train_fold(cfg: ExperimentConfig, out_root: Path, data: DataArrays,
                fold: int, verbose: bool) -> pd.DataFrame:
    s1_path = _stage1_path(out_root, fold)
    if not s1_path.exists():
        raise ValidationError(
            f"stage-1 checkpoint not found: {s1_path}; run `fundusrisk pretrain`")
    backbone, prototypes, header = load_stage1(s1_path)
    split = fold_split(data, cfg.cv, fold)
    pooled = _pooled_features(backbone, data)
    result = train_stage2(pooled, data.covariates, data.times, data.events,
                          cfg.fusion, split.train, split.val,
                          prototypes=prototypes.weight.detach(),
                          logit_scale=header["logit_scale"], verbose=verbose)
    fold_dir = out_root / f"fold{fold}"
    save_stage2(fold_dir / "stage2.npz", result.model, content_hash(s1_path))

    rows = []
    for idx_arr, name in ((split.train, "train"), (split.val, "val"),
                          (split.test, "test")):
        betas = predict_betas(result.model, pooled, data.covariates, idx_arr)
        for i, b in zip(idx_arr, betas):
            rows.append({"subject_id": data.s2_ids[i], "beta": float(b),
                         "fold": fold, "split": name})
    risk = pd.DataFrame(rows)
    risk.to_csv(fold_dir / "risk.csv", index=False)

    test_b = risk[risk["split"] == "test"]["beta"].to_numpy()
    c = concordance_index(test_b, data.times[split.test], data.events[split.test])
    auc = time_dependent_auc(test_b, data.times[split.test],
                             data.events[split.test], cfg.cv.horizon)
    metrics = {"fold": fold, "best_epoch": result.best_epoch,
               "val_c_index": result.best_val_c, "test_c_index": c,
               "test_auc": auc}
    (fold_dir / "stage2_metrics.json").write_text(json.dumps(metrics, indent=2))
    write_snapshot(cfg, fold_dir)
    print(f"fold {fold}: test C-index {c:.4f}, {cfg.cv.horizon:g}-unit AUC {auc:.4f}")
    return risk


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    if args.seed is not None:
        cfg.fusion.seed = args.seed
    data, _ = _load_data(out_root)
    tables = [_train_fold(cfg, out_root, data, fold, args.verbose)
              for fold in _fold_list(cfg, args)]
    if getattr(args, "fold", None) is None:
        pd.concat(tables, ignore_index=True).to_csv(
            out_root / "risk_table.csv", index=False)
        return cmd_eval(cfg, args)
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    data, _ = _load_data(out_root)
    pos = {s: i for i, s in enumerate(data.s2_ids)}
    per_fold = []
    for fold in _fold_list(cfg, args):
        risk_path = out_root / f"fold{fold}" / "risk.csv"
        if not risk_path.exists():
            raise ValidationError(
                f"risk table not found: {risk_path}; run `fundusrisk train`")
        risk = pd.read_csv(risk_path)
        test = risk[risk["split"] == "test"]
        idx = np.array([pos[s] for s in test["subject_id"]])
        betas = test["beta"].to_numpy()
        per_fold.append({
            "fold": fold,
            "c_index": concordance_index(betas, data.times[idx], data.events[idx]),
            "auc": time_dependent_auc(betas, data.times[idx], data.events[idx],
                                      cfg.cv.horizon),
        })
    frame = pd.DataFrame(per_fold)
    metrics = {
        "per_fold": per_fold,
        "c_index": format_mean_sd(frame["c_index"]),
        "auc": format_mean_sd(frame["auc"]),
        "horizon": cfg.cv.horizon,
    }
    (out_root / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"C-index {metrics['c_index']}   AUC@{cfg.cv.horizon:g} {metrics['auc']}")
    return 0


VARIANT_TABLE_LABELS = {
    "m1": ("selective-scan", "none", "none"),
    "m2": ("selective-scan", "concat", "none"),
    "m3": ("selective-scan", "multi-scale attention", "none"),
    "m4": ("selective-scan", "multi-scale attention", "hard (4-class)"),
    "m5": ("selective-scan", "multi-scale attention", "soft (4-class)"),
    "m7": ("selective-scan", "multi-scale attention", "hard (12-class)"),
    "m8": ("selective-scan", "multi-scale attention", "hard (2-class)"),
}


def run_ablation(cfg: ExperimentConfig, data: DataArrays,
                 verbose: bool = False) -> pd.DataFrame:
    """Train every requested variant over the seed list on fold 0's split.

    Stage-1 checkpoints are shared across variants with the same label
    scheme within a seed; each variant row reports held-out test C-index
    as mean ± sd over seeds.
    """
    split = fold_split(data, cfg.cv, 0)
    spec = cfg.ablation
    schemes = {VARIANTS[v][2] for v in spec.variants}
    rows = []
    per_variant: dict[str, list[float]] = {v: [] for v in spec.variants}
    for seed_i, seed in enumerate(spec.seeds):
        trained = {}
        for scheme in sorted(schemes):
            s1cfg = Stage1Config(**{**asdict(cfg.stage1),
                                    "label_scheme": scheme,
                                    "seed": spec.stage1_seed_base + seed})
            res = train_stage1(data.images[split.stage1_idx],
                               data.severity[split.stage1_idx],
                               data.class_label[split.stage1_idx], s1cfg,
                               verbose=verbose)
            trained[scheme] = (res, _pooled_features(res.backbone, data))
        for v in spec.variants:
            vcfg, scheme = variant_config(v, cfg.fusion)
            vcfg = FusionConfig(**{**asdict(vcfg),
                                   "seed": spec.fusion_seed_base + seed})
            res, pooled = trained[scheme]
            r2 = train_stage2(
                pooled, data.covariates, data.times, data.events, vcfg,
                split.train, split.val,
                prototypes=(res.prototypes.weight.detach()
                            if vcfg.gate_mode != "none" else None),
                logit_scale=cfg.stage1.logit_scale)
            betas = predict_betas(r2.model, pooled, data.covariates, split.test)
            c = concordance_index(betas, data.times[split.test],
                                  data.events[split.test])
            per_variant[v].append(c)
            if verbose:
                print(f"seed {seed} {v}: test C {c:.4f}")
    for v in spec.variants:
        backbone_l, fusion_l, label_l = VARIANT_TABLE_LABELS[v]
        rows.append({"model": v.upper(), "backbone": backbone_l,
                     "fusion": fusion_l, "label": label_l,
                     "seeds": ",".join(str(s) for s in spec.seeds),
                     "c_index": format_mean_sd(per_variant[v]),
                     "c_values": ";".join(f"{c:.6f}" for c in per_variant[v])})
    return pd.DataFrame(rows)


def _aligned_table(frame: pd.DataFrame, columns: list[str]) -> str:
    widths = {c: max(len(c), *(len(str(v)) for v in frame[c])) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for _, row in frame.iterrows():
        lines.append("  ".join(str(row[c]).ljust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    data, _ = _load_data(out_root)
    table = run_ablation(cfg, data, verbose=args.verbose)
    ab_dir = out_root / "ablation"
    ab_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(ab_dir / "ablation.csv", index=False)
    text = _aligned_table(table, ["model", "backbone", "fusion", "label", "c_index"])
    (ab_dir / "ablation.txt").write_text(text)
    write_snapshot(cfg, ab_dir)
    print(text, end="")
    return 0


def _km_pair(times, events, high, stem: Path, title: str) -> dict:
    curves = {}
    for label, mask in (("high", high), ("low", ~high)):
        if mask.sum() == 0:
            return {"subgroup": stem.name, "skipped": "empty group"}
        curves[label] = km_estimate(times[mask], events[mask])
    frame = pd.concat([c.to_frame(group=l) for l, c in curves.items()],
                      ignore_index=True)
    frame.to_csv(stem.with_suffix(".csv"), index=False)
    km_curves_svg(curves, stem.with_suffix(".svg"), title=title)
    chi2, p = logrank_test(times[high], events[high], times[~high], events[~high])
    return {"subgroup": stem.name, "n_high": int(high.sum()),
            "n_low": int((~high).sum()), "logrank_chi2": chi2, "logrank_p": p}


def cmd_biomarker(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    data, bundle = _load_data(out_root)
    risk_path = out_root / "risk_table.csv"
    if not risk_path.exists():
        raise ValidationError(
            f"pooled risk table not found: {risk_path}; run `fundusrisk train`")
    risk = pd.read_csv(risk_path)
    pos = {s: i for i, s in enumerate(data.s2_ids)}
    bio_dir = out_root / "biomarker"
    bio_dir.mkdir(parents=True, exist_ok=True)

    # dichotomize per fold at that fold's training-median, pool test subjects
    eval_idx, eval_high = [], []
    for fold, grp in risk.groupby("fold"):
        thresh_betas = grp[grp["split"] != "test"]["beta"].to_numpy()
        test = grp[grp["split"] == "test"]
        idx = np.array([pos[s] for s in test["subject_id"]])
        high = test["beta"].to_numpy() >= np.median(thresh_betas)
        eval_idx.append(idx)
        eval_high.append(high)
    idx = np.concatenate(eval_idx)
    high = np.concatenate(eval_high)

    n_var = bundle.n_variants
    cov_names = ["age_z", "sex", "smoking"] + [f"v{j+1:03d}" for j in range(n_var)]
    cov = pd.DataFrame(data.covariates.numpy()[idx], columns=cov_names)
    if cfg.biomarker.include_severity:
        sev_by_sid = {s.subject_id: s.severity for s in bundle.samples}
        cov["severity"] = [sev_by_sid[s] for s in data.s2_ids[idx]]
    times, events = data.times[idx], data.events[idx]

    # each fold used its own training-median threshold, so pass the pooled
    # labels directly rather than re-thresholding
    report = biomarker_analysis(None, None, cov, times, events,
                                alpha=cfg.biomarker.alpha, high=high)

    uni = report.univariate
    uni.to_csv(bio_dir / "univariate.csv", index=False)
    multi = report.multivariate.to_frame()
    multi.to_csv(bio_dir / "multivariate.csv", index=False)
    text = ("Univariate screen (alpha = %.3f)\n" % cfg.biomarker.alpha
            + _aligned_table(uni.round(4), list(uni.columns))
            + "\nMultivariate fit\n"
            + _aligned_table(multi.round(4), list(multi.columns)))
    (bio_dir / "report.txt").write_text(text)

    subgroup_rows = [_km_pair(times, events, high, bio_dir / "km_all",
                              "all held-out subjects")]
    return _finish_biomarker(cfg, data, bundle, bio_dir, idx, high, times,
                             events, subgroup_rows, report)


def _finish_biomarker(cfg, data, bundle, bio_dir, idx, high, times, events,
                      subgroup_rows, report) -> int:
    sev_by_sid = {s.subject_id: s.severity for s in bundle.samples}
    cls_by_sid = {s.subject_id: s.class_label for s in bundle.samples}
    classes = np.array([cls_by_sid[s] for s in data.s2_ids[idx]])
    for c in sorted(set(classes)):
        mask = classes == c
        if mask.sum() < 4 or events[mask].sum() == 0:
            continue
        subgroup_rows.append(_km_pair(times[mask], events[mask], high[mask],
                                      bio_dir / f"km_severity_class{c}",
                                      f"severity class {c}"))
    age = data.age_z[idx]
    older = age >= np.median(age)
    for name, mask in (("older", older), ("younger", ~older)):
        subgroup_rows.append(_km_pair(times[mask], events[mask], high[mask],
                                      bio_dir / f"km_age_{name}",
                                      f"{name} half by age"))
    pd.DataFrame(subgroup_rows).to_csv(bio_dir / "subgroups.csv", index=False)
    if "risk_group" in report.multivariate.names:
        i = report.multivariate.names.index("risk_group")
        hr = report.multivariate.hazard_ratio[i]
        p = report.multivariate.p_value[i]
        print(f"risk-group HR {hr:.3f}, multivariate p {p:.2e}, "
              f"log-rank p {report.logrank_p:.2e}; outputs in {bio_dir}")
    else:
        print(f"risk group did not pass the univariate screen; "
              f"log-rank p {report.logrank_p:.2e}; outputs in {bio_dir}")
    return 0


def cmd_export_embeddings(cfg: ExperimentConfig, args) -> int:
    out_root = resolve_out_dir(cfg, args)
    fold = args.fold if args.fold is not None else 0
    s1_path = _stage1_path(out_root, fold)
    if not s1_path.exists():
        raise ValidationError(
            f"stage-1 checkpoint not found: {s1_path}; run `fundusrisk pretrain`")
    data, _ = _load_data(out_root)
    backbone, _, _ = load_stage1(s1_path)
    emb = export_embeddings(backbone, data.images)
    out = out_root / f"embeddings_fold{fold}.npz"
    np.savez_compressed(out, subject_ids=data.subject_ids,
                        severity=data.severity, **emb)
    print(f"embeddings for {len(data.subject_ids)} images -> {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fundusrisk",
                     description="Two-stage image+tabular survival pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": cmd_synth,
        "pretrain": cmd_pretrain,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "biomarker": cmd_biomarker,
        "export-embeddings": cmd_export_embeddings,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the command's primary seed")
        p.add_argument("--fold", type=int, default=None,
                       help="run a single fold (default: all)")
        p.add_argument("--out", default=None,
                       help=f"output root (overrides config and ${OUT_ENV_VAR})")
        p.add_argument("--device", choices=("none", "cpu"), default="cpu",
                       help="compute device; 'none' validates config and exits")
        p.add_argument("--verbose", "-v", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        if args.device == "none":
            print("config ok")
            return 0
        torch.set_num_threads(max(1, os.cpu_count() or 1))
        return args.fn(cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
