"""Synthetic fundus-like cohort with a known proportional-hazards ground truth.

Each subject contributes one eye: an image whose planted bright lesions grow
with the severity grade, a tabular covariate vector (standardized age, sex,
smoking, variant dosages), and an event/censoring time drawn from an
exponential hazard scaled by the subject's true log-risk. Because the hazard
law is known, downstream estimators can be checked against closed forms.

On-disk format: a ``manifest.csv`` with a fixed column order
(subject_id, eye, image_path, severity, class_label, age_z, sex, smoking,
v001..vNNN, event_time, event, true_log_risk) next to an ``images/``
directory of 8-bit 3-channel PNGs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .errors import ValidationError
from .rng import stream

SEVERITY_MIN, SEVERITY_MAX = 1, 12
LATE_SEVERITY = 10  # grades >= 10 are late disease, excluded from the survival subset
EYES = ("left", "right")

# tag values reserved for cohort-level streams (subject streams use tag < 2**32)
_TAG_VARIANT_FREQ = 1 << 40


def group_severity(score: int) -> int:
    """Map a 1-12 severity grade to its 4-class label (0 none, 1 early, 2 intermediate, 3 late)."""
    score = int(score)
    if not SEVERITY_MIN <= score <= SEVERITY_MAX:
        raise ValidationError(f"severity score {score} outside [{SEVERITY_MIN}, {SEVERITY_MAX}]")
    if score == 1:
        return 0
    if score <= 5:
        return 1
    if score <= 9:
        return 2
    return 3


@dataclass
class SynthConfig:
    n_subjects: int = 400
    image_size: int = 32
    n_variants: int = 52
    lesion_signal: float = 1.0
    lesion_hazard: float | None = None  # log-hazard weight of the image channel; None -> lesion_signal
    true_coefficients: np.ndarray | None = None  # length 3 + n_variants; None -> all zeros
    baseline_rate: float = float(np.log(2.0))
    censor_horizon: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValidationError("n_subjects must be >= 2")
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16")
        if self.baseline_rate <= 0:
            raise ValidationError("baseline_rate must be > 0")
        if self.censor_horizon <= 0:
            raise ValidationError("censor_horizon must be > 0")
        if not 0.0 <= self.lesion_signal <= 1.0:
            raise ValidationError("lesion_signal must lie in [0, 1]")
        if self.lesion_hazard is None:
            self.lesion_hazard = self.lesion_signal
        if self.lesion_hazard < 0:
            raise ValidationError("lesion_hazard must be >= 0")
        if self.true_coefficients is None:
            self.true_coefficients = np.zeros(3 + self.n_variants)
        self.true_coefficients = np.asarray(self.true_coefficients, dtype=float)
        if self.true_coefficients.shape != (3 + self.n_variants,):
            raise ValidationError(
                f"true_coefficients must have length {3 + self.n_variants}, "
                f"got {self.true_coefficients.shape}"
            )


def demo_coefficients(n_variants: int = 52) -> np.ndarray:
    """Sparse nonzero log-hazard weights for planted-signal experiments."""
    coef = np.zeros(3 + n_variants)
    coef[0] = 0.8   # age_z
    coef[1] = -0.3  # sex
    coef[2] = 0.5   # smoking
    planted = [0.6, -0.6, 0.45, -0.45, 0.3]
    for j, c in enumerate(planted[: n_variants]):
        coef[3 + j] = c
    return coef


@dataclass
class FundusSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    severity: int
    class_label: int
    subject_id: str
    eye: str

    def __post_init__(self):
        if not SEVERITY_MIN <= self.severity <= SEVERITY_MAX:
            raise ValidationError(f"{self.subject_id}: severity {self.severity} out of range")
        if self.class_label != group_severity(self.severity):
            raise ValidationError(
                f"{self.subject_id}: class_label {self.class_label} inconsistent "
                f"with severity {self.severity}"
            )
        if self.eye not in EYES:
            raise ValidationError(f"{self.subject_id}: unknown eye {self.eye!r}")


@dataclass
class SubjectRecord:
    subject_id: str
    covariates: np.ndarray  # [age_z, sex, smoking, v001..vNNN]
    event_time: float
    event: int
    true_log_risk: float

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.event_time <= 0:
            raise ValidationError(f"{self.subject_id}: event_time must be > 0")
        if self.event not in (0, 1):
            raise ValidationError(f"{self.subject_id}: event indicator must be 0 or 1")
        dosages = self.covariates[3:]
        if dosages.size and not np.all(np.isin(dosages, (0.0, 1.0, 2.0))):
            raise ValidationError(f"{self.subject_id}: variant dosages must be in {{0,1,2}}")


@dataclass
class DatasetBundle:
    samples: list[FundusSample]
    records: list[SubjectRecord]
    manifest_path: Path

    def __post_init__(self):
        known = {r.subject_id for r in self.records}
        for s in self.samples:
            if s.subject_id not in known:
                raise ValidationError(f"sample {s.subject_id} has no subject record")

    def record_for(self, subject_id: str) -> SubjectRecord:
        for r in self.records:
            if r.subject_id == subject_id:
                return r
        raise KeyError(subject_id)

    def stage2_samples(self) -> list[FundusSample]:
        """Base-visit survival subset: eyes below the late-severity threshold."""
        return [s for s in self.samples if s.severity < LATE_SEVERITY]

    @property
    def n_variants(self) -> int:
        return len(self.records[0].covariates) - 3


def plant_lesions(
    canvas: np.ndarray, severity: int, rng: np.random.Generator, strength: float = 1.0
) -> np.ndarray:
    """Add severity - 1 bright blobs whose radius also grows with severity.

    Deterministic given the generator state; output clipped to [0, 1].
    """
    if not SEVERITY_MIN <= severity <= SEVERITY_MAX:
        raise ValidationError(f"severity {severity} out of range")
    img = np.asarray(canvas, dtype=np.float32).copy()
    _, h, w = img.shape
    n_blobs = severity - 1
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    # drusen-like: bright, strongest in the red/green channels
    channel_gain = np.array([1.0, 0.9, 0.5], dtype=np.float32)
    for _ in range(n_blobs):
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.15 * w, 0.85 * w)
        sigma = (0.03 + 0.006 * (severity - 1)) * min(h, w)
        amp = strength * rng.uniform(0.45, 0.65)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        img += amp * channel_gain[:, None, None] * bump[None]
    return np.clip(img, 0.0, 1.0)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth fundus-ish canvas: warm base color, low-frequency texture, round vignette."""
    base = np.array([0.52, 0.28, 0.12], dtype=np.float32)
    coarse = rng.normal(0.0, 1.0, size=(3, 5, 5)).astype(np.float32)
    # bilinear upsample of the coarse noise field
    idx = np.linspace(0, 4, size, dtype=np.float32)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 4)
    frac = idx - i0
    rows = coarse[:, i0, :] * (1 - frac[None, :, None]) + coarse[:, i1, :] * frac[None, :, None]
    tex = rows[:, :, i0] * (1 - frac[None, None, :]) + rows[:, :, i1] * frac[None, None, :]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    r = np.sqrt((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (size / 2)
    vignette = np.clip(1.15 - 0.55 * r**2, 0.0, 1.0)
    img = (base[:, None, None] + 0.05 * tex) * vignette[None]
    return np.clip(img, 0.0, 1.0)


def sample_survival(
    true_log_risk: float, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[float, int]:
    """Exponential event time at rate baseline_rate * exp(true_log_risk), uniform censoring."""
    rate = cfg.baseline_rate * float(np.exp(true_log_risk))
    latent = rng.exponential(1.0 / rate)
    censor = rng.uniform(0.0, cfg.censor_horizon)
    if latent <= censor:
        return float(latent), 1
    return float(censor), 0


def manifest_columns(n_variants: int) -> list[str]:
    return (
        ["subject_id", "eye", "image_path", "severity", "class_label", "age_z", "sex", "smoking"]
        + [f"v{j + 1:03d}" for j in range(n_variants)]
        + ["event_time", "event", "true_log_risk"]
    )


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> DatasetBundle:
    """Write a cohort (manifest + PNGs) under out_dir and return it in memory.

    The class mix is balanced by construction (subject i draws its class as
    i mod 4). A subject's true log-risk is
    ``true_coefficients . covariates + lesion_hazard * (severity - 1) / 11``,
    so both the image and the tabular channel carry prognostic signal.
    lesion_signal controls only how visibly the lesions are rendered;
    lesion_hazard (defaulting to the same value) controls how much the
    image channel contributes to the hazard.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    freq_rng = stream(cfg.seed, _TAG_VARIANT_FREQ)
    variant_freq = freq_rng.uniform(0.05, 0.5, size=cfg.n_variants)

    class_bounds = {0: (1, 1), 1: (2, 5), 2: (6, 9), 3: (10, 12)}

    raw_age = np.empty(cfg.n_subjects)
    severities = np.empty(cfg.n_subjects, dtype=int)
    sexes = np.empty(cfg.n_subjects, dtype=int)
    smoking = np.empty(cfg.n_subjects, dtype=int)
    dosages = np.empty((cfg.n_subjects, cfg.n_variants))
    eyes = []
    for i in range(cfg.n_subjects):
        rng = stream(cfg.seed, i)
        lo, hi = class_bounds[i % 4]
        severities[i] = rng.integers(lo, hi + 1)
        raw_age[i] = rng.normal(74.0, 4.9)
        sexes[i] = rng.integers(0, 2)
        smoking[i] = rng.choice(3, p=[0.47, 0.47, 0.06])
        dosages[i] = rng.binomial(2, variant_freq)
        eyes.append(EYES[rng.integers(0, 2)])

    age_z = (raw_age - raw_age.mean()) / raw_age.std()

    samples: list[FundusSample] = []
    records: list[SubjectRecord] = []
    rows = []
    for i in range(cfg.n_subjects):
        sid = f"S{i:05d}"
        rng = stream(cfg.seed, i, 1)
        covariates = np.concatenate(([age_z[i], float(sexes[i]), float(smoking[i])], dosages[i]))
        true_log_risk = float(cfg.true_coefficients @ covariates) + cfg.lesion_hazard * (
            severities[i] - 1
        ) / 11.0
        event_time, event = sample_survival(true_log_risk, cfg, rng)

        canvas = _background(cfg.image_size, rng)
        img = plant_lesions(canvas, int(severities[i]), rng, strength=cfg.lesion_signal)
        img_u8 = np.round(img * 255.0).astype(np.uint8)
        rel_path = f"images/{sid}.png"
        try:
            Image.fromarray(np.moveaxis(img_u8, 0, -1), mode="RGB").save(out_dir / rel_path)
        except OSError as exc:
            raise ValidationError(f"failed writing image {out_dir / rel_path}: {exc}") from exc

        sample = FundusSample(
            image=img_u8.astype(np.float32) / 255.0,
            severity=int(severities[i]),
            class_label=group_severity(int(severities[i])),
            subject_id=sid,
            eye=eyes[i],
        )
        record = SubjectRecord(
            subject_id=sid,
            covariates=covariates,
            event_time=event_time,
            event=event,
            true_log_risk=true_log_risk,
        )
        samples.append(sample)
        records.append(record)
        rows.append(
            [sid, eyes[i], rel_path, int(severities[i]), sample.class_label, age_z[i],
             int(sexes[i]), int(smoking[i])]
            + [int(d) for d in dosages[i]]
            + [event_time, event, true_log_risk]
        )

    manifest_path = out_dir / "manifest.csv"
    frame = pd.DataFrame(rows, columns=manifest_columns(cfg.n_variants))
    frame.to_csv(manifest_path, index=False)
    return DatasetBundle(samples=samples, records=records, manifest_path=manifest_path)


def load_dataset(manifest_path: str | Path) -> DatasetBundle:
    """Load and validate a cohort written by generate_dataset.

    Raises ValidationError naming the offending row or column on any schema
    violation (unknown/missing column, out-of-range severity, bad dosage,
    missing image file).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ValidationError(f"manifest not found: {manifest_path}")
    # round_trip parsing keeps covariates bit-identical to what was written
    frame = pd.read_csv(manifest_path, float_precision="round_trip")

    variant_cols = [c for c in frame.columns if c.startswith("v") and c[1:].isdigit()]
    expected = manifest_columns(len(variant_cols))
    unknown = [c for c in frame.columns if c not in expected]
    if unknown:
        raise ValidationError(f"manifest has unknown column(s): {', '.join(unknown)}")
    missing = [c for c in expected if c not in frame.columns]
    if missing:
        raise ValidationError(f"manifest is missing column(s): {', '.join(missing)}")
    frame = frame[expected]

    root = manifest_path.parent
    samples: list[FundusSample] = []
    records: list[SubjectRecord] = []
    for pos, row in frame.iterrows():
        sid = str(row["subject_id"])
        where = f"manifest row {pos} ({sid})"
        severity = int(row["severity"])
        if not SEVERITY_MIN <= severity <= SEVERITY_MAX:
            raise ValidationError(f"{where}: severity {severity} out of range")
        if int(row["class_label"]) != group_severity(severity):
            raise ValidationError(f"{where}: class_label does not match severity")
        img_path = root / str(row["image_path"])
        if not img_path.exists():
            raise ValidationError(f"{where}: image file missing: {img_path}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        image = np.moveaxis(arr, -1, 0)

        dos = row[variant_cols].to_numpy(dtype=float)
        covariates = np.concatenate(
            ([float(row["age_z"]), float(row["sex"]), float(row["smoking"])], dos)
        )
        try:
            sample = FundusSample(
                image=image, severity=severity, class_label=int(row["class_label"]),
                subject_id=sid, eye=str(row["eye"]),
            )
            record = SubjectRecord(
                subject_id=sid, covariates=covariates,
                event_time=float(row["event_time"]), event=int(row["event"]),
                true_log_risk=float(row["true_log_risk"]),
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        samples.append(sample)
        records.append(record)
    return DatasetBundle(samples=samples, records=records, manifest_path=manifest_path)
