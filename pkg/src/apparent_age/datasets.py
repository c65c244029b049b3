"""Manifest-based dataset ingestion and a seeded synthetic face-age stand-in.

Every source dataset is converted into one tabular manifest schema::

    sample_id,image_path,real_age,apparent_mean,apparent_std,age_lo,age_hi,race,gender,split

Absent optional values are written as empty strings. ``image_path`` is stored
verbatim; relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import calendar
import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import InvalidInputError, ManifestError

COLUMNS = ["sample_id", "image_path", "real_age", "apparent_mean", "apparent_std",
           "age_lo", "age_hi", "race", "gender", "split"]
SPLITS = ("train", "val", "test")
LABEL_POLICIES = ("real", "apparent", "range_midpoint")
# resize policy for images whose size differs from the model input
RESIZE_FILTER = Image.Resampling.BILINEAR


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str
    real_age: float | None = None
    apparent_mean: float | None = None
    apparent_std: float | None = None
    age_range: tuple | None = None
    race: str | None = None
    gender: str | None = None
    split: str = "train"

    def __post_init__(self):
        if not self.sample_id:
            raise InvalidInputError("sample_id must be non-empty")
        if self.real_age is None and self.apparent_mean is None and self.age_range is None:
            raise InvalidInputError("record needs at least one of real_age, apparent_mean, age_range")
        if self.age_range is not None:
            lo, hi = self.age_range
            if lo > hi:
                raise InvalidInputError(f"age_range lo {lo} > hi {hi}")
        if self.apparent_std is not None and self.apparent_std < 0:
            raise InvalidInputError("apparent_std must be >= 0")
        if self.split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}, got {self.split!r}")
        for name in ("race", "gender"):
            v = getattr(self, name)
            object.__setattr__(self, name, v.strip().lower() or None if v is not None else None)

    def target(self, policy: str) -> float | None:
        """Training target age under ``policy`` (None when the label is absent)."""
        if policy == "real":
            return self.real_age
        if policy == "apparent":
            return self.apparent_mean
        if policy == "range_midpoint":
            return None if self.age_range is None else range_midpoint(self.age_range)
        raise InvalidInputError(f"unknown label policy {policy!r}; expected one of {LABEL_POLICIES}")

    def reference_age(self) -> float | None:
        """Best available single age label: apparent, else real, else range midpoint."""
        for policy in ("apparent", "real", "range_midpoint"):
            v = self.target(policy)
            if v is not None:
                return v
        return None


@dataclass
class DatasetManifest:
    name: str
    records: list = field(default_factory=list)
    label_policy: str | None = None
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
            seen.add(r.sample_id)
        if self.label_policy is not None:
            if self.label_policy not in LABEL_POLICIES:
                raise InvalidInputError(f"unknown label policy {self.label_policy!r}")
            missing = [r.sample_id for r in self.records if r.target(self.label_policy) is None]
            if missing:
                raise ManifestError(f"{len(missing)} records lack the '{self.label_policy}' label, "
                                    f"e.g. {missing[0]!r}")

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(self.name, [r for r in self.records if r.split == name], self.label_policy, self.root)

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


# ---------------------------------------------------------------------------
# label derivation
# ---------------------------------------------------------------------------

def derive_real_age(birth_date: dt.date, photo_date: dt.date) -> int:
    """Whole years elapsed between birth and photo.

    A Feb 29 birthday is reached on Feb 28 in non-leap years.
    """
    if photo_date < birth_date:
        raise InvalidInputError(f"photo date {photo_date} precedes birth date {birth_date}")
    years = photo_date.year - birth_date.year
    bmonth, bday = birth_date.month, birth_date.day
    if (bmonth, bday) == (2, 29) and not calendar.isleap(photo_date.year):
        bday = 28
    if (photo_date.month, photo_date.day) < (bmonth, bday):
        years -= 1
    return years


def range_midpoint(age_range) -> float:
    lo, hi = age_range
    if lo > hi:
        raise InvalidInputError(f"age range lo {lo} > hi {hi}")
    return (lo + hi) / 2.0


def parse_age_range(text: str, open_upper: float = 100.0) -> tuple:
    """Parse range labels such as ``"20-29"``, ``"70+"`` or ``"more than 70"``.

    Open-ended ranges are closed at ``open_upper``.
    """
    s = text.strip().lower()
    if s.startswith("more than"):
        return (float(s[len("more than"):]), float(open_upper))
    if s.endswith("+"):
        return (float(s[:-1]), float(open_upper))
    lo, sep, hi = s.partition("-")
    if not sep:
        raise InvalidInputError(f"cannot parse age range {text!r}")
    return (float(lo), float(hi))


# Thin converters from each source dataset's native annotations.

def imdb_wiki_record(sample_id, image_path, birth_date, photo_date, gender=None, split="train"):
    return SampleRecord(sample_id, image_path, real_age=float(derive_real_age(birth_date, photo_date)),
                        gender=gender, split=split)


def clap_record(sample_id, image_path, apparent_mean, apparent_std, real_age=None, split="train"):
    return SampleRecord(sample_id, image_path, real_age=real_age, apparent_mean=apparent_mean,
                        apparent_std=apparent_std, split=split)


def appa_real_record(sample_id, image_path, real_age, apparent_mean, apparent_std, race=None, gender=None,
                     split="train"):
    return SampleRecord(sample_id, image_path, real_age=real_age, apparent_mean=apparent_mean,
                        apparent_std=apparent_std, race=race, gender=gender, split=split)


def fairface_record(sample_id, image_path, age_label, race=None, gender=None, split="train", open_upper=100.0):
    return SampleRecord(sample_id, image_path, age_range=parse_age_range(age_label, open_upper),
                        race=race, gender=gender, split=split)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def _fmt_num(v):
    if v is None:
        return ""
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _parse_num(text, name):
    text = text.strip()
    if text == "":
        return None
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"{name}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"{name}: must be finite")
    return v


def record_to_row(r: SampleRecord) -> dict:
    lo, hi = r.age_range if r.age_range is not None else (None, None)
    return {
        "sample_id": r.sample_id, "image_path": r.image_path,
        "real_age": _fmt_num(r.real_age), "apparent_mean": _fmt_num(r.apparent_mean),
        "apparent_std": _fmt_num(r.apparent_std), "age_lo": _fmt_num(lo), "age_hi": _fmt_num(hi),
        "race": r.race or "", "gender": r.gender or "", "split": r.split,
    }


def row_to_record(row: dict) -> SampleRecord:
    lo = _parse_num(row["age_lo"], "age_lo")
    hi = _parse_num(row["age_hi"], "age_hi")
    if (lo is None) != (hi is None):
        raise ValueError("age_lo and age_hi must be given together")
    return SampleRecord(
        sample_id=row["sample_id"].strip(),
        image_path=row["image_path"].strip(),
        real_age=_parse_num(row["real_age"], "real_age"),
        apparent_mean=_parse_num(row["apparent_mean"], "apparent_mean"),
        apparent_std=_parse_num(row["apparent_std"], "apparent_std"),
        age_range=None if lo is None else (lo, hi),
        race=row["race"] or None,
        gender=row["gender"] or None,
        split=row["split"].strip(),
    )


def manifest_text(records, extra_columns=None) -> str:
    """Serialize records as manifest CSV; ``extra_columns`` maps name -> per-record values."""
    extra_columns = extra_columns or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS + list(extra_columns))
    for i, r in enumerate(records):
        row = record_to_row(r)
        w.writerow([row[c] for c in COLUMNS] + [vals[i] for vals in extra_columns.values()])
    return buf.getvalue()


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_text(manifest.records), encoding="utf-8")
    return path


def read_rows(path, required=COLUMNS):
    """Yield ``(line_number, row_dict)`` from a manifest-style CSV after checking its header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header[: len(required)] != list(required):
            raise ManifestError(f"{path}: header must start with {','.join(required)}; got {','.join(header)}")
        for row in reader:
            yield reader.line_num, row


def load_manifest(path, label_policy=None, name=None) -> DatasetManifest:
    path = Path(path)
    records, diagnostics, seen = [], [], {}
    for line, row in read_rows(path):
        if None in row or any(v is None for v in row.values()):
            diagnostics.append(f"line {line}: wrong number of fields")
            continue
        try:
            rec = row_to_record(row)
        except (ValueError, TypeError) as exc:
            diagnostics.append(f"line {line}: {exc}")
            continue
        if rec.sample_id in seen:
            diagnostics.append(f"line {line}: duplicate sample_id {rec.sample_id!r} (first on line {seen[rec.sample_id]})")
            continue
        if label_policy is not None and rec.target(label_policy) is None:
            needed = {"real": "real_age", "apparent": "apparent_mean", "range_midpoint": "age_lo/age_hi"}[label_policy]
            diagnostics.append(f"line {line}: missing {needed} required by label policy '{label_policy}'")
            continue
        seen[rec.sample_id] = line
        records.append(rec)
    if diagnostics:
        raise ManifestError(f"{path}: {len(diagnostics)} invalid row(s)", diagnostics)
    return DatasetManifest(name or path.stem, records, label_policy, path.parent)


def load_image(path, size=None, channels=1) -> np.ndarray:
    """Read an image as float32 (C, H, W) in [0, 1], bilinearly resized to ``size``."""
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), RESIZE_FILTER)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

DEFAULT_RACES = {"caucasian": 0.6, "asian": 0.25, "african american": 0.15}
DEFAULT_GENDERS = {"male": 0.5, "female": 0.5}


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic dataset.

    Each image is a bright anti-aliased shape on a dark background whose size
    encodes the real age: ``disk`` scales the filled area linearly with age,
    ``ring`` scales the radius of a fixed-width ring linearly with age.
    ``noise`` is the std (years) of the apparent-age perturbation.
    """

    count: int = 1000
    image_size: int = 32
    age_encoding: str = "disk"
    noise: float = 3.0
    seed: int = 0
    age_distribution: str = "uniform"
    sigma_range: tuple = (2.0, 6.0)
    pixel_noise: float = 0.05
    races: dict = field(default_factory=lambda: dict(DEFAULT_RACES))
    genders: dict = field(default_factory=lambda: dict(DEFAULT_GENDERS))
    # per-race multiplier on pixel noise, to make group disparities observable
    race_noise_scale: dict = field(default_factory=dict)
    splits: tuple = (0.7, 0.1, 0.2)
    max_age: int = 100

    def validate(self):
        if not isinstance(self.count, (int, np.integer)) or self.count < 1:
            raise InvalidInputError(f"count must be a positive integer, got {self.count!r}")
        if self.image_size < 8:
            raise InvalidInputError("image_size must be >= 8")
        if self.age_encoding not in ("disk", "ring"):
            raise InvalidInputError(f"unknown age_encoding {self.age_encoding!r}")
        if self.age_distribution not in ("uniform", "skewed"):
            raise InvalidInputError(f"unknown age_distribution {self.age_distribution!r}")
        if self.noise < 0 or self.pixel_noise < 0:
            raise InvalidInputError("noise levels must be nonnegative")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise InvalidInputError("sigma_range must satisfy 0 < lo <= hi")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits) or not math.isclose(sum(self.splits), 1.0):
            raise InvalidInputError("splits must be three nonnegative fractions summing to 1")
        for name, d in (("races", self.races), ("genders", self.genders)):
            if not d or any(v < 0 for v in d.values()) or sum(d.values()) <= 0:
                raise InvalidInputError(f"{name} must be a non-empty map of nonnegative weights")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise InvalidInputError("seed must be a nonnegative integer")


def render_age_image(age, spec: SyntheticSpec, rng, noise_scale=1.0) -> np.ndarray:
    """uint8 (H, W) image whose shape size encodes ``age``."""
    n = spec.image_size
    frac = float(age) / spec.max_age
    if spec.age_encoding == "disk":
        r_min, r_max = 0.08 * n, 0.42 * n
        radius = r_min + (r_max - r_min) * math.sqrt(frac)
    else:
        r_min, r_max = 0.12 * n, 0.42 * n
        radius = r_min + (r_max - r_min) * frac
    slack = max(0.0, n / 2 - radius - 1)
    cy, cx = (n - 1) / 2 + rng.uniform(-slack, slack, size=2) * 0.5
    yy, xx = np.mgrid[0:n, 0:n]
    d = np.hypot(yy - cy, xx - cx)
    cover = np.clip(radius - d + 0.5, 0.0, 1.0)
    if spec.age_encoding == "ring":
        width = 0.08 * n
        cover = cover * np.clip(d - (radius - width) + 0.5, 0.0, 1.0)
    img = 0.15 + 0.7 * cover + rng.normal(0.0, spec.pixel_noise * noise_scale, size=(n, n))
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _draw_ages(spec, rng):
    if spec.age_distribution == "uniform":
        # stratified: one jittered draw per equal-width slice of [0, max_age + 1), shuffled
        u = (np.arange(spec.count) + rng.uniform(size=spec.count)) / spec.count
        return rng.permutation(np.floor(u * (spec.max_age + 1)).astype(int))
    # mass concentrated in the 20-40 range, like real face datasets
    return np.rint(rng.beta(2.2, 4.0, size=spec.count) * spec.max_age).astype(int)


def generate_synthetic(spec: SyntheticSpec, out_dir, name="synthetic") -> DatasetManifest:
    """Write ``spec.count`` images plus ``manifest.csv`` under ``out_dir``.

    Output is byte-identical for a given spec (including seed).
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    ages = _draw_ages(spec, rng)
    race_names = list(spec.races)
    race_p = np.array([spec.races[k] for k in race_names], dtype=float)
    races = rng.choice(len(race_names), size=spec.count, p=race_p / race_p.sum())
    gender_names = list(spec.genders)
    gender_p = np.array([spec.genders[k] for k in gender_names], dtype=float)
    genders = rng.choice(len(gender_names), size=spec.count, p=gender_p / gender_p.sum())
    perturb = rng.normal(0.0, spec.noise, size=spec.count) if spec.noise > 0 else np.zeros(spec.count)
    sigmas = rng.uniform(*spec.sigma_range, size=spec.count)

    n_train = int(round(spec.splits[0] * spec.count))
    n_val = int(round(spec.splits[1] * spec.count))
    records = []
    for i in range(spec.count):
        sid = f"syn{i:06d}"
        race = race_names[races[i]]
        img = render_age_image(ages[i], spec, rng, spec.race_noise_scale.get(race, 1.0))
        rel = f"images/{sid}.png"
        Image.fromarray(img, mode="L").save(out_dir / rel, format="PNG", optimize=False)
        apparent = float(ages[i]) if spec.noise == 0 else round(float(np.clip(ages[i] + perturb[i], 0, spec.max_age)), 2)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        records.append(SampleRecord(sid, rel, real_age=float(ages[i]), apparent_mean=apparent,
                                    apparent_std=round(float(sigmas[i]), 2), race=race,
                                    gender=gender_names[genders[i]], split=split))
    manifest = DatasetManifest(name, records, "apparent", out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def with_split(record: SampleRecord, split: str) -> SampleRecord:
    return replace(record, split=split)
