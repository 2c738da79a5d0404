"""Synthetic cohorts: phantom volumes plus tabular variables with planted
GCS/age decision boundaries.

Generative model for subject ``i`` (own RNG stream derived from ``(seed, i)``):

* latent severity ``s ~ U(0, 1)``
* ``gcs = clip(round(15 - 12 s + noise * GCS_JITTER * e), 3, 15)``, ``e ~ N(0, 1)``
* ``age`` integer, concentrated on both sides of the 80-year boundary:
  ``80 + floor(|N(0, OLD_SD)|)`` with prob ``OLD_FRACTION`` else
  ``79 - floor(|N(0, YOUNG_SD)|)``, clipped to [30, 100]
* ``z = A*s + B*age_bin + C*gcs_severe - D``; prognosis is poor with
  probability ``sigmoid(z / noise)``, or deterministically ``z > 0`` at
  ``noise == 0``
* the volume holds a bright hemorrhage blob whose radius and intensity grow
  with ``s`` and a dark central ventricle whose size grows with age, so the
  image alone carries both auxiliary signals.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoding import binarize_age, ordinal_class_gcs
from .model import Targets
from .tabular import TabularRecord

# label-generating constants, see module docstring
A_SEVERITY = 1.0
B_AGE = 3.2
C_GCS = 3.4
D_OFFSET = 2.0
GCS_JITTER = 1.0
OLD_FRACTION = 0.33
YOUNG_SD = 5.0
OLD_SD = 4.0
AGE_RANGE = (30, 100)
# ventricle size ramps from its minimum at 60 to its maximum at 95 years
ATROPHY_AGES = (70.0, 90.0)

MANIFEST_VERSION = 1


class CohortError(ValueError):
    pass


class IntegrityError(IOError):
    pass


@dataclass
class PhantomSpec:
    extents: tuple = (8, 32, 32)
    blob_count: int = 1
    radius_range: tuple = (2.0, 6.0)
    intensity_range: tuple = (0.6, 1.0)
    depth_scale: float = 0.35
    tissue_intensity: float = 0.3
    ventricle_radius_range: tuple = (1.5, 5.0)
    ventricle_intensity: float = 0.05
    intraventricular: bool = False
    noise_std: float = 0.02

    def __post_init__(self):
        self.extents = tuple(int(v) for v in self.extents)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        self.ventricle_radius_range = tuple(float(v) for v in self.ventricle_radius_range)
        lo, hi = self.intensity_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("intensity range must lie in [0, 1]")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError("radius range must be positive and ordered")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def for_extents(cls, extents, **overrides):
        """Default geometry with in-plane lengths scaled to ``extents``
        (the defaults are sized for 32 x 32 slices)."""
        scale = min(int(v) for v in extents[1:]) / 32.0
        base = cls()
        geometry = {
            "extents": tuple(extents),
            "radius_range": tuple(r * scale for r in base.radius_range),
            "ventricle_radius_range": tuple(r * scale for r in base.ventricle_radius_range),
        }
        return cls(**{**geometry, **overrides})


def _ellipsoid(shape, center, radii):
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def blob_radii(spec: PhantomSpec, severity: float):
    r = spec.radius_range[0] + severity * (spec.radius_range[1] - spec.radius_range[0])
    return (max(r * spec.depth_scale, 0.5), r, r)


def generate_phantom(spec: PhantomSpec, severity: float, rng: np.random.Generator, atrophy: float = 0.0) -> np.ndarray:
    """One (D, H, W) volume in [0, 1].

    Blob radius and intensity increase linearly with ``severity``; the
    central ventricle radius increases with ``atrophy`` (both in [0, 1]).
    Blobs sit in one hemisphere so they never cover the ventricle.
    """
    if not 0 <= severity <= 1 or not 0 <= atrophy <= 1:
        raise ValueError("severity and atrophy must be in [0, 1]")
    d, h, w = spec.extents
    rz, ry, _ = blob_radii(spec, 1.0)
    midline = (w - 1) / 2 + 0.6 * spec.ventricle_radius_range[1]
    if 2 * ry + 1 > h or midline + 2 * ry > w - 1 or 2 * rz + 1 > d:
        raise CohortError(f"blob radius range {spec.radius_range} does not fit beside the ventricle in {spec.extents}")
    vol = np.zeros(spec.extents)
    center = ((d - 1) / 2, (h - 1) / 2, (w - 1) / 2)
    tissue = _ellipsoid(spec.extents, center, (d / 2 + 0.5, h / 2 - 0.5, w / 2 - 0.5))
    vol[tissue] = spec.tissue_intensity
    vr = spec.ventricle_radius_range[0] + atrophy * (spec.ventricle_radius_range[1] - spec.ventricle_radius_range[0])
    vol[_ellipsoid(spec.extents, center, (max(vr * spec.depth_scale, 0.5), vr, vr * 0.6))] = spec.ventricle_intensity

    radii = blob_radii(spec, severity)
    intensity = spec.intensity_range[0] + severity * (spec.intensity_range[1] - spec.intensity_range[0])
    for _ in range(spec.blob_count):
        # lateral placement keeps the blob clear of the midline ventricle
        cz, cy = (rng.uniform(r, n - 1 - r) for r, n in zip(radii[:2], (d, h)))
        offset = rng.uniform(midline + radii[2], w - 1 - radii[2]) - (w - 1) / 2
        cx = (w - 1) / 2 + (offset if rng.uniform() < 0.5 else -offset)
        vol[_ellipsoid(spec.extents, (cz, cy, cx), radii)] = intensity
    if spec.intraventricular:
        vol[_ellipsoid(spec.extents, center, (0.6, 1.5, 1.5))] = intensity
    if spec.noise_std > 0:
        vol = vol + rng.normal(0.0, spec.noise_std, size=vol.shape)
    return np.clip(vol, 0.0, 1.0)


def blob_volume(spec: PhantomSpec, severity: float) -> int:
    """Voxel count of one blob at ``severity`` when centered in the volume."""
    center = tuple((n - 1) / 2 for n in spec.extents)
    return int(_ellipsoid(spec.extents, center, blob_radii(spec, severity)).sum())


@dataclass
class SyntheticCohort:
    volumes: np.ndarray  # (n, D, H, W)
    records: list
    gcs_class: np.ndarray
    age_bin: np.ndarray
    prognosis: np.ndarray
    severity: np.ndarray
    seed: int = 0
    noise: float = 1.0
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    boundaries: dict = field(default_factory=lambda: {"gcs": 8, "age": 80})

    def __len__(self):
        return len(self.records)

    @property
    def gcs(self) -> np.ndarray:
        return np.array([r.gcs for r in self.records])

    @property
    def age(self) -> np.ndarray:
        return np.array([r.age for r in self.records], dtype=float)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    def targets(self) -> Targets:
        return Targets(self.prognosis.copy(), self.gcs_class.copy(), self.age_bin.copy())

    def tabular(self):
        return np.column_stack([self.gcs.astype(float), self.age]), self.prognosis.copy()


def _subject(seed, i, spec, noise, boundaries):
    rng = np.random.default_rng([seed, i])
    s = rng.uniform()
    gcs = int(np.clip(np.rint(15 - 12 * s + noise * GCS_JITTER * rng.normal()), 3, 15))
    cut = boundaries["age"]
    if rng.uniform() < OLD_FRACTION:
        age = int(min(cut + math.floor(abs(rng.normal(0.0, OLD_SD))), AGE_RANGE[1]))
    else:
        age = int(max(cut - 1 - math.floor(abs(rng.normal(0.0, YOUNG_SD))), AGE_RANGE[0]))
    severe = int(gcs <= boundaries["gcs"])
    old = int(age >= boundaries["age"])
    z = A_SEVERITY * s + B_AGE * old + C_GCS * severe - D_OFFSET
    if noise == 0:
        label = int(z > 0)
    else:
        label = int(rng.uniform() < 1.0 / (1.0 + math.exp(-z / noise)))
    atrophy = min(max((age - ATROPHY_AGES[0]) / (ATROPHY_AGES[1] - ATROPHY_AGES[0]), 0.0), 1.0)
    vol = generate_phantom(spec, s, rng, atrophy=atrophy)
    return s, gcs, age, label, vol


def generate_cohort(
    n: int,
    extents=(8, 32, 32),
    seed: int = 0,
    boundaries: Optional[dict] = None,
    noise: float = 1.0,
    spec: Optional[PhantomSpec] = None,
    max_retries: int = 10,
) -> SyntheticCohort:
    if n < 20:
        raise CohortError(f"cohort size must be at least 20, got {n}")
    if noise < 0:
        raise CohortError("noise level must be non-negative")
    boundaries = dict(boundaries or {"gcs": 8, "age": 80})
    spec = spec or PhantomSpec.for_extents(extents)
    if tuple(spec.extents) != tuple(extents):
        spec = PhantomSpec(**{**spec.to_dict(), "extents": tuple(extents)})
    for attempt in range(max_retries):
        derived = seed if attempt == 0 else int(np.random.default_rng([seed, 10**6 + attempt]).integers(2**31))
        rows = [_subject(derived, i, spec, noise, boundaries) for i in range(n)]
        labels = np.array([r[3] for r in rows])
        if 0 < labels.sum() < n:
            break
    else:
        raise CohortError(f"could not draw a cohort with both classes in {max_retries} attempts")
    records = [TabularRecord(gcs=g, age=float(a), label=l, id=f"s{i:04d}") for i, (_, g, a, l, _) in enumerate(rows)]
    return SyntheticCohort(
        volumes=np.stack([r[4] for r in rows]),
        records=records,
        gcs_class=np.array([ordinal_class_gcs(r.gcs) for r in records]),
        age_bin=np.array([binarize_age(r.age) for r in records]),
        prognosis=labels,
        severity=np.array([r[0] for r in rows]),
        seed=seed,
        noise=noise,
        spec=spec,
        boundaries=boundaries,
    )


def permuted(cohort: SyntheticCohort, seed: int) -> SyntheticCohort:
    """Copy whose volumes are shuffled against all labels (control experiment)."""
    perm = np.random.default_rng(seed).permutation(len(cohort))
    return SyntheticCohort(
        cohort.volumes[perm], cohort.records, cohort.gcs_class, cohort.age_bin, cohort.prognosis,
        cohort.severity, cohort.seed, cohort.noise, cohort.spec, cohort.boundaries,
    )


# export / load


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export_cohort(cohort: SyntheticCohort, directory) -> Path:
    """Write volumes, tabular CSV and a manifest; returns the manifest path."""
    directory = Path(directory)
    try:
        (directory / "volumes").mkdir(parents=True, exist_ok=True)
        files = {}
        for rec, vol in zip(cohort.records, cohort.volumes):
            raw = directory / "volumes" / f"{rec.id}.f64"
            raw.write_bytes(np.ascontiguousarray(vol, dtype="<f8").tobytes())
            side = raw.with_suffix(".json")
            side.write_text(json.dumps({"shape": list(vol.shape), "dtype": "float64", "order": "C", "endian": "little"}) + "\n")
            files[str(raw.relative_to(directory))] = _sha256(raw)
            files[str(side.relative_to(directory))] = _sha256(side)
        table = directory / "cohort.csv"
        with table.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "gcs", "age", "gcs_class", "age_bin", "severity", "label"])
            for i, rec in enumerate(cohort.records):
                w.writerow([rec.id, rec.gcs, repr(rec.age), int(cohort.gcs_class[i]), int(cohort.age_bin[i]),
                            repr(float(cohort.severity[i])), rec.label])
        files["cohort.csv"] = _sha256(table)
        manifest = {
            "version": MANIFEST_VERSION,
            "seed": cohort.seed,
            "n": len(cohort),
            "noise": cohort.noise,
            "boundaries": cohort.boundaries,
            "spec": cohort.spec.to_dict(),
            "constants": {"a": A_SEVERITY, "b": B_AGE, "c": C_GCS, "d": D_OFFSET,
                          "gcs_jitter": GCS_JITTER, "old_fraction": OLD_FRACTION,
                          "young_sd": YOUNG_SD, "old_sd": OLD_SD},
            "files": dict(sorted(files.items())),
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write cohort to {exc.filename or directory}: {exc.strerror}") from exc
    return path


def load_cohort(directory, verify: bool = True) -> SyntheticCohort:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise IntegrityError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")
    if verify:
        for rel, digest in manifest["files"].items():
            p = directory / rel
            if not p.is_file():
                raise IntegrityError(f"missing file {p}")
            if _sha256(p) != digest:
                raise IntegrityError(f"checksum mismatch for {p}")
    records, gcs_class, age_bin, severity = [], [], [], []
    with (directory / "cohort.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(TabularRecord(gcs=int(row["gcs"]), age=float(row["age"]), label=int(row["label"]), id=row["id"]))
            gcs_class.append(int(row["gcs_class"]))
            age_bin.append(int(row["age_bin"]))
            severity.append(float(row["severity"]))
    vols = []
    for rec in records:
        side = json.loads((directory / "volumes" / f"{rec.id}.json").read_text())
        raw = (directory / "volumes" / f"{rec.id}.f64").read_bytes()
        vols.append(np.frombuffer(raw, dtype="<f8").reshape(side["shape"]).astype(np.float64))
    spec = PhantomSpec(**manifest["spec"])
    return SyntheticCohort(
        volumes=np.stack(vols),
        records=records,
        gcs_class=np.array(gcs_class),
        age_bin=np.array(age_bin),
        prognosis=np.array([r.label for r in records]),
        severity=np.array(severity),
        seed=manifest["seed"],
        noise=manifest["noise"],
        spec=spec,
        boundaries=manifest["boundaries"],
    )
