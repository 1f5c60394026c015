"""Multi-site cohorts: patient-disjoint splits, size filtering, CSV I/O and synthesis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from ._rng import derive_rng

PARTITIONS = ("train", "val", "test")
TASKS = ("mortality", "plos")
HEADER_PREFIX = ("site_id", "patient_id", "admission_id", "label_mortality", "label_plos")

# (site id, admissions) for the 31 hospitals retained in the eICU cohort.
EICU_SITES = (
    ("73", 4381), ("264", 3875), ("420", 3167), ("338", 3139), ("243", 3026),
    ("458", 2723), ("167", 2680), ("300", 2678), ("443", 2666), ("188", 2591),
    ("208", 2484), ("252", 2449), ("199", 2215), ("122", 2103), ("176", 1942),
    ("281", 1783), ("411", 1747), ("413", 1730), ("449", 1613), ("394", 1509),
    ("283", 1478), ("307", 1433), ("331", 1397), ("148", 1386), ("345", 1372),
    ("417", 1369), ("165", 1336), ("248", 1334), ("416", 1330), ("110", 1305),
    ("183", 1268),
)
EICU_INCIDENCE = {"mortality": 0.073, "plos": 0.344}


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SiteCohort:
    """Admissions recorded at one site. Row ``i`` of every field is one admission."""

    site_id: str
    patient_ids: tuple
    admission_ids: tuple
    features: np.ndarray
    label_mortality: np.ndarray
    label_plos: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "site_id", str(self.site_id))
        object.__setattr__(self, "patient_ids", tuple(str(p) for p in self.patient_ids))
        object.__setattr__(self, "admission_ids", tuple(str(a) for a in self.admission_ids))
        X = _frozen(self.features, np.int8)
        if X.ndim != 2:
            raise ValueError(f"site {self.site_id}: features must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        ym = _frozen(self.label_mortality, np.int8).reshape(-1)
        yp = _frozen(self.label_plos, np.int8).reshape(-1)
        if not (len(self.patient_ids) == len(self.admission_ids) == n == ym.size == yp.size):
            raise ValueError(f"site {self.site_id}: field lengths disagree")
        for name, arr in (("features", X), ("label_mortality", ym), ("label_plos", yp)):
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError(f"site {self.site_id}: {name} must be binary")
        if len(set(self.admission_ids)) != n:
            raise ValueError(f"site {self.site_id}: duplicate admission_id")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "label_mortality", ym)
        object.__setattr__(self, "label_plos", yp)

    def __len__(self):
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SiteCohort):
            return NotImplemented
        return (
            self.site_id == other.site_id
            and self.patient_ids == other.patient_ids
            and self.admission_ids == other.admission_ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.label_mortality, other.label_mortality)
            and np.array_equal(self.label_plos, other.label_plos)
        )

    __hash__ = None

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def labels(self, task: str) -> np.ndarray:
        if task == "mortality":
            return self.label_mortality
        if task == "plos":
            return self.label_plos
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")

    def subset(self, admission_ids: Iterable[str]) -> "SiteCohort":
        wanted = set(admission_ids)
        idx = [i for i, a in enumerate(self.admission_ids) if a in wanted]
        return self.take(idx)

    def take(self, idx: Sequence[int]) -> "SiteCohort":
        idx = np.asarray(idx, dtype=np.intp)
        return SiteCohort(
            self.site_id,
            tuple(self.patient_ids[i] for i in idx),
            tuple(self.admission_ids[i] for i in idx),
            self.features[idx].reshape(len(idx), self.n_features),
            self.label_mortality[idx],
            self.label_plos[idx],
        )


@dataclass(frozen=True)
class SplitAssignment:
    """Admission ids per partition for one site."""

    site_id: str
    train: frozenset
    val: frozenset
    test: frozenset

    def __getitem__(self, partition: str) -> frozenset:
        if partition not in PARTITIONS:
            raise KeyError(partition)
        return getattr(self, partition)


def split_by_patient(cohort: SiteCohort, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Shuffle patients and cut by cumulative patient-count fractions.

    Every admission follows its patient, so no patient straddles two
    partitions.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    if len(cohort) == 0:
        raise ValueError(f"site {cohort.site_id}: cannot split an empty cohort")
    patients = sorted(set(cohort.patient_ids))
    rng = derive_rng(seed, "split", cohort.site_id)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n = len(order)
    cut1 = round(fractions[0] * n)
    cut2 = round((fractions[0] + fractions[1]) * n)
    where = {}
    for i, patient in enumerate(order):
        where[patient] = 0 if i < cut1 else (1 if i < cut2 else 2)
    parts = ([], [], [])
    for patient, admission in zip(cohort.patient_ids, cohort.admission_ids):
        parts[where[patient]].append(admission)
    return SplitAssignment(cohort.site_id, *(frozenset(p) for p in parts))


def filter_min_train_size(cohorts: Sequence[SiteCohort], assignments, min_train: int = 1000) -> list:
    """Sites whose training partition holds strictly more than ``min_train`` admissions."""
    by_site = _assignment_map(assignments)
    kept = []
    for cohort in cohorts:
        if cohort.site_id not in by_site:
            raise ValueError(f"no split assignment for site {cohort.site_id}")
        if len(by_site[cohort.site_id].train) > min_train:
            kept.append(cohort)
    return kept


def _assignment_map(assignments) -> dict:
    if isinstance(assignments, dict):
        return assignments
    return {a.site_id: a for a in assignments}


@dataclass(frozen=True)
class SiteData:
    """A site's cohort already cut into its train/val/test partitions."""

    site_id: str
    train: SiteCohort
    val: SiteCohort
    test: SiteCohort
    n_total: int


def partition(cohort: SiteCohort, assignment: SplitAssignment) -> SiteData:
    return SiteData(
        cohort.site_id,
        cohort.subset(assignment.train),
        cohort.subset(assignment.val),
        cohort.subset(assignment.test),
        len(cohort),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic multi-site cohort.

    Ground truth per task is a logistic model whose coefficients are shared
    across sites up to a Normal(0, site_effect^2) perturbation; each site's
    intercept is then bisected so its expected prevalence hits the target.
    """

    site_sizes: tuple = EICU_SITES
    n_features: int = 50
    incidence_mortality: float = EICU_INCIDENCE["mortality"]
    incidence_plos: float = EICU_INCIDENCE["plos"]
    site_effect: float = 0.3
    coef_scale: float = 1.0
    feature_rate_range: tuple = (0.005, 0.1)
    mean_admissions_per_patient: float = 1.2
    seed: int = 0

    def __post_init__(self):
        sizes = tuple((str(s), int(n)) for s, n in self.site_sizes)
        object.__setattr__(self, "site_sizes", sizes)
        if not sizes:
            raise ValueError("site_sizes must name at least one site")
        if any(n < 1 for _, n in sizes):
            raise ValueError("site admission counts must be positive")
        if len({s for s, _ in sizes}) != len(sizes):
            raise ValueError("site ids must be unique")
        if self.n_features < 1:
            raise ValueError("n_features must be positive")
        for name in ("incidence_mortality", "incidence_plos"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.site_effect < 0:
            raise ValueError("site_effect must be nonnegative")
        if self.mean_admissions_per_patient < 1:
            raise ValueError("mean_admissions_per_patient must be at least 1")
        lo, hi = self.feature_rate_range
        if not 0 < lo <= hi < 1:
            raise ValueError("feature_rate_range must satisfy 0 < low <= high < 1")

    @classmethod
    def uniform(cls, n_sites: int, admissions: int, **kwargs) -> "SyntheticSpec":
        sizes = tuple((f"site{i:02d}", admissions) for i in range(n_sites))
        return cls(site_sizes=sizes, **kwargs)


def calibrate_intercept(margins: np.ndarray, target: float, tol: float = 0.005) -> float:
    """Bisect an intercept so that ``mean(sigmoid(margins + b))`` is within ``tol`` of target."""
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        prevalence = float(np.mean(expit(margins + mid)))
        if abs(prevalence - target) <= tol:
            return mid
        if prevalence < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _global_truth(spec: SyntheticSpec):
    rng = derive_rng(spec.seed, "synthetic", "global")
    rates = rng.uniform(*spec.feature_rate_range, size=spec.n_features)
    coef = {task: rng.normal(0.0, spec.coef_scale, size=spec.n_features) for task in TASKS}
    return rates, coef


def site_coefficients(spec: SyntheticSpec, site_id: str) -> dict:
    """Ground-truth slope vector per task for one site (intercepts are calibrated later)."""
    _, global_coef = _global_truth(spec)
    rng = derive_rng(spec.seed, "site-effect", str(site_id))
    return {
        task: global_coef[task] + rng.normal(0.0, spec.site_effect, size=spec.n_features)
        for task in TASKS
    }


def generate_synthetic(spec: SyntheticSpec) -> list:
    d = spec.n_features
    rates, _ = _global_truth(spec)
    targets = {"mortality": spec.incidence_mortality, "plos": spec.incidence_plos}
    cohorts = []
    for site_id, n in spec.site_sizes:
        site_rng = derive_rng(spec.seed, "synthetic", site_id)
        patients = []
        extra = spec.mean_admissions_per_patient - 1.0
        n_patients = 0
        while len(patients) < n:
            k = 1 + int(site_rng.poisson(extra)) if extra > 0 else 1
            patients.extend([f"{site_id}-p{n_patients:05d}"] * k)
            n_patients += 1
        patients = patients[:n]
        X = (site_rng.random((n, d)) < rates).astype(np.int8)
        coefs = site_coefficients(spec, site_id)
        labels = {}
        for task in TASKS:
            margins = X @ coefs[task]
            b = calibrate_intercept(margins, targets[task])
            labels[task] = (site_rng.random(n) < expit(margins + b)).astype(np.int8)
        cohorts.append(SiteCohort(
            site_id,
            tuple(patients),
            tuple(f"{site_id}-a{i:05d}" for i in range(n)),
            X,
            labels["mortality"],
            labels["plos"],
        ))
    return cohorts


def header(n_features: int) -> list:
    return list(HEADER_PREFIX) + [f"f{j}" for j in range(n_features)]


def write_csv(cohorts: Sequence[SiteCohort], path) -> Path:
    cohorts = list(cohorts)
    if not cohorts:
        raise ValueError("nothing to write")
    d = cohorts[0].n_features
    if any(c.n_features != d for c in cohorts):
        raise ValueError("all sites must share one feature width")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header(d))
        for c in cohorts:
            for i in range(len(c)):
                writer.writerow(
                    [c.site_id, c.patient_ids[i], c.admission_ids[i],
                     int(c.label_mortality[i]), int(c.label_plos[i])]
                    + c.features[i].tolist()
                )
    return path


class CohortFormatError(ValueError):
    """Raised for malformed cohort CSV input; carries the offending line number."""

    def __init__(self, path, line: int, message: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {message}")


def _binary(value: str, path, line: int, column: str) -> int:
    if value not in ("0", "1"):
        raise CohortFormatError(path, line, f"column {column!r} must be 0 or 1, got {value!r}")
    return int(value)


def load_csv(path, expected_width: int | None = None) -> list:
    """Read cohorts from the flat CSV schema, grouping rows by site in file order."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise CohortFormatError(path, 1, "missing header row") from None
        d = len(head) - len(HEADER_PREFIX)
        if d < 1 or head != header(d):
            raise CohortFormatError(
                path, 1, f"header must be {','.join(HEADER_PREFIX)},f0..f<d-1>"
            )
        if expected_width is not None and d != expected_width:
            raise CohortFormatError(path, 1, f"expected {expected_width} features, header has {d}")
        rows: dict = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(head):
                raise CohortFormatError(path, line, f"expected {len(head)} fields, got {len(row)}")
            site, patient, admission = row[0], row[1], row[2]
            if not site or not patient or not admission:
                raise CohortFormatError(path, line, "site_id, patient_id and admission_id must be non-empty")
            entry = rows.setdefault(site, {"p": [], "a": [], "x": [], "m": [], "l": [], "seen": set()})
            if admission in entry["seen"]:
                raise CohortFormatError(path, line, f"duplicate admission_id {admission!r} in site {site!r}")
            entry["seen"].add(admission)
            entry["p"].append(patient)
            entry["a"].append(admission)
            entry["m"].append(_binary(row[3], path, line, "label_mortality"))
            entry["l"].append(_binary(row[4], path, line, "label_plos"))
            entry["x"].append([_binary(v, path, line, head[5 + j]) for j, v in enumerate(row[5:])])
    return [
        SiteCohort(site, tuple(e["p"]), tuple(e["a"]),
                   np.array(e["x"], dtype=np.int8).reshape(len(e["a"]), d),
                   e["m"], e["l"])
        for site, e in rows.items()
    ]
