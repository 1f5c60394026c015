"""Experiment runner for the five training conditions and report emission.

A run loads or synthesizes a multi-site cohort, splits every site by
patient, drops small sites, grid-searches the condition's hyperparameters
on validation AUC, and evaluates the chosen models on each site's test set
with DeLong confidence intervals. Non-local conditions are additionally
compared against the local models trained under the same seed.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as cohort_data
from . import metrics
from .estimators import FederatedRiskClassifier, RiskClassifier
from .fed import SiteArrays, select_local_dp_hparams
from .models import ModelSpec, forward
from .privacy import AccountantParams, epsilon_for_training

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

CONDITIONS = ("local", "central", "central_dp", "federated", "federated_dp")
DP_CONDITIONS = ("central_dp", "federated_dp")
DP_GRID = (0.1, 1.0, 10.0)
DP_ONLY_KEYS = ("noise_grid", "clip_grid", "fed_dp_mode", "fed_dp_select_epochs", "fed_dp_noise")


@dataclass(frozen=True)
class ExperimentConfig:
    condition: str
    tasks: tuple = cohort_data.TASKS
    # data source: a cohort CSV, or the synthetic generator below
    data_csv: Optional[str] = None
    n_sites: int = 5
    site_size: int = 2000
    eicu_sites: bool = False
    n_features: int = 50
    site_effect: float = 0.3
    coef_scale: float = 1.0
    incidence_mortality: float = cohort_data.EICU_INCIDENCE["mortality"]
    incidence_plos: float = cohort_data.EICU_INCIDENCE["plos"]
    mean_admissions_per_patient: float = 1.2
    feature_rate_range: tuple = (0.005, 0.1)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    min_train: int = 1000
    # model and optimizer grid
    model_kinds: tuple = ("logistic", "mlp")
    hidden_sizes: tuple = (32,)
    lr_grid: tuple = (1e-3, 1e-2, 1e-1)
    batch_grid: tuple = (32, 64, 128)
    epochs: int = 10
    dp_epochs: int = 25
    rounds: int = 10
    local_epochs: int = 1
    averaging: str = "uniform"
    # DP settings, meaningful only for DP conditions
    noise_grid: Optional[tuple] = None
    clip_grid: Optional[tuple] = None
    fed_dp_mode: Optional[str] = None
    fed_dp_select_epochs: Optional[int] = None
    fed_dp_noise: Optional[float] = None
    delta: float = 1e-5
    seed: int = 0
    out_dir: str = "results"
    n_jobs: int = 1

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        is_dp = self.condition in DP_CONDITIONS
        for key in DP_ONLY_KEYS:
            if not is_dp and getattr(self, key) is not None:
                raise ValueError(f"config key {key!r} only applies to DP conditions {DP_CONDITIONS}")
        if is_dp:
            defaults = {"noise_grid": DP_GRID, "clip_grid": DP_GRID, "fed_dp_mode": "local_select",
                        "fed_dp_select_epochs": 10, "fed_dp_noise": 1.0}
            for key, value in defaults.items():
                if getattr(self, key) is None:
                    object.__setattr__(self, key, value)
            if self.fed_dp_mode not in ("local_select", "global"):
                raise ValueError(f"fed_dp_mode must be 'local_select' or 'global', got {self.fed_dp_mode!r}")
        for key in ("tasks", "split_fractions", "model_kinds", "hidden_sizes", "lr_grid",
                    "batch_grid", "noise_grid", "clip_grid"):
            value = getattr(self, key)
            if value is not None:
                if isinstance(value, (str, bytes)) or not hasattr(value, "__iter__"):
                    raise ValueError(f"config key {key!r} must be a list")
                object.__setattr__(self, key, tuple(value))
                if not getattr(self, key):
                    raise ValueError(f"config key {key!r} must not be empty")
        for task in self.tasks:
            if task not in cohort_data.TASKS:
                raise ValueError(f"unknown task {task!r}; expected one of {cohort_data.TASKS}")
        for kind in self.model_kinds:
            if kind not in ("logistic", "mlp"):
                raise ValueError(f"unknown model kind {kind!r}")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        for key in ("epochs", "dp_epochs", "rounds", "local_epochs", "n_jobs"):
            if getattr(self, key) < 1:
                raise ValueError(f"config key {key!r} must be at least 1")

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if "condition" not in mapping and "condition" not in overrides:
            raise ValueError("config must set 'condition'")
        values = dict(mapping)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            mapping = tomllib.load(fh)
        nested = [k for k, v in mapping.items() if isinstance(v, dict)]
        if nested:
            raise ValueError(f"config must be flat; found tables {nested}")
        return cls.from_mapping(mapping, **overrides)

    def synthetic_spec(self) -> cohort_data.SyntheticSpec:
        if self.eicu_sites:
            sizes = cohort_data.EICU_SITES
        else:
            sizes = tuple((f"site{i:02d}", self.site_size) for i in range(self.n_sites))
        return cohort_data.SyntheticSpec(
            site_sizes=sizes,
            n_features=self.n_features,
            incidence_mortality=self.incidence_mortality,
            incidence_plos=self.incidence_plos,
            site_effect=self.site_effect,
            coef_scale=self.coef_scale,
            mean_admissions_per_patient=self.mean_admissions_per_patient,
            feature_rate_range=tuple(self.feature_rate_range),
            seed=self.seed,
        )


@dataclass(frozen=True)
class Candidate:
    kind: str
    hidden_dim: Optional[int]
    lr: float
    batch_size: int
    noise_multiplier: Optional[float] = None
    clip_norm: Optional[float] = None

    @property
    def model_label(self) -> str:
        return "logistic" if self.kind == "logistic" else f"mlp{self.hidden_dim}"


def candidate_grid(config: ExperimentConfig, with_dp: bool = False) -> list:
    """Candidates in tie-break order: smallest model, then lr, then batch (then z, S)."""
    models = []
    for kind in config.model_kinds:
        if kind == "logistic":
            models.append(("logistic", None))
        else:
            models.extend(("mlp", int(h)) for h in config.hidden_sizes)
    models = sorted(set(models), key=lambda m: (m[0] != "logistic", m[1] or 0))
    dp = [(None, None)]
    if with_dp:
        dp = list(itertools.product(sorted(config.noise_grid), sorted(config.clip_grid)))
    return [
        Candidate(kind, hidden, float(lr), int(batch),
                  None if z is None else float(z), None if s is None else float(s))
        for (kind, hidden), lr, batch, (z, s) in itertools.product(
            models, sorted(config.lr_grid), sorted(config.batch_grid), dp)
    ]


@dataclass
class GridResult:
    best_index: int
    best: object
    scores: list
    payload: object


def grid_search(candidates: Sequence, evaluate: Callable) -> GridResult:
    """Evaluate every candidate and keep the highest score; ties go to the earliest.

    ``evaluate(candidate)`` returns ``(score, payload)``.
    """
    if not candidates:
        raise ValueError("grid search needs at least one candidate")
    scores, best_index, best_payload = [], None, None
    for i, cand in enumerate(candidates):
        score, payload = evaluate(cand)
        scores.append(score)
        if best_index is None or score > scores[best_index]:
            best_index, best_payload = i, payload
    return GridResult(best_index, candidates[best_index], scores, best_payload)


def accountant_query(q: float, z: float, steps: int, delta: float = 1e-5) -> float:
    return epsilon_for_training(AccountantParams(q, z, steps, delta)).epsilon


RESULT_FIELDS = (
    "site_id", "n", "task", "condition", "auc", "ci_low", "ci_high",
    "rel_auc", "rel_ci_low", "rel_ci_high", "significant",
    "epsilon", "epsilon_at_best", "q", "noise_multiplier", "clip_norm", "steps", "delta",
    "model", "lr", "batch_size", "best_step",
)
TRAJECTORY_FIELDS = ("epoch_or_round", "epsilon", "val_auc", "site_id", "task")


@dataclass
class ReportRow:
    site_id: str
    n: int
    task: str
    condition: str
    auc: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    rel_auc: Optional[float] = None
    rel_ci_low: Optional[float] = None
    rel_ci_high: Optional[float] = None
    significant: Optional[bool] = None
    epsilon: Optional[float] = None
    epsilon_at_best: Optional[float] = None
    q: Optional[float] = None
    noise_multiplier: Optional[float] = None
    clip_norm: Optional[float] = None
    steps: Optional[int] = None
    delta: Optional[float] = None
    model: str = ""
    lr: Optional[float] = None
    batch_size: Optional[int] = None
    best_step: Optional[int] = None


_INT_FIELDS = {"n", "steps", "batch_size", "best_step"}
_FLOAT_FIELDS = set(RESULT_FIELDS) - _INT_FIELDS - {"site_id", "task", "condition", "significant", "model"}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass
class SiteOutcome:
    """Test-set scores of the chosen model at one site, plus reporting extras."""

    site_id: str
    n: int
    labels: np.ndarray
    scores: np.ndarray
    extras: dict = field(default_factory=dict)


@dataclass
class ConditionResult:
    rows: list
    trajectories: list
    selected: dict


def prepare_sites(config: ExperimentConfig) -> list:
    """Load or synthesize cohorts, split by patient, drop small sites."""
    if config.data_csv:
        cohorts = cohort_data.load_csv(config.data_csv)
    else:
        cohorts = cohort_data.generate_synthetic(config.synthetic_spec())
    assignments = {c.site_id: cohort_data.split_by_patient(c, config.split_fractions, config.seed)
                   for c in cohorts}
    kept = cohort_data.filter_min_train_size(cohorts, assignments, config.min_train)
    dropped = len(cohorts) - len(kept)
    if dropped:
        log.info("dropped %d site(s) with <= %d training admissions", dropped, config.min_train)
    if not kept:
        raise ValueError(f"no site has more than {config.min_train} training admissions")
    return [cohort_data.partition(c, assignments[c.site_id]) for c in kept]


def _test_xy(site, task):
    return np.asarray(site.test.features, dtype=np.float64), site.test.labels(task).astype(np.float64)


def _fit_single(cand: Candidate, config, X, y, Xv, yv, site_id, epochs):
    return RiskClassifier(
        model=cand.kind, hidden_dim=cand.hidden_dim, learning_rate=cand.lr,
        batch_size=cand.batch_size, max_epochs=epochs, clip_norm=cand.clip_norm,
        noise_multiplier=cand.noise_multiplier, delta=config.delta,
        random_state=config.seed, site_id=site_id,
    ).fit(X, y, Xv, yv)


def _run_local(config, sites, task):
    outcomes, traj, selected = [], [], {}
    for site in sites:
        arr = SiteArrays.from_site(site, task)

        def evaluate(cand, arr=arr):
            est = _fit_single(cand, config, arr.X_train, arr.y_train, arr.X_val, arr.y_val,
                              arr.site_id, config.epochs)
            return est.best_val_auc_, est

        result = grid_search(candidate_grid(config), evaluate)
        est = result.payload
        X_test, y_test = _test_xy(site, task)
        outcomes.append(SiteOutcome(site.site_id, site.n_total, y_test, est.predict_proba(X_test)[:, 1],
                                    _candidate_extras(result.best, est.best_epoch_)))
        traj.extend((h["epoch"], None, h["val_auc"], site.site_id, task) for h in est.history_)
        selected[site.site_id] = result.best
    return outcomes, traj, selected


def _pooled(sites, task):
    arrays = [SiteArrays.from_site(s, task) for s in sites]
    return (np.vstack([a.X_train for a in arrays]), np.concatenate([a.y_train for a in arrays]),
            np.vstack([a.X_val for a in arrays]), np.concatenate([a.y_val for a in arrays]))


def _run_central(config, sites, task, dp: bool):
    X, y, Xv, yv = _pooled(sites, task)
    epochs = config.dp_epochs if dp else config.epochs

    def evaluate(cand):
        est = _fit_single(cand, config, X, y, Xv, yv, "central", epochs)
        return est.best_val_auc_, est

    result = grid_search(candidate_grid(config, with_dp=dp), evaluate)
    est, cand = result.payload, result.best
    extras = _candidate_extras(cand, est.best_epoch_)
    if dp:
        extras.update(epsilon=est.epsilon_, q=est.sampling_ratio_, steps=est.steps_, delta=config.delta,
                      epsilon_at_best=est.history_[est.best_epoch_ - 1]["epsilon"])
    outcomes = []
    for site in sites:
        X_test, y_test = _test_xy(site, task)
        outcomes.append(SiteOutcome(site.site_id, site.n_total, y_test,
                                    est.predict_proba(X_test)[:, 1], dict(extras)))
    traj = [(h["epoch"], h["epsilon"], h["val_auc"], "central", task) for h in est.history_]
    return outcomes, traj, {"central": cand}


def _fed_dp_configs(config, arrays, cand, spec):
    if config.fed_dp_mode == "global":
        return {a.site_id: cand.clip_norm for a in arrays}, cand.noise_multiplier
    clips = {}
    for a in arrays:
        chosen = select_local_dp_hparams(
            a, spec, lr=cand.lr, batch_size=cand.batch_size, seed=config.seed,
            epochs=config.fed_dp_select_epochs, noise_multiplier=config.fed_dp_noise,
            delta=config.delta,
        )
        clips[a.site_id] = chosen.clip_norm
    return clips, config.fed_dp_noise


def _run_federated(config, sites, task, dp: bool):
    arrays = [SiteArrays.from_site(s, task) for s in sites]
    d = arrays[0].X_train.shape[1]
    global_dp = dp and config.fed_dp_mode == "global"

    def evaluate(cand):
        clip, noise = None, None
        if dp:
            spec = ModelSpec(cand.kind, d, cand.hidden_dim)
            clip, noise = _fed_dp_configs(config, arrays, cand, spec)
        est = FederatedRiskClassifier(
            model=cand.kind, hidden_dim=cand.hidden_dim, learning_rate=cand.lr,
            batch_size=cand.batch_size, rounds=config.rounds, local_epochs=config.local_epochs,
            averaging=config.averaging, clip_norm=clip, noise_multiplier=noise,
            delta=config.delta, random_state=config.seed, n_jobs=config.n_jobs,
        ).fit_sites(arrays)
        return est.mean_best_val_auc_, est

    result = grid_search(candidate_grid(config, with_dp=global_dp), evaluate)
    est, cand = result.payload, result.best
    outcomes = []
    for site in sites:
        snap = est.snapshots_[site.site_id]
        X_test, y_test = _test_xy(site, task)
        extras = _candidate_extras(cand, snap.round + 1)
        if dp:
            ledger = est.ledgers_[site.site_id]
            extras.update(epsilon=ledger.epsilon, epsilon_at_best=snap.epsilon_at_best, q=ledger.q,
                          noise_multiplier=ledger.z, clip_norm=est.dp_configs_[site.site_id].clip_norm,
                          steps=ledger.steps, delta=ledger.delta)
        outcomes.append(SiteOutcome(site.site_id, site.n_total, y_test,
                                    forward(est.spec_, snap.params, X_test), extras))
    traj = [(e.round + 1, e.epsilon, e.val_auc, e.site_id, task) for e in est.round_log_.entries]
    return outcomes, traj, {"federated": cand}


def _candidate_extras(cand: Candidate, best_step: int) -> dict:
    extras = {"model": cand.model_label, "lr": cand.lr, "batch_size": cand.batch_size,
              "best_step": best_step}
    if cand.noise_multiplier is not None:
        extras.update(noise_multiplier=cand.noise_multiplier, clip_norm=cand.clip_norm)
    return extras


def _dispatch(config, sites, task, condition):
    if condition == "local":
        return _run_local(config, sites, task)
    if condition in ("central", "central_dp"):
        return _run_central(config, sites, task, dp=condition == "central_dp")
    return _run_federated(config, sites, task, dp=condition == "federated_dp")


def _estimate(scores, labels):
    try:
        return metrics.delong_estimate(scores, labels)
    except ValueError as exc:
        log.warning("test AUC undefined: %s", exc)
        return None


def run_condition(config: ExperimentConfig, sites: Optional[list] = None) -> ConditionResult:
    """Run one condition for every configured task; returns rows and trajectories."""
    if sites is None:
        sites = prepare_sites(config)
    rows, trajectories, selected = [], [], {}
    for task in config.tasks:
        outcomes, traj, chosen = _dispatch(config, sites, task, config.condition)
        trajectories.extend(traj)
        selected[task] = chosen
        local = None
        if config.condition != "local":
            local_outcomes, _, _ = _run_local(config, sites, task)
            local = {o.site_id: o for o in local_outcomes}
        for out in outcomes:
            row = ReportRow(out.site_id, out.n, task, config.condition)
            est = _estimate(out.scores, out.labels)
            if est is not None:
                row.auc, row.ci_low, row.ci_high = est.auc, est.ci_low, est.ci_high
            if local is not None and est is not None:
                diff = metrics.delong_diff(out.scores, local[out.site_id].scores, out.labels)
                row.rel_auc, row.rel_ci_low, row.rel_ci_high = diff.delta, diff.ci_low, diff.ci_high
                row.significant = diff.significant
            for key, value in out.extras.items():
                setattr(row, key, value)
            rows.append(row)
    return ConditionResult(rows, trajectories, selected)


def write_results(rows: Sequence[ReportRow], path) -> Path:
    path = Path(path)
    ordered = sorted(rows, key=lambda r: (r.site_id, r.task))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_FIELDS)
        for r in ordered:
            writer.writerow([_fmt(getattr(r, f)) for f in RESULT_FIELDS])
    return path


def load_results(path) -> list:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            values = {}
            for key, text in raw.items():
                if text == "":
                    values[key] = None if key != "model" else ""
                elif key in _INT_FIELDS:
                    values[key] = int(text)
                elif key in _FLOAT_FIELDS:
                    values[key] = float(text)
                elif key == "significant":
                    values[key] = text == "1"
                else:
                    values[key] = text
            rows.append(ReportRow(**values))
    return rows


def write_trajectory(trajectories, path) -> Path:
    path = Path(path)
    ordered = sorted(trajectories, key=lambda t: (t[3], t[4], t[0]))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_FIELDS)
        for t in ordered:
            writer.writerow([_fmt(v) for v in t])
    return path


def _cell(value, fmt="{:.3f}"):
    return "-" if value is None else fmt.format(value)


def summary_table(rows: Sequence[ReportRow]) -> str:
    ordered = sorted(rows, key=lambda r: (r.site_id, r.task))
    header = f"{'site':<10} {'N':>6} {'task':<10} {'condition':<13} {'AUC (95% CI)':<24} {'rel. AUC (95% CI)':<26} {'eps':>8}"
    lines = [header, "-" * len(header)]
    for r in ordered:
        auc_txt = f"{_cell(r.auc)} ({_cell(r.ci_low)}, {_cell(r.ci_high)})"
        rel_txt = ""
        if r.rel_auc is not None:
            rel_txt = f"{_cell(r.rel_auc)} ({_cell(r.rel_ci_low)}, {_cell(r.rel_ci_high)})"
            if r.significant:
                rel_txt += " *"
        lines.append(f"{r.site_id:<10} {r.n:>6} {r.task:<10} {r.condition:<13} {auc_txt:<24} "
                     f"{rel_txt:<26} {_cell(r.epsilon):>8}")
    lines.append("")
    lines.append("* zero lies outside the 95% CI of the AUC difference against local training")
    return "\n".join(lines) + "\n"


def emit_reports(rows, trajectories, outdir) -> dict:
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": write_results(rows, outdir / "results.csv"),
            "trajectory": write_trajectory(trajectories, outdir / "trajectory.csv"),
        }
        summary = outdir / "summary.txt"
        summary.write_text(summary_table(rows), encoding="utf-8")
        paths["summary"] = summary
    except OSError as exc:
        raise OSError(f"cannot write reports to {outdir}: {exc}") from exc
    return paths
