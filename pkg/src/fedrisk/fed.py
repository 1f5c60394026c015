"""Federated averaging across simulated sites, with optional per-site DP-SGD.

Each site keeps its own Adam state and its own random streams; the only
thing exchanged at a round boundary is the parameter vector. Random streams
are keyed by ``(master seed, site id, epoch index)`` so the trajectory of a
site does not depend on which worker runs it or in what order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import metrics
from ._rng import derive_int, derive_rng
from .models import (
    ModelSpec,
    ParamVector,
    check_same_layout,
    forward,
    grad,
    init_params,
    logits,
    loss_from_logits,
    per_example_grad_matrix,
)
from .optim import AdamState, DpConfig, adam_step, dp_aggregate, sampling_ratio, steps_per_epoch
from .privacy import DEFAULT_ORDERS, PrivacyLedger

AVERAGING_MODES = ("uniform", "size_weighted")
LOCAL_DP_CLIP_GRID = (0.1, 1.0, 10.0)


@dataclass(frozen=True)
class SiteArrays:
    """Train and validation arrays of one site for one prediction task."""

    site_id: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray

    @classmethod
    def from_site(cls, site, task: str) -> "SiteArrays":
        return cls(
            site.site_id,
            np.asarray(site.train.features, dtype=np.float64),
            np.asarray(site.train.labels(task), dtype=np.float64),
            np.asarray(site.val.features, dtype=np.float64),
            np.asarray(site.val.labels(task), dtype=np.float64),
        )

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]


def average(params_list: Sequence[ParamVector], mode: str = "uniform",
            site_sizes: Optional[Sequence[int]] = None) -> ParamVector:
    """Server-side aggregation of site parameter vectors."""
    if not params_list:
        raise ValueError("nothing to average")
    check_same_layout(*params_list)
    V = np.vstack([p.values for p in params_list])
    # Averaging offsets from the first vector makes identical inputs come back exactly.
    base = V[0]
    if mode == "uniform":
        values = base + (V - base).mean(axis=0)
    elif mode == "size_weighted":
        if site_sizes is None or len(site_sizes) != len(params_list):
            raise ValueError("size_weighted averaging needs one size per site")
        w = np.asarray(site_sizes, dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("site sizes must be positive")
        values = base + (w / w.sum()) @ (V - base)
    else:
        raise ValueError(f"unknown averaging mode {mode!r}; expected one of {AVERAGING_MODES}")
    return params_list[0].replace(values)


@dataclass(frozen=True)
class LocalResult:
    params: ParamVector
    state: AdamState
    steps: int
    train_loss: float


def effective_sampling_ratio(n_train: int, batch_size: int, dp: DpConfig) -> float:
    return dp.sampling_ratio if dp.sampling_ratio is not None else sampling_ratio(n_train, batch_size)


def dp_steps_per_epoch(n_train: int, batch_size: int, dp: DpConfig) -> int:
    if dp.sampling_ratio is None:
        return steps_per_epoch(n_train, batch_size)
    return math.ceil(1.0 / dp.sampling_ratio)


def local_update(
    X, y, spec: ModelSpec, params: ParamVector, *,
    epochs: int = 1,
    lr: float = 1e-3,
    batch_size: int = 64,
    state: Optional[AdamState] = None,
    dp: Optional[DpConfig] = None,
    seed: int = 0,
    site_id: str = "",
    start_epoch: int = 0,
) -> LocalResult:
    """Run ``epochs`` passes of local Adam training on one site.

    Without ``dp`` each pass is a shuffled sweep in minibatches. With ``dp``
    each step draws a Poisson batch at rate q, clips every record gradient,
    adds Gaussian noise to the sum and divides by the expected batch q*N.
    ``start_epoch`` selects which epoch random streams are used.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError(f"site {site_id!r}: training partition is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if state is None:
        state = AdamState.fresh(params, lr)
    check_same_layout(params, state.m)
    steps = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = derive_rng(seed, "epoch", site_id, epoch)
        if dp is None:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                params, state = adam_step(state, params, grad(spec, params, X[idx], y[idx]))
                steps += 1
        else:
            q = effective_sampling_ratio(n, batch_size, dp)
            for _ in range(dp_steps_per_epoch(n, batch_size, dp)):
                mask = rng.random(n) < q
                if mask.any():
                    G = per_example_grad_matrix(spec, params, X[mask], y[mask])
                else:
                    # An empty Poisson batch still releases pure noise.
                    G = np.zeros((1, len(params)))
                g = dp_aggregate(G, dp.clip_norm, dp.noise_multiplier, q * n, rng, params.layout)
                params, state = adam_step(state, params, g)
                steps += 1
    train_loss = loss_from_logits(logits(spec, params, X), y)
    return LocalResult(params, state, steps, train_loss)


def validation_auc(spec: ModelSpec, params: ParamVector, X, y, site_id: str = "") -> float:
    try:
        return metrics.auc(forward(spec, params, X), y)
    except ValueError as exc:
        raise ValueError(f"site {site_id!r}: validation AUC undefined: {exc}") from None


@dataclass(frozen=True)
class FederationConfig:
    spec: ModelSpec
    rounds: int = 10
    local_epochs: int = 1
    lr: float = 1e-3
    batch_size: int = 64
    averaging: str = "uniform"
    dp: Optional[Mapping[str, DpConfig]] = None
    seed: int = 0
    n_jobs: int = 1
    orders: tuple = DEFAULT_ORDERS

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if self.averaging not in AVERAGING_MODES:
            raise ValueError(f"unknown averaging mode {self.averaging!r}")


@dataclass(frozen=True)
class RoundEntry:
    round: int
    site_id: str
    val_auc: float
    train_loss: float
    steps: int
    epsilon: Optional[float] = None


@dataclass
class RoundLog:
    entries: list = field(default_factory=list)

    def for_site(self, site_id: str) -> list:
        return [e for e in self.entries if e.site_id == site_id]

    def aucs(self, site_id: str) -> list:
        return [e.val_auc for e in self.for_site(site_id)]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class Snapshot:
    """Best post-synchronization model seen by one site."""

    site_id: str
    best_auc: float
    round: int
    params: ParamVector
    epsilon_at_best: Optional[float] = None


def initial_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Shared starting point for every site and for single-site training."""
    return init_params(spec, derive_int(seed, "init", spec.label()))


def _run(config: FederationConfig, sites: Sequence[SiteArrays]):
    if not sites:
        raise ValueError("federation needs at least one site")
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise ValueError("site ids must be unique")
    spec = config.spec
    for s in sites:
        if s.X_train.shape[1] != spec.input_dim:
            raise ValueError(f"site {s.site_id!r} has {s.X_train.shape[1]} features, model expects {spec.input_dim}")
    dp = dict(config.dp) if config.dp is not None else None
    if dp is not None:
        missing = [i for i in ids if i not in dp]
        if missing:
            raise ValueError(f"no DP configuration for sites {missing}")

    global_params = initial_params(spec, config.seed)
    states = {s.site_id: AdamState.fresh(global_params, config.lr) for s in sites}
    ledgers = None
    if dp is not None:
        ledgers = {
            s.site_id: PrivacyLedger(
                s.site_id,
                effective_sampling_ratio(s.n_train, config.batch_size, dp[s.site_id]),
                dp[s.site_id].noise_multiplier,
                dp[s.site_id].delta,
                config.orders,
            )
            for s in sites
        }
    log = RoundLog()
    best: dict = {}
    sizes = [s.n_train for s in sites]
    order = sorted(range(len(sites)), key=lambda i: ids[i])

    def work(site: SiteArrays, r: int, start: ParamVector) -> LocalResult:
        return local_update(
            site.X_train, site.y_train, spec, start,
            epochs=config.local_epochs, lr=config.lr, batch_size=config.batch_size,
            state=states[site.site_id], dp=None if dp is None else dp[site.site_id],
            seed=config.seed, site_id=site.site_id, start_epoch=r * config.local_epochs,
        )

    pool = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 else None
    try:
        for r in range(config.rounds):
            if pool is None:
                results = [work(s, r, global_params) for s in sites]
            else:
                results = list(pool.map(lambda s: work(s, r, global_params), sites))
            # synchronization barrier; a fixed site order keeps the float sum order-free
            global_params = average([results[i].params for i in order], config.averaging,
                                    [sizes[i] for i in order])
            for site, res in zip(sites, results):
                states[site.site_id] = res.state
                eps = None
                if ledgers is not None:
                    eps = ledgers[site.site_id].record(res.steps)
                val = validation_auc(spec, global_params, site.X_val, site.y_val, site.site_id)
                log.entries.append(RoundEntry(r, site.site_id, val, res.train_loss, res.steps, eps))
                prev = best.get(site.site_id)
                if prev is None or val > prev.best_auc:
                    best[site.site_id] = Snapshot(site.site_id, val, r, global_params, eps)
    finally:
        if pool is not None:
            pool.shutdown()
    return best, log, ledgers, global_params


def run_federated(config: FederationConfig, sites: Sequence[SiteArrays]):
    """Non-private federated averaging.

    Returns ``(snapshots, round_log, final_params)`` where ``snapshots`` maps
    site id to that site's best :class:`Snapshot`.
    """
    if config.dp is not None:
        raise ValueError("config carries DP settings; use run_federated_dp")
    best, log, _, final = _run(config, sites)
    return best, log, final


def run_federated_dp(config: FederationConfig, sites: Sequence[SiteArrays]):
    """Federated averaging with DP-SGD as every site's local optimizer.

    Returns ``(snapshots, round_log, ledgers, final_params)``. Each ledger
    holds the budget spent through the final round; snapshots additionally
    carry the budget spent up to their own round.
    """
    if config.dp is None:
        raise ValueError("run_federated_dp needs a DP configuration for every site")
    best, log, ledgers, final = _run(config, sites)
    return best, log, ledgers, final


@dataclass(frozen=True)
class DpCandidateScore:
    clip_norm: float
    val_auc: float
    epochs: int


def score_local_dp_candidates(
    site: SiteArrays, spec: ModelSpec, *, lr: float, batch_size: int, seed: int = 0,
    epochs: int = 10, clip_grid=LOCAL_DP_CLIP_GRID, noise_multiplier: float = 1.0,
    delta: float = 1e-5,
) -> list:
    """Train ``epochs`` local DP epochs per clipping threshold, no collaboration."""
    if site.X_val.shape[0] == 0:
        raise ValueError(f"site {site.site_id!r}: validation partition is empty")
    start = initial_params(spec, seed)
    scores = []
    for clip in clip_grid:
        dp = DpConfig(clip_norm=float(clip), noise_multiplier=noise_multiplier, delta=delta)
        res = local_update(
            site.X_train, site.y_train, spec, start, epochs=epochs, lr=lr,
            batch_size=batch_size, dp=dp, seed=derive_int(seed, "dp-select"),
            site_id=site.site_id,
        )
        val = validation_auc(spec, res.params, site.X_val, site.y_val, site.site_id)
        scores.append(DpCandidateScore(float(clip), val, epochs))
    return scores


def select_local_dp_hparams(site: SiteArrays, spec: ModelSpec, *, lr: float, batch_size: int,
                            seed: int = 0, epochs: int = 10, clip_grid=LOCAL_DP_CLIP_GRID,
                            noise_multiplier: float = 1.0, delta: float = 1e-5) -> DpConfig:
    """Pick the clipping threshold with the best local validation AUC (ties: smallest)."""
    scores = score_local_dp_candidates(
        site, spec, lr=lr, batch_size=batch_size, seed=seed, epochs=epochs,
        clip_grid=clip_grid, noise_multiplier=noise_multiplier, delta=delta,
    )
    best = min(scores, key=lambda s: (-s.val_auc, s.clip_norm))
    return DpConfig(clip_norm=best.clip_norm, noise_multiplier=noise_multiplier, delta=delta)
