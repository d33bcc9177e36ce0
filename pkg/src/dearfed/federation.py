"""The federated training loop: broadcast, local training, defect application,
selection, weighted aggregation, and per-round bookkeeping.

One `FederatedRun` owns a seeded synthetic fleet plus a reserved audit client
whose held-out windows form the server validation set. Data integrity attacks
poison the affected clients' stored series once, before windowing; channel
noise hits every upload from affected clients. All stochastic choices draw
from purpose-keyed streams, so two runs with the same seed and settings are
bit-identical regardless of the aggregation policy.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .datagen import FleetSpec, generate_fleet_with_audit, seasonal_split
from .defects import DefectSpec, affected_clients, defect_mark, inject_comm_noise, inject_dia
from .forecasting import (ForecastModel, WindowingConfig, WindowSet, build_windows,
                          compute_norm_stats, mape, predict, rmse, train_local)
from .params import ModelParams
from .qeen import QeenModel, normalize_marks
from .replay import Transition
from .sac import RewardConfig, SacAgent, build_state, compute_reward

POLICIES = ("fedavg", "dearfsac", "sac_without_qeen", "fixed_weights")


def aggregate(action: np.ndarray, uploads) -> ModelParams:
    """Weighted elementwise sum of the selected models, in client order."""
    action = np.asarray(action, dtype=np.float64)
    if action.size != len(uploads):
        raise ValueError(f"{action.size} weights for {len(uploads)} models")
    first = uploads[0]
    total = np.zeros_like(first.values)
    for a_i, w_i in zip(action, uploads):
        if w_i.layout != first.layout:
            raise ValueError("uploads do not share a parameter layout")
        total += a_i * w_i.values
    return ModelParams(total, first.layout)


def select_clients(n: int, p_k: float, seed: int, round_idx: int) -> np.ndarray:
    """Uniform sample without replacement of floor(p_k * n) client indices."""
    if not 0.0 < p_k <= 1.0:
        raise ValueError("p_k must be in (0, 1]")
    k = int(p_k * n)
    if k < 1:
        raise ValueError(f"selection of floor({p_k} * {n}) = 0 clients")
    if k == n:
        return np.arange(n)
    rng = seeding.stream(seed, seeding.SELECT, round_idx)
    return np.sort(rng.choice(n, size=k, replace=False))


@dataclass
class RoundRecord:
    t: int
    selected: tuple          # client ids
    action: tuple            # simplex weights, client order
    losses: tuple            # local training losses of the selected clients
    delta_t: float           # validation MAPE of the new global model, percent
    reward: float
    wall_clock: float        # seconds; diagnostics only, never serialized
    quality_marks: tuple = None  # predicted per-upload marks, when embeddings ran

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "selected": list(self.selected),
            "a": list(self.action),
            "losses": list(self.losses),
            "delta_t": self.delta_t,
            "r_t": self.reward,
        }


@dataclass
class RunSettings:
    """Everything one federated run needs besides the learned components."""

    fleet: FleetSpec = field(default_factory=FleetSpec)
    defect: DefectSpec = field(default_factory=DefectSpec)
    windowing: WindowingConfig = field(default_factory=WindowingConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    policy: str = "fedavg"
    rounds: int = 150
    p_k: float = 0.2
    hidden: int = 32
    local_epochs: int = 1
    lr_lstm: float = 1e-4
    batch_size: int = 128
    updates_per_round: int = 1

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; pick one of {POLICIES}")


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("DEARFED_THREADS", "1")))
    except ValueError:
        return 1


class FederatedRun:
    """State of one federated experiment on a freshly generated fleet."""

    def __init__(self, settings: RunSettings, seed: int, qeen: QeenModel = None,
                 agent: SacAgent = None, buffer=None, train_agent: bool = False,
                 deterministic_actions: bool = False, force_uniform: bool = False,
                 fixed_weights=None):
        s = settings
        if s.policy in ("dearfsac", "sac_without_qeen") and agent is None and not force_uniform:
            raise ValueError(f"policy {s.policy!r} needs an agent")
        if s.policy == "dearfsac" and qeen is None:
            raise ValueError("policy 'dearfsac' needs a trained embedding network")
        self.settings = s
        self.seed = seed
        self.qeen = qeen
        self.agent = agent
        self.buffer = buffer
        self.train_agent = train_agent and agent is not None
        self.deterministic_actions = deterministic_actions
        self.force_uniform = force_uniform
        self.n = s.fleet.n_clients
        self.k = int(s.p_k * self.n)
        if self.k < 1:
            raise ValueError(f"selection of floor({s.p_k} * {self.n}) = 0 clients")

        # the run seed owns every stream, including fleet generation
        clients, audit = generate_fleet_with_audit(replace(s.fleet, seed=seed))
        self.affected = affected_clients(s.defect, self.n, seed)
        if s.defect.attacks_data:
            clients = [
                inject_dia(ds, s.defect.k_percent, s.defect.mu_a, s.defect.sigma_a,
                           seed, rng=seeding.stream(seed, seeding.DIA, i))
                if i in self.affected else ds
                for i, ds in enumerate(clients)
            ]
        self.client_ids = [ds.client_id for ds in clients]
        self.train_windows, self.test_windows = [], []
        for ds in clients:
            splits = seasonal_split(ds)
            stats = compute_norm_stats([tr for _, tr, _ in splits])
            self.train_windows.append(WindowSet.concat(
                [build_windows(tr, s.windowing, stats) for _, tr, _ in splits]))
            self.test_windows.append(WindowSet.concat(
                [build_windows(te, s.windowing, stats) for _, _, te in splits]))

        audit_splits = seasonal_split(audit)
        audit_stats = compute_norm_stats([tr for _, tr, _ in audit_splits])
        self.validation_set = WindowSet.concat(
            [build_windows(te, s.windowing, audit_stats) for _, _, te in audit_splits])

        seed_model = ForecastModel(s.hidden, s.windowing, seed=seed)
        self.global_params = seed_model.to_model_params()
        self._scratch = seed_model
        self.a_prev = np.full(self.k, 1.0 / self.k)
        self._pending = None
        if fixed_weights is None:
            self.fixed_weights = np.full(self.k, 1.0 / self.k)
        else:
            self.fixed_weights = np.asarray(fixed_weights, dtype=np.float64)
            if self.fixed_weights.size != self.k:
                raise ValueError(f"{self.fixed_weights.size} fixed weights for K={self.k}")

    # -- per-round pieces -------------------------------------------------------

    def _train_client(self, idx: int, round_idx: int):
        model = self._scratch.clone()
        model.load_model_params(self.global_params)
        rng = seeding.stream(self.seed, seeding.LOCAL_SHUFFLE, idx, round_idx)
        _, loss = train_local(model, self.train_windows[idx], self.settings.local_epochs,
                              self.settings.lr_lstm, batch_size=self.settings.batch_size,
                              rng=rng)
        upload = model.to_model_params()
        if self.settings.defect.attacks_uploads and idx in self.affected:
            upload = inject_comm_noise(upload, self.settings.defect.snr_db)
        return upload, loss

    def _choose_action(self, state: np.ndarray):
        if self.force_uniform or self.settings.policy == "fedavg":
            a = np.full(self.k, 1.0 / self.k)
            return a, np.zeros(self.k)
        if self.settings.policy == "fixed_weights":
            return self.fixed_weights.copy(), np.zeros(self.k)
        stochastic = self.train_agent and not self.deterministic_actions
        return self.agent.sample_action(state, deterministic=not stochastic)

    def validation_mape(self, params: ModelParams) -> float:
        self._scratch.load_model_params(params)
        y_hat = predict(self._scratch, self.validation_set)
        if not np.all(np.isfinite(y_hat)):
            return 100.0
        return mape(self.validation_set.targets_kw, y_hat)

    def run_round(self, t: int) -> RoundRecord:
        started = time.monotonic()
        s = self.settings
        selected = select_clients(self.n, s.p_k, self.seed, t)

        try:
            workers = _thread_count()
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda i: self._train_client(i, t), selected))
            else:
                results = [self._train_client(i, t) for i in selected]
        except FloatingPointError as exc:
            raise RuntimeError(f"round {t}: client training failed: {exc}") from exc
        uploads = [r[0] for r in results]
        losses = np.array([r[1] for r in results])

        n_bar = quality_marks = None
        if s.policy == "dearfsac":
            e_global = self.qeen.encode(self.global_params)
            embeddings = self.qeen.encode_batch(np.stack([u.values for u in uploads]))
            quality_marks = self.qeen.quality_batch(embeddings)
            n_bar = normalize_marks(quality_marks)
            state = build_state(e_global, list(embeddings), losses, self.a_prev)
        else:
            state = np.concatenate([losses, self.a_prev])

        if self.train_agent:
            self.agent.observe(state)
        action, action_raw = self._choose_action(state)
        new_global = aggregate(action, uploads)
        delta_percent = self.validation_mape(new_global)
        delta_frac = min(1.0, max(0.0, delta_percent / 100.0))
        marks_for_reward = n_bar if n_bar is not None else action
        reward = compute_reward(s.reward, delta_frac, marks_for_reward, action)

        if self.train_agent and self.buffer is not None:
            if self._pending is not None:
                ps, pa, pu, pr = self._pending
                self.buffer.push(Transition(ps, pa, pu, pr, state))
            self._pending = (state, action, action_raw, reward)
            if len(self.buffer) >= self.agent.cfg.batch_size:
                for _ in range(s.updates_per_round):
                    self.agent.update(self.buffer, round_fraction=t / max(1, s.rounds))

        self.global_params = new_global
        self.a_prev = action
        return RoundRecord(
            t=t,
            selected=tuple(self.client_ids[i] for i in selected),
            action=tuple(float(x) for x in action),
            losses=tuple(float(x) for x in losses),
            delta_t=delta_percent,
            reward=reward,
            wall_clock=time.monotonic() - started,
            quality_marks=None if quality_marks is None
            else tuple(float(x) for x in quality_marks),
        )

    def run(self) -> list:
        return [self.run_round(t) for t in range(self.settings.rounds)]

    # -- evaluation --------------------------------------------------------------

    def final_metrics(self) -> tuple:
        """(MAPE %, RMSE kW) of the global model pooled over client test windows."""
        y, y_hat = [], []
        self._scratch.load_model_params(self.global_params)
        for ws in self.test_windows:
            y.append(ws.targets_kw)
            y_hat.append(predict(self._scratch, ws))
        y, y_hat = np.concatenate(y), np.concatenate(y_hat)
        if not np.all(np.isfinite(y_hat)):
            return float("inf"), float("inf")
        return mape(y, y_hat), rmse(y, y_hat)

    def evaluate_global(self, params: ModelParams = None) -> tuple:
        """Empirical-risk view: mean test MSE per client (kW^2) and its average."""
        self._scratch.load_model_params(params if params is not None else self.global_params)
        per_client = []
        for ws in self.test_windows:
            err = predict(self._scratch, ws) - ws.targets_kw
            per_client.append(float(np.mean(err * err)))
        return float(np.mean(per_client)), per_client


@dataclass
class ExperimentResult:
    policy: str
    seeds: tuple
    records: dict       # seed -> [RoundRecord]
    mape_values: tuple  # final test MAPE per seed
    rmse_values: tuple
    wall_clock: float

    @property
    def mape_mean(self):
        return float(np.mean(self.mape_values))

    @property
    def mape_std(self):
        return float(np.std(self.mape_values))

    @property
    def rmse_mean(self):
        return float(np.mean(self.rmse_values))

    @property
    def rmse_std(self):
        return float(np.std(self.rmse_values))


def run_experiment(settings: RunSettings, base_seed: int, n_seeds: int = 1,
                   qeen: QeenModel = None, agent: SacAgent = None) -> ExperimentResult:
    """R rounds x S seeds with a fixed policy; per-seed records and test metrics."""
    records, mapes, rmses = {}, [], []
    started = time.monotonic()
    for s in range(n_seeds):
        seed = base_seed + s
        run = FederatedRun(settings, seed, qeen=qeen, agent=agent,
                           deterministic_actions=True)
        records[seed] = run.run()
        m, r = run.final_metrics()
        mapes.append(m)
        rmses.append(r)
    return ExperimentResult(
        policy=settings.policy,
        seeds=tuple(base_seed + s for s in range(n_seeds)),
        records=records,
        mape_values=tuple(mapes),
        rmse_values=tuple(rmses),
        wall_clock=time.monotonic() - started,
    )


def train_centralized(settings: RunSettings, seed: int) -> tuple:
    """Pooled-data baseline with a 20% per-epoch chance of defect injection.

    Trains one forecaster on every client's training windows for as many
    epochs as the federated runs have rounds; returns (MAPE %, RMSE kW) on
    the pooled test windows.
    """
    s = settings
    clients, _ = generate_fleet_with_audit(replace(s.fleet, seed=seed))
    rng = seeding.stream(seed, seeding.CENTRAL)
    model = ForecastModel(s.hidden, s.windowing, seed=seed)

    clean_sets, poisoned_sets, test_sets = [], [], []
    for i, ds in enumerate(clients):
        poisoned = ds
        if s.defect.attacks_data:
            poisoned = inject_dia(ds, s.defect.k_percent, s.defect.mu_a, s.defect.sigma_a,
                                  seed, rng=seeding.stream(seed, seeding.DIA, i))
        for variant, bucket in ((ds, clean_sets), (poisoned, poisoned_sets)):
            splits = seasonal_split(variant)
            stats = compute_norm_stats([tr for _, tr, _ in splits])
            bucket.append(WindowSet.concat(
                [build_windows(tr, s.windowing, stats) for _, tr, _ in splits]))
            if bucket is clean_sets:
                test_sets.append(WindowSet.concat(
                    [build_windows(te, s.windowing, stats) for _, _, te in splits]))

    clean = _pool_windows(clean_sets)
    poisoned = _pool_windows(poisoned_sets)
    for epoch in range(s.rounds):
        defective_epoch = s.defect.kind != "none" and rng.uniform() < 0.2
        data = poisoned if (defective_epoch and s.defect.attacks_data) else clean
        train_local(model, data, 1, s.lr_lstm, batch_size=s.batch_size,
                    rng=seeding.stream(seed, seeding.CENTRAL, epoch))
        if defective_epoch and s.defect.attacks_uploads:
            noisy = inject_comm_noise(model.to_model_params(), s.defect.snr_db)
            model.load_model_params(noisy)

    y = np.concatenate([ws.targets_kw for ws in test_sets])
    y_hat = np.concatenate([predict(model, ws) for ws in test_sets])
    return mape(y, y_hat), rmse(y, y_hat)


class _PooledWindows:
    """Window stack without shared normalization (pooled across clients)."""

    def __init__(self, features, targets_norm):
        self.features = features
        self._targets_norm = targets_norm

    def __len__(self):
        return self.features.shape[0]

    @property
    def targets_norm(self):
        return self._targets_norm


def _pool_windows(sets) -> _PooledWindows:
    return _PooledWindows(
        np.concatenate([ws.features for ws in sets]),
        np.concatenate([ws.targets_norm for ws in sets]),
    )
