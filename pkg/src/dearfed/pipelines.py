"""Offline preparation of the learned components: snapshot corpus generation,
embedding-network pretraining, and agent training across episodes.

The corpus comes from a defect-free warm-up federation with every client
uploading each round. Each upload is snapshotted twice: once as-is, and once
as a defective twin (trained on attacked data and/or channel-noised),
labeled with its severity mark on the server validation set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .datagen import generate_fleet_with_audit, seasonal_split
from .defects import defect_mark, inject_comm_noise, inject_dia
from .federation import FederatedRun, RunSettings, aggregate
from .forecasting import WindowSet, build_windows, compute_norm_stats, train_local
from .qeen import QeenModel, train_qeen
from .replay import ReplayBuffer
from .sac import SacAgent, SacConfig


@dataclass
class CorpusEntry:
    vector: np.ndarray
    mark: float
    defective: bool


@dataclass
class ModelCorpus:
    train: list
    heldout: list

    def training_pairs(self) -> list:
        return [(e.vector, e.mark) for e in self.train]


def build_model_corpus(settings: RunSettings, seed: int, warmup_rounds: int = 30,
                       skip_rounds: int = 10) -> ModelCorpus:
    """Snapshot every client's upload per warm-up round, plus a defective twin.

    The warm-up federation itself aggregates only clean uploads with uniform
    weights. Snapshots from even rounds (after the skip) go to the training
    corpus, odd rounds to the held-out corpus.
    """
    s = replace(settings, policy="fedavg", p_k=1.0)
    run = FederatedRun(s, seed)
    poisoned_windows = []
    if s.defect.attacks_data:
        clients, _ = generate_fleet_with_audit(replace(s.fleet, seed=seed))
        for i, ds in enumerate(clients):
            attacked = inject_dia(ds, s.defect.k_percent, s.defect.mu_a, s.defect.sigma_a,
                                  seed, rng=seeding.stream(seed, seeding.DIA, 1000 + i))
            splits = seasonal_split(attacked)
            stats = compute_norm_stats([tr for _, tr, _ in splits])
            poisoned_windows.append(WindowSet.concat(
                [build_windows(tr, s.windowing, stats) for _, tr, _ in splits]))

    train_entries, heldout_entries = [], []
    for t in range(warmup_rounds):
        uploads = []
        for idx in range(run.n):
            clean = run._scratch.clone()
            clean.load_model_params(run.global_params)
            rng = seeding.stream(seed, seeding.LOCAL_SHUFFLE, idx, t)
            train_local(clean, run.train_windows[idx], s.local_epochs, s.lr_lstm,
                        batch_size=s.batch_size, rng=rng)
            w_clean = clean.to_model_params()
            uploads.append(w_clean)

            if t < skip_rounds:
                continue
            if s.defect.attacks_data:
                twin = run._scratch.clone()
                twin.load_model_params(run.global_params)
                rng_twin = seeding.stream(seed, seeding.LOCAL_SHUFFLE, idx, t, 1)
                train_local(twin, poisoned_windows[idx], s.local_epochs, s.lr_lstm,
                            batch_size=s.batch_size, rng=rng_twin)
                w_bad = twin.to_model_params()
            else:
                w_bad = w_clean
            if s.defect.attacks_uploads:
                w_bad = inject_comm_noise(w_bad, s.defect.snr_db)

            bucket = train_entries if (t - skip_rounds) % 2 == 0 else heldout_entries
            bucket.append(CorpusEntry(
                w_clean.values,
                defect_mark(w_clean, run._scratch, run.validation_set).value,
                False,
            ))
            if s.defect.kind != "none":
                bucket.append(CorpusEntry(
                    w_bad.values,
                    defect_mark(w_bad, run._scratch, run.validation_set).value,
                    True,
                ))
        uniform = np.full(len(uploads), 1.0 / len(uploads))
        run.global_params = aggregate(uniform, uploads)
    return ModelCorpus(train_entries, heldout_entries)


def pretrain_qeen(settings: RunSettings, seed: int, warmup_rounds: int = 30,
                  skip_rounds: int = 10, e_dim: int = 64, enc_hidden: int = 256,
                  epochs: int = 40, lr: float = 1e-3, lam1: float = 0.5,
                  lam2: float = 0.5) -> tuple:
    """Corpus generation plus joint training; returns (qeen, corpus, history)."""
    corpus = build_model_corpus(settings, seed, warmup_rounds, skip_rounds)
    probe = FederatedRun(replace(settings, policy="fedavg"), seed)
    layout = probe.global_params.layout
    qeen = QeenModel(layout, e_dim=e_dim, enc_hidden=enc_hidden, seed=seed)
    history = train_qeen(qeen, corpus.training_pairs(), lam1=lam1, lam2=lam2,
                         epochs=epochs, lr=lr, seed=seed)
    return qeen, corpus, history


def mark_auc(qeen: QeenModel, entries) -> float:
    """Rank AUC of the predicted quality mark against the defective label."""
    vectors = np.stack([e.vector for e in entries])
    labels = np.array([e.defective for e in entries])
    if labels.all() or not labels.any():
        raise ValueError("need both clean and defective entries")
    scores = qeen.quality_batch(qeen.encode_batch(vectors))
    pos, neg = scores[labels], scores[~labels]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


@dataclass
class AgentTrainingSummary:
    episodes: int
    rounds_per_episode: int
    episode_rewards: list
    wall_clock: float


def train_agent(settings: RunSettings, qeen: QeenModel, seed: int,
                episodes: int = 8, rounds_per_episode: int = None,
                sac_cfg: SacConfig = None, buffer: ReplayBuffer = None) -> tuple:
    """Train the aggregation agent across full federated episodes.

    Every episode runs the configured scenario on a freshly seeded fleet with
    stochastic actions and one (or more) gradient steps per round. Pass
    qeen=None to train the embedding-free variant on its reduced state.
    Returns (agent, buffer, summary).
    """
    rounds = rounds_per_episode or settings.rounds
    k = int(settings.p_k * settings.fleet.n_clients)
    policy = "dearfsac" if qeen is not None else "sac_without_qeen"
    if sac_cfg is None:
        if qeen is not None:
            sac_cfg = SacConfig(k=k, e_dim=qeen.e_dim)
        else:
            sac_cfg = SacConfig(k=k, e_dim=0, state_size=2 * k)
    agent = SacAgent(sac_cfg, seed=seed)
    if buffer is None:
        buffer = ReplayBuffer(seed=seed)

    started = time.monotonic()
    episode_rewards = []
    episode_settings = replace(settings, policy=policy, rounds=rounds)
    for ep in range(episodes):
        fleet_seed = 100_000 + seed * 1_000 + ep
        run = FederatedRun(episode_settings, fleet_seed, qeen=qeen, agent=agent,
                           buffer=buffer, train_agent=True)
        records = run.run()
        episode_rewards.append(float(np.mean([r.reward for r in records])))
    summary = AgentTrainingSummary(
        episodes=episodes,
        rounds_per_episode=rounds,
        episode_rewards=episode_rewards,
        wall_clock=time.monotonic() - started,
    )
    return agent, buffer, summary
