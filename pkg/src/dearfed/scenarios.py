"""Experiment configuration and the scenario/sweep drivers.

A scenario config is a JSON document (all keys optional) validated against
the four defect scenarios: I none, II data integrity attacks, III channel
noise, IV both. Drivers write one JSONL round log per policy and seed, a
summary CSV of final test metrics, and a separate wall-clock file; metric
files are byte-identical across repeated runs of the same config and seed.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .datagen import FleetSpec, generate_fleet, write_csv
from .defects import DefectSpec
from .federation import (POLICIES, ExperimentResult, RunSettings, run_experiment)
from .forecasting import WindowingConfig
from .params import MAGIC_AGENT, read_params, write_params
from .pipelines import pretrain_qeen, train_agent
from .qeen import QeenModel
from .replay import ReplayBuffer
from .sac import RewardConfig, SacAgent, SacConfig, state_dim

SCENARIO_DEFECT_KIND = {"I": "none", "II": "dia", "III": "comm_noise", "IV": "mixed"}


@dataclass(frozen=True)
class LstmConfig:
    hidden: int = 32
    lr: float = 1e-4
    local_epochs: int = 1
    l_back: int = 24
    l_ahead: int = 1
    batch_size: int = 128


@dataclass(frozen=True)
class QeenTrainConfig:
    e_dim: int = 64
    enc_hidden: int = 256
    epochs: int = 40
    lr: float = 1e-3
    lam1: float = 0.5
    lam2: float = 0.5
    warmup_rounds: int = 30
    skip_rounds: int = 10


@dataclass(frozen=True)
class SacTrainConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    rho: float = 5e-3
    buffer_size: int = 100_000
    kappa: float = 64.0
    delta_target: float = 0.02
    beta1: float = 0.5
    beta2: float = 0.5
    hidden: int = 128
    batch_size: int = 128
    episodes: int = 8
    updates_per_round: int = 1
    alpha_per: float = 0.6
    beta_per: float = 0.4
    eta: float = 0.996
    c_min: int = 5000
    auto_temperature: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "I"
    n_clients: int = 20
    p_k: float = 0.2
    p_m: float = 0.0
    rounds: int = 150
    seeds: int = 3
    seed: int = 0
    policies: tuple = POLICIES
    out_dir: str = "out"
    defect_params: dict = field(default_factory=dict)
    fleet: FleetSpec = field(default_factory=FleetSpec)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    qeen: QeenTrainConfig = field(default_factory=QeenTrainConfig)
    sac: SacTrainConfig = field(default_factory=SacTrainConfig)

    @property
    def defect(self) -> DefectSpec:
        kind = SCENARIO_DEFECT_KIND[self.scenario]
        if kind == "none":
            return DefectSpec()
        params = dict(self.defect_params)
        return DefectSpec(
            kind=kind,
            p_m=self.p_m,
            k_percent=params.get("k_percent", 30.0),
            mu_a=params.get("mu_a", 30.0),
            sigma_a=params.get("sigma_a", 50.0),
            snr_db=params.get("snr_db", 30.0),
        )

    @property
    def k(self) -> int:
        return int(self.p_k * self.n_clients)

    def settings(self, policy: str) -> RunSettings:
        return RunSettings(
            fleet=replace(self.fleet, n_clients=self.n_clients, seed=self.seed),
            defect=self.defect,
            windowing=WindowingConfig(self.lstm.l_back, self.lstm.l_ahead),
            reward=RewardConfig(self.sac.delta_target, self.sac.kappa,
                                self.sac.beta1, self.sac.beta2),
            policy=policy,
            rounds=self.rounds,
            p_k=self.p_k,
            hidden=self.lstm.hidden,
            local_epochs=self.lstm.local_epochs,
            lr_lstm=self.lstm.lr,
            batch_size=self.lstm.batch_size,
            updates_per_round=self.sac.updates_per_round,
        )

    def sac_config(self, with_embeddings: bool) -> SacConfig:
        size = state_dim(self.k, self.qeen.e_dim) if with_embeddings else 2 * self.k
        return SacConfig(
            k=self.k,
            e_dim=self.qeen.e_dim if with_embeddings else 0,
            hidden=self.sac.hidden,
            lr=self.sac.lr,
            gamma=self.sac.gamma,
            rho=self.sac.rho,
            batch_size=self.sac.batch_size,
            auto_temperature=self.sac.auto_temperature,
            state_size=size,
        )

    def replay_buffer(self) -> ReplayBuffer:
        return ReplayBuffer(
            capacity=self.sac.buffer_size,
            alpha=self.sac.alpha_per,
            beta=self.sac.beta_per,
            eta=self.sac.eta,
            c_min=self.sac.c_min,
            seed=self.seed,
        )


class ConfigError(ValueError):
    pass


_GROUP_TYPES = {
    "fleet": FleetSpec,
    "lstm": LstmConfig,
    "qeen": QeenTrainConfig,
    "sac": SacTrainConfig,
}
_DEFECT_KEYS = {"k_percent", "mu_a", "sigma_a", "snr_db"}
_TOP_KEYS = {
    "scenario", "n_clients", "p_k", "p_m", "rounds", "seeds", "seed",
    "policies", "policy", "out_dir", "defect",
} | set(_GROUP_TYPES)


def _build_group(name: str, cls, data: dict):
    known = {f.name for f in fields(cls)} - {"n_clients", "seed"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {name!r} section")
    return cls(**data)


def parse_config(path=None, overrides: dict = None) -> ScenarioConfig:
    """Config from a JSON file plus flag overrides, validated against the
    scenario taxonomy; every omitted key falls back to its default."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")
    merged = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    scenario = str(merged.get("scenario", "I"))
    if scenario not in SCENARIO_DEFECT_KIND:
        raise ConfigError(f"unknown scenario {scenario!r}; pick one of I, II, III, IV")
    defect_params = dict(merged.get("defect", {}))
    bad = set(defect_params) - _DEFECT_KEYS
    if bad:
        raise ConfigError(f"unknown key {sorted(bad)[0]!r} in 'defect' section")
    kind = SCENARIO_DEFECT_KIND[scenario]
    if kind == "none" and defect_params:
        raise ConfigError(f"defect parameters not applicable to Scenario {scenario}")
    if kind == "dia" and "snr_db" in defect_params:
        raise ConfigError(f"snr_db not applicable to Scenario {scenario}")
    if kind == "comm_noise" and _DEFECT_KEYS.intersection(defect_params) - {"snr_db"}:
        raise ConfigError(f"DIA parameters not applicable to Scenario {scenario}")

    policies = merged.get("policies", POLICIES)
    if "policy" in merged and merged["policy"] is not None:
        policies = [merged["policy"]]
    policies = tuple(policies)
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; pick one of {POLICIES}")

    p_m = float(merged.get("p_m", 0.2 if kind != "none" else 0.0))
    if kind == "none" and p_m != 0.0:
        raise ConfigError("p_m not applicable to Scenario I")

    cfg = ScenarioConfig(
        scenario=scenario,
        n_clients=int(merged.get("n_clients", 20)),
        p_k=float(merged.get("p_k", 0.2)),
        p_m=p_m,
        rounds=int(merged.get("rounds", 150)),
        seeds=int(merged.get("seeds", 3)),
        seed=int(merged.get("seed", 0)),
        policies=policies,
        out_dir=str(merged.get("out_dir", "out")),
        defect_params=defect_params,
        fleet=_build_group("fleet", FleetSpec, merged.get("fleet", {})),
        lstm=_build_group("lstm", LstmConfig, merged.get("lstm", {})),
        qeen=_build_group("qeen", QeenTrainConfig, merged.get("qeen", {})),
        sac=_build_group("sac", SacTrainConfig, merged.get("sac", {})),
    )
    if cfg.k < 1:
        raise ConfigError("floor(p_k * n_clients) = 0 selected clients")
    cfg.defect  # triggers DefectSpec validation
    return cfg


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {
        "scenario": cfg.scenario,
        "n_clients": cfg.n_clients,
        "p_k": cfg.p_k,
        "p_m": cfg.p_m,
        "rounds": cfg.rounds,
        "seeds": cfg.seeds,
        "seed": cfg.seed,
        "policies": list(cfg.policies),
        "out_dir": cfg.out_dir,
        "defect": dict(cfg.defect_params),
    }
    for name, obj in (("fleet", cfg.fleet), ("lstm", cfg.lstm),
                      ("qeen", cfg.qeen), ("sac", cfg.sac)):
        out[name] = {f.name: getattr(obj, f.name) for f in fields(obj)
                     if name != "fleet" or f.name not in ("n_clients", "seed")}
    return out


# -- artifact handling --------------------------------------------------------


def artifact_paths(cfg: ScenarioConfig) -> dict:
    """Checkpoint locations, keyed by the dimensions baked into each network."""
    base = os.path.join(cfg.out_dir, "artifacts")
    arity = f"n{cfg.n_clients}_k{cfg.k}"
    return {
        "qeen": os.path.join(base, f"qeen_h{cfg.lstm.hidden}.bin"),
        "dearfsac": os.path.join(base, f"agent_{arity}.bin"),
        "sac_without_qeen": os.path.join(base, f"agent_noqeen_{arity}.bin"),
    }


def save_agent(path, agent: SacAgent) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    write_params(path, agent.to_model_params(), magic=MAGIC_AGENT)


def load_agent(path, sac_cfg: SacConfig) -> SacAgent:
    agent = SacAgent(sac_cfg)
    agent.load_model_params(read_params(path, magic=MAGIC_AGENT))
    return agent


def ensure_qeen(cfg: ScenarioConfig, retrain: bool = False) -> QeenModel:
    """Load the embedding network for this config, pretraining it if absent."""
    path = artifact_paths(cfg)["qeen"]
    settings = cfg.settings("fedavg")
    if os.path.exists(path) and not retrain:
        probe_layout = _forecaster_layout(cfg)
        return QeenModel.load(path, probe_layout)
    qeen, _, _ = pretrain_qeen(
        settings, cfg.seed,
        warmup_rounds=cfg.qeen.warmup_rounds, skip_rounds=cfg.qeen.skip_rounds,
        e_dim=cfg.qeen.e_dim, enc_hidden=cfg.qeen.enc_hidden,
        epochs=cfg.qeen.epochs, lr=cfg.qeen.lr, lam1=cfg.qeen.lam1, lam2=cfg.qeen.lam2,
    )
    os.makedirs(os.path.dirname(path), exist_ok=True)
    qeen.save(path)
    return qeen


def ensure_agent(cfg: ScenarioConfig, policy: str, qeen: QeenModel = None,
                 retrain: bool = False) -> SacAgent:
    """Load the trained agent for `policy`, training it if absent."""
    path = artifact_paths(cfg)[policy]
    with_embeddings = policy == "dearfsac"
    sac_cfg = cfg.sac_config(with_embeddings)
    if os.path.exists(path) and not retrain:
        return load_agent(path, sac_cfg)
    agent, _, _ = train_agent(
        cfg.settings(policy), qeen if with_embeddings else None, cfg.seed,
        episodes=cfg.sac.episodes, sac_cfg=sac_cfg, buffer=cfg.replay_buffer(),
    )
    save_agent(path, agent)
    return agent


def _forecaster_layout(cfg: ScenarioConfig):
    from .forecasting import ForecastModel

    return ForecastModel(cfg.lstm.hidden,
                         WindowingConfig(cfg.lstm.l_back, cfg.lstm.l_ahead)
                         ).to_model_params().layout


# -- atomic, reproducible file output ------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x) or math.isinf(x):
            return str(x)
        return repr(x)
    return str(x)


def write_round_log(path, records) -> None:
    lines = [json.dumps(r.to_json_dict(), separators=(",", ":")) for r in records]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_summary_csv(path, rows) -> None:
    header = "policy,mape_mean,mape_std,rmse_mean,rmse_std"
    lines = [header] + [
        ",".join([r.policy] + [_fmt(v) for v in
                               (r.mape_mean, r.mape_std, r.rmse_mean, r.rmse_std)])
        for r in rows
    ]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_timings_csv(path, rows) -> None:
    lines = ["policy,wall_clock_seconds"] + [f"{r.policy},{r.wall_clock:.3f}" for r in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


# -- drivers -------------------------------------------------------------------


def run_scenario(cfg: ScenarioConfig, qeen: QeenModel = None, agents: dict = None,
                 write_files: bool = True) -> list:
    """Run every configured policy on the same seeded fleet.

    Returns the ExperimentResult list; writes per-round JSONL logs, the
    summary CSV (per-policy MAPE/RMSE mean and std across seeds), and the
    qualitative wall-clock file.
    """
    agents = dict(agents or {})
    needs_qeen = "dearfsac" in cfg.policies
    if needs_qeen and qeen is None:
        qeen = ensure_qeen(cfg)
    for policy in cfg.policies:
        if policy in ("dearfsac", "sac_without_qeen") and policy not in agents:
            agents[policy] = ensure_agent(cfg, policy, qeen)

    results = []
    for policy in cfg.policies:
        result = run_experiment(
            cfg.settings(policy), cfg.seed, cfg.seeds,
            qeen=qeen if policy == "dearfsac" else None,
            agent=agents.get(policy),
        )
        results.append(result)
        if write_files:
            base = os.path.join(cfg.out_dir, f"scenario_{cfg.scenario}")
            for seed, records in result.records.items():
                write_round_log(
                    os.path.join(base, policy, f"seed_{seed}", "rounds.jsonl"), records)
    if write_files:
        base = os.path.join(cfg.out_dir, f"scenario_{cfg.scenario}")
        write_summary_csv(os.path.join(base, "summary.csv"), results)
        write_timings_csv(os.path.join(base, "timings.csv"), results)
    return results


SWEEP_AXES = {
    "p_m": ("II", "III", "IV"),
    "k_percent": ("II", "IV"),
    "mu_a": ("II", "IV"),
    "sigma_a": ("II", "IV"),
    "snr_db": ("III", "IV"),
    "n_clients": ("I", "II", "III", "IV"),
    "p_k": ("I", "II", "III", "IV"),
}


def sweep_point_config(cfg: ScenarioConfig, axis: str, value: float) -> ScenarioConfig:
    if axis == "p_m":
        return replace(cfg, p_m=float(value))
    if axis in ("k_percent", "mu_a", "sigma_a", "snr_db"):
        return replace(cfg, defect_params={**cfg.defect_params, axis: float(value)})
    if axis == "n_clients":
        return replace(cfg, n_clients=int(value))
    if axis == "p_k":
        return replace(cfg, p_k=float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def run_sweep(cfg: ScenarioConfig, axis: str, values, qeen: QeenModel = None,
              agents: dict = None, write_files: bool = True) -> list:
    """One scenario run per axis value, shared base seed and shared artifacts.

    Returns long-format rows (axis, value, policy, metrics). Changing
    n_clients or p_k alters the agent's state/action arity, so those sweeps
    retrain per point; the defect axes reuse one trained agent.
    """
    if not values:
        raise ConfigError("empty sweep value list")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {sorted(SWEEP_AXES)}")
    if cfg.scenario not in SWEEP_AXES[axis]:
        raise ConfigError(f"axis {axis!r} not applicable to Scenario {cfg.scenario}")

    shares_arity = axis not in ("n_clients", "p_k")
    if shares_arity:
        needs_qeen = "dearfsac" in cfg.policies
        if needs_qeen and qeen is None:
            qeen = ensure_qeen(cfg)
        agents = dict(agents or {})
        for policy in cfg.policies:
            if policy in ("dearfsac", "sac_without_qeen") and policy not in agents:
                agents[policy] = ensure_agent(cfg, policy, qeen)

    rows = []
    for value in values:
        point = sweep_point_config(cfg, axis, value)
        point_results = run_scenario(
            point,
            qeen=qeen if shares_arity else None,
            agents=agents if shares_arity else None,
            write_files=False,
        )
        for result in point_results:
            rows.append((axis, value, result))
    if write_files:
        header = "axis,value,policy,mape_mean,mape_std,rmse_mean,rmse_std"
        lines = [header]
        for axis_name, value, r in rows:
            lines.append(",".join(
                [axis_name, _fmt(value), r.policy] +
                [_fmt(v) for v in (r.mape_mean, r.mape_std, r.rmse_mean, r.rmse_std)]))
        _atomic_write(os.path.join(cfg.out_dir, f"sweep_{axis}.csv"),
                      "\n".join(lines) + "\n")
    return rows


def generate_data_files(cfg: ScenarioConfig) -> tuple:
    """Write the synthetic fleet CSV and holiday calendar for this config."""
    fleet = generate_fleet(replace(cfg.fleet, n_clients=cfg.n_clients, seed=cfg.seed))
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "fleet.csv")
    holiday_path = os.path.join(cfg.out_dir, "holidays.json")
    write_csv(csv_path, fleet, holidays_path=holiday_path)
    return csv_path, holiday_path
