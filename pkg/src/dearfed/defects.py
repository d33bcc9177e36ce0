"""Defect injection into load data and uploaded parameters, and ground-truth
severity marks.

Three defect kinds: a data integrity attack multiplying a random share of
stored load points by Gaussian percentage factors, SNR-modeled transmission
noise added to uploaded parameter vectors, and the combination of both on
the same client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeding
from .datagen import LoadDataset
from .forecasting import ForecastModel, mape, predict
from .params import ModelParams

DEFECT_KINDS = ("none", "dia", "comm_noise", "mixed")


@dataclass(frozen=True)
class DefectSpec:
    """What to inject and into how many clients."""

    kind: str = "none"
    p_m: float = 0.0          # share of clients affected
    k_percent: float = 0.0    # share of data points hit by the integrity attack
    mu_a: float = 0.0         # mean of the multiplicative perturbation, in percent
    sigma_a: float = 0.0      # std of the perturbation, in percent
    snr_db: float = math.inf  # transmission noise level; inf = clean channel

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if not 0.0 <= self.k_percent <= 100.0:
            raise ValueError("k_percent must be within [0, 100]")
        if not 0.0 <= self.p_m <= 1.0:
            raise ValueError("p_m must be within [0, 1]")

    @property
    def attacks_data(self) -> bool:
        return self.kind in ("dia", "mixed")

    @property
    def attacks_uploads(self) -> bool:
        return self.kind in ("comm_noise", "mixed")


def affected_clients(spec: DefectSpec, n_clients: int, seed: int) -> frozenset:
    """The fixed defective-client set for a run: floor(p_m * N) indices."""
    count = int(spec.p_m * n_clients)
    if spec.kind == "none" or count == 0:
        return frozenset()
    rng = seeding.stream(seed, seeding.DEFECT_SET)
    return frozenset(int(i) for i in rng.choice(n_clients, size=count, replace=False))


def inject_dia(data: LoadDataset, k_percent: float, mu_a: float, sigma_a: float,
               seed: int, rng=None) -> LoadDataset:
    """Multiply floor(k% * T) distinct points by (1 + p/100), p ~ N(mu_a, sigma_a^2).

    Perturbed loads are clamped above 0.01 kW; the input dataset is untouched.
    Pass `rng` to tie point selection to an external stream instead of `seed`.
    """
    if not 0.0 <= k_percent <= 100.0:
        raise ValueError("k_percent must be within [0, 100]")
    count = int(len(data) * k_percent / 100.0)
    if count == 0:
        return data
    if rng is None:
        rng = seeding.stream(seed, seeding.DIA)
    hit = rng.choice(len(data), size=count, replace=False)
    factors = 1.0 + rng.normal(mu_a, sigma_a, size=count) / 100.0
    loads = data.loads.copy()
    loads[hit] = np.maximum(loads[hit] * factors, 0.01)
    return LoadDataset(data.client_id, data.timestamps, loads, data.holidays)


def inject_comm_noise(w: ModelParams, snr_db: float) -> ModelParams:
    """Perturbed upload w + w / 10^(snr_db/10), elementwise and deterministic."""
    if not np.all(np.isfinite(w.values)):
        raise ValueError("parameters must be finite")
    noisy = w.values + w.values / (10.0 ** (snr_db / 10.0))
    return ModelParams(noisy, w.layout)


def inject_mixed(data: LoadDataset, w: ModelParams, spec: DefectSpec,
                 seed: int) -> tuple:
    """Both injections on the same client: DIA on data, noise on the upload."""
    if spec.kind != "mixed":
        raise ValueError(f"inject_mixed requires kind='mixed', got {spec.kind!r}")
    return (
        inject_dia(data, spec.k_percent, spec.mu_a, spec.sigma_a, seed),
        inject_comm_noise(w, spec.snr_db),
    )


@dataclass(frozen=True)
class DefectMark:
    """Severity of defects in one model, within [0, 1]."""

    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"mark {self.value} outside [0, 1]")


def defect_mark(w: ModelParams, model: ForecastModel, validation_set) -> DefectMark:
    """1 - accuracy on the server validation set.

    Accuracy for the regression forecaster is max(0, 1 - MAPE/100); models
    producing non-finite predictions get the worst mark.
    """
    if len(validation_set) == 0:
        raise ValueError("validation set is empty")
    saved = model.net.get_vector()
    try:
        model.load_model_params(w)
        y_hat = predict(model, validation_set)
        if not np.all(np.isfinite(y_hat)):
            return DefectMark(1.0)
        acc = max(0.0, 1.0 - mape(validation_set.targets_kw, y_hat) / 100.0)
    finally:
        model.net.set_vector(saved)
    return DefectMark(min(1.0, max(0.0, 1.0 - acc)))
