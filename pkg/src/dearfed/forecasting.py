"""LSTM next-hour load forecaster: feature windows, local training, metrics.

Each sliding window is a (steps x 5) matrix of normalized load, normalized
hour index, day-of-week sine/cosine, and a binary holiday mark; the target
is the load one hour past the window's end. Load and index channels are
min-max scaled with statistics frozen from the training split.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeding
from .datagen import DataError, LoadDataset
from .params import ModelParams, layout_from_shapes

N_FEATURES = 5
CLIP_NORM = 5.0


@dataclass(frozen=True)
class WindowingConfig:
    l_back: int = 24   # window length, hourly steps
    l_ahead: int = 1   # stride between window starts, hours

    def __post_init__(self):
        if self.l_back < 1 or self.l_ahead < 1:
            raise ValueError("l_back and l_ahead must be >= 1")


@dataclass(frozen=True)
class NormStats:
    """Frozen min-max statistics of the training split."""

    load_min: float
    load_max: float
    idx_min: float
    idx_max: float

    @property
    def degenerate(self) -> bool:
        return self.load_max <= self.load_min

    def norm_load(self, kw: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.full_like(np.asarray(kw, dtype=np.float64), 0.5)
        scaled = (kw - self.load_min) / (self.load_max - self.load_min)
        return np.clip(scaled, 0.0, 1.0)

    def norm_index(self, idx: np.ndarray) -> np.ndarray:
        if self.idx_max <= self.idx_min:
            return np.full(np.shape(idx), 0.5)
        scaled = (idx - self.idx_min) / (self.idx_max - self.idx_min)
        return np.clip(scaled, 0.0, 1.0)

    def norm_target(self, kw: np.ndarray) -> np.ndarray:
        # targets are centered so a zero network output maps back to the
        # midpoint of the training load range
        return self.norm_load(kw) - 0.5

    def denorm_target(self, out: np.ndarray) -> np.ndarray:
        return (out + 0.5) * (self.load_max - self.load_min) + self.load_min


def compute_norm_stats(datasets) -> NormStats:
    """Min-max stats over one client's training segments."""
    loads = np.concatenate([ds.loads for ds in datasets])
    idx = np.concatenate([ds.hour_index for ds in datasets])
    stats = NormStats(float(loads.min()), float(loads.max()),
                      float(idx.min()), float(idx.max()))
    if stats.degenerate:
        warnings.warn(
            f"constant load series for {datasets[0].client_id}: "
            "min-max normalization degenerates to the 0.5 midpoint"
        )
    return stats


@dataclass(frozen=True)
class FeatureWindow:
    features: np.ndarray  # (l_back, 5)
    target_kw: float
    stats: NormStats


class WindowSet:
    """Stack of feature windows sharing one normalization.

    Behaves like a list of FeatureWindow while storing the features as one
    (n, l_back, 5) array for batched training.
    """

    def __init__(self, features: np.ndarray, targets_kw: np.ndarray, stats: NormStats):
        self.features = features
        self.targets_kw = targets_kw
        self.stats = stats

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i) -> FeatureWindow:
        return FeatureWindow(self.features[i], float(self.targets_kw[i]), self.stats)

    @property
    def targets_norm(self) -> np.ndarray:
        return self.stats.norm_target(self.targets_kw)

    @staticmethod
    def concat(sets) -> "WindowSet":
        sets = list(sets)
        return WindowSet(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.targets_kw for s in sets]),
            sets[0].stats,
        )


def build_windows(data: LoadDataset, cfg: WindowingConfig, stats: NormStats = None) -> WindowSet:
    """Slide windows over a gap-free hourly series.

    Windows start at row l_back and step by l_ahead; each window's target is
    the load at its end row. Pass the frozen training-split `stats` when
    windowing validation or test segments.
    """
    if len(data) < cfg.l_back + 1:
        raise DataError(
            f"{data.client_id}: need at least {cfg.l_back + 1} hourly points, have {len(data)}"
        )
    if stats is None:
        stats = compute_norm_stats([data])

    p = stats.norm_load(data.loads)
    i = stats.norm_index(data.hour_index)
    dow = data.weekday
    d_sin = np.sin(2.0 * np.pi * dow / 7.0)
    d_cos = np.cos(2.0 * np.pi * dow / 7.0)
    h = data.holiday_mark
    channels = np.stack([p, i, d_sin, d_cos, h], axis=1)  # (T, 5)

    starts = np.arange(cfg.l_back, len(data), cfg.l_ahead)
    rows = starts[:, None] + np.arange(-cfg.l_back, 0)[None, :]
    features = channels[rows]  # (n, l_back, 5)
    targets = data.loads[starts]
    return WindowSet(features, targets, stats)


def lstm_sequence(features: np.ndarray, w_x: ad.Tensor, w_h: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Final hidden state of one LSTM pass, as a single fused graph node.

    Equivalent to composing the per-step primitives (gate order input,
    forget, cell, output) but with backward-through-time written out by
    hand, which keeps desk-scale training off the Python-overhead floor.
    """
    n, steps, n_in = features.shape
    hid = w_h.data.shape[0]
    if w_x.data.shape != (n_in, 4 * hid):
        raise ad.ShapeError(f"w_x shaped {w_x.data.shape}, expected {(n_in, 4 * hid)}")

    flat = features.reshape(n * steps, n_in)
    xp = (flat @ w_x.data + b.data).reshape(n, steps, 4 * hid)

    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    cache = []
    for t in range(steps):
        z = xp[:, t, :] + h @ w_h.data
        i_g = ad._sigmoid(z[:, :hid])
        f_g = ad._sigmoid(z[:, hid:2 * hid])
        g_g = np.tanh(z[:, 2 * hid:3 * hid])
        o_g = ad._sigmoid(z[:, 3 * hid:])
        c_new = f_g * c + i_g * g_g
        tc = np.tanh(c_new)
        cache.append((h, c, i_g, f_g, g_g, o_g, tc))
        h, c = o_g * tc, c_new

    def bwd(grad_h):
        dw_x = np.zeros_like(w_x.data)
        dw_h = np.zeros_like(w_h.data)
        db = np.zeros_like(b.data)
        dh, dc = grad_h, np.zeros((n, hid))
        for t in range(steps - 1, -1, -1):
            h_prev, c_prev, i_g, f_g, g_g, o_g, tc = cache[t]
            dc = dc + dh * o_g * (1.0 - tc * tc)
            dz = np.empty((n, 4 * hid))
            dz[:, :hid] = dc * g_g * i_g * (1.0 - i_g)
            dz[:, hid:2 * hid] = dc * c_prev * f_g * (1.0 - f_g)
            dz[:, 2 * hid:3 * hid] = dc * i_g * (1.0 - g_g * g_g)
            dz[:, 3 * hid:] = dh * tc * o_g * (1.0 - o_g)
            dw_x += features[:, t, :].T @ dz
            dw_h += h_prev.T @ dz
            db += dz.sum(axis=0)
            dh = dz @ w_h.data.T
            dc = dc * f_g
        return ((w_x, dw_x), (w_h, dw_h), (b, db))

    return ad.Tensor(h, _parents=(w_x, w_h, b), _backward_fn=bwd)


class ForecastModel:
    """Single-layer LSTM over the 5 feature channels with a linear head."""

    GATES = 4  # input, forget, cell, output

    def __init__(self, hidden: int = 32, cfg: WindowingConfig = WindowingConfig(), seed: int = 0):
        self.hidden = hidden
        self.cfg = cfg
        self.net = ad.Net()
        rng = seeding.stream(seed, seeding.MODEL_INIT)
        g = self.GATES * hidden
        self.w_x = self.net.add_param("lstm.w_x", ad.init_params(rng, (N_FEATURES, g), 1.0 / np.sqrt(N_FEATURES)))
        self.w_h = self.net.add_param("lstm.w_h", ad.init_params(rng, (hidden, g), 1.0 / np.sqrt(hidden)))
        bias = np.zeros(g)
        bias[hidden:2 * hidden] = 1.0  # open forget gates at init
        self.b = self.net.add_param("lstm.b", bias)
        self.head_w = self.net.add_param("head.w", ad.init_params(rng, (hidden, 1), 1.0 / np.sqrt(hidden)))
        self.head_b = self.net.add_param("head.b", np.zeros(1))

    @property
    def d(self) -> int:
        return self.net.num_params

    def forward(self, features: np.ndarray) -> ad.Tensor:
        """Normalized predictions for a (n, l_back, 5) feature stack."""
        if features.ndim != 3 or features.shape[2] != N_FEATURES:
            raise ad.ShapeError(f"expected (n, l_back, {N_FEATURES}) features, got {features.shape}")
        h = lstm_sequence(np.ascontiguousarray(features), self.w_x, self.w_h, self.b)
        return ad.matmul(h, self.head_w) + self.head_b  # (n, 1)

    # -- flat-parameter bridge ------------------------------------------------

    def to_model_params(self) -> ModelParams:
        layout = layout_from_shapes((n, t.data.shape) for n, t in self.net.params.items())
        return ModelParams(self.net.get_vector(), layout)

    def load_model_params(self, params: ModelParams) -> None:
        self.net.set_vector(params.values)

    def clone(self) -> "ForecastModel":
        other = ForecastModel(self.hidden, self.cfg)
        other.net.set_vector(self.net.get_vector())
        return other


def predict(model: ForecastModel, windows):
    """De-normalized next-hour demand in kW.

    Accepts a WindowSet (returns an array) or a single FeatureWindow
    (returns a scalar); deterministic for fixed weights.
    """
    if isinstance(windows, FeatureWindow):
        out = model.forward(windows.features[None]).data[0, 0]
        return float(windows.stats.denorm_target(out))
    out = model.forward(windows.features).data[:, 0]
    return windows.stats.denorm_target(out)


def train_local(model: ForecastModel, windows: WindowSet, epochs: int, lr: float,
                batch_size: int = 128, seed: int = 0, rng=None,
                clip_norm: float = CLIP_NORM):
    """Adam on windowed MSE; returns (model, last-epoch mean training loss).

    With epochs=0 the loss is evaluated once and no update happens. Raises
    FloatingPointError when the loss stops being finite. Pass `rng` to tie
    the shuffle order to an external stream instead of `seed`.
    """
    if len(windows) == 0:
        raise DataError("cannot train on an empty window set")
    targets = windows.targets_norm[:, None]

    def batch_loss(idx) -> ad.Tensor:
        pred = model.forward(windows.features[idx])
        return ad.squared_error(pred, ad.Tensor(targets[idx]))

    if epochs == 0:
        loss = batch_loss(np.arange(len(windows))).item()
        _require_finite(loss)
        return model, loss

    if rng is None:
        rng = seeding.stream(seed, seeding.LOCAL_SHUFFLE)
    adam = ad.AdamState.for_size(model.d, lr)
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            model.net.zero_grad()
            loss = batch_loss(idx)
            _require_finite(loss.item())
            loss.backward()
            grads = ad.clip_global_norm(model.net.grad_vector(), clip_norm)
            vec = model.net.get_vector()
            ad.adam_step(adam, vec, grads)
            model.net.set_vector(vec)
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_loss = total / count
    return model, epoch_loss


def _require_finite(loss: float) -> None:
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss: {loss}")


# -- metrics ------------------------------------------------------------------


def mape(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean absolute percentage error, in percent."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty vectors")
    if np.any(y == 0):
        raise ZeroDivisionError("MAPE undefined: actual value of 0")
    return float(100.0 * np.mean(np.abs((y - y_hat) / y)))


def rmse(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Root mean square error, in kW."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty vectors")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))
