"""Series ingestion, preprocessing, windowing, metrics and the historical
average baseline."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .numerics import make_rng


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    values: np.ndarray
    missing_mask: np.ndarray | None = None
    steps_per_day: int = 288
    origin: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"series must be T x N, got shape {self.values.shape}")
        if self.missing_mask is None:
            self.missing_mask = np.zeros(self.values.shape, dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.missing_mask.shape != self.values.shape:
            raise DataError("missing_mask shape differs from values")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]


def _parse_cell(cell: str) -> float | None:
    cell = cell.strip()
    if not cell:
        return None
    return float(cell)


def load_csv(path, steps_per_day: int = 288) -> RawSeries:
    """Read a T x N numeric CSV; empty cells are missing.

    A first row containing any non-numeric cell is treated as a header.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        [_parse_cell(c) for c in rows[0]]
        first = 0
    except ValueError:
        first = 1
    body = rows[first:]
    if not body:
        raise DataError(f"{path}: header but no data rows")
    width = len(body[0])
    values = np.empty((len(body), width))
    missing = np.zeros((len(body), width), dtype=bool)
    for i, row in enumerate(body):
        line = i + first + 1
        if len(row) != width:
            raise DataError(f"{path}: row {line} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = _parse_cell(cell)
            except ValueError:
                raise DataError(f"{path}: row {line}, column {j + 1}: non-numeric value {cell!r}") from None
            if v is None:
                missing[i, j] = True
                values[i, j] = np.nan
            elif not math.isfinite(v):
                raise DataError(f"{path}: row {line}, column {j + 1}: non-finite value {cell!r}")
            else:
                values[i, j] = v
    return RawSeries(values, missing, steps_per_day, origin=str(path))


def write_csv(path, values: np.ndarray, header: list[str] | None = None) -> None:
    """Write a 2-D array with repr-formatted floats so a reload is exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in np.asarray(values):
            w.writerow([repr(float(v)) for v in row])


def interpolate_missing(s: RawSeries) -> RawSeries:
    """Linear interpolation inside each column, nearest value at the edges.

    The returned series keeps the original ``missing_mask`` so metrics can
    still exclude imputed entries.
    """
    values = s.values.copy()
    t = np.arange(s.n_steps)
    for j in range(s.n_nodes):
        obs = ~s.missing_mask[:, j]
        if not obs.any():
            raise DataError(f"column {j} has no observed values")
        if obs.all():
            continue
        # np.interp clamps to the end values outside the observed range
        values[~obs, j] = np.interp(t[~obs], t[obs], values[obs, j])
    return RawSeries(values, s.missing_mask.copy(), s.steps_per_day, s.origin, dict(s.meta))


class Normalizer(BaseEstimator, TransformerMixin):
    """Z-score scaling with a single mean and std over all nodes."""

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        std = float(X.std())
        if not std > 0:
            raise DataError("cannot normalize: training data has zero variance")
        self.mean_ = float(X.mean())
        self.std_ = std
        return self

    def _check(self):
        if not hasattr(self, "std_"):
            raise NotFittedError("Normalizer is not fitted")

    def transform(self, X):
        self._check()
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.std_

    def inverse_transform(self, X):
        self._check()
        return np.asarray(X, dtype=np.float64) * self.std_ + self.mean_

    @classmethod
    def from_stats(cls, mean: float, std: float) -> "Normalizer":
        if not std > 0:
            raise DataError(f"normalizer std must be positive, got {std}")
        n = cls()
        n.mean_, n.std_ = float(mean), float(std)
        return n


@dataclass
class WindowSet:
    """Windows cut from one chronological portion.

    ``inputs`` W x T_in x N x C (normalized), ``targets`` W x tau x N (original
    units), ``observed`` marks targets that were not imputed, ``origins``
    holds each window's first absolute row.
    """

    inputs: np.ndarray
    targets: np.ndarray
    observed: np.ndarray
    origins: np.ndarray
    bounds: tuple[int, int]

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class Dataset:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer
    lookback: int
    horizon: int
    steps_per_day: int = 288

    def split(self, name: str) -> WindowSet:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split_bounds(n_steps: int, ratios=(0.6, 0.2, 0.2)) -> list[tuple[int, int]]:
    """Chronological row ranges; the first two sizes are floored, the test
    portion takes the remainder."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(math.floor(n_steps * ratios[0]))
    n_val = int(math.floor(n_steps * ratios[1]))
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_steps)]


def make_windows(values: np.ndarray, observed: np.ndarray, bounds: tuple[int, int],
                 lookback: int, horizon: int, normalizer: Normalizer) -> WindowSet:
    lo, hi = bounds
    n = hi - lo - lookback - horizon + 1
    if n < 1:
        raise DataError(f"portion rows {lo}:{hi} too short for lookback {lookback} + horizon {horizon}")
    origins = np.arange(lo, lo + n)
    idx_in = origins[:, None] + np.arange(lookback)
    idx_out = origins[:, None] + lookback + np.arange(horizon)
    scaled = normalizer.transform(values)
    inputs = scaled[idx_in][..., None]
    return WindowSet(inputs, values[idx_out], observed[idx_out], origins, (lo, hi))


def split_and_window(s: RawSeries, ratios=(0.6, 0.2, 0.2), lookback: int = 12, horizon: int = 12,
                     normalizer: Normalizer | None = None) -> Dataset:
    """Split chronologically, fit the normalizer on the training rows, then
    window each portion at stride 1 without crossing portion boundaries."""
    if np.isnan(s.values).any():
        raise DataError("series has missing values; run interpolate_missing first")
    bounds = split_bounds(s.n_steps, ratios)
    if normalizer is None:
        lo, hi = bounds[0]
        if hi - lo < 1:
            raise DataError("training portion is empty")
        normalizer = Normalizer().fit(s.values[lo:hi])
    observed = ~s.missing_mask
    sets = [make_windows(s.values, observed, b, lookback, horizon, normalizer) for b in bounds]
    return Dataset(*sets, normalizer=normalizer, lookback=lookback, horizon=horizon,
                   steps_per_day=s.steps_per_day)


# metrics


@dataclass
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float
    n_observed: int
    n_mape_excluded: int


@dataclass
class MetricsReport:
    """Per-horizon and pooled metrics.  MAPE is expressed in percent."""

    horizons: list[HorizonMetrics]
    average: HorizonMetrics

    def rows(self) -> list[tuple[str, HorizonMetrics]]:
        return [(str(i + 1), h) for i, h in enumerate(self.horizons)] + [("avg", self.average)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["horizon", "MAE", "RMSE", "MAPE", "n_observed", "n_mape_excluded"])
            for label, h in self.rows():
                w.writerow([label, repr(h.mae), repr(h.rmse), repr(h.mape), h.n_observed, h.n_mape_excluded])

    def to_dict(self) -> dict:
        return {"horizons": [asdict(h) for h in self.horizons], "average": asdict(self.average)}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _pooled(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> HorizonMetrics:
    err = (pred - truth)[mask]
    if err.size == 0:
        raise DataError("no observed entries to score")
    nz = mask & (truth != 0)
    n_nz = int(nz.sum())
    mape = float(np.mean(np.abs((pred - truth)[nz] / truth[nz])) * 100.0) if n_nz else float("nan")
    return HorizonMetrics(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape=mape,
        n_observed=int(err.size),
        n_mape_excluded=int(err.size - n_nz),
    )


def metrics(pred, truth, mask=None) -> MetricsReport:
    """Score forecasts with horizon on axis 0 (``tau x N x M`` or any shape
    whose first axis is the horizon; 1-D input is one horizon).

    ``mask`` selects observed entries; MAPE additionally skips zero truth.
    The average pools every horizon into one index set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[None], truth[None]
        mask = None if mask is None else np.asarray(mask)[None]
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    per = [_pooled(pred[h], truth[h], mask[h]) for h in range(pred.shape[0])]
    return MetricsReport(per, _pooled(pred, truth, mask))


def window_metrics(pred: np.ndarray, windows: WindowSet) -> MetricsReport:
    """Metrics for ``W x tau x N`` forecasts against a window set."""
    to_h = lambda a: np.moveaxis(a, 1, 0)
    return metrics(to_h(pred), to_h(windows.targets), to_h(windows.observed))


# historical average


class HistoricalAverage(BaseEstimator):
    """Per-node mean of training values at each time-of-day slot."""

    def __init__(self, steps_per_day: int = 288):
        self.steps_per_day = steps_per_day

    def fit(self, X, y=None, observed=None, start: int = 0):
        """``X`` is T x N; row ``i`` is absolute timestep ``start + i``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"HA expects T x N values, got {X.shape}")
        if X.shape[0] < self.steps_per_day:
            raise DataError(f"HA needs at least one full day ({self.steps_per_day} steps), got {X.shape[0]}")
        observed = np.ones(X.shape, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
        slots = (start + np.arange(X.shape[0])) % self.steps_per_day
        sums = np.zeros((self.steps_per_day, X.shape[1]))
        counts = np.zeros((self.steps_per_day, X.shape[1]))
        np.add.at(sums, slots, np.where(observed, X, 0.0))
        np.add.at(counts, slots, observed)
        if (counts == 0).any():
            slot, node = np.argwhere(counts == 0)[0]
            raise DataError(f"slot {slot} has no training observations for node {node}")
        self.slot_means_ = sums / counts
        return self

    def predict(self, timesteps) -> np.ndarray:
        if not hasattr(self, "slot_means_"):
            raise NotFittedError("HistoricalAverage is not fitted")
        return self.slot_means_[np.asarray(timesteps) % self.steps_per_day]


def ha_forecast(s: RawSeries, train_end: int, horizon_steps: int,
                start: int | None = None, stop: int | None = None) -> np.ndarray:
    """HA forecasts ``horizon_steps x N x M`` for target rows ``start:stop``.

    Every horizon forecasts the same target rows, and since HA ignores recent
    data each horizon slice is identical.
    """
    start = train_end if start is None else start
    stop = s.n_steps if stop is None else stop
    ha = HistoricalAverage(s.steps_per_day).fit(
        s.values[:train_end], observed=~s.missing_mask[:train_end])
    pred = ha.predict(np.arange(start, stop)).T  # N x M
    return np.broadcast_to(pred, (horizon_steps,) + pred.shape).copy()


# synthetic data


def synth_generate(n_nodes: int, n_communities: int, n_steps: int, noise_std: float, seed: int,
                   steps_per_day: int = 48, equal_amplitude: bool = False, phase_jitter: float = 0.0,
                   coupling: float = 0.8, level: float = 4.0, burn_in: int = 100) -> RawSeries:
    """Community-structured diurnal series.

    Community ``c`` follows a daily template with phase ``pi * c / n_communities``
    and its own second-harmonic weight.  Node ``i`` is
    ``level + a_i * s_c(t + delta_i) + dev_i(t)`` where the deviation obeys

        dev_i(t) = coupling * mean(dev_j(t - 1) for peers j of i) + noise_i(t)

    so disturbances persist and travel inside a community.  Nodes in
    different communities are never coupled; with ``noise_std=0`` every
    deviation is zero.
    """
    if not n_nodes >= n_communities >= 1:
        raise ValueError(f"need n_nodes >= n_communities >= 1, got {n_nodes}, {n_communities}")
    rng = make_rng(seed)
    labels = np.arange(n_nodes) % n_communities
    amps = np.ones(n_nodes) if equal_amplitude else rng.uniform(0.5, 1.5, n_nodes)
    offsets = rng.uniform(-phase_jitter, phase_jitter, n_nodes) if phase_jitter > 0 else np.zeros(n_nodes)
    noise = rng.standard_normal((burn_in + n_steps, n_nodes)) * noise_std

    # row-normalized peer-mean operator, zero for singleton communities
    peers = (labels[:, None] == labels[None, :]) & ~np.eye(n_nodes, dtype=bool)
    counts = peers.sum(axis=1, keepdims=True)
    mix = np.divide(peers, counts, out=np.zeros(peers.shape), where=counts > 0)
    dev = np.zeros((burn_in + n_steps, n_nodes))
    prev = np.zeros(n_nodes)
    for t in range(burn_in + n_steps):
        prev = coupling * (mix @ prev) + noise[t]
        dev[t] = prev

    t = np.arange(n_steps)[:, None]
    omega = 2.0 * np.pi / steps_per_day
    phase = np.pi * labels / n_communities
    harmonic = 0.3 + 0.4 * (labels % 2)
    angle = omega * t + phase + offsets
    template = np.sin(angle) + harmonic * np.sin(2.0 * angle)
    x = level + amps * template + dev[burn_in:]
    meta = {"communities": labels.tolist(), "amplitudes": amps.tolist(),
            "phase_offsets": offsets.tolist(), "steps_per_day": steps_per_day,
            "noise_std": noise_std, "coupling": coupling, "seed": seed}
    return RawSeries(x, None, steps_per_day, origin="synthetic", meta=meta)


def lagged_cross_correlation(values: np.ndarray, i: int, j: int, lag: int = 1) -> float:
    """Pearson correlation of ``x_i(t)`` with ``x_j(t - lag)``."""
    a = values[lag:, i]
    b = values[:-lag, j] if lag else values[:, j]
    return float(np.corrcoef(a, b)[0, 1])
