"""Regime-switching AR(2) series with a known optimal predictor.

Within regime r:

    x_t = mu_r + phi1_r (x_{t-1} - mu_r) + phi2_r (x_{t-2} - mu_r) + e_t,
    e_t ~ N(0, sigma_r^2)

The regime schedule is fixed in advance and never shown to models. Because
the law is known, the one-step conditional mean is the minimum-MSE forecast
and its RMSE (sigma_r) is the floor any learned model is compared with.
"""
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .data import RawSeries
from .errors import ConfigurationError, ContractError, DataError


@dataclass(frozen=True)
class Regime:
    mu: float
    phi1: float
    phi2: float
    sigma: float

    def is_stationary(self):
        return abs(self.phi2) < 1 and self.phi1 + self.phi2 < 1 and self.phi2 - self.phi1 < 1

    def stationary_std(self):
        """Std of the stationary AR(2) law."""
        p1, p2 = self.phi1, self.phi2
        var = self.sigma ** 2 * (1 - p2) / ((1 + p2) * ((1 - p2) ** 2 - p1 ** 2))
        return math.sqrt(var)

    def lag1_autocorrelation(self):
        return self.phi1 / (1 - self.phi2)


@dataclass
class RegimeSpec:
    regimes: list
    schedule: list  # [(start, regime_id)], first start 0, increasing
    length: int
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        self.schedule = [(int(s), int(r)) for s, r in self.schedule]
        self.validate()

    def validate(self):
        if self.length < 3:
            raise ConfigurationError("series length must be at least 3")
        if not self.regimes:
            raise ConfigurationError("need at least one regime")
        for i, r in enumerate(self.regimes):
            if not r.is_stationary():
                raise ConfigurationError(f"regime {i} ({r}) is not stationary")
            if r.sigma < 0:
                raise ConfigurationError(f"regime {i} has negative sigma")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ConfigurationError("schedule must start at index 0")
        starts = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= self.length:
            raise ConfigurationError("schedule starts must increase and lie inside the series")
        for _, r in self.schedule:
            if not 0 <= r < len(self.regimes):
                raise ConfigurationError(f"schedule names unknown regime {r}")

    def regime_ids(self):
        """Regime id for every time index."""
        ids = np.empty(self.length, dtype=np.int64)
        bounds = [s for s, _ in self.schedule] + [self.length]
        for (start, r), stop in zip(self.schedule, bounds[1:]):
            ids[start:stop] = r
        return ids

    # text format ---------------------------------------------------------

    @classmethod
    def parse(cls, text, name="custom"):
        """Parse the line-oriented spec format::

            length = 6000
            regime.0 = mu:0 phi1:0.5 phi2:0.2 sigma:0.1
            schedule = 0:0 1000:1 2000:0

        ``alternate = <segment length>`` may replace ``schedule`` and cycles
        the regimes in id order.
        """
        length, regimes, schedule, alternate = None, {}, None, None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError("expected key = value", row=lineno)
            key, _, val = (s.strip() for s in line.partition("="))
            try:
                if key == "length":
                    length = int(val)
                elif key.startswith("regime."):
                    fields_ = dict(item.split(":", 1) for item in val.split())
                    regimes[int(key.split(".", 1)[1])] = Regime(
                        float(fields_["mu"]), float(fields_["phi1"]), float(fields_["phi2"]),
                        float(fields_["sigma"]))
                elif key == "schedule":
                    schedule = [tuple(int(v) for v in item.split(":")) for item in val.split()]
                elif key == "alternate":
                    alternate = int(val)
                elif key == "name":
                    name = val
                else:
                    raise DataError(f"unknown key {key!r}", row=lineno)
            except (ValueError, KeyError) as exc:
                raise DataError(f"bad value for {key}: {exc}", row=lineno) from None
        if length is None or not regimes:
            raise DataError("spec needs 'length' and at least one 'regime.<id>'")
        if sorted(regimes) != list(range(len(regimes))):
            raise DataError("regime ids must be 0..n-1")
        ordered = [regimes[i] for i in range(len(regimes))]
        if schedule is None:
            seg = alternate or length
            schedule = [(s, (s // seg) % len(ordered)) for s in range(0, length, seg)]
        try:
            return cls(ordered, schedule, length, name)
        except ConfigurationError as exc:
            raise DataError(str(exc)) from None

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self):
        lines = [f"name = {self.name}", f"length = {self.length}"]
        for i, r in enumerate(self.regimes):
            lines.append(f"regime.{i} = mu:{r.mu!r} phi1:{r.phi1!r} phi2:{r.phi2!r} "
                         f"sigma:{r.sigma!r}")
        lines.append("schedule = " + " ".join(f"{s}:{r}" for s, r in self.schedule))
        return "\n".join(lines) + "\n"


def reference_spec():
    """Two alternating regimes, 1000 steps each, 6000 steps total."""
    regimes = [Regime(0.0, 0.5, 0.2, 0.1), Regime(2.0, -0.4, 0.3, 0.1)]
    schedule = [(s, (s // 1000) % 2) for s in range(0, 6000, 1000)]
    return RegimeSpec(regimes, schedule, 6000, name="reference")


def severe_spec():
    """Three regimes sharing a level but differing in dynamics and noise,
    switching every 300 steps in a non-periodic order."""
    regimes = [
        Regime(1.0, 0.9, 0.0, 0.05),
        Regime(1.0, -0.8, 0.0, 0.15),
        Regime(1.0, 0.2, 0.6, 0.05),
    ]
    order = [0, 1, 2, 1, 0, 2, 0, 1, 2, 0, 2, 1, 0, 1, 2, 1, 0, 2, 1, 0]
    schedule = [(300 * i, r) for i, r in enumerate(order)]
    return RegimeSpec(regimes, schedule, 300 * len(order), name="severe")


PRESETS = {"reference": reference_spec, "severe": severe_spec}


def generate(spec, seed):
    """Simulate the series; returns a one-feature RawSeries named ``x``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    ids = spec.regime_ids()
    noise = rng.standard_normal(spec.length)
    mu = np.array([r.mu for r in spec.regimes])[ids]
    p1 = np.array([r.phi1 for r in spec.regimes])[ids]
    p2 = np.array([r.phi2 for r in spec.regimes])[ids]
    sd = np.array([r.sigma for r in spec.regimes])[ids]
    x = np.empty(spec.length)
    prev1 = prev2 = mu[0]
    for t in range(spec.length):
        x[t] = mu[t] + p1[t] * (prev1 - mu[t]) + p2[t] * (prev2 - mu[t]) + sd[t] * noise[t]
        prev2, prev1 = prev1, x[t]
    return RawSeries(x[None, :], None, ["x"])


def oracle_one_step(spec, x_prev1, x_prev2, regime):
    """Conditional mean of the next value given the last two and the regime."""
    r = spec.regimes[regime]
    return r.mu + r.phi1 * (x_prev1 - r.mu) + r.phi2 * (x_prev2 - r.mu)


def oracle_predictions(spec, series):
    """Oracle forecast for every t >= 2 (NaN for t < 2)."""
    x = np.asarray(series.values if isinstance(series, RawSeries) else series,
                   dtype=np.float64).reshape(-1)
    ids = spec.regime_ids()
    pred = np.full(x.shape, np.nan)
    for t in range(2, len(x)):
        pred[t] = oracle_one_step(spec, x[t - 1], x[t - 2], ids[t])
    return pred


def oracle_rmse(spec, series, indices=None):
    """RMSE of the oracle over the given time indices (default: all t >= 2)."""
    x = np.asarray(series.values if isinstance(series, RawSeries) else series,
                   dtype=np.float64).reshape(-1)
    pred = oracle_predictions(spec, x)
    idx = np.arange(2, len(x)) if indices is None else np.asarray(indices)
    if np.any(idx < 2):
        raise ContractError("oracle needs two previous values")
    return float(np.sqrt(np.mean((pred[idx] - x[idx]) ** 2)))


def oracle_report(spec, series):
    """Overall and per-regime oracle RMSE, with the noise sigma for comparison."""
    x = np.asarray(series.values, dtype=np.float64).reshape(-1)
    ids = spec.regime_ids()
    report = {"overall": oracle_rmse(spec, x), "regimes": {}}
    for i, r in enumerate(spec.regimes):
        idx = np.nonzero(ids == i)[0]
        idx = idx[idx >= 2]
        if len(idx):
            report["regimes"][str(i)] = {"sigma": r.sigma, "oracle_rmse": oracle_rmse(spec, x, idx),
                                         "steps": int(len(idx))}
    return report


def write_oracle_sidecar(spec, series, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(oracle_report(spec, series), fh, indent=2, sort_keys=True)
        fh.write("\n")


def shift_severity(spec):
    """Mean over regime pairs of |mean_i - mean_j| + |std_i - std_j| (stationary laws)."""
    if len(spec.regimes) < 2:
        raise ContractError("shift severity needs at least two regimes")
    dists = [abs(a.mu - b.mu) + abs(a.stationary_std() - b.stationary_std())
             for a, b in combinations(spec.regimes, 2)]
    return float(np.mean(dists))
