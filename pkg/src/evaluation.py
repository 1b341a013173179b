"""
Forecast verification: latitude-weighted RMSE/MAE/ACC, extreme-event CSI/SEDI and
radially binned power spectra, plus CSV writers for the per-lead results.
"""
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import fft

from src.utils import atomic_write_bytes

logger = logging.getLogger(__name__)

RATE_EPS = 1e-6
POWER_FLOOR = 1e-30


class MetricError(ValueError):
    """Base class for metric errors."""


class NoValidCellsError(MetricError):
    pass


class UndefinedCorrelationError(MetricError):
    pass


class SpectrumBandError(MetricError):
    pass


# --- weights and point metrics -----------------------------------------------------

def latitude_weights(latitudes: Sequence[float]) -> np.ndarray:
    """``L(i) = N_lat * cos(lat_i) / sum(cos(lat))``; the weights average to 1."""
    lat = np.asarray(latitudes, dtype=np.float64)
    if lat.size == 0:
        raise MetricError("latitude_weights needs at least one latitude")
    if np.any(np.abs(lat) > 90.0):
        raise MetricError(f"Latitudes must lie in [-90, 90], got range [{lat.min()}, {lat.max()}]")
    cos = np.cos(np.deg2rad(lat))
    total = cos.sum()
    if not total > 1e-12:
        raise MetricError("Latitude weights are undefined when every latitude is a pole")
    return lat.size * cos / total


def _valid(mask: Optional[np.ndarray], shape: Tuple[int, ...]) -> np.ndarray:
    valid = np.ones(shape[-2:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != shape[-2:]:
        raise MetricError(f"Mask shape {valid.shape} does not match grid {shape[-2:]}")
    if not valid.any():
        raise NoValidCellsError("No valid cells to evaluate")
    return valid


def weighted_rmse_mae(
    pred: np.ndarray,
    truth: np.ndarray,
    weights: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tuple[float, float]:
    """Latitude-weighted RMSE and MAE of one ``[H, W]`` field over valid cells."""
    if pred.shape != truth.shape:
        raise MetricError(f"Shapes differ: {pred.shape} vs {truth.shape}")
    valid = _valid(mask, pred.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], valid.shape)[valid]
    diff = (np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))[valid]
    n = valid.sum()
    return float(np.sqrt(np.sum(w * diff * diff) / n)), float(np.sum(w * np.abs(diff)) / n)


def weighted_acc(
    pred: np.ndarray,
    truth: np.ndarray,
    climatology: np.ndarray,
    weights: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Latitude-weighted anomaly correlation of ``pred`` and ``truth`` around ``climatology``."""
    if pred.shape != truth.shape:
        raise MetricError(f"Shapes differ: {pred.shape} vs {truth.shape}")
    valid = _valid(mask, pred.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], valid.shape)[valid]
    clim = np.broadcast_to(np.asarray(climatology, dtype=np.float64), valid.shape)
    a = (np.asarray(pred, dtype=np.float64) - clim)[valid]
    b = (np.asarray(truth, dtype=np.float64) - clim)[valid]
    saa, sbb = np.sum(w * a * a), np.sum(w * b * b)
    if saa == 0 or sbb == 0:
        raise UndefinedCorrelationError("ACC is undefined when an anomaly field is identically zero")
    return float(np.clip(np.sum(w * a * b) / np.sqrt(saa * sbb), -1.0, 1.0))


# --- extremes --------------------------------------------------------------------

def csi_from_counts(tp: int, fp: int, fn: int) -> Optional[float]:
    denom = tp + fp + fn
    return tp / denom if denom else None


def sedi_from_rates(hit_rate: float, false_alarm: float, eps: float = RATE_EPS) -> float:
    h = min(max(hit_rate, eps), 1.0 - eps)
    f = min(max(false_alarm, eps), 1.0 - eps)
    num = math.log(f) - math.log(h) - math.log(1.0 - f) + math.log(1.0 - h)
    den = math.log(f) + math.log(h) + math.log(1.0 - f) + math.log(1.0 - h)
    return num / den


def contingency(pred: np.ndarray, truth: np.ndarray, threshold: np.ndarray, mask: Optional[np.ndarray] = None) -> Dict[str, int]:
    valid = _valid(mask, np.shape(pred))
    p = (np.asarray(pred) > threshold)[valid]
    t = (np.asarray(truth) > threshold)[valid]
    return {
        "tp": int(np.sum(p & t)),
        "fp": int(np.sum(p & ~t)),
        "fn": int(np.sum(~p & t)),
        "tn": int(np.sum(~p & ~t)),
    }


def csi_sedi(
    pred: np.ndarray,
    truth: np.ndarray,
    threshold: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Optional[float], Optional[float]]:
    """CSI and SEDI for exceedances of ``threshold``; ``(None, None)`` with no events at all."""
    counts = contingency(pred, truth, threshold, mask)
    return scores_from_counts(counts)


def scores_from_counts(counts: Dict[str, int]) -> Tuple[Optional[float], Optional[float]]:
    tp, fp, fn = counts["tp"], counts["fp"], counts["fn"]
    if tp + fp == 0 and tp + fn == 0:
        return None, None
    hit_rate = tp / (tp + fn) if tp + fn else 0.0
    false_alarm = fp / (fp + tp) if fp + tp else 0.0
    return csi_from_counts(tp, fp, fn), sedi_from_rates(hit_rate, false_alarm)


def extreme_thresholds(train: np.ndarray, quantile: float = 0.95) -> np.ndarray:
    """Per-cell ``quantile`` of the training split ``[T, V, H, W]`` -> ``[V, H, W]``."""
    if not 0.0 < quantile < 1.0:
        raise MetricError(f"quantile must lie in (0, 1), got {quantile}")
    return np.quantile(np.asarray(train, dtype=np.float64), quantile, axis=0)


# --- spectra ---------------------------------------------------------------------

@dataclass
class Spectrum:
    k: np.ndarray
    power: np.ndarray
    total_power: float
    slope: Optional[float] = None
    band: Optional[Tuple[int, int]] = None

    @property
    def k_max(self) -> int:
        return int(self.k[-1]) if len(self.k) else 0


def _radial_wavenumbers(height: int, width: int) -> np.ndarray:
    ky = fft.fftfreq(height) * height
    kx = fft.fftfreq(width) * width
    return np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)


def fit_slope(k: np.ndarray, power: np.ndarray, band: Tuple[int, int]) -> float:
    lo, hi = band
    sel = (k >= lo) & (k <= hi) & (power > 0)
    if sel.sum() < 2:
        raise SpectrumBandError(f"Band {band} holds fewer than 2 positive bins")
    slope, _ = np.polyfit(np.log(k[sel]), np.log(power[sel]), 1)
    return float(slope)


def energy_spectrum(
    field: np.ndarray,
    band: Optional[Tuple[int, int]] = None,
    latitudes: Optional[Sequence[float]] = None,
) -> Spectrum:
    """Radially binned power of a ``[H, W]`` field.

    The field is demeaned (and scaled by ``cos(lat)`` when ``latitudes`` is given),
    transformed with a 2-D DFT normalized so that the power over all modes equals
    the field variance, and binned by rounded integer ``|k|``. Reported bins cover
    ``1..min(H, W) // 2``.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) < 8:
        raise MetricError(f"energy_spectrum expects a 2-D field of at least 8x8, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise MetricError("energy_spectrum needs a finite field")
    height, width = f.shape
    if latitudes is not None:
        f = f * np.cos(np.deg2rad(np.asarray(latitudes, dtype=np.float64)))[:, None]
    f = f - f.mean()
    power2d = np.abs(fft.fft2(f) / (height * width)) ** 2
    radius = _radial_wavenumbers(height, width)
    binned = np.bincount(radius.ravel(), weights=power2d.ravel())
    k_max = min(height, width) // 2
    k = np.arange(1, k_max + 1)
    power = binned[1:k_max + 1]
    spectrum = Spectrum(k=k, power=power, total_power=float(power2d.sum()))
    if band is not None:
        lo, hi = band
        if lo < 1 or hi > k_max or lo >= hi:
            raise SpectrumBandError(f"Band {band} outside resolvable wavenumbers [1, {k_max}]")
        spectrum.band = (int(lo), int(hi))
        spectrum.slope = fit_slope(k, power, spectrum.band)
    return spectrum


def synthesize_power_law_field(height: int, width: int, slope: float, seed: int = 0) -> np.ndarray:
    """Random-phase real field whose radially binned power follows ``k ** slope``.

    Every mode carries an equal share of its ring's power.
    """
    rng = np.random.default_rng(seed)
    radius = _radial_wavenumbers(height, width)
    counts = np.bincount(radius.ravel())
    amplitude = np.zeros(radius.shape)
    nonzero = radius > 0
    amplitude[nonzero] = np.sqrt(radius[nonzero] ** float(slope) / counts[radius[nonzero]])
    phase = rng.uniform(0.0, 2.0 * np.pi, size=radius.shape)
    # antisymmetric phases keep the spectrum Hermitian, so the inverse is real
    mirror = phase[(-np.arange(height)) % height][:, (-np.arange(width)) % width]
    spectrum = amplitude * np.exp(1j * (phase - mirror))
    return fft.ifft2(spectrum).real * height * width


def mean_spectrum(
    fields: Sequence[np.ndarray],
    latitudes: Optional[Sequence[float]] = None,
    band: Optional[Tuple[int, int]] = None,
) -> Spectrum:
    """Average of per-field spectra; the slope (if a band is given) is fitted on the mean."""
    if not fields:
        raise MetricError("mean_spectrum needs at least one field")
    spectra = [energy_spectrum(f, latitudes=latitudes) for f in fields]
    mean = Spectrum(
        k=spectra[0].k,
        power=np.mean([s.power for s in spectra], axis=0),
        total_power=float(np.mean([s.total_power for s in spectra])),
    )
    if band is not None:
        lo, hi = band
        if lo < 1 or hi > mean.k_max or lo >= hi:
            raise SpectrumBandError(f"Band {band} outside resolvable wavenumbers [1, {mean.k_max}]")
        mean.band = (int(lo), int(hi))
        mean.slope = fit_slope(mean.k, mean.power, mean.band)
    return mean


def log_spectral_gap(spectrum: Spectrum, reference: Spectrum) -> float:
    """Mean absolute log10 power difference over the upper half of the resolvable bins."""
    if not np.array_equal(spectrum.k, reference.k):
        raise MetricError("Spectra have different wavenumber bins")
    upper = spectrum.k > spectrum.k_max / 2
    a = np.log10(np.maximum(spectrum.power[upper], POWER_FLOOR))
    b = np.log10(np.maximum(reference.power[upper], POWER_FLOOR))
    return float(np.mean(np.abs(a - b)))


# --- reports ---------------------------------------------------------------------

@dataclass
class MetricReport:
    variables: Tuple[str, ...]
    leads: np.ndarray
    rmse: np.ndarray
    mae: np.ndarray
    acc: np.ndarray
    csi: np.ndarray
    sedi: np.ndarray
    threshold_quantile: float = 0.95
    n_ics: int = 0
    mask_policy: str = "masked cells excluded"
    label: str = ""
    metadata: Dict = field(default_factory=dict)

    def mean_rmse(self, max_lead: Optional[int] = None) -> float:
        """Mean normalized RMSE over variables and leads ``1..max_lead``."""
        sel = self.leads >= 1
        if max_lead is not None:
            sel &= self.leads <= max_lead
        return float(np.nanmean(self.rmse[:, sel]))

    def metrics_frame(self) -> pd.DataFrame:
        rows = []
        for v, name in enumerate(self.variables):
            for j, lead in enumerate(self.leads):
                rows.append({
                    "variable": name,
                    "lead": int(lead),
                    "rmse": self.rmse[v, j],
                    "mae": self.mae[v, j],
                    "acc": self.acc[v, j],
                })
        return pd.DataFrame(rows, columns=["variable", "lead", "rmse", "mae", "acc"])

    def extremes_frame(self) -> pd.DataFrame:
        rows = []
        for v, name in enumerate(self.variables):
            for j, lead in enumerate(self.leads):
                rows.append({"variable": name, "threshold_quantile": self.threshold_quantile,
                             "lead": str(int(lead)), "csi": self.csi[v, j], "sedi": self.sedi[v, j]})
            with np.errstate(all="ignore"):
                csi_mean = np.nanmean(self.csi[v]) if np.any(np.isfinite(self.csi[v])) else np.nan
                sedi_mean = np.nanmean(self.sedi[v]) if np.any(np.isfinite(self.sedi[v])) else np.nan
            rows.append({"variable": name, "threshold_quantile": self.threshold_quantile,
                         "lead": "mean", "csi": csi_mean, "sedi": sedi_mean})
        return pd.DataFrame(rows, columns=["variable", "threshold_quantile", "lead", "csi", "sedi"])


@dataclass
class EvaluationContext:
    """Everything metrics need besides the traces, in normalized space."""
    variables: Tuple[str, ...]
    latitudes: np.ndarray
    masks: np.ndarray
    climatology: np.ndarray
    thresholds: np.ndarray
    threshold_quantile: float = 0.95

    @property
    def weights(self) -> np.ndarray:
        return latitude_weights(self.latitudes)


def day_of_cycle_climatology(seq: np.ndarray, cycle_length: int, start_day: int = 0) -> np.ndarray:
    """Per day-of-cycle mean of a ``[T, V, H, W]`` sequence; days without samples use the overall mean."""
    days = (start_day + np.arange(len(seq))) % cycle_length
    overall = seq.mean(axis=0)
    clim = np.empty((cycle_length,) + seq.shape[1:])
    for d in range(cycle_length):
        group = seq[days == d]
        clim[d] = group.mean(axis=0) if len(group) else overall
    return clim


def evaluate_series(
    states: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    start_days: Sequence[int],
    context: EvaluationContext,
    horizon: int,
    label: str = "",
) -> MetricReport:
    """Per-variable, per-lead metrics averaged over initial conditions.

    ``states[i]`` and ``truths[i]`` are ``[steps + 1, V, H, W]`` for initial condition
    ``i``; leads past a truncated (diverged) trace are left out of the averages.
    """
    n_vars = len(context.variables)
    leads = np.arange(horizon + 1)
    shape = (n_vars, horizon + 1)
    sums = {k: np.zeros(shape) for k in ("rmse", "mae", "acc")}
    counts = {k: np.zeros(shape) for k in ("rmse", "acc")}
    table = np.zeros(shape + (3,), dtype=np.int64)
    weights = context.weights
    cycle = context.climatology.shape[0]
    for seq, truth, start in zip(states, truths, start_days):
        for lead in range(min(len(seq), horizon + 1)):
            day = (start + lead) % cycle
            for v in range(n_vars):
                mask = context.masks[v]
                rmse, mae = weighted_rmse_mae(seq[lead, v], truth[lead, v], weights, mask)
                sums["rmse"][v, lead] += rmse
                sums["mae"][v, lead] += mae
                counts["rmse"][v, lead] += 1
                try:
                    sums["acc"][v, lead] += weighted_acc(seq[lead, v], truth[lead, v], context.climatology[day, v], weights, mask)
                    counts["acc"][v, lead] += 1
                except UndefinedCorrelationError:
                    pass
                c = contingency(seq[lead, v], truth[lead, v], context.thresholds[v], mask)
                table[v, lead] += (c["tp"], c["fp"], c["fn"])
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = sums["rmse"] / counts["rmse"]
        mae = sums["mae"] / counts["rmse"]
        acc = sums["acc"] / counts["acc"]
    csi = np.full(shape, np.nan)
    sedi = np.full(shape, np.nan)
    for v in range(n_vars):
        for lead in range(horizon + 1):
            tp, fp, fn = (int(x) for x in table[v, lead])
            c, s = scores_from_counts({"tp": tp, "fp": fp, "fn": fn})
            if c is not None:
                csi[v, lead], sedi[v, lead] = c, s
    return MetricReport(
        variables=tuple(context.variables),
        leads=leads,
        rmse=rmse,
        mae=mae,
        acc=acc,
        csi=csi,
        sedi=sedi,
        threshold_quantile=context.threshold_quantile,
        n_ics=len(states),
        label=label,
    )


def scores_at_lead(
    states: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    context: EvaluationContext,
    lead: int,
    variables: Optional[Sequence[int]] = None,
) -> Tuple[float, float]:
    """Latitude-weighted RMSE and MAE at ``lead``, averaged over ``variables`` and every trace that reaches it.

    NaN when no trace reaches the lead.
    """
    picks = range(len(context.variables)) if variables is None else variables
    weights = context.weights
    rmse, mae = [], []
    for seq, truth in zip(states, truths):
        if len(seq) <= lead:
            continue
        for v in picks:
            r, m = weighted_rmse_mae(seq[lead, v], truth[lead, v], weights, context.masks[v])
            rmse.append(r)
            mae.append(m)
    if not rmse:
        return math.nan, math.nan
    return float(np.mean(rmse)), float(np.mean(mae))


# --- files -----------------------------------------------------------------------

def _write_frame(df: pd.DataFrame, path: str) -> str:
    buffer = io.StringIO()
    df.to_csv(buffer, index=False, float_format="%.10g")
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
    return path


def write_metrics_csv(reports: Sequence[MetricReport], path: str) -> str:
    frames = []
    for report in reports:
        df = report.metrics_frame()
        df.insert(0, "series", report.label)
        frames.append(df)
    return _write_frame(pd.concat(frames, ignore_index=True), path)


def write_extremes_csv(reports: Sequence[MetricReport], path: str) -> str:
    frames = []
    for report in reports:
        df = report.extremes_frame()
        df.insert(0, "series", report.label)
        frames.append(df)
    return _write_frame(pd.concat(frames, ignore_index=True), path)


ABLATION_COLUMNS = ["variant", "scope", "lead", "rmse", "mae", "params", "macs", "diverged"]


def write_ablation_csv(rows: Sequence[Dict], path: str) -> str:
    return _write_frame(pd.DataFrame(list(rows), columns=ABLATION_COLUMNS), path)


def write_spectrum_csv(spectra: Dict[str, Spectrum], path: str) -> str:
    rows: List[Dict] = []
    for label, spectrum in spectra.items():
        rows.extend({"k": int(k), "power": float(p), "series": label} for k, p in zip(spectrum.k, spectrum.power))
    return _write_frame(pd.DataFrame(rows, columns=["k", "power", "series"]), path)
