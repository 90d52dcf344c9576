"""Correlation metrics, logistic-4 score mapping, and the 10-crop protocol."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import rankdata

from .datapack import crop_sample, make_batch

log = logging.getLogger(__name__)


def _check_pair(pred, q, minlen):
    pred = np.asarray(pred, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if pred.shape != q.shape or pred.ndim != 1:
        raise ValueError("pred and q must be 1-D arrays of equal length")
    if len(pred) < minlen:
        raise ValueError(f"need at least {minlen} samples")
    return pred, q


def plcc(pred, q) -> float:
    """Pearson linear correlation coefficient."""
    pred, q = _check_pair(pred, q, 2)
    pc = pred - pred.mean()
    qc = q - q.mean()
    denom = np.linalg.norm(pc) * np.linalg.norm(qc)
    if denom == 0:
        raise ValueError("constant input: Pearson correlation undefined")
    return float(pc @ qc / denom)


def srocc(pred, q) -> float:
    """Spearman rank correlation: Pearson over average-tie rank vectors."""
    pred, q = _check_pair(pred, q, 2)
    return plcc(rankdata(pred, method="average"), rankdata(q, method="average"))


def rmse(pred, q) -> float:
    pred, q = _check_pair(pred, q, 1)
    return float(np.sqrt(np.mean((pred - q) ** 2)))


@dataclass
class Logistic4Params:
    beta1: float
    beta2: float
    beta3: float
    beta4: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.beta4 + (self.beta1 - self.beta4) / (
            1.0 + (x / self.beta3) ** self.beta2
        )


@dataclass
class Logistic4Fit:
    params: Logistic4Params | None  # None when the identity fallback is used
    mapped: np.ndarray
    fallback: bool
    # affine pre-transform applied before the curve: x = pred * scale + offset
    scale: float = 1.0
    offset: float = 0.0


def logistic4_fit(pred, q, max_iter: int = 2000) -> Logistic4Fit:
    """Fit the monotone four-parameter curve by damped least squares.

    The power term requires positive inputs, so predictions containing
    non-positive scores are affinely shifted to [1, 2] before fitting (the
    shift is recorded on the returned fit); already-positive predictions are
    fitted as is. Falls back to the identity mapping (with a warning) when
    the fit fails or does not beat the identity in squared error.
    """
    pred, q = _check_pair(pred, q, 4)
    lo, hi = pred.min(), pred.max()
    if hi == lo:
        log.warning("constant predictions: logistic-4 fit degenerate, using identity")
        return Logistic4Fit(params=None, mapped=pred.copy(), fallback=True)
    if lo > 0:
        scale, offset = 1.0, 0.0
    else:
        # strictly positive in [1, 2]
        scale = 1.0 / (hi - lo)
        offset = 1.0 - lo * scale
    x = pred * scale + offset

    def residual(beta):
        b1, b2, b3, b4 = beta
        return b4 + (b1 - b4) / (1.0 + (x / b3) ** b2) - q

    init = [q.max(), 1.0, float(np.median(x)), q.min()]
    try:
        sol = least_squares(
            residual,
            init,
            bounds=([-np.inf, -np.inf, 1e-6, -np.inf], np.inf),
            max_nfev=max_iter,
        )
    except Exception:
        sol = None
    # status 0 (iteration budget exhausted) still carries the best solution
    # found; the dominance check below rejects genuinely bad fits.
    if sol is None or not np.all(np.isfinite(sol.x)):
        log.warning("logistic-4 fit failed; using identity mapping")
        return Logistic4Fit(params=None, mapped=pred.copy(), fallback=True)
    params = Logistic4Params(*sol.x)
    mapped = params(x)
    # Least-squares dominance: never report a mapping worse than the identity.
    if not np.all(np.isfinite(mapped)) or rmse(mapped, q) > rmse(pred, q):
        log.warning("logistic-4 fit worse than identity; using identity mapping")
        return Logistic4Fit(params=None, mapped=pred.copy(), fallback=True)
    return Logistic4Fit(params=params, mapped=mapped, fallback=False,
                        scale=scale, offset=offset)


def apply_logistic4(fit: Logistic4Fit, pred) -> np.ndarray:
    """Map new predictions through a fitted curve (same shift as at fit time)."""
    pred = np.asarray(pred, dtype=np.float64)
    if fit.params is None:
        return pred.copy()
    return fit.params(pred * fit.scale + fit.offset)


@dataclass
class MetricReport:
    plcc: float
    srocc: float
    rmse: float
    fold: int = -1


def score_samples(model, samples, crops: int = 10, seed: int = 0, crop_size: int | None = None):
    """Average the fine-head score over seeded random crops, per sample."""
    import torch

    rng = np.random.default_rng(seed)
    crop_size = crop_size or model.cfg.image_size
    preds = []
    model.eval()
    with torch.no_grad():
        for vs, mos in samples:
            cropped = [(crop_sample(vs, crop_size, rng), mos) for _ in range(crops)]
            out = model(make_batch(cropped))
            preds.append(float(out["q_f"].mean()))
    return np.array(preds)


def evaluate(model, samples, crops: int = 10, seed: int = 0, fold: int = -1,
             crop_size: int | None = None) -> MetricReport:
    """10-crop test protocol: averaged fine scores, logistic-4 mapping, metrics."""
    if not samples:
        raise ValueError("empty test set")
    preds = score_samples(model, samples, crops=crops, seed=seed, crop_size=crop_size)
    mos = np.array([float(m) for _, m in samples])
    if len(samples) >= 4 and np.ptp(mos) > 0:
        fit = logistic4_fit(preds, mos)
        mapped = fit.mapped
    else:
        mapped = preds
    return MetricReport(
        plcc=plcc(mapped, mos),
        srocc=srocc(preds, mos),
        rmse=rmse(mapped, mos),
        fold=fold,
    )


def average_report(reports) -> MetricReport:
    return MetricReport(
        plcc=float(np.mean([r.plcc for r in reports])),
        srocc=float(np.mean([r.srocc for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        fold=-1,
    )


def write_report_csv(reports, path, include_average: bool = True) -> None:
    """Per-fold rows plus an averaged row, header `fold,plcc,srocc,rmse`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "plcc", "srocc", "rmse"])
        for r in reports:
            writer.writerow([r.fold, f"{r.plcc:.6f}", f"{r.srocc:.6f}", f"{r.rmse:.6f}"])
        if include_average and reports:
            avg = average_report(reports)
            writer.writerow(["mean", f"{avg.plcc:.6f}", f"{avg.srocc:.6f}", f"{avg.rmse:.6f}"])
